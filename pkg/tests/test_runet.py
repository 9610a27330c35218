import numpy as np
import pytest
import torch

from oracles import conv3d_naive
from rtsunet.numerics import ShapeError
from rtsunet.runet import (
    STAGE_TABLES,
    RUNetConfig,
    build,
    count_macs,
    count_params,
    erf_support,
    load_checkpoint,
    load_state,
    receptive_field_box,
    save_checkpoint,
    scaled_table,
    valid_output_dim,
)


@pytest.mark.parametrize("stage,paper", [("I", 3.85e6), ("II", 9.24e6)])
def test_parameter_counts_match_table(stage, paper):
    cfg = RUNetConfig(stage)
    n = count_params(cfg)
    assert abs(n - paper) / paper <= 0.05
    # also within the rounding of the printed value
    assert round(n / 1e6, 2) == paper / 1e6


@pytest.mark.parametrize("stage,scale", [("I", 0.25), ("II", 0.25), ("I", 0.5)])
def test_count_params_agrees_with_built_module(stage, scale):
    cfg = RUNetConfig(stage, scale)
    net = build(cfg, 0)
    assert count_params(cfg) == sum(p.numel() for p in net.parameters())


def test_tiny_table_is_consistent():
    t = scaled_table("I", 0.25)
    assert t["down1"] == (1, 4, 6)
    assert t["up1"][0] == t["bridge"][2] + t["down3"][2]
    t2 = scaled_table("II", 0.25)
    assert t2["down1"][0] == 8


def test_inconsistent_table_rejected():
    table = dict(STAGE_TABLES["I"])
    table["up2"] = (170, 48, 48)
    with pytest.raises(ValueError, match="inconsistent channel table"):
        RUNetConfig("I", channels=table)


@pytest.mark.parametrize("d,out", [(116, 28), (124, 36), (100, 12), (92, 4)])
def test_valid_chain_output(d, out):
    assert valid_output_dim(d) == out


def test_valid_chain_rejects_misaligned():
    assert valid_output_dim(115) is None
    assert valid_output_dim(40) is None


def test_stage2_patch_yields_28_cube():
    net = build(RUNetConfig("II", 0.25, dtype=torch.float32), 0).eval()
    x = torch.randn(1, 8, 116, 116, 116)
    with torch.no_grad():
        out = net(x, source_shape=(116,) * 3)
    assert out.lobes.shape == (1, 6, 28, 28, 28)
    assert out.border.shape == (1, 1, 28, 28, 28)


def test_stage1_shapes_and_heads():
    net = build(RUNetConfig("I", 0.25), 3)
    x = torch.randn(2, 1, 16, 24, 32, dtype=torch.float64)
    out = net(x)
    assert out.lobes.shape == (2, 6, 16, 24, 32)
    torch.testing.assert_close(out.lobes.sum(1), torch.ones(2, 16, 24, 32, dtype=torch.float64), atol=1e-12, rtol=0)
    assert out.border.min() >= 0 and out.border.max() <= 1


def test_stage1_rejects_bad_dims():
    net = build(RUNetConfig("I", 0.25), 0)
    with pytest.raises(ShapeError, match="width dim 30"):
        net(torch.zeros(1, 1, 16, 16, 30, dtype=torch.float64))
    with pytest.raises(ShapeError, match="channel"):
        net(torch.zeros(1, 2, 16, 16, 16, dtype=torch.float64))


def test_stage2_rejects_small_patch():
    net = build(RUNetConfig("II", 0.25), 0)
    with pytest.raises(ShapeError, match="depth"):
        net(torch.zeros(1, 8, 40, 116, 116, dtype=torch.float64))


def test_first_conv_matches_loop_oracle():
    net = build(RUNetConfig("I", 0.25), 1)
    conv = net.down1.conv1
    x = torch.randn(1, 1, 4, 5, 3, dtype=torch.float64)
    got = conv(x).detach().numpy()
    ref = conv3d_naive(x.numpy(), conv.weight.detach().numpy(), conv.bias.detach().numpy(), 1)
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_build_is_seeded():
    a = build(RUNetConfig("I", 0.25), 5)
    b = build(RUNetConfig("I", 0.25), 5)
    c = build(RUNetConfig("I", 0.25), 6)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not torch.equal(sa["down1.conv1.weight"], sc["down1.conv1.weight"])


def test_macs_scale_with_volume():
    cfg = RUNetConfig("I")
    a, b = count_macs(cfg, (32,) * 3), count_macs(cfg, (64,) * 3)
    assert b["conv"] == 8 * a["conv"]
    assert b["heads"] == 8 * a["heads"]
    assert b["nonlocal"] > 8 * a["nonlocal"]  # criss-cross lines grow with the grid


def test_macs_first_layer_by_hand():
    cfg = RUNetConfig("I")
    macs = count_macs(cfg, (8, 8, 8))
    first = 512 * 27 * (1 * 16 + 16 * 24)
    assert macs["conv"] > first
    assert macs["heads"] == 512 * 24 * 7


def test_receptive_field_box_padded_and_valid():
    lo, hi = receptive_field_box(RUNetConfig("I", 0.25), (2, 2, 2), (64,) * 3)
    # bridge cell 2 has centre near 2*8 + 3.5 = 19.5, radius 34
    assert lo == (0, 0, 0) and hi == (53, 53, 53)
    lo, hi = receptive_field_box(RUNetConfig("II", 0.25), (0, 0, 0), (116,) * 3)
    assert lo == (0, 0, 0) and hi == (67, 67, 67)


def test_erf_expands_on_larger_input():
    net = build(RUNetConfig("I", 0.25), 0)
    x = torch.randn(1, 1, 64, 64, 64, dtype=torch.float64)
    before, after = erf_support(net, x, (0, 0, 0))
    assert np.all(after[before])
    assert after.sum() > before.sum()
    assert after.all()
    lo, hi = receptive_field_box(net.config, (0, 0, 0), x.shape[2:])
    box = np.zeros_like(before)
    box[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1] = True
    assert not np.any(before & ~box)


def test_checkpoint_round_trip(tmp_path):
    net = build(RUNetConfig("I", 0.25), 2)
    path = tmp_path / "m.rtsu"
    save_checkpoint(path, net.state_dict())
    arrays = load_checkpoint(path)
    other = build(RUNetConfig("I", 0.25), 9)
    load_state(other, arrays)
    for k, v in net.state_dict().items():
        assert torch.equal(v, other.state_dict()[k])


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_rejects_truncation(tmp_path):
    net = build(RUNetConfig("I", 0.25), 2)
    path = tmp_path / "m.rtsu"
    save_checkpoint(path, net.state_dict())
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_load_state_shape_mismatch(tmp_path):
    a = build(RUNetConfig("I", 0.25), 0)
    b = build(RUNetConfig("I", 0.5), 0)
    with pytest.raises(ValueError, match="shape"):
        load_state(b, {k: v.numpy() for k, v in a.state_dict().items()})
