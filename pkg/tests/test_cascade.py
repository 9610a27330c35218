import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rtsunet.cascade import (
    MARGIN,
    PATCH_IN,
    PATCH_OUT,
    Cascade,
    argmax_labels,
    k_schedule,
    ohem_select,
    patch_errors,
    tile,
)
from rtsunet.losses import one_hot
from rtsunet.numerics import ShapeError


def coverage(dims, patches):
    count = np.zeros(dims, dtype=int)
    for p in patches:
        count[p.own_slices()] += 1
    return count


def test_tile_56_gives_eight_disjoint_windows():
    patches = tile((56, 56, 56))
    assert len(patches) == 8
    assert np.all(coverage((56,) * 3, patches) == 1)
    # windows themselves do not overlap either
    win = np.zeros((56,) * 3, dtype=int)
    for p in patches:
        win[p.output_slices()] += 1
    assert np.all(win == 1)


@pytest.mark.parametrize("dims,n", [((28, 28, 28), 1), ((30, 30, 30), 8), ((64, 64, 64), 27), ((32, 48, 64), 12)])
def test_tile_partitions(dims, n):
    patches = tile(dims)
    assert len(patches) == n
    assert np.all(coverage(dims, patches) == 1)
    for p in patches:
        for (a, b), o, d in zip(p.own, p.offset, dims):
            assert o <= a < b <= o + PATCH_OUT <= d


@settings(max_examples=30, deadline=None)
@given(st.integers(28, 90), st.integers(28, 90), st.integers(28, 90))
def test_tile_partition_property(d, h, w):
    assert np.all(coverage((d, h, w), tile((d, h, w))) == 1)


def test_tile_too_small():
    with pytest.raises(ShapeError, match="height dim 20"):
        tile((32, 20, 32))


def test_patch_slices_line_up():
    p = tile((64, 64, 64))[-1]
    assert p.offset == (36, 36, 36)
    assert p.out_offset == (36 + MARGIN,) * 3
    assert p.input_slices()[0] == slice(36, 36 + PATCH_IN)
    assert p.own_in_output()[0] == slice(20, 28)


def test_k_schedule_endpoints():
    assert k_schedule(0, 100) == 1.0
    assert k_schedule(100, 100) == pytest.approx(0.2)
    assert k_schedule(50, 100) == pytest.approx(0.6)
    assert k_schedule(500, 100) == pytest.approx(0.2)
    vals = [k_schedule(s, 37) for s in range(38)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_patch_errors_match_direct_sum(rng):
    dims = (40, 32, 30)
    ref = one_hot(rng.integers(0, 6, size=dims))
    pred = torch.softmax(torch.as_tensor(rng.normal(size=(1, 6) + dims)), 1)
    patches = tile(dims)
    got = patch_errors(pred, ref, patches)
    err = ((pred - ref) ** 2).sum(1)[0].numpy()
    for g, p in zip(got, patches):
        assert g == pytest.approx(err[p.output_slices()].sum(), rel=1e-12)


def test_ohem_picks_erroneous_region():
    dims = (56, 56, 56)
    ref = one_hot(np.zeros(dims, dtype=int))
    pred = ref.clone()
    pred[:, :, 30:40, 0:10, 40:50] = one_hot(np.ones((10, 10, 10), dtype=int))
    chosen = ohem_select(pred, ref, 0.125)
    assert len(chosen) == 1
    assert chosen[0].offset == (28, 0, 28)


def test_ohem_count_is_ceiling(rng):
    dims = (64, 64, 64)
    ref = one_hot(rng.integers(0, 6, size=dims))
    pred = torch.softmax(torch.as_tensor(rng.normal(size=(1, 6) + dims)), 1)
    for k in (1.0, 0.5, 0.2, 0.01):
        chosen = ohem_select(pred, ref, k)
        assert len(chosen) == math.ceil(k * 27)
    scores = patch_errors(pred, ref, tile(dims))
    top = ohem_select(pred, ref, 0.2)
    assert [scores[tile(dims).index(p)] for p in top] == sorted(scores, reverse=True)[: len(top)]


def test_ohem_ties_keep_scan_order():
    dims = (56, 56, 56)
    ref = one_hot(np.zeros(dims, dtype=int))
    chosen = ohem_select(ref.clone(), ref, 0.5)
    assert chosen == tile(dims)[:4]


def test_ohem_bad_fraction():
    ref = one_hot(np.zeros((28, 28, 28), dtype=int))
    with pytest.raises(ValueError, match="k_fraction"):
        ohem_select(ref, ref, 0.0)


def test_argmax_ties_lowest_label():
    p = torch.zeros(1, 6, 1, 1, 2)
    p[0, 2, 0, 0, 0] = p[0, 4, 0, 0, 0] = 0.5
    p[0, :, 0, 0, 1] = 1 / 6
    assert argmax_labels(p).ravel().tolist() == [2, 0]


@pytest.fixture(scope="module")
def tiny_cascade():
    torch.manual_seed(0)
    return Cascade.create(0.25, seed=0, dtype=torch.float32).eval()


def test_scan_dims_checked(tiny_cascade):
    with pytest.raises(ShapeError, match="multiple of 16"):
        tiny_cascade.forward_full(torch.zeros(1, 1, 40, 32, 32))


def test_full_inference_shapes_and_order_independence(tiny_cascade):
    scan = torch.rand(1, 1, 32, 32, 32)
    with torch.no_grad():
        a = tiny_cascade.forward_full(scan)
        b = tiny_cascade.forward_full(scan, order=list(reversed(range(8))))
    assert a.stage2.lobes.shape == (1, 6, 32, 32, 32)
    assert a.stage1.lobes.shape == (1, 6, 16, 16, 16)
    assert a.stage1_up.shape == (1, 7, 32, 32, 32)
    assert torch.equal(a.stage2.lobes, b.stage2.lobes)
    assert a.labels.shape == (1, 32, 32, 32)
    torch.testing.assert_close(a.stage2.lobes.sum(1), torch.ones(1, 32, 32, 32), atol=1e-5, rtol=0)


def test_stitch_matches_single_patch(tiny_cascade):
    scan = torch.rand(1, 1, 32, 32, 32)
    with torch.no_grad():
        full = tiny_cascade.forward_full(scan)
        _, up = tiny_cascade.stage1_forward(scan)
        vol = tiny_cascade.stage2_volume(scan, up)
        p = tile((32, 32, 32))[-1]
        out = tiny_cascade.patch_forward(vol, p, (32, 32, 32))
    torch.testing.assert_close(full.stage2.lobes[(slice(None), slice(None)) + p.own_slices()],
                               out.lobes[(slice(None), slice(None)) + p.own_in_output()], atol=0, rtol=0)


def test_stage2_volume_padding():
    scan = torch.rand(1, 1, 16, 16, 16)
    up = torch.rand(1, 7, 16, 16, 16)
    vol = Cascade.stage2_volume(scan, up)
    assert vol.shape == (1, 8, 16 + 2 * MARGIN, 16 + 2 * MARGIN, 16 + 2 * MARGIN)
    assert torch.equal(vol[:, :1, MARGIN:-MARGIN, MARGIN:-MARGIN, MARGIN:-MARGIN], scan)
    assert vol[:, :, :MARGIN].abs().sum() == 0


def test_stage2_loss_reaches_stage1_parameters():
    model = Cascade.create(0.25, seed=1, dtype=torch.float32)
    scan = torch.rand(1, 1, 32, 32, 32)
    _, up = model.stage1_forward(scan)
    vol = model.stage2_volume(scan, up)
    out = model.patch_forward(vol, tile((32, 32, 32))[0], (32, 32, 32))
    out.lobes[:, 1].sum().backward()
    g = model.stage1.down1.conv1.weight.grad
    assert g is not None and g.abs().sum() > 0
