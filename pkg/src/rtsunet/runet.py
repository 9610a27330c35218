"""Relational U-Net (RU-Net) for both cascade stages.

Stage I uses padded convolutions on the half-resolution scan; stage II uses
valid convolutions on 116^3 patches of the 8-channel full-resolution input.
Both place a recurrent criss-cross non-local module at the bridge and end in
two parallel 1x1x1 heads (6-way softmax lobes, sigmoid lobe border).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .attention import NonLocalParams, recurrent_nonlocal
from .geometry import geometric_map
from .numerics import (
    DEFAULT_DTYPE,
    BatchNormState,
    ConvSpec,
    ShapeError,
    conv3d,
    maxpool3d,
    pointwise,
    resize_trilinear,
    softmax_channels,
)

N_LOBE_CLASSES = 6
LAYERS = ("down1", "down2", "down3", "bridge", "up1", "up2", "up3")
# (in, mid, out) channels of the two 3x3x3 convolutions in each layer
STAGE_TABLES = {
    "I": {
        "down1": (1, 16, 24),
        "down2": (24, 24, 48),
        "down3": (48, 64, 128),
        "bridge": (128, 128, 256),
        "up1": (384, 128, 128),
        "up2": (176, 48, 48),
        "up3": (72, 24, 24),
    },
    "II": {
        "down1": (8, 24, 48),
        "down2": (48, 48, 96),
        "down3": (96, 96, 192),
        "bridge": (192, 192, 384),
        "up1": (576, 192, 192),
        "up2": (288, 96, 96),
        "up3": (144, 48, 48),
    },
}
STAGE_PADDING = {"I": "padded", "II": "valid"}
DOWNSAMPLE = 8
# input-voxel position of the bridge receptive-field center minus the
# stride-grid center (p + 0.5) * 8; zero for padded convolutions
VALID_CENTER_SHIFT = 30.0


def scaled_table(stage: str, width_scale: float) -> dict[str, tuple[int, int, int]]:
    base = STAGE_TABLES[stage]
    if width_scale == 1.0:
        return dict(base)

    def s(c):
        return max(1, int(round(c * width_scale)))

    t = {}
    for name in ("down1", "down2", "down3", "bridge"):
        i, m, o = base[name]
        t[name] = (i if name == "down1" else t[_prev(name)][2], s(m), s(o))
    skips = {"up1": "down3", "up2": "down2", "up3": "down1"}
    below = "bridge"
    for name in ("up1", "up2", "up3"):
        _, m, o = base[name]
        t[name] = (t[below][2] + t[skips[name]][2], s(m), s(o))
        below = name
    return t


def _prev(name):
    return LAYERS[LAYERS.index(name) - 1]


@dataclass
class RUNetConfig:
    stage: str = "I"
    width_scale: float = 1.0
    embed: int | None = None
    steps: int = 3
    channels: dict | None = None
    dtype: torch.dtype = field(default=DEFAULT_DTYPE)

    def __post_init__(self):
        if self.stage not in STAGE_TABLES:
            raise ValueError(f"stage must be 'I' or 'II', got {self.stage!r}")
        if not self.width_scale > 0:
            raise ValueError("width_scale must be positive")
        if self.steps < 1:
            raise ValueError("non-local recurrence needs steps >= 1")
        if self.channels is None:
            self.channels = scaled_table(self.stage, self.width_scale)
        if self.embed is None:
            self.embed = max(1, int(round(32 * self.width_scale)))
        validate_table(self.channels, self.in_channels)

    @property
    def padding_mode(self) -> str:
        return STAGE_PADDING[self.stage]

    @property
    def in_channels(self) -> int:
        return STAGE_TABLES[self.stage]["down1"][0]


def validate_table(table: dict, in_channels: int) -> None:
    missing = [n for n in LAYERS if n not in table]
    if missing:
        raise ValueError(f"channel table missing layers {missing}")
    problems = []
    if table["down1"][0] != in_channels:
        problems.append(f"down1 input {table['down1'][0]} != {in_channels}")
    for name in ("down2", "down3", "bridge"):
        if table[name][0] != table[_prev(name)][2]:
            problems.append(f"{name} input {table[name][0]} != {_prev(name)} output {table[_prev(name)][2]}")
    for name, skip, below in (("up1", "down3", "bridge"), ("up2", "down2", "up1"), ("up3", "down1", "up2")):
        want = table[below][2] + table[skip][2]
        if table[name][0] != want:
            problems.append(f"{name} input {table[name][0]} != {below} {table[below][2]} + skip {table[skip][2]}")
    if problems:
        raise ValueError("inconsistent channel table: " + "; ".join(problems))


class Conv(nn.Module):
    def __init__(self, spec: ConvSpec, dtype):
        super().__init__()
        self.spec = spec
        self.weight = nn.Parameter(torch.empty(spec.weight_shape(), dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(spec.out_channels, dtype=dtype))

    def forward(self, x):
        return conv3d(x, self.spec, self.weight, self.bias)


class ConvBlock(nn.Module):
    """Two 3x3x3 convolutions, each followed by batch norm and ReLU."""

    def __init__(self, cin, cmid, cout, padding_mode, dtype):
        super().__init__()
        self.conv1 = Conv(ConvSpec(cin, cmid, 3, padding_mode), dtype)
        self.bn1 = BatchNormState(cmid, dtype)
        self.conv2 = Conv(ConvSpec(cmid, cout, 3, padding_mode), dtype)
        self.bn2 = BatchNormState(cout, dtype)

    def forward(self, x):
        x = pointwise(self.bn1(self.conv1(x)), "relu")
        return pointwise(self.bn2(self.conv2(x)), "relu")


@dataclass
class DualHeadOutput:
    lobes: torch.Tensor  # (N, 6, D, H, W) softmax probabilities
    border: torch.Tensor  # (N, 1, D, H, W) sigmoid probability

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.lobes, self.border], dim=1)


def center_crop(x: torch.Tensor, dims: Sequence[int]) -> torch.Tensor:
    sl = [slice(None), slice(None)]
    for have, want in zip(x.shape[2:], dims):
        start = (have - want) // 2
        sl.append(slice(start, start + want))
    return x[tuple(sl)]


class RUNet(nn.Module):
    def __init__(self, config: RUNetConfig):
        super().__init__()
        self.config = config
        t, pm, dt = config.channels, config.padding_mode, config.dtype
        for name in LAYERS:
            setattr(self, name, ConvBlock(*t[name], pm, dt))
        self.nonlocal_block = NonLocalParams(t["bridge"][2], config.embed, config.steps, dt)
        last = t["up3"][2]
        self.head_lobes = Conv(ConvSpec(last, N_LOBE_CLASSES, 1), dt)
        self.head_border = Conv(ConvSpec(last, 1, 1), dt)

    # geometry ---------------------------------------------------------------

    def geometry(self, bridge_dims, patch_offset=(0, 0, 0), source_shape=None):
        """Geometric map of the bridge grid.

        ``patch_offset`` is the position of the network input inside the
        coordinate frame of ``source_shape`` (defaults: input-sized frame).
        """
        shift = VALID_CENTER_SHIFT if self.config.padding_mode == "valid" else 0.0
        offset = tuple(o + shift for o in patch_offset)
        clip = self.config.padding_mode == "valid"
        return geometric_map(bridge_dims, DOWNSAMPLE, offset, source_shape, clip=clip, dtype=self.config.dtype)

    def check_input(self, x: torch.Tensor):
        if x.dim() != 5:
            raise ShapeError(f"input must be 5-D, got {x.dim()} dims")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"channel dim: input has {x.shape[1]} channels, stage {self.config.stage} expects {self.config.in_channels}")
        axes = ("depth", "height", "width")
        if self.config.padding_mode == "padded":
            for a, d in zip(axes, x.shape[2:]):
                if d % DOWNSAMPLE:
                    raise ShapeError(f"{a} dim {d} is not divisible by {DOWNSAMPLE}")
        else:
            for a, d in zip(axes, x.shape[2:]):
                out = valid_output_dim(d)
                if out is None:
                    raise ShapeError(f"{a} dim {d} is too small or misaligned for the valid-convolution chain")

    # forward ----------------------------------------------------------------

    def encode(self, x):
        skips = []
        h = x
        for name in ("down1", "down2", "down3"):
            h = getattr(self, name)(h)
            skips.append(h)
            h = maxpool3d(h)
        return self.bridge(h), skips

    def decode(self, h, skips):
        for name, skip in zip(("up1", "up2", "up3"), reversed(skips)):
            h = resize_trilinear(h, factor=2)
            if self.config.padding_mode == "valid":
                skip = center_crop(skip, h.shape[2:])
            h = getattr(self, name)(torch.cat([h, skip], dim=1))
        return DualHeadOutput(
            softmax_channels(self.head_lobes(h)),
            pointwise(self.head_border(h), "sigmoid"),
        )

    def forward(self, x, patch_offset=(0, 0, 0), source_shape=None, return_bridge=False):
        self.check_input(x)
        bridge, skips = self.encode(x)
        mu = self.geometry(bridge.shape[2:], patch_offset, source_shape)
        related = recurrent_nonlocal(bridge, mu, self.nonlocal_block)
        out = self.decode(related, skips)
        if return_bridge:
            return out, bridge, related
        return out


def valid_output_dim(d: int) -> int | None:
    """Output size of the valid-convolution chain for input size ``d``
    (None when some pooling would see an odd size or a size drops below 1)."""
    sizes = []
    for _ in range(3):
        d -= 4
        if d < 2 or d % 2:
            return None
        sizes.append(d)
        d //= 2
    d -= 4
    if d < 1:
        return None
    for skip in reversed(sizes):
        d = 2 * d - 4
        if d < 1 or d > skip:
            return None
    return d


def build(config: RUNetConfig, seed: int = 0) -> RUNet:
    """Network with seeded Kaiming fan-in normal conv weights."""
    net = RUNet(config)
    init_parameters(net, seed)
    return net


def init_parameters(net: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, Conv):
                fan_in = mod.weight[0].numel()
                mod.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                mod.bias.zero_()
            elif isinstance(mod, BatchNormState):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
                mod.running_mean.zero_()
                mod.running_var.fill_(1.0)
            elif isinstance(mod, NonLocalParams):
                mod.reset_parameters(gen)


# complexity ---------------------------------------------------------------


def count_params(config: RUNetConfig) -> int:
    t = config.channels
    total = 0
    for name in LAYERS:
        cin, cmid, cout = t[name]
        total += 27 * cin * cmid + cmid + 2 * cmid
        total += 27 * cmid * cout + cout + 2 * cout
    c, e = t["bridge"][2], config.embed
    total += 3 * c * e + 2 * 3 * e + e * c
    last = t["up3"][2]
    total += (last + 1) * (N_LOBE_CLASSES + 1)
    return total


def layer_dims(config: RUNetConfig, dims: Sequence[int]) -> dict[str, tuple]:
    """Spatial dims after each conv of each layer, for input ``dims``."""
    shrink = 2 if config.padding_mode == "valid" else 0
    cur = tuple(dims)
    out, skips = {}, []
    for name in ("down1", "down2", "down3", "bridge"):
        a = tuple(d - shrink for d in cur)
        b = tuple(d - shrink for d in a)
        out[name] = (cur, a, b)
        skips.append(b)
        cur = tuple(d // 2 for d in b)
    cur = out["bridge"][2]
    for name in ("up1", "up2", "up3"):
        up = tuple(2 * d for d in cur)
        a = tuple(d - shrink for d in up)
        b = tuple(d - shrink for d in a)
        out[name] = (up, a, b)
        cur = b
    return out


def count_macs(config: RUNetConfig, dims: Sequence[int]) -> dict[str, int]:
    """Multiply-accumulate counts for one forward pass at input ``dims``.

    Convolutions count ``out_voxels * k^3 * cin * cout``; the non-local module
    counts its four visual embeddings, both geometric embeddings, and per
    criss-cross step ``P * (D+H+W) * C'`` for the visual logits, the geometric
    logits and the value aggregation.  Norms, activations, pooling and
    interpolation are not counted.
    """
    t = config.channels
    ld = layer_dims(config, dims)
    conv = 0
    for name in LAYERS:
        cin, cmid, cout = t[name]
        _, a, b = ld[name]
        conv += int(np.prod(a)) * 27 * cin * cmid + int(np.prod(b)) * 27 * cmid * cout
    out_vox = int(np.prod(ld["up3"][2]))
    heads = out_vox * t["up3"][2] * (N_LOBE_CLASSES + 1)
    bd = ld["bridge"][2]
    p = int(np.prod(bd))
    c, e, steps = t["bridge"][2], config.embed, config.steps
    line = sum(bd)
    nl = steps * (p * c * e * 4 + p * 3 * e * 2 + 3 * p * line * e)
    return {"conv": conv, "heads": heads, "nonlocal": nl, "total": conv + heads + nl}


# effective receptive field ------------------------------------------------


def erf_support(net: RUNet, x: torch.Tensor, location) -> tuple[np.ndarray, np.ndarray]:
    """Nonzero-gradient input masks of one bridge feature (channel sum),
    taken before and after the non-local module.  Evaluated with running
    batch-norm statistics so positions do not couple through batch stats."""
    was_training = net.training
    net.eval()
    try:
        x = x.detach().clone().requires_grad_(True)
        _, before, after = net(x, return_bridge=True)
        grid = tuple(before.shape[2:])
        loc = tuple(int(i) for i in location)
        if len(loc) != 3 or any(not 0 <= i < g for i, g in zip(loc, grid)):
            raise ValueError(f"location {loc} outside bridge grid {grid}")
        sel = (0, slice(None)) + loc
        g_before = torch.autograd.grad(before[sel].sum(), x, retain_graph=True)[0]
        g_after = torch.autograd.grad(after[sel].sum(), x)[0]
    finally:
        net.train(was_training)
    return (g_before[0].abs().sum(0) > 0).numpy(), (g_after[0].abs().sum(0) > 0).numpy()


def receptive_field_box(config: RUNetConfig, location, input_dims):
    """Inclusive input-index bounds of the conv receptive field of bridge
    position ``location``, clipped to the input."""
    lo_hi = []
    for p, n in zip(location, input_dims):
        lo, hi = p, p
        for level in range(4):
            for _ in range(2):  # two 3x3x3 convs per layer, walked backwards
                lo, hi = (lo - 1, hi + 1) if config.padding_mode == "padded" else (lo, hi + 2)
            if level < 3:
                lo, hi = 2 * lo, 2 * hi + 1
        lo_hi.append((max(0, lo), min(n - 1, hi)))
    return tuple(a for a, _ in lo_hi), tuple(b for _, b in lo_hi)


# checkpoints --------------------------------------------------------------

MAGIC = b"RTSU1"


def save_checkpoint(path, tensors: dict) -> None:
    """Write named arrays: magic, then per record uint32 name length, UTF-8
    name, uint32 ndim, ndim x uint64 dims, little-endian float64 values."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, value in tensors.items():
            arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an RTSU1 checkpoint (bad magic)")
    pos = len(MAGIC)
    out = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            count = int(np.prod(dims)) if ndim else 1
            if pos + 8 * count > len(data):
                raise ValueError(f"{path}: record {name!r} truncated")
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out


def load_state(net: nn.Module, arrays: dict, prefix: str = "") -> None:
    state = net.state_dict()
    missing = [k for k in state if prefix + k not in arrays]
    if missing:
        raise ValueError(f"checkpoint missing {len(missing)} entries, e.g. {prefix + missing[0]!r}")
    for k, v in state.items():
        arr = arrays[prefix + k]
        if tuple(arr.shape) != tuple(v.shape):
            raise ValueError(f"checkpoint entry {prefix + k!r} has shape {arr.shape}, expected {tuple(v.shape)}")
        v.copy_(torch.from_numpy(arr).to(v.dtype))
