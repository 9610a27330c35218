"""Differentiable 3D primitives used by both networks.

Tensors are ``torch.Tensor`` objects laid out as (N, C, D, H, W); reverse-mode
differentiation comes from torch autograd.  Every op validates its inputs and
raises ``ShapeError`` naming the offending dimension.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_DTYPE = torch.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
_AXES = ("depth", "height", "width")


class ShapeError(ValueError):
    pass


def tensor(data, dtype=None, requires_grad=False) -> torch.Tensor:
    return torch.as_tensor(np.asarray(data), dtype=dtype or DEFAULT_DTYPE).requires_grad_(requires_grad)


def _check_5d(x: torch.Tensor, name="input"):
    if x.dim() != 5:
        raise ShapeError(f"{name} must be 5-D (N, C, D, H, W), got {x.dim()} dims")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    padding_mode: str = "padded"
    stride: int = 1

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.padding_mode not in ("padded", "valid"):
            raise ValueError(f"padding_mode must be 'padded' or 'valid', got {self.padding_mode!r}")
        if self.stride != 1:
            raise ValueError("only stride 1 is supported")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def padding(self) -> int:
        return self.kernel // 2 if self.padding_mode == "padded" else 0

    def output_dims(self, dims: Sequence[int]) -> tuple[int, ...]:
        shrink = self.kernel - 1 - 2 * self.padding
        return tuple(d - shrink for d in dims)

    def weight_shape(self) -> tuple[int, ...]:
        k = self.kernel
        return (self.out_channels, self.in_channels, k, k, k)


def conv3d(x: torch.Tensor, spec: ConvSpec, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    _check_5d(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"channel dim: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if tuple(weight.shape) != spec.weight_shape():
        raise ShapeError(f"weight shape {tuple(weight.shape)} does not match {spec.weight_shape()}")
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match ({spec.out_channels},)")
    if spec.padding_mode == "valid":
        for axis, d in zip(_AXES, x.shape[2:]):
            if d < spec.kernel:
                raise ShapeError(f"{axis} dim {d} is smaller than kernel {spec.kernel} in valid mode")
    return F.conv3d(x, weight, bias, stride=1, padding=spec.padding)


def maxpool3d(x: torch.Tensor) -> torch.Tensor:
    """2x2x2 max pooling with stride 2; ties route gradient to the first index."""
    _check_5d(x)
    for axis, d in zip(_AXES, x.shape[2:]):
        if d % 2:
            raise ShapeError(f"{axis} dim {d} is odd; max pooling needs even dims")
    return F.max_pool3d(x, kernel_size=2, stride=2)


def resize_trilinear(x: torch.Tensor, factor: float | None = None, size: Sequence[int] | None = None) -> torch.Tensor:
    """Trilinear resampling with the align-corners=false convention.

    Either ``factor`` (2 or 0.5, applied to every spatial dim) or an explicit
    target ``size`` must be given.  Sample ``i`` of the output reads the input
    at ``(i + 0.5) * in / out - 0.5``, clamped to the valid range.
    """
    _check_5d(x)
    if (factor is None) == (size is None):
        raise ValueError("give exactly one of factor or size")
    if size is None:
        if factor <= 0:
            raise ShapeError(f"scale factor must be positive, got {factor}")
        size = tuple(max(1, int(np.floor(d * factor))) for d in x.shape[2:])
    size = tuple(int(s) for s in size)
    if len(size) != 3:
        raise ShapeError(f"target size must have 3 dims, got {len(size)}")
    for axis, s in zip(_AXES, size):
        if s < 1:
            raise ShapeError(f"target {axis} dim must be positive, got {s}")
    if size == tuple(x.shape[2:]):
        return x
    return F.interpolate(x, size=size, mode="trilinear", align_corners=False)


class BatchNormState(torch.nn.Module):
    """Per-channel affine parameters and running statistics."""

    def __init__(self, channels: int, dtype=None):
        super().__init__()
        dtype = dtype or DEFAULT_DTYPE
        self.channels = channels
        self.weight = torch.nn.Parameter(torch.ones(channels, dtype=dtype))
        self.bias = torch.nn.Parameter(torch.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", torch.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", torch.ones(channels, dtype=dtype))

    def forward(self, x):
        return batchnorm3d(x, self, "train" if self.training else "eval")


def batchnorm3d(x: torch.Tensor, state: BatchNormState, mode: str = "train") -> torch.Tensor:
    _check_5d(x)
    if x.shape[1] != state.channels:
        raise ShapeError(f"channel dim: input has {x.shape[1]} channels, state has {state.channels}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return F.batch_norm(
        x,
        state.running_mean,
        state.running_var,
        state.weight,
        state.bias,
        training=mode == "train",
        momentum=BN_MOMENTUM,
        eps=BN_EPS,
    )


_POINTWISE = {"relu": torch.relu, "sigmoid": torch.sigmoid}


def pointwise(x: torch.Tensor, fn: str) -> torch.Tensor:
    try:
        return _POINTWISE[fn](x)
    except KeyError:
        raise ValueError(f"unknown pointwise fn {fn!r}; expected one of {sorted(_POINTWISE)}") from None


def softmax_channels(x: torch.Tensor) -> torch.Tensor:
    if x.dim() < 2 or x.shape[1] < 1:
        raise ShapeError("softmax needs a channel dim with at least one entry")
    shifted = x - x.amax(dim=1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=1, keepdim=True)


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    step: float = 1e-5,
    max_elements: int = 10_000,
    samples: int = 64,
    seed: int = 0,
) -> float:
    """Worst relative error between autograd adjoints and central differences.

    ``fn`` maps ``inputs`` (leaf tensors, modified in place during probing) to a
    scalar.  Every element is probed unless a tensor has more than
    ``max_elements`` entries, in which case ``samples`` seeded indices are.
    The error of each tensor is ``max|analytic - numeric|`` over the probed
    entries divided by the largest analytic or numeric magnitude of that
    tensor, so near-zero components cannot inflate it.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != torch.float64:
            raise TypeError("grad_check requires float64 tensors")
    leaves = [t.detach().requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    if out.numel() != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g.detach() for t, g in zip(leaves, analytic)]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        values = [t.detach().clone(memory_format=torch.contiguous_format) for t in leaves]
        for k, (v, a) in enumerate(zip(values, analytic)):
            flat = v.view(-1)
            n = flat.numel()
            idx = np.arange(n) if n <= max_elements else rng.choice(n, size=min(samples, n), replace=False)
            numeric = np.empty(len(idx))
            for m, j in enumerate(idx):
                orig = flat[j].item()
                flat[j] = orig + step
                hi = fn(*values).item()
                flat[j] = orig - step
                lo = fn(*values).item()
                flat[j] = orig
                numeric[m] = (hi - lo) / (2 * step)
            a_sel = a.reshape(-1)[torch.as_tensor(idx)].cpu().numpy()
            scale = max(float(a.abs().max()), float(np.abs(numeric).max(initial=0.0)))
            if scale == 0.0:
                continue
            worst = max(worst, float(np.abs(a_sel - numeric).max()) / scale)
    return worst
