"""Two-stage cascade: coarse full-scan pass, patchwise valid-conv refinement,
hard-patch mining and non-overlapping tiling."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import ShapeError, resize_trilinear
from .runet import DualHeadOutput, RUNet, RUNetConfig, build

PATCH_IN = 116
PATCH_OUT = 28
MARGIN = (PATCH_IN - PATCH_OUT) // 2  # 44
SCAN_MULTIPLE = 16
K_START, K_END = 1.0, 0.2


@dataclass(frozen=True)
class PatchSpec:
    """A stage-2 patch.

    ``offset`` is the input-window origin in the stage-2 space, i.e. the scan
    zero-padded by ``MARGIN`` on every side; the prediction window starts
    ``MARGIN`` later (``out_offset``), which in unpadded scan coordinates is
    ``offset`` again.  ``own`` holds the (start, stop) scan-coordinate ranges
    this patch writes when stitching; they partition the scan.
    """

    offset: tuple[int, int, int]
    own: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]
    in_size: int = PATCH_IN
    out_size: int = PATCH_OUT

    @property
    def out_offset(self) -> tuple[int, int, int]:
        return tuple(o + MARGIN for o in self.offset)

    def input_slices(self):
        return tuple(slice(o, o + self.in_size) for o in self.offset)

    def output_slices(self):
        """Scan-coordinate window predicted by the patch."""
        return tuple(slice(o, o + self.out_size) for o in self.offset)

    def own_slices(self):
        return tuple(slice(a, b) for a, b in self.own)

    def own_in_output(self):
        """The owned region expressed in the patch-output frame."""
        return tuple(slice(a - o, b - o) for (a, b), o in zip(self.own, self.offset))


def tile(dims, out_size: int = PATCH_OUT) -> list[PatchSpec]:
    """Patches whose owned regions partition a volume of ``dims``.

    A regular grid of ``out_size`` cells is laid over each axis; the last
    cell's patch is shifted inward to stay in bounds and owns only the
    voxels not already claimed.  Patches are listed in C scan order.
    """
    dims = tuple(int(d) for d in dims)
    for axis, d in zip(("depth", "height", "width"), dims):
        if d < out_size:
            raise ShapeError(f"{axis} dim {d} is smaller than the patch output size {out_size}")
    per_axis = []
    for d in dims:
        entries = []
        for start in range(0, d, out_size):
            entries.append((min(start, d - out_size), (start, min(start + out_size, d))))
        per_axis.append(entries)
    patches = []
    for combo in itertools.product(*per_axis):
        patches.append(PatchSpec(tuple(c[0] for c in combo), tuple(c[1] for c in combo)))
    return patches


def k_schedule(step: int, total_steps: int) -> float:
    """Hard-example fraction: linear decay from 1.0 to 0.2 over training."""
    if total_steps <= 0:
        return K_END
    frac = min(max(step / total_steps, 0.0), 1.0)
    return max(K_END, K_START + (K_END - K_START) * frac)


def patch_errors(pred_lobes: torch.Tensor, ref_onehot: torch.Tensor, patches: list[PatchSpec]) -> np.ndarray:
    """Integral over each patch's prediction window of the per-voxel squared
    error summed over lobe channels."""
    if pred_lobes.shape != ref_onehot.shape:
        raise ShapeError(f"prediction shape {tuple(pred_lobes.shape)} != reference shape {tuple(ref_onehot.shape)}")
    with torch.no_grad():
        err = ((pred_lobes - ref_onehot) ** 2).sum(dim=1).sum(dim=0).double()
        # summed-volume table: each box integral costs eight lookups
        sat = F.pad(err.cumsum(0).cumsum(1).cumsum(2), (1, 0, 1, 0, 1, 0))
    out = np.empty(len(patches))
    for n, p in enumerate(patches):
        (z0, y0, x0), (z1, y1, x1) = p.offset, tuple(o + p.out_size for o in p.offset)
        v = (
            sat[z1, y1, x1] - sat[z0, y1, x1] - sat[z1, y0, x1] - sat[z1, y1, x0]
            + sat[z0, y0, x1] + sat[z0, y1, x0] + sat[z1, y0, x0] - sat[z0, y0, x0]
        )
        out[n] = float(v)
    return out


def ohem_select(pred_lobes, ref_onehot, k_fraction: float, patches: list[PatchSpec] | None = None) -> list[PatchSpec]:
    """The ceil(k_fraction * P) patches with the largest squared-error
    integral, in descending order; ties keep scan order."""
    if not 0 < k_fraction <= 1:
        raise ValueError(f"k_fraction must be in (0, 1], got {k_fraction}")
    if patches is None:
        patches = tile(pred_lobes.shape[2:])
    scores = patch_errors(pred_lobes, ref_onehot, patches)
    k = math.ceil(k_fraction * len(patches))
    order = np.argsort(-scores, kind="stable")[:k]
    return [patches[i] for i in order]


@dataclass
class CascadeOutput:
    stage1: DualHeadOutput
    stage1_up: torch.Tensor
    stage2: DualHeadOutput
    labels: np.ndarray


def argmax_labels(lobes: torch.Tensor) -> np.ndarray:
    """Per-voxel label of highest probability; ties go to the lowest label."""
    return torch.argmax(lobes, dim=1).to(torch.uint8).cpu().numpy()


class Cascade(nn.Module):
    def __init__(self, stage1: RUNet, stage2: RUNet):
        super().__init__()
        if stage1.config.stage != "I" or stage2.config.stage != "II":
            raise ValueError("cascade needs a stage-I and a stage-II network")
        self.stage1 = stage1
        self.stage2 = stage2

    @classmethod
    def create(cls, width_scale=1.0, seed=0, dtype=torch.float64, steps=3) -> "Cascade":
        s1 = build(RUNetConfig("I", width_scale, steps=steps, dtype=dtype), seed)
        s2 = build(RUNetConfig("II", width_scale, steps=steps, dtype=dtype), seed + 1)
        return cls(s1, s2)

    @staticmethod
    def check_scan(scan: torch.Tensor):
        if scan.dim() != 5 or scan.shape[1] != 1:
            raise ShapeError(f"scan must be (N, 1, D, H, W), got {tuple(scan.shape)}")
        for axis, d in zip(("z (depth)", "height", "width"), scan.shape[2:]):
            if d % SCAN_MULTIPLE:
                raise ShapeError(f"{axis} dim {d} is not padded to a multiple of {SCAN_MULTIPLE}")

    def stage1_forward(self, scan: torch.Tensor):
        """Coarse pass on the half-resolution scan; returns its dual-head
        output and the 7 probability channels upsampled to scan resolution."""
        half = resize_trilinear(scan, factor=0.5)
        out1 = self.stage1(half)
        up = resize_trilinear(out1.stacked(), size=scan.shape[2:])
        return out1, up

    @staticmethod
    def stage2_volume(scan: torch.Tensor, up: torch.Tensor) -> torch.Tensor:
        """8-channel stage-2 input, zero-padded by MARGIN on every side."""
        x = torch.cat([scan, up], dim=1)
        return F.pad(x, (MARGIN,) * 6)

    def patch_forward(self, volume: torch.Tensor, patch: PatchSpec, scan_dims) -> DualHeadOutput:
        x = volume[(slice(None), slice(None)) + patch.input_slices()]
        if self.stage2.config.dtype == torch.float32:
            x = x.contiguous(memory_format=torch.channels_last_3d)
        origin = tuple(o - MARGIN for o in patch.offset)
        return self.stage2(x, patch_offset=origin, source_shape=tuple(scan_dims))

    def forward_full(self, scan: torch.Tensor, order: list[int] | None = None) -> CascadeOutput:
        """Whole-scan inference: stage 1, then every tiled stage-2 patch,
        stitched without overlap.  ``order`` permutes patch evaluation."""
        self.check_scan(scan)
        dims = tuple(scan.shape[2:])
        out1, up = self.stage1_forward(scan)
        volume = self.stage2_volume(scan, up)
        n = scan.shape[0]
        lobes = scan.new_zeros((n, 6) + dims)
        border = scan.new_zeros((n, 1) + dims)
        patches = tile(dims)
        for i in order if order is not None else range(len(patches)):
            p = patches[i]
            out = self.patch_forward(volume, p, dims)
            dst = (slice(None), slice(None)) + p.own_slices()
            src = (slice(None), slice(None)) + p.own_in_output()
            lobes[dst] = out.lobes[src]
            border[dst] = out.border[src]
        stage2 = DualHeadOutput(lobes, border)
        return CascadeOutput(out1, up, stage2, argmax_labels(lobes))
