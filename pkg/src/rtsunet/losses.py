"""Training objectives: generalized Dice, top-K cross-entropy, border targets."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .runet import N_LOBE_CLASSES, DualHeadOutput

CE_FLOOR = 1e-12
TOPK_FRACTION = 0.3


def border_target(labels: np.ndarray) -> np.ndarray:
    """1 where a nonzero voxel has a 6-neighbor with a different label."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=bool)
    for axis in range(labels.ndim):
        lo = [slice(None)] * labels.ndim
        hi = [slice(None)] * labels.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        diff = labels[tuple(lo)] != labels[tuple(hi)]
        out[tuple(lo)] |= diff
        out[tuple(hi)] |= diff
    return (out & (labels != 0)).astype(np.uint8)


def one_hot(labels, classes: int = N_LOBE_CLASSES, dtype=torch.float64) -> torch.Tensor:
    """(D, H, W) or (N, D, H, W) integer labels -> (N, classes, D, H, W)."""
    lab = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if lab.dim() == 3:
        lab = lab[None]
    return F.one_hot(lab, classes).permute(0, 4, 1, 2, 3).to(dtype)


def generalized_dice(pred: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Generalized Dice loss with weights ``1 / N_l^2``.

    ``pred`` and ``ref`` are (N, L, ...) probability / one-hot tensors; sums
    run over the batch and all voxels.  Labels absent from ``ref`` are left
    out of both sums.
    """
    if pred.shape != ref.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != reference shape {tuple(ref.shape)}")
    dims = [0] + list(range(2, pred.dim()))
    counts = ref.sum(dim=dims)
    present = counts > 0
    if not bool(present.any()):
        raise ValueError("generalized Dice undefined: every label is empty in the reference")
    w = torch.where(present, 1.0 / counts.clamp(min=1) ** 2, torch.zeros_like(counts))
    inter = (pred * ref).sum(dim=dims)
    union = (pred + ref).sum(dim=dims)
    return 1.0 - 2.0 * (w * inter).sum() / (w * union).sum()


def binary_as_two_class(prob: torch.Tensor) -> torch.Tensor:
    return torch.cat([1.0 - prob, prob], dim=1)


def topk_ce(pred: torch.Tensor, ref: torch.Tensor, k_fraction: float = TOPK_FRACTION) -> torch.Tensor:
    """Mean cross-entropy over the ceil(k_fraction * voxels) worst voxels."""
    if pred.shape != ref.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != reference shape {tuple(ref.shape)}")
    if not 0 < k_fraction <= 1:
        raise ValueError(f"k_fraction must be in (0, 1], got {k_fraction}")
    p_ref = (pred * ref).sum(dim=1)
    ce = -torch.log(p_ref.clamp(min=CE_FLOOR)).reshape(-1)
    k = math.ceil(k_fraction * ce.numel())
    return torch.topk(ce, k, sorted=False).values.mean()


def stage_terms(out: DualHeadOutput, lobes_ref: torch.Tensor, border_ref: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """GLD of the lobe head and of the border head (as {non-border, border})."""
    lobes = generalized_dice(out.lobes, lobes_ref)
    border = generalized_dice(binary_as_two_class(out.border), binary_as_two_class(border_ref))
    return lobes, border


def total_loss(stage1: DualHeadOutput, stage2: DualHeadOutput, refs: dict, mode: str = "initial", k_ce: float = TOPK_FRACTION):
    """Sum of the four GLD terms, plus top-K CE on both lobe heads when
    retraining.  ``refs`` holds one-hot ``lobes1``/``lobes2`` and binary
    ``border1``/``border2`` tensors matching each stage's outputs.

    Returns ``(total, terms)`` where ``terms`` maps component names to their
    (differentiable) values.
    """
    if mode not in ("initial", "retrain"):
        raise ValueError(f"mode must be 'initial' or 'retrain', got {mode!r}")
    l1, b1 = stage_terms(stage1, refs["lobes1"], refs["border1"])
    l2, b2 = stage_terms(stage2, refs["lobes2"], refs["border2"])
    terms = {"gld_lobes1": l1, "gld_border1": b1, "gld_lobes2": l2, "gld_border2": b2}
    if mode == "retrain":
        terms["ce_lobes1"] = topk_ce(stage1.lobes, refs["lobes1"], k_ce)
        terms["ce_lobes2"] = topk_ce(stage2.lobes, refs["lobes2"], k_ce)
    total = terms["gld_lobes1"] + terms["gld_border1"] + terms["gld_lobes2"] + terms["gld_border2"]
    if mode == "retrain":
        total = total + terms["ce_lobes1"] + terms["ce_lobes2"]
    return total, terms
