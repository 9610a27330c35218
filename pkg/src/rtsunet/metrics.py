"""IOU and surface-distance evaluation at original scan resolution."""
from __future__ import annotations

import json
import math

import numpy as np
from scipy import ndimage

from . import LOBE_NAMES

BRUTE_FORCE_LIMIT = 10_000


class UndefinedMetric(ValueError):
    """Raised when a surface metric has no surface to measure."""


def iou(x, y) -> float:
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    union = np.count_nonzero(x | y)
    if union == 0:
        return 1.0
    return np.count_nonzero(x & y) / union


def surface(mask) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbor outside it.  The volume
    border is not a surface: voxels past the edge do not count as outside."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1), border_value=1)
    return mask & ~inner


def _min_distances(a_pts: np.ndarray, b_pts: np.ndarray) -> np.ndarray:
    """Distance (mm) from each row of ``a_pts`` to its nearest row of ``b_pts``."""
    out = np.empty(len(a_pts))
    chunk = max(1, 4_000_000 // max(1, len(b_pts)))
    for s in range(0, len(a_pts), chunk):
        diff = a_pts[s : s + chunk, None, :] - b_pts[None, :, :]
        out[s : s + chunk] = np.sqrt((diff**2).sum(-1)).min(1)
    return out


def surface_distance(sx: np.ndarray, sy: np.ndarray, spacing=(1.0, 1.0, 1.0), method: str = "auto") -> float:
    """Average symmetric distance between two voxel sets, in mm.

    ``method`` is ``"brute"`` (all pairs), ``"edt"`` (Euclidean distance
    transform) or ``"auto"``: brute force below BRUTE_FORCE_LIMIT surface
    voxels per set.
    """
    if not sx.any() or not sy.any():
        raise UndefinedMetric("surface distance undefined for an empty surface")
    sp = np.asarray(spacing, dtype=float)
    if method == "auto":
        n = max(np.count_nonzero(sx), np.count_nonzero(sy))
        method = "brute" if n < BRUTE_FORCE_LIMIT else "edt"
    if method == "brute":
        px = np.argwhere(sx) * sp
        py = np.argwhere(sy) * sp
        d_xy, d_yx = _min_distances(px, py), _min_distances(py, px)
    elif method == "edt":
        d_xy = ndimage.distance_transform_edt(~sy, sampling=sp)[sx]
        d_yx = ndimage.distance_transform_edt(~sx, sampling=sp)[sy]
    else:
        raise ValueError(f"unknown method {method!r}")
    return float((d_xy.sum() + d_yx.sum()) / (d_xy.size + d_yx.size))


def assd(x, y, spacing=(1.0, 1.0, 1.0)) -> float:
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    if not x.any() or not y.any():
        raise UndefinedMetric("ASSD undefined: a mask is empty")
    return surface_distance(surface(x), surface(y), spacing)


def interlobar_border(labels) -> np.ndarray:
    """Voxels with a 6-neighbor carrying a different nonzero label."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=bool)
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        a, b = labels[tuple(lo)], labels[tuple(hi)]
        diff = (a != b) & (a != 0) & (b != 0)
        out[tuple(lo)] |= diff
        out[tuple(hi)] |= diff
    return out


def interlobar_assd(pred, ref, spacing=(1.0, 1.0, 1.0)) -> float:
    bp, br = interlobar_border(pred), interlobar_border(ref)
    if not bp.any() or not br.any():
        raise UndefinedMetric("no interlobar border in prediction or reference")
    return surface_distance(bp, br, spacing)


def report(pred, ref, spacing=(1.0, 1.0, 1.0)) -> dict:
    """Per-lobe, lung-union, overall and interlobar metrics for one scan.

    Keys follow ``iou_<lobe>`` / ``assd_<lobe>`` with lobes lul, lll, rul, rll,
    rml, plus ``*_lungs``, ``*_overall`` and ``assd_interlobar``.  Undefined
    values are ``None`` and listed under ``notes``; lobes absent from both
    volumes are left out of the overall means.
    """
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"prediction shape {pred.shape} != reference shape {ref.shape}")
    out: dict = {}
    notes = []
    ious, assds = [], []
    for label, name in LOBE_NAMES.items():
        p, r = pred == label, ref == label
        if not p.any() and not r.any():
            out[f"iou_{name}"] = None
            out[f"assd_{name}"] = None
            notes.append(f"{name}: absent in prediction and reference, skipped")
            continue
        out[f"iou_{name}"] = iou(p, r)
        ious.append(out[f"iou_{name}"])
        try:
            out[f"assd_{name}"] = assd(p, r, spacing)
            assds.append(out[f"assd_{name}"])
        except UndefinedMetric:
            out[f"assd_{name}"] = None
            notes.append(f"{name}: ASSD undefined (empty mask)")
    lp, lr = pred > 0, ref > 0
    out["iou_lungs"] = iou(lp, lr)
    try:
        out["assd_lungs"] = assd(lp, lr, spacing)
    except UndefinedMetric:
        out["assd_lungs"] = None
        notes.append("lungs: ASSD undefined (empty mask)")
    try:
        out["assd_interlobar"] = interlobar_assd(pred, ref, spacing)
    except UndefinedMetric:
        out["assd_interlobar"] = None
        notes.append("interlobar: ASSD undefined (no border)")
    out["iou_overall"] = float(np.mean(ious)) if ious else None
    out["assd_overall"] = float(np.mean(assds)) if assds else None
    out["notes"] = notes
    return out


def report_json(rep: dict) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        return v

    return json.dumps({k: clean(v) for k, v in rep.items()}, indent=2)
