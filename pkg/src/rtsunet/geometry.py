"""Normalized receptive-field-center coordinates for the non-local module."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .numerics import DEFAULT_DTYPE, ShapeError


@dataclass
class GeometricMap:
    coords: torch.Tensor  # (3, D, H, W), each entry in [-0.5, 0.5]
    source_shape: tuple[int, int, int]
    stride: float
    patch_offset: tuple[float, float, float]

    @property
    def grid(self) -> tuple[int, ...]:
        return tuple(self.coords.shape[1:])

    def flat(self) -> torch.Tensor:
        """Coordinates as a (positions, 3) matrix in C scan order."""
        return self.coords.reshape(3, -1).T


def geometric_map(
    feature_dims: Sequence[int],
    stride: float,
    patch_offset: Sequence[float] = (0, 0, 0),
    source_shape: Sequence[int] | None = None,
    clip: bool = False,
    dtype=None,
) -> GeometricMap:
    """Coordinate of position ``p`` along an axis is
    ``((p + 0.5) * stride + offset) / source - 0.5``.

    With ``clip=False`` a patch whose centers would leave [-0.5, 0.5] is
    rejected; ``clip=True`` clamps instead (used for stage-2 patches whose
    input window hangs over the zero-padded scan border).
    """
    feature_dims = tuple(int(d) for d in feature_dims)
    if len(feature_dims) != 3:
        raise ShapeError("feature_dims must have 3 entries")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if source_shape is None:
        source_shape = tuple(d * stride for d in feature_dims)
    source_shape = tuple(source_shape)
    patch_offset = tuple(float(o) for o in patch_offset)
    axes = []
    for a, (n, off, src) in enumerate(zip(feature_dims, patch_offset, source_shape)):
        centers = (torch.arange(n, dtype=torch.float64) + 0.5) * stride + off
        c = centers / src - 0.5
        if not clip:
            # tolerance admits the exact +-0.5 boundary despite rounding
            if off < 0 or c.min() < -0.5 - 1e-12 or c.max() > 0.5 + 1e-12:
                raise ValueError(
                    f"patch along axis {a} (offset {off}, {n} cells of stride {stride}) "
                    f"falls outside source dim {src}"
                )
        axes.append(c.clamp(-0.5, 0.5))
    grids = torch.meshgrid(*axes, indexing="ij")
    coords = torch.stack(grids).to(dtype or DEFAULT_DTYPE)
    return GeometricMap(coords, source_shape, stride, patch_offset)


def pairwise_geometric_term(mu: GeometricMap | torch.Tensor, w_omega: torch.Tensor, w_rho: torch.Tensor) -> torch.Tensor:
    """Clamped bilinear form ``max(0, (W_w^T mu_i) . (W_r^T mu_j))`` for all pairs.

    ``w_omega`` and ``w_rho`` are 3 x C' embeddings; returns a P x P matrix.
    """
    m = mu.flat() if isinstance(mu, GeometricMap) else mu
    if m.shape[-1] != 3 or w_omega.shape[0] != 3 or w_rho.shape[0] != 3:
        raise ShapeError("geometric embeddings must map 3 coordinates")
    return torch.relu((m @ w_omega) @ (m @ w_rho).T)
