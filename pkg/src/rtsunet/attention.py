"""Non-local attention with a clamped geometric term.

Three forms share one parameter set:

* ``dense_nonlocal``   every position attends to every other position;
* ``crisscross_step``  each position attends to the three axis-aligned lines
  through it;
* ``recurrent_nonlocal`` the criss-cross step applied ``T`` times with shared
  weights, which is what the networks use.

Matrices follow the row-vector convention: a feature row ``x_i`` (length C) is
embedded as ``x_i @ W_theta`` with ``W_theta`` of shape (C, C').
"""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .geometry import GeometricMap
from .numerics import DEFAULT_DTYPE, ShapeError

MASKED_LOGIT = -1e30
# initial scale of W_r relative to a fan-in draw; keeps the recurrent
# residual close to identity at the start of training
RESIDUAL_GAIN = 0.1


class NonLocalParams(nn.Module):
    def __init__(self, channels: int, embed: int = 32, steps: int = 3, dtype=None):
        super().__init__()
        if steps < 1:
            raise ValueError("recurrence needs at least one step")
        dtype = dtype or DEFAULT_DTYPE
        self.channels, self.embed, self.steps = channels, embed, steps

        def mat(rows, cols):
            return nn.Parameter(torch.empty(rows, cols, dtype=dtype))

        self.w_theta = mat(channels, embed)
        self.w_phi = mat(channels, embed)
        self.w_g = mat(channels, embed)
        self.w_omega = mat(3, embed)
        self.w_rho = mat(3, embed)
        self.w_r = mat(embed, channels)
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None, residual_gain: float = RESIDUAL_GAIN):
        # fan-in normal with unit gain: the embeddings are linear maps
        with torch.no_grad():
            for w in self.parameters():
                w.normal_(0.0, 1.0 / math.sqrt(w.shape[0]), generator=generator)
            self.w_r.mul_(residual_gain)

    def zero_(self):
        with torch.no_grad():
            for w in self.parameters():
                w.zero_()
        return self

    def forward(self, x, mu):
        return recurrent_nonlocal(x, mu, self)


def _coords(mu) -> torch.Tensor:
    return mu.coords if isinstance(mu, GeometricMap) else mu


def _check(x: torch.Tensor, mu, p: NonLocalParams) -> torch.Tensor:
    if x.dim() != 5:
        raise ShapeError(f"feature map must be 5-D, got {x.dim()} dims")
    if x.shape[1] != p.channels:
        raise ShapeError(f"channel dim: feature map has {x.shape[1]} channels, params expect {p.channels}")
    c = _coords(mu)
    if tuple(c.shape) != (3, *x.shape[2:]):
        raise ShapeError(f"geometric grid {tuple(c.shape[1:])} does not match feature grid {tuple(x.shape[2:])}")
    return c.to(x.dtype)


def crisscross_mask(grid) -> torch.Tensor:
    """P x P boolean membership: j is in the neighborhood of i iff the two
    positions share at least two of their three coordinates."""
    idx = np.stack(np.unravel_index(np.arange(int(np.prod(grid))), grid), axis=1)
    shared = (idx[:, None, :] == idx[None, :, :]).sum(-1)
    return torch.from_numpy(shared >= 2)


def dense_logits(x, mu, p: NonLocalParams) -> torch.Tensor:
    """Pre-softmax visual plus clamped geometric logits, shape (N, P, P)."""
    c = _check(x, mu, p)
    n, ch = x.shape[:2]
    xf = x.reshape(n, ch, -1).transpose(1, 2)
    m = c.reshape(3, -1).T
    visual = (xf @ p.w_theta) @ (xf @ p.w_phi).transpose(1, 2)
    geo = torch.relu((m @ p.w_omega) @ (m @ p.w_rho).T)
    return visual + geo


def dense_nonlocal(x, mu, p: NonLocalParams, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Residual non-local response with attention over all positions.

    ``mask`` (P x P bool) restricts each row to its ``True`` entries; masked
    logits are set to a large negative constant before the softmax.
    """
    logits = dense_logits(x, mu, p)
    if mask is not None:
        logits = logits.masked_fill(~mask.to(logits.device), MASKED_LOGIT)
    attn = torch.softmax(logits, dim=-1)
    n, ch = x.shape[:2]
    xf = x.reshape(n, ch, -1).transpose(1, 2)
    y = attn @ (xf @ p.w_g)
    return x + (y @ p.w_r).transpose(1, 2).reshape(x.shape)


def crisscross_step(z, mu, p: NonLocalParams) -> torch.Tensor:
    """One criss-cross pass: attention restricted to the depth, height and
    width lines through each position (the position itself counted once)."""
    c = _check(z, mu, p)
    _, _, d, h, w = z.shape
    q = torch.einsum("ncdhw,ck->nkdhw", z, p.w_theta)
    k = torch.einsum("ncdhw,ck->nkdhw", z, p.w_phi)
    v = torch.einsum("ncdhw,ck->nkdhw", z, p.w_g)
    a = torch.einsum("cdhw,ck->kdhw", c, p.w_omega)
    b = torch.einsum("cdhw,ck->kdhw", c, p.w_rho)

    e_d = torch.einsum("nkdhw,nkehw->ndhwe", q, k) + torch.relu(torch.einsum("kdhw,kehw->dhwe", a, b))
    e_h = torch.einsum("nkdhw,nkdgw->ndhwg", q, k) + torch.relu(torch.einsum("kdhw,kdgw->dhwg", a, b))
    e_w = torch.einsum("nkdhw,nkdhv->ndhwv", q, k) + torch.relu(torch.einsum("kdhw,kdhv->dhwv", a, b))
    # self appears on all three lines; keep it on the depth line only
    eye_h = torch.eye(h, dtype=torch.bool, device=z.device).view(1, 1, h, 1, h)
    eye_w = torch.eye(w, dtype=torch.bool, device=z.device).view(1, 1, 1, w, w)
    e_h = e_h.masked_fill(eye_h, MASKED_LOGIT)
    e_w = e_w.masked_fill(eye_w, MASKED_LOGIT)

    attn = torch.softmax(torch.cat([e_d, e_h, e_w], dim=-1), dim=-1)
    a_d, a_h, a_w = torch.split(attn, [d, h, w], dim=-1)
    y = (
        torch.einsum("ndhwe,nkehw->nkdhw", a_d, v)
        + torch.einsum("ndhwg,nkdgw->nkdhw", a_h, v)
        + torch.einsum("ndhwv,nkdhv->nkdhw", a_w, v)
    )
    return z + torch.einsum("nkdhw,kc->ncdhw", y, p.w_r)


def recurrent_nonlocal(x, mu, p: NonLocalParams, steps: int | None = None) -> torch.Tensor:
    steps = p.steps if steps is None else steps
    if steps < 1:
        raise ValueError("recurrence needs at least one step")
    z = x
    for _ in range(steps):
        z = crisscross_step(z, mu, p)
    return z


def attention_probe(x, mu, p: NonLocalParams, location, neighborhood: str = "crisscross"):
    """Row ``location`` of the first-step attention, reshaped to the grid.

    Returns ``(logits, weights)``: the dense visual-plus-geometric logits of
    that row and the softmax weights over the chosen neighborhood.  Only the
    first batch item is probed.
    """
    grid = tuple(x.shape[2:])
    location = tuple(int(i) for i in location)
    if len(location) != 3 or any(not 0 <= i < g for i, g in zip(location, grid)):
        raise ValueError(f"location {location} outside grid {grid}")
    row = int(np.ravel_multi_index(location, grid))
    with torch.no_grad():
        logits = dense_logits(x[:1], mu, p)[0, row]
        masked = logits
        if neighborhood == "crisscross":
            masked = logits.masked_fill(~crisscross_mask(grid)[row], MASKED_LOGIT)
        elif neighborhood != "dense":
            raise ValueError(f"unknown neighborhood {neighborhood!r}")
        weights = torch.softmax(masked, dim=0)
    return logits.reshape(grid), weights.reshape(grid)

