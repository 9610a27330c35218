"""Slow, loop-based reference implementations used only by the tests."""
import itertools

import numpy as np


def conv3d_naive(x, w, b, pad):
    """Direct summation over output voxels and kernel taps."""
    n, cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    od, oh, ow = d + 2 * pad - k + 1, h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((n, cout, od, oh, ow))
    for bi, co, i, j, l in itertools.product(range(n), range(cout), range(od), range(oh), range(ow)):
        acc = b[co]
        for ci, a, bb, c in itertools.product(range(cin), range(k), range(k), range(k)):
            acc += w[co, ci, a, bb, c] * xp[bi, ci, i + a, j + bb, l + c]
        out[bi, co, i, j, l] = acc
    return out


def maxpool_naive(x):
    n, c, d, h, w = x.shape
    out = np.zeros((n, c, d // 2, h // 2, w // 2))
    for bi, ci, i, j, l in itertools.product(range(n), range(c), range(d // 2), range(h // 2), range(w // 2)):
        best = -np.inf
        for a, bb, cc in itertools.product(range(2), repeat=3):
            best = max(best, x[bi, ci, 2 * i + a, 2 * j + bb, 2 * l + cc])
        out[bi, ci, i, j, l] = best
    return out


def linear_weights(n_in, n_out):
    """Row i holds the interpolation weights of output sample i, with sample
    centers at (i + 0.5) * n_in / n_out - 0.5 clamped to the input range."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1 - t
        m[i, hi] += t
    return m


def trilinear_naive(x, size):
    """Weighted sum over all input voxels for every output voxel."""
    d, h, w = x.shape
    md, mh, mw = (linear_weights(a, b) for a, b in zip((d, h, w), size))
    out = np.zeros(size)
    for i, j, l in itertools.product(*(range(s) for s in size)):
        acc = 0.0
        for a, bb, c in itertools.product(range(d), range(h), range(w)):
            acc += md[i, a] * mh[j, bb] * mw[l, c] * x[a, bb, c]
        out[i, j, l] = acc
    return out


def nonlocal_loops(x, coords, wt, wp, wg, wo, wr_, wr, member=None):
    """Double loop over position pairs: softmax_j(f_ij + tau_ij) g(x_j)."""
    c, d, h, w = x.shape
    pts = list(itertools.product(range(d), range(h), range(w)))
    z = x.copy()
    for i in pts:
        xi = x[(slice(None),) + i]
        mi = coords[(slice(None),) + i]
        logits, values = [], []
        for j in pts:
            if member is not None and not member(i, j):
                continue
            xj = x[(slice(None),) + j]
            mj = coords[(slice(None),) + j]
            f = (xi @ wt) @ (xj @ wp)
            tau = max(0.0, (mi @ wo) @ (mj @ wr_))
            logits.append(f + tau)
            values.append(xj @ wg)
        logits = np.array(logits)
        e = np.exp(logits - logits.max())
        y = (e / e.sum()) @ np.array(values)
        z[(slice(None),) + i] = xi + y @ wr
    return z


def crisscross_member(i, j):
    return sum(a == b for a, b in zip(i, j)) >= 2


def surface_naive(mask):
    """Voxels of mask with an in-volume 6-neighbor outside the mask."""
    out = np.zeros_like(mask, dtype=bool)
    for p in np.argwhere(mask):
        for axis in range(3):
            for step in (-1, 1):
                q = p.copy()
                q[axis] += step
                if 0 <= q[axis] < mask.shape[axis] and not mask[tuple(q)]:
                    out[tuple(p)] = True
    return out


def assd_naive(x, y, spacing):
    sx = np.argwhere(surface_naive(x)) * np.asarray(spacing)
    sy = np.argwhere(surface_naive(y)) * np.asarray(spacing)
    total = 0.0
    for p in sx:
        total += min(np.sqrt(((p - q) ** 2).sum()) for q in sy)
    for q in sy:
        total += min(np.sqrt(((p - q) ** 2).sum()) for p in sx)
    return total / (len(sx) + len(sy))


def iou_naive(x, y):
    xs = {tuple(p) for p in np.argwhere(x)}
    ys = {tuple(p) for p in np.argwhere(y)}
    if not xs and not ys:
        return 1.0
    return len(xs & ys) / len(xs | ys)


def criss_cross_hops(grid, source):
    """Breadth-first hop counts over the criss-cross graph."""
    from collections import deque

    dist = {tuple(source): 0}
    queue = deque([tuple(source)])
    while queue:
        cur = queue.popleft()
        for axis in range(3):
            for k in range(grid[axis]):
                nxt = list(cur)
                nxt[axis] = k
                nxt = tuple(nxt)
                if nxt not in dist:
                    dist[nxt] = dist[cur] + 1
                    queue.append(nxt)
    return dist
