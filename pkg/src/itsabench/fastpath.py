"""Fused sample-and-aggregate kernel for the benchmark forward path.

Semantically identical to the reference per-map bilinear loop in
`deform.def_attn_fwd` but compiled with numba, iterating query-major so the
stacked value buffer stays cache resident. Forward only; gradcheck always
runs the reference path. Falls back to a vectorized numpy implementation
when numba is unavailable.
"""

from __future__ import annotations

import numpy as np

from .primitives import NODE_SNAP

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap


@njit(cache=True)
def _sample_aggregate_kernel(vbuf, starts, heights, widths, locations, weights,
                             head_dim, out):  # pragma: no cover - compiled
    n_q, n_heads, n_maps, n_points, _ = locations.shape
    for q in range(n_q):
        for m in range(n_heads):
            base = m * head_dim
            for j in range(n_maps):
                st = starts[j]
                hj = heights[j]
                wj = widths[j]
                for k in range(n_points):
                    py = locations[q, m, j, k, 0]
                    px = locations[q, m, j, k, 1]
                    if py < 0.0:
                        py = 0.0
                    elif py > 1.0:
                        py = 1.0
                    if px < 0.0:
                        px = 0.0
                    elif px > 1.0:
                        px = 1.0
                    fy = py * hj - 0.5
                    fx = px * wj - 0.5
                    ry = np.rint(fy)
                    if abs(fy - ry) < NODE_SNAP:
                        fy = ry
                    rx = np.rint(fx)
                    if abs(fx - rx) < NODE_SNAP:
                        fx = rx
                    y0 = int(np.floor(fy))
                    x0 = int(np.floor(fx))
                    ty = fy - y0
                    tx = fx - x0
                    y0c = min(max(y0, 0), hj - 1)
                    y1c = min(max(y0 + 1, 0), hj - 1)
                    x0c = min(max(x0, 0), wj - 1)
                    x1c = min(max(x0 + 1, 0), wj - 1)
                    w00 = (1.0 - ty) * (1.0 - tx)
                    w01 = (1.0 - ty) * tx
                    w10 = ty * (1.0 - tx)
                    w11 = ty * tx
                    aw = weights[q, m, j * n_points + k]
                    r00 = st + y0c * wj + x0c
                    r01 = st + y0c * wj + x1c
                    r10 = st + y1c * wj + x0c
                    r11 = st + y1c * wj + x1c
                    for d in range(head_dim):
                        val = (w00 * vbuf[r00, base + d]
                               + w01 * vbuf[r01, base + d]
                               + w10 * vbuf[r10, base + d]
                               + w11 * vbuf[r11, base + d])
                        out[q, base + d] += aw * val


def _sample_aggregate_numpy(vbuf, starts, heights, widths, locations, weights,
                            head_dim, out):
    n_q, n_heads, n_maps, n_points, _ = locations.shape
    for j in range(n_maps):
        hj, wj, st = int(heights[j]), int(widths[j]), int(starts[j])
        loc = locations[:, :, j]  # (N_q, M, K, 2)
        p = np.clip(loc, 0.0, 1.0)
        fy = p[..., 0] * hj - 0.5
        fx = p[..., 1] * wj - 0.5
        fy = np.where(np.abs(fy - np.rint(fy)) < NODE_SNAP, np.rint(fy), fy)
        fx = np.where(np.abs(fx - np.rint(fx)) < NODE_SNAP, np.rint(fx), fx)
        y0 = np.floor(fy)
        x0 = np.floor(fx)
        ty = (fy - y0)[..., None]
        tx = (fx - x0)[..., None]
        y0c = np.clip(y0.astype(np.int64), 0, hj - 1)
        y1c = np.clip(y0.astype(np.int64) + 1, 0, hj - 1)
        x0c = np.clip(x0.astype(np.int64), 0, wj - 1)
        x1c = np.clip(x0.astype(np.int64) + 1, 0, wj - 1)
        for m in range(n_heads):
            sl = vbuf[st:st + hj * wj, m * head_dim:(m + 1) * head_dim]
            rows = lambda yy, xx: sl[yy[:, m] * wj + xx[:, m]]  # noqa: E731
            s = ((1.0 - ty[:, m]) * (1.0 - tx[:, m]) * rows(y0c, x0c)
                 + (1.0 - ty[:, m]) * tx[:, m] * rows(y0c, x1c)
                 + ty[:, m] * (1.0 - tx[:, m]) * rows(y1c, x0c)
                 + ty[:, m] * tx[:, m] * rows(y1c, x1c))  # (N_q, K, D)
            w = weights[:, m, j * n_points:(j + 1) * n_points]
            out[:, m * head_dim:(m + 1) * head_dim] += (w[:, :, None] * s).sum(axis=1)


def sample_aggregate(vbuf, starts, heights, widths, locations, weights,
                     head_dim: int) -> np.ndarray:
    """Weighted bilinear aggregation over all maps, heads, and points.

    vbuf: (P_total, C') projected values, maps stacked level-major;
    locations: (N_q, M, J, K, 2); weights: (N_q, M, J*K). Returns (N_q, C').
    """
    n_q = locations.shape[0]
    out = np.zeros((n_q, vbuf.shape[1]), vbuf.dtype)
    fn = _sample_aggregate_kernel if HAVE_NUMBA else _sample_aggregate_numpy
    fn(vbuf, starts, heights, widths,
       np.ascontiguousarray(locations), np.ascontiguousarray(weights),
       head_dim, out)
    return out
