"""Multi-head deformable attention over a set of per-task, per-level value maps.

Every query predicts, through linear heads, a set of sampling offsets and
softmax-normalized attention weights covering all value maps. Each head
samples its channel slice of the projected maps at reference point + offset
via bilinear interpolation and mixes the samples with the weights. Offsets
live in normalized map coordinates, so one offset means the same fraction of
the map extent at every pyramid level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .primitives import (
    LinearParams,
    bilinear_sample_fwd,
    bilinear_sample_vjp,
    linear_fwd,
    linear_init,
    linear_vjp,
    softmax_fwd,
    softmax_vjp,
)
from .rng import RngState


@dataclass(frozen=True)
class MapMeta:
    task: int    # 0-based task id
    level: int   # pyramid level, 0 = full scale
    height: int
    width: int


@dataclass
class ValueMapSet:
    """The flattened multi-task pyramid: T*L maps ordered level-major, task-minor."""

    maps: list[np.ndarray]          # each (H_l, W_l, C')
    meta: list[MapMeta]

    def __post_init__(self):
        if len(self.maps) != len(self.meta):
            raise ValueError("maps and meta lengths differ")
        by_level: dict[int, tuple[int, int]] = {}
        last_key = None
        for m, info in zip(self.maps, self.meta):
            if m.shape[:2] != (info.height, info.width):
                raise ValueError(
                    f"map shape {m.shape[:2]} disagrees with meta "
                    f"({info.height}, {info.width})")
            hw = by_level.setdefault(info.level, (info.height, info.width))
            if hw != (info.height, info.width):
                raise ValueError(f"inconsistent dims within level {info.level}")
            key = (info.level, info.task)
            if last_key is not None and key <= last_key:
                raise ValueError("maps must be ordered level-major then task")
            last_key = key

    @property
    def n_maps(self) -> int:
        return len(self.maps)

    @property
    def channels(self) -> int:
        return self.maps[0].shape[2]


@dataclass
class DefAttnParams:
    heads: int
    points: int                      # sampling points per (head, map)
    value_proj: LinearParams         # C' -> C'
    offset_head: LinearParams        # C' -> heads * n_maps * points * 2
    weight_head: LinearParams        # C' -> heads * n_maps * points
    output_proj: LinearParams        # C' -> C'


@dataclass
class DefAttnGrads:
    queries: np.ndarray
    maps: list[np.ndarray]
    params: DefAttnParams = field(repr=False)  # same structure, gradient-valued


def make_reference_points(tasks: int, height: int, width: int,
                          levels: int, dtype=np.float64) -> np.ndarray:
    """(T*H*W, T*L, 2) of normalized cell centers.

    Query (t, h, w) gets ((h+0.5)/H, (w+0.5)/W) replicated across all value
    maps; reference points are relative to each map's own extent, so the
    same normalized point serves every pyramid level.
    """
    if min(tasks, height, width, levels) < 1:
        raise ValueError("all reference-point dims must be >= 1")
    ys = (np.arange(height, dtype=np.float64) + 0.5) / height
    xs = (np.arange(width, dtype=np.float64) + 0.5) / width
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    per_task = np.stack([gy, gx], axis=-1).reshape(height * width, 2)
    all_queries = np.tile(per_task, (tasks, 1))
    ref = np.repeat(all_queries[:, None, :], tasks * levels, axis=1)
    return ref.astype(dtype, copy=False)


def offset_bias_grid(heads: int, n_maps: int, points: int,
                     finest_h: int, finest_w: int) -> np.ndarray:
    """Spread-out initial offsets: points on a square grid spanning +-2 cells
    of the finest map, rotated per head, replicated across maps.

    Returned flat, matching the offset head's bias layout
    (head, map, point, yx).
    """
    side = int(np.ceil(np.sqrt(points)))
    lin = np.linspace(-1.0, 1.0, side) if side > 1 else np.zeros(1)
    gy, gx = np.meshgrid(lin, lin, indexing="ij")
    pattern = np.stack([gy.ravel(), gx.ravel()], axis=-1)[:points]  # (K, 2)
    bias = np.empty((heads, n_maps, points, 2))
    for m in range(heads):
        theta = 2.0 * np.pi * m / heads
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        rotated = pattern @ rot.T
        scaled = rotated * np.array([2.0 / finest_h, 2.0 / finest_w])
        bias[m] = scaled[None, :, :]
    return bias.reshape(-1)


def init_def_attn_params(state: RngState, channels: int, heads: int, points: int,
                         n_maps: int, finest_h: int, finest_w: int,
                         dtype=np.float64) -> tuple[DefAttnParams, RngState]:
    """Zero offset weights with the grid bias, zero weight head, fan-in
    uniform value/output projections."""
    if channels % heads != 0:
        raise ValueError(f"channels {channels} not divisible by heads {heads}")
    value_proj, state = linear_init(state, channels, channels, dtype)
    output_proj, state = linear_init(state, channels, channels, dtype)
    n_off = heads * n_maps * points * 2
    offset_head = LinearParams(
        np.zeros((n_off, channels), dtype),
        offset_bias_grid(heads, n_maps, points, finest_h, finest_w).astype(dtype))
    weight_head = LinearParams(
        np.zeros((heads * n_maps * points, channels), dtype),
        np.zeros(heads * n_maps * points, dtype))
    return DefAttnParams(heads, points, value_proj, offset_head,
                         weight_head, output_proj), state


def _check_inputs(queries: np.ndarray, values: ValueMapSet, ref: np.ndarray,
                  p: DefAttnParams) -> tuple[int, int, int, int]:
    n_q, channels = queries.shape
    n_maps = values.n_maps
    if values.channels != channels:
        raise ValueError(
            f"value maps carry {values.channels} channels, queries {channels}")
    if ref.shape != (n_q, n_maps, 2):
        raise ValueError(
            f"reference points must be ({n_q}, {n_maps}, 2), got {ref.shape}")
    if channels % p.heads != 0:
        raise ValueError(f"channels {channels} not divisible by heads {p.heads}")
    expect = p.heads * n_maps * p.points * 2
    if p.offset_head.weight.shape[0] != expect:
        raise ValueError(
            f"offset head built for {p.offset_head.weight.shape[0] // (p.heads * p.points * 2)} "
            f"maps, value set has {n_maps}")
    return n_q, channels, n_maps, channels // p.heads


def def_attn_fwd(queries: np.ndarray, values: ValueMapSet, ref: np.ndarray,
                 p: DefAttnParams, want_ctx: bool = False):
    """Deformable attention forward.

    queries: (N_q, C'); ref: (N_q, n_maps, 2). Returns (N_q, C'), plus the
    saved context when `want_ctx` is set.
    """
    n_q, channels, n_maps, head_dim = _check_inputs(queries, values, ref, p)
    heads, points = p.heads, p.points

    raw_off = linear_fwd(queries, p.offset_head)
    offsets = raw_off.reshape(n_q, heads, n_maps, points, 2)
    raw_w = linear_fwd(queries, p.weight_head)
    weights = softmax_fwd(raw_w.reshape(n_q, heads, n_maps * points), axis=-1)

    locations = ref[:, None, :, None, :] + offsets  # (N_q, M, J, K, 2)

    proj_maps = [linear_fwd(m.reshape(-1, channels), p.value_proj)
                 .reshape(m.shape) for m in values.maps]

    head_out = np.zeros((n_q, heads, head_dim), queries.dtype)
    sampled = np.empty((n_q, heads, n_maps, points, head_dim), queries.dtype)
    for j in range(n_maps):
        for m in range(heads):
            sl = proj_maps[j][:, :, m * head_dim:(m + 1) * head_dim]
            pts = locations[:, m, j].reshape(n_q * points, 2)
            s = bilinear_sample_fwd(sl, pts).reshape(n_q, points, head_dim)
            sampled[:, m, j] = s
            w = weights[:, m, j * points:(j + 1) * points]
            head_out[:, m] += (w[:, :, None] * s).sum(axis=1)

    out = linear_fwd(head_out.reshape(n_q, channels), p.output_proj)
    if not want_ctx:
        return out
    ctx = dict(queries=queries, values=values, ref=ref, p=p,
               offsets=offsets, weights=weights, locations=locations,
               proj_maps=proj_maps, sampled=sampled, head_out=head_out)
    return out, ctx


def def_attn_vjp(ctx: dict, grad_out: np.ndarray,
                 offset_grad_scale: float = 1.0) -> DefAttnGrads:
    """Backward through deformable attention.

    Returns gradients for the queries, every parameter group, and the value
    maps. `offset_grad_scale` multiplies only the gradient entering the
    offset head (the restricted gradient-scaling placement).
    """
    queries = ctx["queries"]
    values: ValueMapSet = ctx["values"]
    p: DefAttnParams = ctx["p"]
    weights = ctx["weights"]
    locations = ctx["locations"]
    proj_maps = ctx["proj_maps"]
    sampled = ctx["sampled"]
    n_q, channels = queries.shape
    heads, points = p.heads, p.points
    n_maps = values.n_maps
    head_dim = channels // heads

    g_head_out_flat, g_wo, g_bo = linear_vjp(
        ctx["head_out"].reshape(n_q, channels), p.output_proj, grad_out)
    g_head_out = g_head_out_flat.reshape(n_q, heads, head_dim)

    g_weights = np.zeros_like(weights)                 # (N_q, M, J*K)
    g_locations = np.zeros_like(locations)             # (N_q, M, J, K, 2)
    g_proj_maps = [np.zeros_like(m) for m in proj_maps]
    for j in range(n_maps):
        for m in range(heads):
            w = weights[:, m, j * points:(j + 1) * points]     # (N_q, K)
            s = sampled[:, m, j]                               # (N_q, K, D)
            g_h = g_head_out[:, m]                             # (N_q, D)
            g_weights[:, m, j * points:(j + 1) * points] = (s * g_h[:, None, :]).sum(-1)
            g_samples = w[:, :, None] * g_h[:, None, :]        # (N_q, K, D)
            sl = proj_maps[j][:, :, m * head_dim:(m + 1) * head_dim]
            pts = locations[:, m, j].reshape(n_q * points, 2)
            g_map_sl, g_pts = bilinear_sample_vjp(
                sl, pts, g_samples.reshape(n_q * points, head_dim))
            g_proj_maps[j][:, :, m * head_dim:(m + 1) * head_dim] += g_map_sl
            g_locations[:, m, j] += g_pts.reshape(n_q, points, 2)

    # weights -> weight head
    g_raw_w = softmax_vjp(weights, g_weights, axis=-1).reshape(n_q, -1)
    g_q_w, g_ww, g_wb = linear_vjp(queries, p.weight_head, g_raw_w)

    # locations -> offset head (optionally scaled)
    g_raw_off = g_locations.reshape(n_q, -1) * offset_grad_scale
    g_q_off, g_ow, g_ob = linear_vjp(queries, p.offset_head, g_raw_off)

    # projected maps -> value projection and raw maps
    g_vw = np.zeros_like(p.value_proj.weight)
    g_vb = np.zeros_like(p.value_proj.bias)
    g_maps = []
    for raw, g_proj in zip(values.maps, g_proj_maps):
        g_flat, gw, gb = linear_vjp(raw.reshape(-1, channels), p.value_proj,
                                    g_proj.reshape(-1, channels))
        g_vw += gw
        g_vb += gb
        g_maps.append(g_flat.reshape(raw.shape))

    g_queries = g_q_w + g_q_off
    grads = DefAttnParams(
        heads, points,
        LinearParams(g_vw, g_vb),
        LinearParams(g_ow, g_ob),
        LinearParams(g_ww, g_wb),
        LinearParams(g_wo, g_bo))
    return DefAttnGrads(g_queries, g_maps, grads)


# ---------------------------------------------------------------------------
# gradient scaling: identity forward, scaled backward

def grad_scale_fwd(x: np.ndarray, lam: float) -> np.ndarray:
    if lam <= 0:
        raise ValueError(f"gradient scale must be positive, got {lam}")
    return x


def grad_scale_vjp(grad_out: np.ndarray, lam: float) -> np.ndarray:
    if lam <= 0:
        raise ValueError(f"gradient scale must be positive, got {lam}")
    return lam * grad_out
