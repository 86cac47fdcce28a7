"""Finite-difference oracle for every hand-written backward pass.

Each registered target builds a deterministic scenario from a seed: live
input/parameter arrays, a scalar forward (a fixed random projection of the
op's output), and the analytic gradients from the op's vjp. `check` compares
the analytic gradients against central differences per parameter group.

Dropout is forced to eval mode inside composite targets so the probed
function is deterministic; the dedicated dropout target pins its mask by
reusing one rng state. Probe points for the bilinear target are resampled
until they sit well clear of interpolation cell boundaries, where the
sampler's derivative is one-sided by design.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .block import (
    ItsaConfig,
    ItsaParams,
    init_itsa_params,
    itsa_block_fwd,
    itsa_block_vjp,
)
from .deform import (
    DefAttnParams,
    MapMeta,
    ValueMapSet,
    def_attn_fwd,
    def_attn_vjp,
    grad_scale_fwd,
    grad_scale_vjp,
    make_reference_points,
)
from .primitives import (
    ConvParams,
    LayerNormParams,
    LinearParams,
    bilinear_sample_fwd,
    bilinear_sample_vjp,
    conv3x3s2_fwd,
    conv3x3s2_vjp,
    dropout,
    dropout_vjp,
    gelu_fwd,
    gelu_vjp,
    layernorm_fwd,
    layernorm_vjp,
    linear_fwd,
    linear_vjp,
    maxpool2x2_fwd,
    maxpool2x2_vjp,
    softmax_fwd,
    softmax_vjp,
)
from .rng import RngState, uniform, uniform_signed

DEFAULT_EPS = 1e-5
COMPOSED_TOLERANCE = 1e-4   # full interaction block
PRIMITIVE_TOLERANCE = 1e-5

# small composed-check config: T=2, H=W=4, C=8, c=4, M=2, K=4, L=2, S=1
CHECK_CONFIG = dict(tasks=2, height=4, width=4, channels=8, pe_channels=4,
                    heads=2, points=4, levels=2, steps=1, lam=1.0,
                    dropout_rate=0.0)


@dataclass
class GradCheckReport:
    target: str
    seed: int
    eps: float
    tolerance: float
    max_rel_error: float
    group_errors: dict[str, float]
    passed: bool

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Scenario:
    forward: Callable[[], float]
    groups: dict[str, np.ndarray]
    analytic: Callable[[], dict[str, np.ndarray]]
    tolerance: float = PRIMITIVE_TOLERANCE
    analytic_scale: float = 1.0   # oracle is compared against analytic/scale


def central_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                      eps: float = DEFAULT_EPS) -> np.ndarray:
    """Per-coordinate central difference (f(x+eps e_i) - f(x-eps e_i)) / 2eps."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = np.asarray(x, np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += eps
        fp = f(xp)
        xm = x.copy()
        xm.flat[i] -= eps
        fm = f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ArithmeticError(f"oracle probe produced a non-finite value at {i}")
        flat[i] = (fp - fm) / (2.0 * eps)
    return grad


def _fd_through(forward: Callable[[], float], live: np.ndarray,
                eps: float) -> np.ndarray:
    """Central differences for an array embedded in a larger structure."""
    orig = live.copy()

    def f(v):
        np.copyto(live, v)
        try:
            return forward()
        finally:
            np.copyto(live, orig)

    return central_diff_grad(f, orig, eps)


def named_arrays(obj, prefix: str = "") -> list[tuple[str, np.ndarray]]:
    """Flatten a nested dataclass/list structure into (name, array) leaves."""
    if isinstance(obj, np.ndarray):
        return [(prefix, obj)]
    if dataclasses.is_dataclass(obj):
        out = []
        for f in dataclasses.fields(obj):
            out += named_arrays(getattr(obj, f.name),
                                f"{prefix}.{f.name}" if prefix else f.name)
        return out
    if isinstance(obj, (list, tuple)):
        out = []
        for i, item in enumerate(obj):
            out += named_arrays(item, f"{prefix}[{i}]")
        return out
    return []


# ---------------------------------------------------------------------------
# scenario builders

def _proj(state: RngState, shape) -> tuple[np.ndarray, RngState]:
    return uniform_signed(state, shape, 1.0)


def _scenario_linear(seed: int) -> Scenario:
    state = RngState(seed)
    x, state = uniform_signed(state, (4, 3), 1.0)
    w, state = uniform_signed(state, (2, 3), 1.0)
    b, state = uniform_signed(state, (2,), 1.0)
    proj, state = _proj(state, (4, 2))
    p = LinearParams(w, b)

    def forward():
        return float((linear_fwd(x, p) * proj).sum())

    def analytic():
        gx, gw, gb = linear_vjp(x, p, proj)
        return {"x": gx, "weight": gw, "bias": gb}

    return Scenario(forward, {"x": x, "weight": w, "bias": b}, analytic,
                    tolerance=1e-6)


def _scenario_softmax(seed: int) -> Scenario:
    state = RngState(seed)
    x, state = uniform_signed(state, (3, 5), 2.0)
    proj, state = _proj(state, (3, 5))

    def forward():
        return float((softmax_fwd(x, axis=-1) * proj).sum())

    def analytic():
        y = softmax_fwd(x, axis=-1)
        return {"x": softmax_vjp(y, proj, axis=-1)}

    return Scenario(forward, {"x": x}, analytic)


def _scenario_layernorm(seed: int) -> Scenario:
    state = RngState(seed)
    x, state = uniform_signed(state, (2, 3, 4), 1.0)
    gamma, state = uniform_signed(state, (4,), 1.0)
    beta, state = uniform_signed(state, (4,), 1.0)
    proj, state = _proj(state, (2, 3, 4))
    p = LayerNormParams(gamma, beta)

    def forward():
        return float((layernorm_fwd(x, p) * proj).sum())

    def analytic():
        gx, gg, gb = layernorm_vjp(x, p, proj)
        return {"x": gx, "gamma": gg, "beta": gb}

    return Scenario(forward, {"x": x, "gamma": gamma, "beta": beta}, analytic)


def _scenario_conv3x3s2(seed: int) -> Scenario:
    state = RngState(seed)
    x, state = uniform_signed(state, (5, 7, 3), 1.0)
    k, state = uniform_signed(state, (4, 3, 3, 3), 1.0)
    b, state = uniform_signed(state, (4,), 1.0)
    proj, state = _proj(state, (3, 4, 4))
    p = ConvParams(k, b)

    def forward():
        return float((conv3x3s2_fwd(x, p) * proj).sum())

    def analytic():
        gx, gk, gb = conv3x3s2_vjp(x, p, proj)
        return {"x": gx, "kernel": gk, "bias": gb}

    return Scenario(forward, {"x": x, "kernel": k, "bias": b}, analytic)


def _scenario_maxpool2x2(seed: int) -> Scenario:
    state = RngState(seed)
    x, state = uniform_signed(state, (5, 7, 3), 1.0)
    proj, state = _proj(state, (3, 4, 3))

    def forward():
        return float((maxpool2x2_fwd(x)[0] * proj).sum())

    def analytic():
        _, idx = maxpool2x2_fwd(x)
        return {"x": maxpool2x2_vjp(x.shape, idx, proj)}

    return Scenario(forward, {"x": x}, analytic)


def _scenario_gelu(seed: int) -> Scenario:
    state = RngState(seed)
    x, state = uniform_signed(state, (4, 5), 2.0)
    proj, state = _proj(state, (4, 5))

    def forward():
        return float((gelu_fwd(x) * proj).sum())

    def analytic():
        return {"x": gelu_vjp(x, proj)}

    return Scenario(forward, {"x": x}, analytic)


def _scenario_dropout(seed: int) -> Scenario:
    state = RngState(seed)
    x, state = uniform_signed(state, (4, 6), 1.0)
    proj, state = _proj(state, (4, 6))
    mask_state = RngState(seed + 7919)
    rate = 0.3

    def forward():
        y, _, _ = dropout(x, rate, "train", mask_state)
        return float((y * proj).sum())

    def analytic():
        _, mask, _ = dropout(x, rate, "train", mask_state)
        return {"x": dropout_vjp(mask, rate, "train", proj)}

    return Scenario(forward, {"x": x}, analytic)


def _scenario_bilinear(seed: int, eps: float = DEFAULT_EPS) -> Scenario:
    state = RngState(seed)
    h, w = 4, 5
    vmap, state = uniform_signed(state, (h, w, 3), 1.0)
    pts = np.empty((6, 2))
    margin = 2.0 * eps
    for i in range(pts.shape[0]):
        for _ in range(200):
            cand, state = uniform(state, (2,))
            fy = cand[0] * h - 0.5
            fx = cand[1] * w - 0.5
            clear = (min(cand) > 2 * margin and max(cand) < 1 - 2 * margin
                     and abs(fy - round(fy)) > margin * h
                     and abs(fx - round(fx)) > margin * w)
            if clear:
                pts[i] = cand
                break
        else:  # pragma: no cover - would require absurd luck
            raise RuntimeError("could not place probe point away from boundaries")
    proj, state = _proj(state, (6, 3))

    def forward():
        return float((bilinear_sample_fwd(vmap, pts) * proj).sum())

    def analytic():
        gm, gp = bilinear_sample_vjp(vmap, pts, proj)
        return {"map": gm, "pts": gp}

    return Scenario(forward, {"map": vmap, "pts": pts}, analytic)


def _build_def_attn(seed: int):
    state = RngState(seed)
    cfg = CHECK_CONFIG
    t, hh, ww = cfg["tasks"], cfg["height"], cfg["width"]
    levels, heads, points = cfg["levels"], cfg["heads"], cfg["points"]
    channels = 8  # C' used directly for the kernel-level check
    n_maps = t * levels
    maps, meta = [], []
    for lvl in range(levels):
        mh, mw = hh >> lvl, ww >> lvl
        for ti in range(t):
            m, state = uniform_signed(state, (mh, mw, channels), 1.0)
            maps.append(m)
            meta.append(MapMeta(ti, lvl, mh, mw))
    values = ValueMapSet(maps, meta)
    queries, state = uniform_signed(state, (t * hh * ww, channels), 0.5)
    ref = make_reference_points(t, hh, ww, levels)

    def lin(state, n_in, n_out, scale):
        w, state = uniform_signed(state, (n_out, n_in), scale / np.sqrt(n_in))
        b, state = uniform_signed(state, (n_out,), scale / np.sqrt(n_in))
        return LinearParams(w, b), state

    vp, state = lin(state, channels, channels, 1.0)
    op, state = lin(state, channels, channels, 1.0)
    oh, state = lin(state, channels, heads * n_maps * points * 2, 0.5)
    wh, state = lin(state, channels, heads * n_maps * points, 1.0)
    params = DefAttnParams(heads, points, vp, oh, wh, op)
    proj, state = _proj(state, queries.shape)
    return queries, values, ref, params, proj


def _scenario_def_attn(seed: int) -> Scenario:
    queries, values, ref, params, proj = _build_def_attn(seed)

    def forward():
        return float((def_attn_fwd(queries, values, ref, params) * proj).sum())

    def analytic():
        _, ctx = def_attn_fwd(queries, values, ref, params, want_ctx=True)
        grads = def_attn_vjp(ctx, proj)
        out = {"queries": grads.queries}
        out.update({f"maps[{i}]": g for i, g in enumerate(grads.maps)})
        out.update(dict(named_arrays(grads.params)))
        return out

    groups = {"queries": queries}
    groups.update({f"maps[{i}]": m for i, m in enumerate(values.maps)})
    groups.update(dict(named_arrays(params)))
    return Scenario(forward, groups, analytic)


def _scenario_grad_scale(seed: int) -> Scenario:
    """Identity-forward composition: analytic/lambda must match the oracle."""
    lam = 100.0
    state = RngState(seed)
    x, state = uniform_signed(state, (3, 4), 1.0)
    w, state = uniform_signed(state, (5, 4), 1.0)
    b, state = uniform_signed(state, (5,), 1.0)
    proj, state = _proj(state, (3, 5))
    p = LinearParams(w, b)

    def forward():
        return float((grad_scale_fwd(linear_fwd(x, p), lam) * proj).sum())

    def analytic():
        g = grad_scale_vjp(proj, lam)
        gx, gw, gb = linear_vjp(x, p, g)
        return {"x": gx, "weight": gw, "bias": gb}

    return Scenario(forward, {"x": x, "weight": w, "bias": b}, analytic,
                    tolerance=1e-6, analytic_scale=lam)


def _scenario_itsa_block(seed: int) -> Scenario:
    cfg = ItsaConfig(**CHECK_CONFIG, seed=seed)
    state = RngState(seed ^ 0x5EED)
    features = []
    for _ in range(cfg.tasks):
        f, state = uniform_signed(state, (cfg.height, cfg.width, cfg.channels), 0.5)
        features.append(f)
    params, state = init_itsa_params(cfg, state)
    # randomize the structurally-initialized heads so the check is generic
    for step in params.steps:
        for lp in (step.attn.offset_head, step.attn.weight_head):
            w, state = uniform_signed(state, lp.weight.shape,
                                      0.3 / np.sqrt(lp.weight.shape[1]))
            b, state = uniform_signed(state, lp.bias.shape, 0.1)
            np.copyto(lp.weight, w)
            np.copyto(lp.bias, b)
    out_shape = (cfg.tasks * cfg.height, cfg.width, cfg.channels)
    proj, state = _proj(state, out_shape)

    def forward():
        out = itsa_block_fwd(features, params, cfg, mode="eval")
        return float((out * proj).sum())

    def analytic():
        _, ctx = itsa_block_fwd(features, params, cfg, mode="eval",
                                want_ctx=True)
        input_grads, param_grads = itsa_block_vjp(ctx, proj)
        out = {f"features[{i}]": g for i, g in enumerate(input_grads)}
        out.update(dict(named_arrays(param_grads)))
        return out

    groups = {f"features[{i}]": f for i, f in enumerate(features)}
    groups.update(dict(named_arrays(params)))
    return Scenario(forward, groups, analytic, tolerance=COMPOSED_TOLERANCE)


REGISTRY: dict[str, Callable[[int], Scenario]] = {
    "linear": _scenario_linear,
    "softmax": _scenario_softmax,
    "layernorm": _scenario_layernorm,
    "conv3x3s2": _scenario_conv3x3s2,
    "maxpool2x2": _scenario_maxpool2x2,
    "gelu": _scenario_gelu,
    "dropout": _scenario_dropout,
    "bilinear_sample": _scenario_bilinear,
    "def_attn": _scenario_def_attn,
    "grad_scale": _scenario_grad_scale,
    "itsa_block": _scenario_itsa_block,
}


def registered_targets() -> list[str]:
    return list(REGISTRY)


def check(target: str, seed: int = 0, eps: float = DEFAULT_EPS,
          tolerance: float | None = None) -> GradCheckReport:
    """Compare a target's analytic gradients against central differences."""
    if target not in REGISTRY:
        raise ValueError(f"unknown gradcheck target {target!r}; "
                         f"registered: {sorted(REGISTRY)}")
    scenario = REGISTRY[target](seed)
    tol = scenario.tolerance if tolerance is None else tolerance
    analytic = scenario.analytic()
    errors = {}
    for name, live in scenario.groups.items():
        numeric = _fd_through(scenario.forward, live, eps)
        expected = analytic[name] / scenario.analytic_scale
        denom = max(float(np.abs(numeric).max()),
                    float(np.abs(expected).max()), 1e-10)
        errors[name] = float(np.abs(expected - numeric).max()) / denom
    worst = max(errors.values())
    return GradCheckReport(target, seed, eps, tol, worst, errors, worst < tol)


def run_all(targets=None, seeds=(0, 1, 2), eps: float = DEFAULT_EPS
            ) -> list[GradCheckReport]:
    reports = []
    for target in (targets or registered_targets()):
        for seed in seeds:
            reports.append(check(target, seed=seed, eps=eps))
    return reports


def reports_to_json(reports: list[GradCheckReport]) -> str:
    return json.dumps([r.to_json_dict() for r in reports], indent=2)
