"""Closed-form FLOP counts for both interaction mechanisms.

Conventions (also embedded in every JSON report): one multiply-accumulate
counts as 2 FLOPs; softmax costs 5 FLOPs per element (4 for the exponential
plus 1 for the normalizing division, the row sum amortized into the same
budget); layer norm costs 5 FLOPs per element. All arithmetic is exact
integer arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .block import ItsaConfig

MAC_FLOPS = 2
SOFTMAX_FLOPS_PER_ELEM = 5
LAYERNORM_FLOPS_PER_ELEM = 5
MAXPOOL_FLOPS_PER_WINDOW = 3  # comparisons per 2x2 window

CONVENTIONS = {
    "mac_flops": MAC_FLOPS,
    "softmax_flops_per_elem": SOFTMAX_FLOPS_PER_ELEM,
    "layernorm_flops_per_elem": LAYERNORM_FLOPS_PER_ELEM,
    "maxpool_flops_per_window": MAXPOOL_FLOPS_PER_WINDOW,
}

# breakdown keys covering the attention-matrix work that grows with the
# square of the query count (the baseline's quadratic term)
MHSA_QUADRATIC_KEYS = ("attn_scores", "softmax", "weighted_sum")


@dataclass
class CostReport:
    mechanism: str                       # "itsa" | "mhsa"
    config: dict
    flops_total: int
    flops_breakdown: dict[str, int]
    latency_seconds: Optional[float] = None
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def __post_init__(self):
        if any(v < 0 for v in self.flops_breakdown.values()):
            raise ValueError("negative flop count in breakdown")
        if self.flops_total != sum(self.flops_breakdown.values()):
            raise ValueError("flops_total must equal the sum of the breakdown")

    def to_json_dict(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "config": self.config,
            "flops_total": self.flops_total,
            "flops_breakdown": dict(self.flops_breakdown),
            "latency_seconds": self.latency_seconds,
            "conventions": self.conventions,
        }


def _config_echo(cfg: ItsaConfig) -> dict:
    dims = cfg.pyramid_dims()
    return {
        "tasks": cfg.tasks, "height": cfg.height, "width": cfg.width,
        "channels": cfg.channels, "pe_channels": cfg.pe_channels,
        "heads": cfg.heads, "points": cfg.points, "levels": cfg.levels,
        "steps": cfg.steps, "use_pe": cfg.use_pe,
        "downsample": cfg.downsample,
        "ffn_hidden_factor": cfg.ffn_hidden_factor,
        "n_queries": cfg.n_queries,
        "n_value_tokens": cfg.tasks * sum(h * w for h, w in dims),
    }


def flops_mhsa(cfg: ItsaConfig) -> CostReport:
    """Baseline block cost: QKV, attention matrix, softmax, weighted sum,
    output projection, and the MLP. The attention-matrix terms scale with
    the square of N = T*H*W."""
    n = cfg.n_queries
    c = cfg.channels
    m = cfg.heads
    hidden = cfg.ffn_hidden_factor * c
    breakdown = {
        "qkv_proj": 3 * MAC_FLOPS * n * c * c,
        "attn_scores": MAC_FLOPS * n * n * c,
        "softmax": SOFTMAX_FLOPS_PER_ELEM * n * n * m,
        "weighted_sum": MAC_FLOPS * n * n * c,
        "output_proj": MAC_FLOPS * n * c * c,
        "mlp": 2 * MAC_FLOPS * n * c * hidden,
    }
    return CostReport("mhsa", _config_echo(cfg), sum(breakdown.values()), breakdown)


def flops_itsa(cfg: ItsaConfig) -> CostReport:
    """Deformable block cost per refinement step, times the step count.

    Every query touches heads * tasks * levels * points samples; no term
    grows with the square of the query count.
    """
    cp = cfg.channels_full
    n_q = cfg.n_queries
    dims = cfg.pyramid_dims()
    n_tok = cfg.tasks * sum(h * w for h, w in dims)
    n_maps = cfg.tasks * cfg.levels
    samples = n_q * cfg.heads * n_maps * cfg.points
    head_dim = cp // cfg.heads
    hidden = cfg.ffn_hidden_factor * cp

    pyramid = 0
    if cfg.downsample == "conv3x3s2":
        for h, w in dims[1:]:
            pyramid += cfg.tasks * h * w * MAC_FLOPS * 9 * cp * cp
    else:
        # 1x1 conv at the input resolution, then 2x2 max-pool
        for (hi, wi), (ho, wo) in zip(dims[:-1], dims[1:]):
            pyramid += cfg.tasks * hi * wi * MAC_FLOPS * cp * cp
            pyramid += cfg.tasks * ho * wo * cp * MAXPOOL_FLOPS_PER_WINDOW

    per_step = {
        "offset_weight_heads":
            MAC_FLOPS * n_q * cp * (cfg.heads * n_maps * cfg.points * 3),
        "value_proj": MAC_FLOPS * n_tok * cp * cp,
        "bilinear_sampling": samples * 8 * head_dim,
        "weighted_aggregation": MAC_FLOPS * samples * head_dim,
        "output_proj": MAC_FLOPS * n_q * cp * cp,
        "pyramid_downsample": pyramid,
        "ffn": 2 * MAC_FLOPS * n_q * cp * hidden,
        "layer_norm": LAYERNORM_FLOPS_PER_ELEM * n_q * cp,
    }
    breakdown = {k: v * cfg.steps for k, v in per_step.items()}
    return CostReport("itsa", _config_echo(cfg), sum(breakdown.values()), breakdown)


def cost_report(mechanism: str, cfg: ItsaConfig) -> CostReport:
    if mechanism == "itsa":
        return flops_itsa(cfg)
    if mechanism == "mhsa":
        return flops_mhsa(cfg)
    raise ValueError(f"unknown mechanism {mechanism!r}")


def scaling_curve(mechanism: str, axis: str, values,
                  base: ItsaConfig) -> list[CostReport]:
    """Cost reports along a sweep of task count or spatial size.

    axis "T" sweeps the task count, axis "HW" sets height = width = value;
    log-log slopes are fit downstream with `fit_loglog_slope`.
    """
    values = list(values)
    if not values:
        raise ValueError("sweep range must be non-empty")
    reports = []
    for v in values:
        kwargs = dict(
            tasks=base.tasks, height=base.height, width=base.width,
            channels=base.channels, pe_channels=base.pe_channels,
            heads=base.heads, points=base.points, levels=base.levels,
            steps=base.steps, lam=base.lam, dropout_rate=base.dropout_rate,
            ffn_hidden_factor=base.ffn_hidden_factor, seed=base.seed,
            use_pe=base.use_pe, downsample=base.downsample,
            lambda_scope=base.lambda_scope)
        if axis == "T":
            kwargs["tasks"] = int(v)
        elif axis == "HW":
            kwargs["height"] = int(v)
            kwargs["width"] = int(v)
        else:
            raise ValueError(f"axis must be 'T' or 'HW', got {axis!r}")
        reports.append(cost_report(mechanism, ItsaConfig(**kwargs)))
    return reports


def fit_loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(xs, np.float64))
    ly = np.log(np.asarray(ys, np.float64))
    return float(np.polyfit(lx, ly, 1)[0])


def quadratic_subtotal(report: CostReport) -> int:
    """The attention-matrix cost of a baseline report (the N^2 terms)."""
    return sum(report.flops_breakdown[k] for k in MHSA_QUADRATIC_KEYS)
