"""Differentiable building blocks with hand-written backward passes.

Each operation comes as a `*_fwd` plus a matching `*_vjp` that maps the
upstream gradient to gradients for the inputs and parameters. There is no
autodiff graph; composite modules chain these VJPs explicitly. All reference
paths run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .rng import RngState, uniform, uniform_signed

# Coordinates within this fraction of a cell of an interpolation node are
# snapped onto the node so that sampling at (h+0.5)/H reproduces map[h, w]
# bit-exactly despite the double rounding in the normalized coordinate.
NODE_SNAP = 1e-9

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# linear

@dataclass
class LinearParams:
    weight: np.ndarray  # (out_features, in_features)
    bias: np.ndarray    # (out_features,)


def linear_init(state: RngState, in_features: int, out_features: int,
                dtype=np.float64) -> tuple[LinearParams, RngState]:
    """Uniform +-sqrt(1/fan_in) weights and bias."""
    bound = float(np.sqrt(1.0 / in_features))
    w, state = uniform_signed(state, (out_features, in_features), bound, dtype)
    b, state = uniform_signed(state, (out_features,), bound, dtype)
    return LinearParams(w, b), state


def linear_fwd(x: np.ndarray, p: LinearParams) -> np.ndarray:
    """y = x W^T + b applied to the trailing dim of x."""
    if x.shape[-1] != p.weight.shape[1]:
        raise ValueError(
            f"linear expects trailing dim {p.weight.shape[1]}, got {x.shape[-1]}")
    return x @ p.weight.T + p.bias


def linear_vjp(x: np.ndarray, p: LinearParams,
               grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    grad_x = (g2 @ p.weight).reshape(x.shape)
    grad_w = g2.T @ x2
    grad_b = g2.sum(axis=0)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# softmax

def softmax_fwd(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtraction) along `axis`."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for rank {x.ndim}")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(y: np.ndarray, grad_out: np.ndarray, axis: int = -1) -> np.ndarray:
    """Backward through softmax given its forward output `y`."""
    inner = (grad_out * y).sum(axis=axis, keepdims=True)
    return y * (grad_out - inner)


# ---------------------------------------------------------------------------
# layer norm

@dataclass
class LayerNormParams:
    gamma: np.ndarray  # (channels,)
    beta: np.ndarray   # (channels,)
    epsilon: float = 1e-5


def layernorm_init(channels: int, dtype=np.float64) -> LayerNormParams:
    return LayerNormParams(np.ones(channels, dtype), np.zeros(channels, dtype))


def layernorm_fwd(x: np.ndarray, p: LayerNormParams) -> np.ndarray:
    """Normalize the trailing channel dim to zero mean / unit variance, then affine."""
    if x.shape[-1] != p.gamma.shape[0]:
        raise ValueError(
            f"layernorm expects trailing dim {p.gamma.shape[0]}, got {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + p.epsilon)
    return xhat * p.gamma + p.beta


def layernorm_vjp(x: np.ndarray, p: LayerNormParams,
                  grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x - mu) * inv_std
    g_xhat = grad_out * p.gamma
    grad_x = inv_std * (
        g_xhat
        - g_xhat.mean(axis=-1, keepdims=True)
        - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True))
    lead = tuple(range(grad_out.ndim - 1))
    grad_gamma = (grad_out * xhat).sum(axis=lead)
    grad_beta = grad_out.sum(axis=lead)
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# 3x3 stride-2 convolution (zero padding 1)

@dataclass
class ConvParams:
    kernel: np.ndarray  # (out_ch, in_ch, 3, 3)
    bias: np.ndarray    # (out_ch,)

    def __post_init__(self):
        if self.kernel.shape[2:] != (3, 3):
            raise ValueError(f"kernel spatial dims must be 3x3, got {self.kernel.shape[2:]}")


def conv_init(state: RngState, in_ch: int, out_ch: int,
              dtype=np.float64) -> tuple[ConvParams, RngState]:
    bound = float(np.sqrt(1.0 / (in_ch * 9)))
    k, state = uniform_signed(state, (out_ch, in_ch, 3, 3), bound, dtype)
    b, state = uniform_signed(state, (out_ch,), bound, dtype)
    return ConvParams(k, b), state


def _im2col3x3s2(x: np.ndarray) -> np.ndarray:
    """Patches of the zero-padded input at stride 2: (oh, ow, in_ch, 3, 3)."""
    h, w, cin = x.shape
    pad = np.zeros((h + 2, w + 2, cin), x.dtype)
    pad[1:h + 1, 1:w + 1] = x
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(0, 1))
    return np.ascontiguousarray(win[::2, ::2])


def conv3x3s2_fwd(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """(H, W, Cin) -> (ceil(H/2), ceil(W/2), Cout), zero padding 1."""
    if x.ndim != 3 or x.shape[2] != p.kernel.shape[1]:
        raise ValueError(
            f"conv expects (H, W, {p.kernel.shape[1]}), got {x.shape}")
    col = _im2col3x3s2(x)
    oh, ow = col.shape[:2]
    cout = p.kernel.shape[0]
    kmat = p.kernel.reshape(cout, -1).T  # (in_ch*9, out_ch)
    y = col.reshape(oh * ow, -1) @ kmat
    return y.reshape(oh, ow, cout) + p.bias


def conv3x3s2_vjp(x: np.ndarray, p: ConvParams,
                  grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, w, cin = x.shape
    oh, ow, cout = grad_out.shape
    col = _im2col3x3s2(x)
    g2 = grad_out.reshape(oh * ow, cout)
    grad_k = (g2.T @ col.reshape(oh * ow, -1)).reshape(cout, cin, 3, 3)
    grad_b = g2.sum(axis=0)
    # scatter the 9 kernel taps back onto the padded input grid
    grad_pad = np.zeros((h + 2, w + 2, cin), x.dtype)
    for i in range(3):
        for j in range(3):
            contrib = grad_out @ p.kernel[:, :, i, j]  # (oh, ow, cin)
            grad_pad[i:i + 2 * oh:2, j:j + 2 * ow:2] += contrib
    return grad_pad[1:h + 1, 1:w + 1], grad_k, grad_b


# ---------------------------------------------------------------------------
# 2x2 max pooling, stride 2, ceil mode (ablation downsample variant)

def maxpool2x2_fwd(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(H, W, C) -> (ceil(H/2), ceil(W/2), C) plus flat argmax indices for the vjp."""
    h, w, c = x.shape
    h2, w2 = (h + 1) // 2 * 2, (w + 1) // 2 * 2
    padded = np.full((h2, w2, c), -np.inf, x.dtype)
    padded[:h, :w] = x
    blocks = padded.reshape(h2 // 2, 2, w2 // 2, 2, c).transpose(0, 2, 4, 1, 3)
    flat = blocks.reshape(h2 // 2, w2 // 2, c, 4)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2x2_vjp(x_shape: tuple[int, int, int], idx: np.ndarray,
                   grad_out: np.ndarray) -> np.ndarray:
    h, w, c = x_shape
    h2, w2 = (h + 1) // 2 * 2, (w + 1) // 2 * 2
    flat = np.zeros((h2 // 2, w2 // 2, c, 4), grad_out.dtype)
    np.put_along_axis(flat, idx[..., None], grad_out[..., None], axis=-1)
    grad_pad = flat.reshape(h2 // 2, w2 // 2, c, 2, 2).transpose(0, 3, 1, 4, 2)
    return grad_pad.reshape(h2, w2, c)[:h, :w]


# ---------------------------------------------------------------------------
# GELU with the exact Gaussian CDF

def gelu_fwd(x: np.ndarray) -> np.ndarray:
    """x * Phi(x), Phi the standard normal CDF."""
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_vjp(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return grad_out * (phi_cdf + x * pdf)


# ---------------------------------------------------------------------------
# dropout

def dropout(x: np.ndarray, rate: float, mode: str,
            state: RngState) -> tuple[np.ndarray, np.ndarray, RngState]:
    """Inverted dropout. Returns (output, keep mask, advanced rng state).

    Eval mode is the identity and consumes no randomness. Train mode zeroes
    each scalar with probability `rate` and scales survivors by 1/(1-rate).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x, np.ones_like(x), state
    u, state = uniform(state, x.shape)
    mask = (u >= rate).astype(x.dtype)
    return x * mask / (1.0 - rate), mask, state


def dropout_vjp(mask: np.ndarray, rate: float, mode: str,
                grad_out: np.ndarray) -> np.ndarray:
    if mode == "eval" or rate == 0.0:
        return grad_out
    return grad_out * mask / (1.0 - rate)


# ---------------------------------------------------------------------------
# 2-D sinusoidal positional encoding

def sinusoidal_pe_2d(rows: int, cols: int, channels: int,
                     dtype=np.float64) -> np.ndarray:
    """(rows, cols, channels) position code over the concatenated grid.

    The first half of the channels encodes the global row index, the second
    half the column index, each as interleaved sin/cos pairs over channels/4
    geometric frequencies with base 10000. Row indices run over the full
    concatenated height, so the same spatial row of different tasks receives
    distinct codes.
    """
    if channels % 4 != 0:
        raise ValueError(f"pe channels must be divisible by 4, got {channels}")
    half = channels // 2
    n_freq = channels // 4
    freqs = np.power(10000.0, -np.arange(n_freq, dtype=np.float64) / n_freq)

    def encode(n: int) -> np.ndarray:
        angle = np.arange(n, dtype=np.float64)[:, None] * freqs[None, :]
        out = np.empty((n, half), np.float64)
        out[:, 0::2] = np.sin(angle)
        out[:, 1::2] = np.cos(angle)
        return out

    pe = np.empty((rows, cols, channels), np.float64)
    pe[:, :, :half] = encode(rows)[:, None, :]
    pe[:, :, half:] = encode(cols)[None, :, :]
    return pe.astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# bilinear sampling on normalized [0,1]^2 coordinates with half-pixel centers

def _bilinear_axis(p: np.ndarray, n: int):
    """Per-axis interpolation setup for normalized coords against n cells.

    Returns (lo, hi, frac, passthrough): clamped neighbor indices, blend
    fraction, and the clamp pass-through factor for the coordinate gradient.
    """
    clamped = np.clip(p, 0.0, 1.0)
    f = clamped * n - 0.5
    nearest = np.rint(f)
    f = np.where(np.abs(f - nearest) < NODE_SNAP, nearest, f)
    base = np.floor(f)
    frac = f - base
    lo = np.clip(base.astype(np.int64), 0, n - 1)
    hi = np.clip(base.astype(np.int64) + 1, 0, n - 1)
    passthrough = ((p >= 0.0) & (p < 1.0)).astype(f.dtype)
    return lo, hi, frac, passthrough


def bilinear_sample_fwd(value_map: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) at N normalized (row, col) points -> (N, C).

    (h+0.5)/H is the center of cell h; out-of-range coordinates are clamped
    to the map edge before interpolation.
    """
    h, w, _ = value_map.shape
    y0, y1, ty, _ = _bilinear_axis(pts[:, 0], h)
    x0, x1, tx, _ = _bilinear_axis(pts[:, 1], w)
    ty = ty[:, None]
    tx = tx[:, None]
    return ((1.0 - ty) * (1.0 - tx) * value_map[y0, x0]
            + (1.0 - ty) * tx * value_map[y0, x1]
            + ty * (1.0 - tx) * value_map[y1, x0]
            + ty * tx * value_map[y1, x1])


def bilinear_sample_vjp(value_map: np.ndarray, pts: np.ndarray,
                        grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients for the map and the points.

    The point gradient is the analytic derivative of the blend (piecewise
    linear); on cell boundaries the floor-based fraction yields the
    right-sided derivative, and clamped coordinates get zero gradient.
    """
    h, w, _ = value_map.shape
    y0, y1, ty, pass_y = _bilinear_axis(pts[:, 0], h)
    x0, x1, tx, pass_x = _bilinear_axis(pts[:, 1], w)
    ty2 = ty[:, None]
    tx2 = tx[:, None]

    grad_map = np.zeros_like(value_map)
    np.add.at(grad_map, (y0, x0), (1.0 - ty2) * (1.0 - tx2) * grad_out)
    np.add.at(grad_map, (y0, x1), (1.0 - ty2) * tx2 * grad_out)
    np.add.at(grad_map, (y1, x0), ty2 * (1.0 - tx2) * grad_out)
    np.add.at(grad_map, (y1, x1), ty2 * tx2 * grad_out)

    v00 = value_map[y0, x0]
    v01 = value_map[y0, x1]
    v10 = value_map[y1, x0]
    v11 = value_map[y1, x1]
    # d(out)/d(fy) and d(out)/d(fx), then chain through f = p*n - 0.5
    dfy = ((1.0 - tx2) * (v10 - v00) + tx2 * (v11 - v01)) * grad_out
    dfx = ((1.0 - ty2) * (v01 - v00) + ty2 * (v11 - v10)) * grad_out
    grad_pts = np.stack([dfy.sum(axis=1) * h * pass_y,
                         dfx.sum(axis=1) * w * pass_x], axis=1)
    return grad_map, grad_pts
