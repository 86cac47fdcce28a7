"""Counter-based random number generation.

Every random draw in the package comes from a splitmix64 stream that is a
pure function of (seed, counter), so parameter builds and dropout masks are
bit-reproducible across runs, platforms, and languages. States are value
objects: drawing returns the values plus an advanced state, the input state
is never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


@dataclass(frozen=True)
class RngState:
    """Immutable position in a splitmix64 stream."""

    seed: int
    counter: int = 0


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def raw_u64(state: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """Draw `n` raw 64-bit words, identical to n sequential splitmix64 calls."""
    if n < 0:
        raise ValueError(f"draw count must be >= 0, got {n}")
    idx = np.arange(state.counter + 1, state.counter + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        words = _mix(_U64(state.seed & 0xFFFFFFFFFFFFFFFF) + idx * _GOLDEN)
    return words, RngState(state.seed, state.counter + n)


def uniform(state: RngState, shape, dtype=np.float64) -> tuple[np.ndarray, RngState]:
    """Uniform draws in [0, 1) with 53-bit mantissas, reshaped to `shape`."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    n = int(np.prod(shape)) if shape else 1
    words, state = raw_u64(state, n)
    vals = (words >> _U64(11)).astype(np.float64) * (2.0 ** -53)
    return vals.reshape(shape).astype(dtype, copy=False), state


def uniform_signed(state: RngState, shape, bound: float,
                   dtype=np.float64) -> tuple[np.ndarray, RngState]:
    """Uniform draws in [-bound, bound)."""
    vals, state = uniform(state, shape, np.float64)
    return ((vals * 2.0 - 1.0) * bound).astype(dtype, copy=False), state
