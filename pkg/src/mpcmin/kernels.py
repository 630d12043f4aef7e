"""Exact plaintext fixed-point kernels for the non-arithmetic operations.

These are the functions the ideal oracle evaluates after reconstruction, and
the plaintext evaluator calls them directly; sharing them is what makes the
two evaluation modes bit-equal.  Inputs and outputs are uint64 ring tensors.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from . import ring
from .ring import FixedPointFormat


def trunc(x: np.ndarray, shift: int) -> np.ndarray:
    return ring.truncate_array(x, shift)


def row_max(x: np.ndarray) -> np.ndarray:
    return ring.unsigned(ring.signed(x).max(axis=-1, keepdims=True))


def argmax(x: np.ndarray) -> np.ndarray:
    """Index of the largest signed value along the last axis, lowest index on ties."""
    return np.argmax(ring.signed(x), axis=-1).astype(np.uint64)


def _apply(fn, x: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    with np.errstate(over="ignore", under="ignore"):
        return ring.encode_array(fn(ring.decode_array(x, fmt)), fmt)


def exp(x: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    return _apply(np.exp, x, fmt)


def relu(x: np.ndarray) -> np.ndarray:
    v = ring.signed(x)
    return ring.unsigned(np.where(v > 0, v, 0))


def silu(x: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    return _apply(lambda v: v / (1.0 + np.exp(-v)), x, fmt)


def gelu(x: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    return _apply(lambda v: 0.5 * v * (1.0 + erf(v / np.sqrt(2.0))), x, fmt)


def rsqrt_mean(sumsq: np.ndarray, n: int, eps: float, fmt: FixedPointFormat) -> np.ndarray:
    """1 / sqrt(sumsq / n + eps) for the per-row sums of squares."""
    return _apply(lambda v: 1.0 / np.sqrt(np.maximum(v, 0.0) / n + eps), sumsq, fmt)


def divide_rows(
    num: np.ndarray,
    total: np.ndarray,
    fmt: FixedPointFormat,
    min_total: int = 1,
    valid: np.ndarray | None = None,
) -> np.ndarray:
    """num / total with a uniform fallback on degenerate rows.

    ``total`` has a trailing axis of length 1.  A row whose total is below
    ``min_total`` (in ring units) becomes the uniform distribution over its
    valid entries.
    """
    t = ring.signed(total)
    degenerate = t < min_total
    safe = np.where(degenerate, 1.0, ring.decode_array(total, fmt))
    out = ring.decode_array(num, fmt) / safe
    if np.any(degenerate):
        mask = np.ones(num.shape, dtype=bool) if valid is None else np.broadcast_to(valid, num.shape)
        count = mask.sum(axis=-1, keepdims=True)
        uniform = np.where(mask, 1.0 / np.maximum(count, 1), 0.0)
        out = np.where(degenerate, uniform, out)
    return ring.encode_array(out, fmt)
