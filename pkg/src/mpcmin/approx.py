"""MPC-friendly substitutes for softmax and activations.

Each substitute is written against the evaluator interface, so its cost
shows up under different non-arithmetic kinds:

* 2ReLU softmax: ReLU(x_i) / sum_j ReLU(x_j), with eps as a lower guard on
  the denominator.  The ReLUs are charged as Compare, plus one SoftmaxDiv per
  element; no SoftmaxExp.
* 2Quad softmax: (x_i + c)^2 / sum_j (x_j + c)^2.  Squarings are private
  multiplications; only the division is non-arithmetic.
* Quad activation: c2 x^2 + c1 x + c0 with private multiplications and
  truncations only.

The Quad defaults (0.125, 0.25, 0.5) and 2Quad's c = 5 come from prior
work and are configurable; neither is claimed to preserve model quality.
"""

from __future__ import annotations

import numpy as np

from . import kernels, ring
from .accounting import NonArithKind

SOFTMAX_KINDS = ("exact", "2relu", "2quad")
ACTIVATION_KINDS = ("silu", "gelu", "relu", "quad")
DEFAULT_QUAD = (0.125, 0.25, 0.5)
DEFAULT_2QUAD_C = 5.0


def _batches(ev, shape):
    ev.counters.add("softmax_batches", int(np.prod(shape[:-2])) if len(shape) > 2 else 1)


def two_relu_softmax(ev, x, valid: np.ndarray | None = None, eps: float | None = None):
    """ReLU-normalised softmax; rows whose ReLU sum is below ``eps`` become uniform.

    ``eps`` defaults to one ulp (2^-s).  It guards the division instead of
    being added to it, so every non-degenerate row still sums to one.
    """
    from .tensor import mask_bias

    fmt = ev.fmt
    eps_ring = 1 if eps is None else max(1, ring.to_signed(ring.encode(eps, fmt)))
    _batches(ev, x.shape)
    if valid is not None:
        x = x + mask_bias(valid, fmt)
    (r,) = ev.nonarith(NonArithKind.COMPARE, lambda v: (kernels.relu(v),), [x])
    total = r.sum(axis=-1, keepdims=True)
    (p,) = ev.nonarith(
        NonArithKind.SOFTMAX_DIV,
        lambda num, den: (kernels.divide_rows(num, den, fmt, min_total=eps_ring, valid=valid),),
        [r, total],
        count=r.size,
    )
    return p


def two_quad_softmax(ev, x, valid: np.ndarray | None = None, c: float = DEFAULT_2QUAD_C):
    fmt = ev.fmt
    _batches(ev, x.shape)
    shifted = x + np.uint64(ring.encode(c, fmt))
    sq = ev.trunc(ev.private_mul(shifted, shifted))
    if valid is not None:
        # masked positions are zeroed with a public 0/1 factor (no rescale)
        sq = ev.mul_public(sq, np.asarray(valid, dtype=np.uint64))
    total = sq.sum(axis=-1, keepdims=True)
    (p,) = ev.nonarith(
        NonArithKind.SOFTMAX_DIV,
        lambda num, den: (kernels.divide_rows(num, den, fmt, valid=valid),),
        [sq, total],
        count=sq.size,
    )
    return p


def quad_activation(ev, x, c2: float = DEFAULT_QUAD[0], c1: float = DEFAULT_QUAD[1], c0: float = DEFAULT_QUAD[2]):
    fmt = ev.fmt
    sq = ev.trunc(ev.private_mul(x, x))
    t = ev.mul_public(sq, np.uint64(ring.encode(c2, fmt))) + ev.mul_public(x, np.uint64(ring.encode(c1, fmt)))
    return ev.trunc(t) + np.uint64(ring.encode(c0, fmt))
