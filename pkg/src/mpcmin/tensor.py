"""Dense tensor algebra in two interchangeable evaluation modes.

``PlainEvaluator`` runs the fixed-point reference directly on uint64 arrays;
``SharedEvaluator`` runs the same program on secret shares through an
``Engine``.  Composite operations (linear layers, softmax, RMSNorm,
activations) are written once against the evaluator interface, and all
non-arithmetic steps call the shared kernels, so a shared run reconstructs
bit-for-bit to the plaintext run.

Both evaluators keep identical operation counters.  The plaintext one uses
closed-form opening counts for the configured backend; the shared one counts
what actually crossed the channels.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import kernels, ring
from .accounting import Counters, NonArithKind, calls_key, nonarith_key, opened_elements_matmul, opened_elements_mul
from .ring import DEFAULT_FORMAT, FixedPointFormat
from .sharing import Engine, SharedTensor

# additive bias pushed onto masked attention logits
MASK_MAGNITUDE = 1 << 16


class Private:
    """Marks a plaintext tensor as secret for accounting in plaintext mode."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.uint64)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size


def is_public(w) -> bool:
    return isinstance(w, np.ndarray)


class Evaluator:
    """Interface shared by both modes."""

    shared = False

    def __init__(self, fmt: FixedPointFormat = DEFAULT_FORMAT, counters: Counters | None = None):
        self.fmt = fmt
        self.counters = counters if counters is not None else Counters()

    @contextmanager
    def stage(self, name: str):
        with self.counters.stage(name):
            yield self

    @contextmanager
    def site(self, name: str):
        with self.counters.site(name):
            yield self

    # primitives each mode provides
    def public_matmul(self, x, w):
        raise NotImplementedError

    def private_matmul(self, x, y):
        raise NotImplementedError

    def private_mul(self, x, y):
        raise NotImplementedError

    def trunc(self, x, shift: int | None = None):
        raise NotImplementedError

    def nonarith(self, kind: NonArithKind, fn: Callable, inputs: Sequence, count: int | None = None) -> list:
        raise NotImplementedError

    def reveal_argmax(self, x) -> int:
        raise NotImplementedError

    def input_private(self, x, owner: str = "server"):
        raise NotImplementedError

    def concat(self, xs: Sequence, axis: int = 0):
        raise NotImplementedError

    def broadcast(self, x, shape):
        raise NotImplementedError

    # shared helpers
    def mul_public(self, x, c):
        """Elementwise product with a public ring tensor (local, untruncated)."""
        c = np.asarray(c, dtype=np.uint64)
        out_size = int(np.prod(np.broadcast_shapes(x.shape, c.shape)))
        self.counters.add("public_mults", out_size)
        if isinstance(x, SharedTensor):
            return x.mul_public(c)
        return x * c


class PlainEvaluator(Evaluator):
    """Fixed-point reference on plaintext ring tensors.

    ``backend`` only affects accounting: it selects which opening formula
    is charged for private multiplications.
    """

    def __init__(self, fmt: FixedPointFormat = DEFAULT_FORMAT, counters: Counters | None = None, backend: str | None = None):
        super().__init__(fmt, counters)
        self.backend = None if backend is None else str(getattr(backend, "value", backend))

    @staticmethod
    def _unwrap(x):
        return x.value if isinstance(x, Private) else np.asarray(x, dtype=np.uint64)

    def public_matmul(self, x, w):
        out = np.matmul(x, w)
        self.counters.add("public_mults", out.size * x.shape[-1])
        return out

    def _charge(self, products: int, opened: int):
        self.counters.add("triple_mults", products)
        if self.backend == "dealer2pc":
            self.counters.add("triples_consumed", products)
        self.counters.add("opened_elements", opened)
        self.counters.add("mult_rounds", 1)

    def private_matmul(self, x, y):
        x, y = self._unwrap(x), self._unwrap(y)
        if x.shape[-1] != y.shape[-2]:
            raise ValueError(f"shape mismatch {x.shape} @ {y.shape}")
        out = np.matmul(x, y)
        self._charge(out.size * x.shape[-1], opened_elements_matmul(self.backend, x.size, y.size, out.size))
        return out

    def private_mul(self, x, y):
        x, y = self._unwrap(x), self._unwrap(y)
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
        self._charge(x.size, opened_elements_mul(self.backend, x.size))
        return x * y

    def trunc(self, x, shift: int | None = None):
        shift = self.fmt.scale_bits if shift is None else shift
        self.counters.add(nonarith_key(NonArithKind.TRUNC), x.size)
        self.counters.add(calls_key(NonArithKind.TRUNC), 1)
        return kernels.trunc(x, shift)

    def nonarith(self, kind, fn, inputs, count=None):
        self.counters.add(nonarith_key(kind), inputs[0].size if count is None else count)
        self.counters.add(calls_key(kind), 1)
        return list(fn(*[self._unwrap(i) for i in inputs]))

    def reveal_argmax(self, x) -> int:
        (idx,) = self.nonarith(NonArithKind.COMPARE, lambda v: (kernels.argmax(v),), [x])
        return int(np.asarray(idx).ravel()[-1])

    def input_private(self, x, owner: str = "server"):
        return Private(x)

    def concat(self, xs, axis=0):
        return np.concatenate(xs, axis=axis)

    def broadcast(self, x, shape):
        if isinstance(x, Private):
            return Private(np.broadcast_to(x.value, shape))
        return np.broadcast_to(x, shape)


class SharedEvaluator(Evaluator):
    shared = True

    def __init__(self, engine: Engine):
        super().__init__(engine.fmt, engine.counters)
        self.engine = engine
        self.backend = engine.kind.value

    def public_matmul(self, x, w):
        return self.engine.affine_public(x, w, truncate=False)

    def private_matmul(self, x, y):
        return self.engine.matmul(x, y)

    def private_mul(self, x, y):
        return self.engine.mul(x, y)

    def trunc(self, x, shift=None):
        return self.engine.trunc(x, shift)

    def nonarith(self, kind, fn, inputs, count=None):
        return self.engine.ideal_nonarith(kind, fn, inputs, count=count)

    def reveal_argmax(self, x) -> int:
        (idx,) = self.engine.ideal_nonarith(
            NonArithKind.COMPARE, lambda v: (kernels.argmax(v),), [x], reveal_to="client"
        )
        return int(np.asarray(idx).ravel()[-1])

    def input_private(self, x, owner: str = "server"):
        return self.engine.share(x, owner=owner)

    def concat(self, xs, axis=0):
        return SharedTensor.concat(xs, axis=axis)

    def broadcast(self, x, shape):
        return x.broadcast_to(shape)


# -- composite operations ------------------------------------------------------


def linear(ev: Evaluator, x, w):
    """x @ w followed by one truncation per output element."""
    raw = ev.public_matmul(x, w) if is_public(w) else ev.private_matmul(x, w)
    return ev.trunc(raw)


def matmul(ev: Evaluator, x, y, privacy: str = "private"):
    if privacy == "public_weight":
        if not is_public(y):
            raise TypeError("public_weight matmul needs a plaintext weight")
        return linear(ev, x, y)
    if privacy != "private":
        raise ValueError(f"unknown privacy {privacy!r}")
    return ev.trunc(ev.private_matmul(x, y))


def _count_softmax_batches(ev: Evaluator, shape):
    ev.counters.add("softmax_batches", int(np.prod(shape[:-2])) if len(shape) > 2 else 1)


def mask_bias(valid: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    return np.where(valid, np.uint64(0), np.uint64(ring.encode(-MASK_MAGNITUDE, fmt)))


def exact_softmax(ev: Evaluator, x, valid: np.ndarray | None = None):
    """Max-subtracted softmax over the last axis.

    Charges one Compare per element (row max), one SoftmaxExp per element and
    one SoftmaxDiv per element.
    """
    fmt = ev.fmt
    _count_softmax_batches(ev, x.shape)
    if valid is not None:
        x = x + mask_bias(valid, fmt)
    (m,) = ev.nonarith(NonArithKind.COMPARE, lambda v: (kernels.row_max(v),), [x], count=x.size)
    z = x - m
    (e,) = ev.nonarith(NonArithKind.SOFTMAX_EXP, lambda v: (kernels.exp(v, fmt),), [z])
    total = e.sum(axis=-1, keepdims=True)
    (p,) = ev.nonarith(
        NonArithKind.SOFTMAX_DIV,
        lambda num, den: (kernels.divide_rows(num, den, fmt, valid=valid),),
        [e, total],
        count=e.size,
    )
    return p


def softmax_rows(ev: Evaluator, x, valid: np.ndarray | None = None, kind: str = "exact", param: float | None = None):
    from . import approx

    if kind == "exact":
        return exact_softmax(ev, x, valid)
    if kind == "2relu":
        return approx.two_relu_softmax(ev, x, valid, eps=param)
    if kind == "2quad":
        return approx.two_quad_softmax(ev, x, valid, c=5.0 if param is None else param)
    raise ValueError(f"unknown softmax kind {kind!r}")


def rmsnorm(ev: Evaluator, x, g, eps: float = 1e-5):
    """x / sqrt(mean(x^2) + eps) * g over the last axis."""
    fmt = ev.fmt
    n = x.shape[-1]
    sq = ev.trunc(ev.private_mul(x, x))
    ss = sq.sum(axis=-1, keepdims=True)
    (r,) = ev.nonarith(NonArithKind.RSQRT, lambda v: (kernels.rsqrt_mean(v, n, eps, fmt),), [ss])
    y = ev.trunc(ev.private_mul(x, ev.broadcast(r, x.shape)))
    if is_public(g):
        return ev.trunc(ev.mul_public(y, g))
    return ev.trunc(ev.private_mul(y, ev.broadcast(g, y.shape)))


def silu(ev: Evaluator, x):
    fmt = ev.fmt
    return ev.nonarith(NonArithKind.SILU, lambda v: (kernels.silu(v, fmt),), [x])[0]


def gelu(ev: Evaluator, x):
    fmt = ev.fmt
    return ev.nonarith(NonArithKind.GELU, lambda v: (kernels.gelu(v, fmt),), [x])[0]


def relu(ev: Evaluator, x):
    return ev.nonarith(NonArithKind.RELU, lambda v: (kernels.relu(v),), [x])[0]


def activation(ev: Evaluator, x, kind: str = "silu", quad_coeffs=(0.125, 0.25, 0.5)):
    from . import approx

    if kind == "silu":
        return silu(ev, x)
    if kind == "gelu":
        return gelu(ev, x)
    if kind == "relu":
        return relu(ev, x)
    if kind == "quad":
        return approx.quad_activation(ev, x, *quad_coeffs)
    raise ValueError(f"unknown activation {kind!r}")
