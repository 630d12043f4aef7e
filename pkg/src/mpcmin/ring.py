"""Two's-complement fixed-point arithmetic over Z_{2^64}.

Ring elements are Python ints in ``[0, 2**64)`` when handled one at a time and
``numpy.uint64`` arrays otherwise.  numpy wraps unsigned arithmetic silently,
so array sums and products are already reduced mod 2^64.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational

import numpy as np

RING_BITS = 64
MODULUS = 1 << RING_BITS
MASK = MODULUS - 1

RingElement = int


class RangeError(ValueError):
    """A value does not fit the representable fixed-point range."""


@dataclass(frozen=True)
class FixedPointFormat:
    scale_bits: int = 12
    ring_bits: int = RING_BITS

    def __post_init__(self):
        if self.ring_bits != RING_BITS:
            raise ValueError("only 64-bit rings are supported")
        if not 0 < self.scale_bits < 32:
            raise ValueError(f"scale_bits must be in (0, 32), got {self.scale_bits}")

    @property
    def scale(self) -> int:
        return 1 << self.scale_bits

    @property
    def bound(self) -> int:
        """Exclusive bound on |x| for representable reals."""
        return 1 << (RING_BITS - 1 - self.scale_bits)

    @property
    def ulp(self) -> float:
        return 1.0 / self.scale


DEFAULT_FORMAT = FixedPointFormat()


def to_signed(e: int) -> int:
    e &= MASK
    return e - MODULUS if e >= 1 << (RING_BITS - 1) else e


def from_signed(v: int) -> int:
    return v & MASK


def _round_half_away(q: Fraction) -> int:
    n = abs(q)
    r = int(n + Fraction(1, 2))  # floor for nonnegative
    return r if q >= 0 else -r


def encode(x, fmt: FixedPointFormat = DEFAULT_FORMAT) -> RingElement:
    """Encode a real scalar as round(x * 2^s) mod 2^64, rounding half away from zero."""
    if isinstance(x, (float, np.floating)):
        if not np.isfinite(x):
            raise RangeError(f"cannot encode non-finite value {x}")
        q = Fraction(float(x))
    elif isinstance(x, (int, np.integer, Rational)):
        q = Fraction(x)
    else:
        raise TypeError(f"cannot encode {type(x).__name__}")
    if abs(q) >= fmt.bound:
        raise RangeError(f"{x} outside [-2^{63 - fmt.scale_bits}, 2^{63 - fmt.scale_bits})")
    return from_signed(_round_half_away(q * fmt.scale))


def decode(e: RingElement, fmt: FixedPointFormat = DEFAULT_FORMAT) -> Fraction:
    return Fraction(to_signed(int(e)), fmt.scale)


def truncate_reference(e: RingElement, fmt: FixedPointFormat = DEFAULT_FORMAT, shift: int | None = None) -> RingElement:
    """Arithmetic right shift of the signed interpretation (floor division by 2^shift)."""
    shift = fmt.scale_bits if shift is None else shift
    return from_signed(to_signed(int(e)) >> shift)


def ring_add(a: int, b: int) -> int:
    return (a + b) & MASK


def ring_mul(a: int, b: int) -> int:
    return (a * b) & MASK


# -- array forms -------------------------------------------------------------

def encode_array(x, fmt: FixedPointFormat = DEFAULT_FORMAT) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise RangeError("cannot encode non-finite values")
    if x.size and np.max(np.abs(x)) >= fmt.bound:
        raise RangeError("array contains values outside the fixed-point range")
    scaled = np.abs(x) * fmt.scale
    r = np.floor(scaled + 0.5) * np.sign(x)
    return r.astype(np.int64).view(np.uint64)


def decode_array(e, fmt: FixedPointFormat = DEFAULT_FORMAT) -> np.ndarray:
    e = np.asarray(e, dtype=np.uint64)
    return e.view(np.int64).astype(np.float64) / fmt.scale


def signed(e: np.ndarray) -> np.ndarray:
    return np.asarray(e, dtype=np.uint64).view(np.int64)


def unsigned(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.int64).view(np.uint64)


def truncate_array(e: np.ndarray, shift: int) -> np.ndarray:
    return unsigned(signed(e) >> shift)


def random_ring(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform elements of Z_{2^64}."""
    return rng.integers(0, MODULUS, size=shape, dtype=np.uint64, endpoint=False)
