"""Additive secret sharing over Z_{2^64} with two executable backends.

``dealer2pc``
    Two computing parties P0, P1 plus a trusted dealer that hands out Beaver
    triples ahead of time.  A secret x is held as x = x0 + x1.
``rep3pc``
    Replicated sharing among P0, P1, P2: x = x0 + x1 + x2 and party i holds
    (x_i, x_{i+1}).

Non-arithmetic operations go through an ideal oracle: parties send their
shares to the oracle endpoint, which reconstructs, applies the exact
plaintext fixed-point function and deals fresh shares back.  Every byte moves
through a ``Channel`` so traffic is measured rather than estimated.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import ring
from .accounting import Counters, NonArithKind, calls_key, nonarith_key

__all__ = [
    "BackendKind",
    "Backend",
    "BeaverTriple",
    "Channel",
    "Dealer",
    "Engine",
    "NonArithKind",
    "ShareVector",
    "SharedTensor",
    "TripleExhausted",
    "BackendMismatch",
    "ProtocolAbort",
]


class BackendMismatch(ValueError):
    pass


class TripleExhausted(RuntimeError):
    pass


class ProtocolAbort(RuntimeError):
    """A party detected malformed shares."""


class BackendKind(str, Enum):
    DEALER2PC = "dealer2pc"
    REP3PC = "rep3pc"


@dataclass(frozen=True)
class Backend:
    kind: BackendKind

    def __post_init__(self):
        object.__setattr__(self, "kind", BackendKind(self.kind))

    @property
    def party_count(self) -> int:
        return 2 if self.kind is BackendKind.DEALER2PC else 3

    @property
    def parties(self) -> tuple[str, ...]:
        return tuple(f"P{i}" for i in range(self.party_count))

    @property
    def has_dealer(self) -> bool:
        return self.kind is BackendKind.DEALER2PC

    @property
    def name(self) -> str:
        return self.kind.value


@dataclass
class ShareVector:
    """What a single party holds for one shared tensor."""

    party_id: int
    elements: tuple[np.ndarray, ...]
    backend: BackendKind


class SharedTensor:
    """All additive components of a secret, kept together for simulation.

    Structural operations (reshape, transpose, slicing, sums) and additions
    are local: they act on each component independently.  Public operands
    are folded into component 0.
    """

    __slots__ = ("comps", "backend")
    __array_ufunc__ = None  # make ndarray operators defer to ours

    def __init__(self, comps: Sequence[np.ndarray], backend: BackendKind):
        self.comps = tuple(np.asarray(c, dtype=np.uint64) for c in comps)
        self.backend = BackendKind(backend)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.comps[0].shape

    @property
    def ndim(self) -> int:
        return self.comps[0].ndim

    @property
    def size(self) -> int:
        return self.comps[0].size

    def __len__(self):
        return self.shape[0]

    def _map(self, f) -> "SharedTensor":
        return SharedTensor([f(c) for c in self.comps], self.backend)

    def reshape(self, *shape) -> "SharedTensor":
        return self._map(lambda c: c.reshape(*shape))

    def transpose(self, *axes) -> "SharedTensor":
        return self._map(lambda c: c.transpose(*axes))

    @property
    def T(self) -> "SharedTensor":
        return self._map(lambda c: c.T)

    def __getitem__(self, idx) -> "SharedTensor":
        return self._map(lambda c: c[idx])

    def sum(self, axis=None, keepdims=False) -> "SharedTensor":
        return self._map(lambda c: c.sum(axis=axis, keepdims=keepdims, dtype=np.uint64))

    def broadcast_to(self, shape) -> "SharedTensor":
        return self._map(lambda c: np.broadcast_to(c, shape))

    def copy(self) -> "SharedTensor":
        return self._map(np.array)

    def _check(self, other: "SharedTensor"):
        if other.backend is not self.backend:
            raise BackendMismatch(f"{self.backend.value} vs {other.backend.value}")

    def __add__(self, other):
        if isinstance(other, SharedTensor):
            self._check(other)
            return SharedTensor([a + b for a, b in zip(self.comps, other.comps)], self.backend)
        pub = np.asarray(other, dtype=np.uint64)
        shape = np.broadcast_shapes(self.shape, pub.shape)
        comps = [self.comps[0] + pub] + [np.broadcast_to(c, shape) for c in self.comps[1:]]
        return SharedTensor(comps, self.backend)

    __radd__ = __add__

    def __neg__(self) -> "SharedTensor":
        return self._map(lambda c: np.uint64(0) - c)

    def __sub__(self, other):
        if isinstance(other, SharedTensor):
            return self + (-other)
        return self + (np.uint64(0) - np.asarray(other, dtype=np.uint64))

    def __rsub__(self, other):
        return (-self) + other

    def mul_public(self, c) -> "SharedTensor":
        """Multiply by a public ring tensor (local; no rescaling)."""
        c = np.asarray(c, dtype=np.uint64)
        return self._map(lambda a: a * c)

    def party_view(self, party: int) -> ShareVector:
        k = len(self.comps)
        if self.backend is BackendKind.DEALER2PC:
            held = (self.comps[party],)
        else:
            held = (self.comps[party], self.comps[(party + 1) % k])
        return ShareVector(party, held, self.backend)

    def reveal_unsafe(self) -> np.ndarray:
        """Sum of components without any channel traffic.  Test-only."""
        out = self.comps[0].copy()
        for c in self.comps[1:]:
            out = out + c
        return out

    @staticmethod
    def concat(items: Sequence["SharedTensor"], axis: int = 0) -> "SharedTensor":
        backend = items[0].backend
        for it in items:
            if it.backend is not backend:
                raise BackendMismatch("cannot concatenate mixed backends")
        k = len(items[0].comps)
        return SharedTensor([np.concatenate([it.comps[j] for it in items], axis=axis) for j in range(k)], backend)


class Channel:
    """Reliable FIFO link between two endpoints with a byte counter."""

    def __init__(self, sender: str, receiver: str):
        self.sender = sender
        self.receiver = receiver
        self.bytes_sent = 0
        self.messages_sent = 0
        self._queue: deque[np.ndarray] = deque()

    def send(self, payload: np.ndarray) -> int:
        payload = np.ascontiguousarray(payload, dtype=np.uint64)
        self._queue.append(payload)
        self.bytes_sent += payload.nbytes
        self.messages_sent += 1
        return payload.nbytes

    def recv(self) -> np.ndarray:
        if not self._queue:
            raise RuntimeError(f"channel {self.sender}->{self.receiver} is empty")
        return self._queue.popleft()

    def __len__(self):
        return len(self._queue)


@dataclass
class TranscriptEntry:
    step: int
    sender: str
    receiver: str
    size: int
    stage: str
    site: str


class Network:
    """Registered channels between every ordered pair of endpoints."""

    def __init__(self, endpoints: Sequence[str], counters: Counters):
        self.endpoints = tuple(endpoints)
        self.counters = counters
        self.channels = {(a, b): Channel(a, b) for a in endpoints for b in endpoints if a != b}
        self.log: list[TranscriptEntry] = []

    def send(self, sender: str, receiver: str, payload: np.ndarray) -> None:
        try:
            ch = self.channels[(sender, receiver)]
        except KeyError:
            raise ValueError(f"no channel {sender}->{receiver}") from None
        n = ch.send(payload)
        self.counters.add("measured_bytes", n)
        self.log.append(
            TranscriptEntry(len(self.log), sender, receiver, n, self.counters.current_stage, self.counters.current_site)
        )

    def recv(self, sender: str, receiver: str) -> np.ndarray:
        return self.channels[(sender, receiver)].recv()

    def round(self) -> None:
        self.counters.add("measured_rounds", 1)

    @property
    def total_bytes(self) -> int:
        return sum(ch.bytes_sent for ch in self.channels.values())

    def pending(self) -> int:
        return sum(len(ch) for ch in self.channels.values())

    def transcript_jsonl(self) -> str:
        return "".join(
            json.dumps(
                {"step": e.step, "from": e.sender, "to": e.receiver, "bytes": e.size, "stage": e.stage, "site": e.site},
                sort_keys=True,
            )
            + "\n"
            for e in self.log
        )


@dataclass
class BeaverTriple:
    a: SharedTensor
    b: SharedTensor
    c: SharedTensor
    op: str  # "mul" or "matmul"
    products: int
    used: bool = field(default=False)

    def consume(self) -> "BeaverTriple":
        if self.used:
            raise ValueError("Beaver triple reused")
        self.used = True
        return self


class Dealer:
    """Trusted dealer issuing input-independent multiplication triples.

    The dealer's RNG is seeded independently of the parties' so triples never
    depend on live data.  ``budget`` caps the number of scalar products the
    dealer will cover; exceeding it raises ``TripleExhausted``.
    """

    def __init__(self, seed, budget: int | None = None):
        self.rng = np.random.default_rng(seed)
        self.budget = budget
        self.issued = 0

    def _split(self, v: np.ndarray) -> SharedTensor:
        r = ring.random_ring(self.rng, v.shape)
        return SharedTensor([r, v - r], BackendKind.DEALER2PC)

    def _reserve(self, products: int):
        if self.budget is not None and self.issued + products > self.budget:
            raise TripleExhausted(f"dealer budget {self.budget} exhausted")
        self.issued += products

    def mul_triple(self, shape) -> BeaverTriple:
        shape = tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        self._reserve(n)
        a = ring.random_ring(self.rng, shape)
        b = ring.random_ring(self.rng, shape)
        return BeaverTriple(self._split(a), self._split(b), self._split(a * b), "mul", n)

    def matmul_triple(self, x_shape, y_shape) -> BeaverTriple:
        a = ring.random_ring(self.rng, tuple(x_shape))
        b = ring.random_ring(self.rng, tuple(y_shape))
        c = np.matmul(a, b)
        n = int(c.size * a.shape[-1])
        self._reserve(n)
        return BeaverTriple(self._split(a), self._split(b), self._split(c), "matmul", n)

    def mul_triples(self, count: int) -> list[BeaverTriple]:
        return [self.mul_triple(()) for _ in range(count)]


class Engine:
    """Executes secret-shared arithmetic and ideal non-arithmetic calls.

    All counters live in ``self.counters`` and move only when a message is
    sent or an operation is charged.
    """

    def __init__(
        self,
        backend: Backend | BackendKind | str,
        seed: int = 0,
        fmt: ring.FixedPointFormat = ring.DEFAULT_FORMAT,
        counters: Counters | None = None,
        triple_budget: int | None = None,
    ):
        if not isinstance(backend, Backend):
            backend = Backend(BackendKind(backend))
        self.backend = backend
        self.fmt = fmt
        self.counters = counters if counters is not None else Counters()
        endpoints = list(backend.parties) + ["client", "server", "oracle"]
        if backend.has_dealer:
            endpoints.append("dealer")
        self.network = Network(endpoints, self.counters)
        self.rng = np.random.default_rng([seed, 0])
        self.dealer = Dealer([seed, 1], triple_budget) if backend.has_dealer else None
        # pairwise PRF stand-ins for replicated zero sharing: key i known to P_i and P_{i-1}
        self._zero_keys = [np.random.default_rng([seed, 2, i]) for i in range(3)]
        self.abort_hook: Callable[[str, np.ndarray], bool] | None = None

    @property
    def parties(self) -> tuple[str, ...]:
        return self.backend.parties

    @property
    def kind(self) -> BackendKind:
        return self.backend.kind

    # -- sharing ---------------------------------------------------------

    def _split(self, x: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(x, dtype=np.uint64)
        k = self.backend.party_count
        comps = [ring.random_ring(self.rng, x.shape) for _ in range(k - 1)]
        last = x.copy()
        for c in comps:
            last = last - c
        return comps + [last]

    def _deal(self, comps: list[np.ndarray], sender: str) -> SharedTensor:
        """Send each party its view of ``comps`` and assemble what they hold."""
        k = len(comps)
        held = [None] * k
        for i, p in enumerate(self.parties):
            if self.kind is BackendKind.DEALER2PC:
                payload = comps[i]
            else:
                payload = np.stack([comps[i], comps[(i + 1) % k]])
            self.network.send(sender, p, payload)
        for i, p in enumerate(self.parties):
            msg = self.network.recv(sender, p)
            if self.abort_hook is not None and self.abort_hook(p, msg):
                raise ProtocolAbort(f"{p} rejected shares from {sender}")
            held[i] = msg if self.kind is BackendKind.DEALER2PC else msg[0]
        self.network.round()
        return SharedTensor(held, self.kind)

    def share(self, x, owner: str = "client") -> SharedTensor:
        """Secret-share a ring tensor owned by ``owner``."""
        return self._deal(self._split(x), owner)

    def public(self, x) -> SharedTensor:
        """Embed a public value as a trivial sharing (no traffic)."""
        x = np.asarray(x, dtype=np.uint64)
        zeros = [np.zeros_like(x) for _ in range(self.backend.party_count - 1)]
        return SharedTensor([x.copy()] + zeros, self.kind)

    def _collect(self, x: SharedTensor, receiver: str) -> np.ndarray:
        self._check(x)
        for i, p in enumerate(self.parties):
            self.network.send(p, receiver, x.comps[i])
        total = None
        for p in self.parties:
            c = self.network.recv(p, receiver)
            total = c.copy() if total is None else total + c
        self.network.round()
        return total

    def reconstruct(self, x: SharedTensor, to: str = "client") -> np.ndarray:
        return self._collect(x, to)

    def _check(self, *xs: SharedTensor):
        for x in xs:
            if not isinstance(x, SharedTensor):
                raise TypeError(f"expected SharedTensor, got {type(x).__name__}")
            if x.backend is not self.kind:
                raise BackendMismatch(f"share from {x.backend.value} used on {self.kind.value}")

    # -- linear, communication-free ------------------------------------

    def add_local(self, x: SharedTensor, y: SharedTensor) -> SharedTensor:
        self._check(x, y)
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
        return x + y

    def affine_public(self, x: SharedTensor, w: np.ndarray, truncate: bool = True) -> SharedTensor:
        """X @ W for public W.  Free except for the optional truncation."""
        self._check(x)
        w = np.asarray(w, dtype=np.uint64)
        if x.shape[-1] != w.shape[-2 if w.ndim > 1 else 0]:
            raise ValueError(f"shape mismatch {x.shape} @ {w.shape}")
        out = x._map(lambda c: np.matmul(c, w))
        self.counters.add("public_mults", out.size * x.shape[-1])
        if truncate:
            out = self.trunc(out)
        return out

    # -- multiplications -----------------------------------------------

    def _open_pairwise(self, masked: list[np.ndarray]) -> np.ndarray:
        """Dealer2PC opening: each party sends its masked share to the other."""
        p0, p1 = self.parties
        self.network.send(p0, p1, masked[0])
        self.network.send(p1, p0, masked[1])
        from0 = self.network.recv(p0, p1)
        from1 = self.network.recv(p1, p0)
        self.network.round()
        self.counters.add("opened_elements", masked[0].size + masked[1].size)
        opened0, opened1 = masked[0] + from1, from0 + masked[1]
        if self.abort_hook is not None and not np.array_equal(opened0, opened1):
            raise ProtocolAbort("parties disagree on an opened value")
        return opened0

    def mul_beaver(self, x: SharedTensor, y: SharedTensor, triple: BeaverTriple | None = None) -> SharedTensor:
        """Elementwise product via one Beaver triple per element (raw, untruncated)."""
        if self.kind is not BackendKind.DEALER2PC:
            raise BackendMismatch("mul_beaver requires the dealer2pc backend")
        self._check(x, y)
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
        if triple is None:
            with self.counters.stage("offline"):
                triple = self._distribute(self.dealer.mul_triple(x.shape))
        if triple.op != "mul" or triple.a.shape != x.shape:
            raise ValueError("triple does not match operands")
        triple.consume()
        a, b, c = triple.a, triple.b, triple.c
        masked = [
            np.concatenate([(x.comps[i] - a.comps[i]).ravel(), (y.comps[i] - b.comps[i]).ravel()]) for i in range(2)
        ]
        opened = self._open_pairwise(masked)
        n = x.size
        d = opened[:n].reshape(x.shape)
        e = opened[n:].reshape(x.shape)
        z0 = c.comps[0] + d * b.comps[0] + e * a.comps[0] + d * e
        z1 = c.comps[1] + d * b.comps[1] + e * a.comps[1]
        self._charge_mult(n, n)
        return SharedTensor([z0, z1], self.kind)

    def matmul_beaver(self, x: SharedTensor, y: SharedTensor) -> SharedTensor:
        """X @ Y with a matrix triple: opens X - A and Y - B once."""
        self._check(x, y)
        with self.counters.stage("offline"):
            triple = self._distribute(self.dealer.matmul_triple(x.shape, y.shape))
        triple.consume()
        a, b, c = triple.a, triple.b, triple.c
        masked = [
            np.concatenate([(x.comps[i] - a.comps[i]).ravel(), (y.comps[i] - b.comps[i]).ravel()]) for i in range(2)
        ]
        opened = self._open_pairwise(masked)
        d = opened[: x.size].reshape(x.shape)
        e = opened[x.size :].reshape(y.shape)
        z0 = c.comps[0] + np.matmul(d, b.comps[0]) + np.matmul(a.comps[0], e) + np.matmul(d, e)
        z1 = c.comps[1] + np.matmul(d, b.comps[1]) + np.matmul(a.comps[1], e)
        self._charge_mult(triple.products, triple.products)
        return SharedTensor([z0, z1], self.kind)

    def _zero_shares(self, shape) -> list[np.ndarray]:
        r = [ring.random_ring(g, shape) for g in self._zero_keys]
        return [r[i] - r[(i - 1) % 3] for i in range(3)]

    def _reshare_replicated(self, z: list[np.ndarray]) -> SharedTensor:
        """Party i sends z_i to P_{i-1}, restoring the (x_i, x_{i+1}) layout."""
        for i, p in enumerate(self.parties):
            self.network.send(p, self.parties[(i - 1) % 3], z[i])
        self.counters.add("opened_elements", sum(v.size for v in z))
        # P_i keeps z_i and receives z_{i+1}
        for i, p in enumerate(self.parties):
            self.network.recv(self.parties[(i + 1) % 3], p)
        self.network.round()
        return SharedTensor(z, self.kind)

    def _replicated(self, x: SharedTensor, y: SharedTensor, op) -> SharedTensor:
        xs, ys = x.comps, y.comps
        probe = op(xs[0], ys[0])
        alpha = self._zero_shares(probe.shape)
        z = []
        for i in range(3):
            j = (i + 1) % 3
            z.append(op(xs[i], ys[i]) + op(xs[i], ys[j]) + op(xs[j], ys[i]) + alpha[i])
        return self._reshare_replicated(z)

    def mul_replicated(self, x: SharedTensor, y: SharedTensor) -> SharedTensor:
        if self.kind is not BackendKind.REP3PC:
            raise BackendMismatch("mul_replicated requires the rep3pc backend")
        self._check(x, y)
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
        out = self._replicated(x, y, lambda a, b: a * b)
        self._charge_mult(x.size, 0)
        return out

    def matmul_replicated(self, x: SharedTensor, y: SharedTensor) -> SharedTensor:
        self._check(x, y)
        out = self._replicated(x, y, np.matmul)
        self._charge_mult(out.size * x.shape[-1], 0)
        return out

    def mul(self, x: SharedTensor, y: SharedTensor) -> SharedTensor:
        if self.kind is BackendKind.DEALER2PC:
            return self.mul_beaver(x, y)
        return self.mul_replicated(x, y)

    def matmul(self, x: SharedTensor, y: SharedTensor) -> SharedTensor:
        if x.shape[-1] != y.shape[-2]:
            raise ValueError(f"shape mismatch {x.shape} @ {y.shape}")
        if self.kind is BackendKind.DEALER2PC:
            return self.matmul_beaver(x, y)
        return self.matmul_replicated(x, y)

    def _distribute(self, triple: BeaverTriple) -> BeaverTriple:
        for t in (triple.a, triple.b, triple.c):
            for i, p in enumerate(self.parties):
                self.network.send("dealer", p, t.comps[i])
                self.network.recv("dealer", p)
        return triple

    def _charge_mult(self, products: int, triples: int) -> None:
        self.counters.add("triple_mults", products)
        self.counters.add("triples_consumed", triples)
        self.counters.add("mult_rounds", 1)

    # -- ideal non-arithmetic ------------------------------------------

    def trunc(self, x: SharedTensor, shift: int | None = None) -> SharedTensor:
        shift = self.fmt.scale_bits if shift is None else shift
        (out,) = self.ideal_nonarith(NonArithKind.TRUNC, lambda v: (ring.truncate_array(v, shift),), [x])
        return out

    def ideal_nonarith(
        self,
        kind: NonArithKind,
        fn: Callable[..., Sequence[np.ndarray]],
        inputs: Sequence[SharedTensor],
        count: int | None = None,
        reveal_to: str | None = None,
    ) -> list:
        """Reconstruct inside the oracle, apply ``fn`` in plaintext, reshare.

        ``fn`` receives the reconstructed ring tensors and returns a sequence
        of ring tensors.  With ``reveal_to`` the outputs go to that endpoint in
        the clear instead of being reshared.
        """
        kind = NonArithKind(kind)
        self._check(*inputs)
        plain = [self._collect(x, "oracle") for x in inputs]
        outputs = fn(*plain)
        self.counters.add(nonarith_key(kind), inputs[0].size if count is None else count)
        self.counters.add(calls_key(kind), 1)
        if reveal_to is not None:
            result = []
            for o in outputs:
                self.network.send("oracle", reveal_to, np.atleast_1d(np.asarray(o, dtype=np.uint64)))
                result.append(self.network.recv("oracle", reveal_to))
            self.network.round()
            return result
        return [self._deal(self._split(o), "oracle") for o in outputs]
