"""Data-driven head grouping.

Pipeline: attention maps on calibration prompts -> pairwise Jensen-Shannon
distances between heads of a layer -> k-medoids into h/m clusters -> an
optimal assignment that rebalances the clusters to exactly m heads each.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


class SimilarityError(ValueError):
    pass


def _entropy_terms(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = p * np.log2(p / m)
    return np.where(p > 0, t, 0.0)


def js_distance(p, q, atol: float = 1e-6) -> float:
    """Square root of the base-2 Jensen-Shannon divergence, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise SimilarityError("distributions differ in length")
    for v in (p, q):
        if np.any(v < 0) or abs(v.sum() - 1.0) > atol:
            raise SimilarityError("inputs must be probability vectors")
    m = 0.5 * (p + q)
    jsd = 0.5 * _entropy_terms(p, m).sum() + 0.5 * _entropy_terms(q, m).sum()
    return float(np.sqrt(max(jsd, 0.0)))


def _js_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Vectorised js_distance over the last axis (inputs already normalised)."""
    m = 0.5 * (p + q)
    jsd = 0.5 * _entropy_terms(p, m).sum(-1) + 0.5 * _entropy_terms(q, m).sum(-1)
    return np.sqrt(np.maximum(jsd, 0.0))


@dataclass
class DistanceMatrix:
    layer: int
    values: np.ndarray

    def to_dict(self) -> dict:
        return {"layer": self.layer, "distances": self.values.round(12).tolist()}


def head_distances(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Average pairwise JS distance between heads of one layer.

    ``maps`` holds one (heads x b x b) attention tensor per calibration
    prompt; prompts may differ in length.  Every (prompt, query position) row
    counts once.  Rows are renormalised first, since fixed-point rows only
    sum to 1 up to rounding.
    """
    if not maps:
        raise SimilarityError("empty calibration set")
    total = None
    nrows = 0
    for a in maps:
        a = np.clip(np.asarray(a, dtype=np.float64), 0.0, None)
        a = a.reshape(a.shape[0], -1, a.shape[-1])
        a = a / a.sum(-1, keepdims=True)
        h = a.shape[0]
        acc = np.zeros((h, h))
        for i in range(h):
            for j in range(i + 1, h):
                acc[i, j] = acc[j, i] = _js_rows(a[i], a[j]).sum()
        total = acc if total is None else total + acc
        nrows += a.shape[1]
    return total / nrows


def pairwise_distances(model, prompts: Sequence[Sequence[int]], layers: Sequence[int] | None = None) -> list[DistanceMatrix]:
    from .model import attention_maps

    if not prompts:
        raise SimilarityError("empty calibration set")
    per_layer: dict[int, list[np.ndarray]] = {}
    for prompt in prompts:
        for layer, probs, _ in attention_maps(model, prompt):
            per_layer.setdefault(layer, []).append(probs)
    wanted = sorted(per_layer) if layers is None else list(layers)
    return [DistanceMatrix(layer, head_distances(per_layer[layer])) for layer in wanted]


@dataclass
class KMedoidResult:
    medoids: list[int]
    labels: np.ndarray
    cost: float
    trace: list[float]


def _assign(d: np.ndarray, medoids: Sequence[int]) -> np.ndarray:
    return np.argmin(d[:, medoids], axis=1)


def _cost(d: np.ndarray, medoids: Sequence[int], labels: np.ndarray) -> float:
    return float(sum(d[i, medoids[c]] for i, c in enumerate(labels)))


def k_medoid(d, k: int, seed: int = 0, max_iter: int = 100) -> KMedoidResult:
    """Alternate assign / medoid-update, then PAM swaps, until a fixed point.

    Seeding is k-medoids++: the first medoid uniformly, later ones with
    probability proportional to the distance to the nearest chosen medoid.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    if not 1 <= k <= n:
        raise SimilarityError(f"cannot form {k} clusters from {n} heads")
    rng = np.random.default_rng(seed)
    medoids = [int(rng.integers(n))]
    while len(medoids) < k:
        near = d[:, medoids].min(axis=1)
        near[medoids] = 0.0
        if near.sum() <= 0:
            rest = [i for i in range(n) if i not in medoids]
            medoids.append(int(rng.choice(rest)))
        else:
            medoids.append(int(rng.choice(n, p=near / near.sum())))
    labels = _assign(d, medoids)
    trace = [_cost(d, medoids, labels)]
    for _ in range(max_iter):
        new = list(medoids)
        for c in range(k):
            members = np.flatnonzero(labels == c)
            if members.size == 0:
                continue
            within = d[np.ix_(members, members)].sum(axis=1)
            best = members[np.argmin(within)]
            # keep the incumbent on ties so the loop settles
            if within.min() < d[medoids[c], members].sum():
                new[c] = int(best)
        new_labels = _assign(d, new)
        cost = _cost(d, new, new_labels)
        if new == medoids or cost > trace[-1]:
            # alternation settled; a PAM swap step can still leave a local minimum
            new, cost = _best_swap(d, medoids, trace[-1])
            if new is None:
                break
            new_labels = _assign(d, new)
        medoids, labels = new, new_labels
        trace.append(cost)
    return KMedoidResult(medoids, labels, trace[-1], trace)


def _best_swap(d: np.ndarray, medoids: list[int], current: float) -> tuple[list[int] | None, float]:
    best, best_cost = None, current
    for c in range(len(medoids)):
        for o in range(d.shape[0]):
            if o in medoids:
                continue
            trial = list(medoids)
            trial[c] = o
            cost = _cost(d, trial, _assign(d, trial))
            if cost < best_cost - 1e-12:
                best, best_cost = trial, cost
    return best, best_cost


@dataclass
class HeadGrouping:
    m: int
    permutation: list[int]

    def __post_init__(self):
        h = len(self.permutation)
        if self.m < 1 or h % self.m:
            raise SimilarityError(f"merge factor {self.m} does not divide {h} heads")
        if sorted(self.permutation) != list(range(h)):
            raise SimilarityError("grouping is not a permutation of the heads")
        self.permutation = [int(p) for p in self.permutation]

    @property
    def heads(self) -> int:
        return len(self.permutation)

    @property
    def groups(self) -> list[list[int]]:
        m = self.m
        return [self.permutation[i : i + m] for i in range(0, self.heads, m)]

    @classmethod
    def adjacent(cls, h: int, m: int) -> "HeadGrouping":
        return cls(m, list(range(h)))

    def within_cost(self, d: np.ndarray) -> float:
        """Sum of pairwise distances inside each group."""
        total = 0.0
        for g in self.groups:
            for a in range(len(g)):
                for b in range(a + 1, len(g)):
                    total += d[g[a], g[b]]
        return float(total)

    def to_dict(self) -> dict:
        return {"m": self.m, "permutation": self.permutation, "groups": self.groups}


@dataclass
class Assignment:
    grouping: HeadGrouping
    cost: float
    slots: dict[int, list[int]]


def equalize_groups(d, medoids: Sequence[int], m: int) -> Assignment:
    """Rebalance heads into len(medoids) groups of exactly m heads.

    Each medoid is replicated m times as a slot; the heads x slots assignment
    minimising the summed head-to-medoid distance is solved exactly.
    """
    d = np.asarray(d, dtype=np.float64)
    h = d.shape[0]
    if m < 1 or h % m:
        raise SimilarityError(f"merge factor {m} does not divide {h} heads")
    if len(medoids) * m != h:
        raise SimilarityError(f"need {h // m} medoids, got {len(medoids)}")
    slot_medoid = np.repeat(np.asarray(medoids), m)
    cost = d[:, slot_medoid]
    rows, cols = linear_sum_assignment(cost)
    groups: dict[int, list[int]] = {j: [] for j in range(len(medoids))}
    for head, slot in zip(rows, cols):
        groups[int(slot) // m].append(int(head))
    perm = [hd for j in range(len(medoids)) for hd in sorted(groups[j])]
    return Assignment(HeadGrouping(m, perm), float(cost[rows, cols].sum()), groups)


def similar_grouping(d, m: int, seed: int = 0) -> HeadGrouping:
    d = np.asarray(d, dtype=np.float64)
    km = k_medoid(d, d.shape[0] // m, seed=seed)
    return equalize_groups(d, km.medoids, m).grouping
