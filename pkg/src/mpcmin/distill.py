"""Distillation losses over student/teacher activations (metrics only, no training).

MSE is the mean over elements.  The KL term uses the teacher distribution as
the reference: KL(softmax(z_T) || softmax(z_S)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import log_softmax

from .transforms import Partition


class DistillError(ValueError):
    pass


@dataclass(frozen=True)
class DistillWeights:
    attn: float = 0.1
    hidden: float = 5.0
    kld: float = 0.5
    nll: float = 0.5

    def __post_init__(self):
        for name in ("attn", "hidden", "kld", "nll"):
            if getattr(self, name) < 0:
                raise DistillError(f"weight {name} must be nonnegative")


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DistillError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise DistillError("empty activation")
    return float(np.mean((a - b) ** 2))


def _layer_sum(student: Mapping[int, np.ndarray], teacher: Mapping[int, np.ndarray], partition: Partition) -> float:
    if set(student) != set(teacher):
        raise DistillError("student and teacher cover different layers")
    private = set(partition.private_ids)
    outside = sorted(set(student) - private)
    if outside:
        raise DistillError(f"layers {outside} are outside the private suffix {partition.boundary}..{partition.total - 1}")
    return sum(mse(student[i], teacher[i]) for i in sorted(student))


def attn_hidden_loss(
    student_attn: Mapping[int, np.ndarray],
    teacher_attn: Mapping[int, np.ndarray],
    student_hidden: Mapping[int, np.ndarray],
    teacher_hidden: Mapping[int, np.ndarray],
    partition: Partition,
) -> tuple[float, float]:
    """(L_attn, L_hidden): per-layer MSE summed over the private layers.

    Attention activations are the multi-head attention outputs after the
    output projection; hidden activations are the layer outputs.
    """
    return _layer_sum(student_attn, teacher_attn, partition), _layer_sum(student_hidden, teacher_hidden, partition)


def stage1_loss(l_attn: float, l_hidden: float, weights: DistillWeights = DistillWeights()) -> float:
    return weights.attn * l_attn + weights.hidden * l_hidden


def kl_divergence(z_ref, z) -> np.ndarray:
    """Per-row KL(softmax(z_ref) || softmax(z))."""
    lp = log_softmax(np.asarray(z_ref, dtype=np.float64), axis=-1)
    lq = log_softmax(np.asarray(z, dtype=np.float64), axis=-1)
    return np.sum(np.exp(lp) * (lp - lq), axis=-1)


def logits_loss(z_s, z_t, labels, weights: DistillWeights = DistillWeights()) -> float:
    """alpha_kld * KL(teacher || student) + alpha_nll * NLL(student), averaged over tokens."""
    z_s = np.atleast_2d(np.asarray(z_s, dtype=np.float64))
    z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    if z_s.shape != z_t.shape:
        raise DistillError(f"shape mismatch {z_s.shape} vs {z_t.shape}")
    if labels.shape != z_s.shape[:-1]:
        raise DistillError("need one label per token")
    vocab = z_s.shape[-1]
    if not np.issubdtype(labels.dtype, np.integer) or np.any(labels < 0) or np.any(labels >= vocab):
        raise DistillError(f"labels must be token ids in [0, {vocab})")
    kld = kl_divergence(z_t, z_s)
    nll = -np.take_along_axis(log_softmax(z_s, axis=-1), labels[..., None], axis=-1)[..., 0]
    # rounding can push an exact zero slightly negative
    kld = np.maximum(kld, 0.0)
    return float(np.mean(weights.kld * kld + weights.nll * nll))
