"""Distillation loss terms and decay schedules for PCL and DKEL.

All teacher-side inputs (ensemble logits, teacher peer logits) are treated as
constants: they are detached before entering a KL term, so no gradient ever
reaches a teacher or ensemble target through these losses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, _log_softmax, _softmax, log_softmax_t
from .errors import ConfigurationError, DataError, ParameterError, ShapeError

DECAY_FAMILIES = ("exponential", "cosine", "linear")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def kd_loss(s, t, tau: float) -> Tensor:
    """tau^2 / N * sum_i KL(softmax(t_i/tau) || softmax(s_i/tau)).

    ``t`` is the reference distribution and is never differentiated.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    s = _as_tensor(s)
    t_data = _const(t)
    if s.shape != t_data.shape:
        raise ShapeError(f"student {s.shape} and teacher {t_data.shape} logits differ")
    n = s.shape[0] if s.data.ndim == 2 else 1
    log_p = _log_softmax(t_data, tau)
    p = _softmax(t_data, tau)
    kl = (Tensor(p) * (Tensor(log_p) - log_softmax_t(s, tau))).sum()
    return kl * (tau * tau / n)


def ce_loss(logits, labels) -> Tensor:
    """Mean cross entropy of integer ``labels`` under ``softmax(logits)``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels.astype(int)] = 1.0
    return (Tensor(onehot) * log_softmax_t(logits, 1.0)).sum() * (-1.0 / n)


def pe_loss(peer_logits: Sequence, ensemble_logits, tau: float) -> List[Tensor]:
    """Peer-ensemble term: each peer distilled from the (constant) ensemble."""
    target = _const(ensemble_logits)
    return [kd_loss(s, target, tau) for s in peer_logits]


def pm_loss(student_peer_logits, teacher_peer_logits: Sequence, tau: float) -> Tensor:
    """Mean KD loss of one student peer against each of the other teacher peers."""
    teachers = list(teacher_peer_logits)
    if not teachers:
        raise ConfigurationError("need at least one other teacher peer (m >= 2)")
    total = kd_loss(student_peer_logits, teachers[0], tau)
    for t in teachers[1:]:
        total = total + kd_loss(student_peer_logits, t, tau)
    return total * (1.0 / len(teachers))


def dk_loss(student_peer_logits, decoupled_teacher_logits: Sequence, tau: float) -> Tensor:
    """Decoupled-knowledge term.

    The same map as :func:`pm_loss`; the difference lies in where the teacher
    logits come from (a separately initialised teacher network fed with the
    other peers' views).
    """
    return pm_loss(student_peer_logits, decoupled_teacher_logits, tau)


def teacher_ensemble(teacher_logits: Sequence, exclude: int) -> Tensor:
    """Arithmetic mean of the teacher peers' logits, skipping peer ``exclude``."""
    m = len(teacher_logits)
    if m < 2:
        raise ConfigurationError(f"teacher ensemble needs m >= 2 peers, got {m}")
    if not 0 <= exclude < m:
        raise ParameterError(f"peer index {exclude} outside [0, {m})")
    others = [_const(t) for j, t in enumerate(teacher_logits) if j != exclude]
    acc = others[0].copy()
    for o in others[1:]:
        acc = acc + o
    return Tensor(acc / len(others))


def ek_loss(student_peer_logits, teacher_logits: Sequence, p: int, tau: float) -> Tensor:
    """Ensemble-knowledge term against the mean of the other teacher peers."""
    return kd_loss(student_peer_logits, teacher_ensemble(teacher_logits, p), tau)


@dataclass(frozen=True)
class DistillSchedule:
    """Weight of the ensemble-knowledge term as a function of the epoch."""

    family: str = "exponential"
    gamma: float = 0.5
    epoch_max: int = 100

    def __post_init__(self):
        if self.family not in DECAY_FAMILIES:
            raise ConfigurationError(f"unknown decay family {self.family!r}; choose from {DECAY_FAMILIES}")
        if self.family == "exponential" and not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        if int(self.epoch_max) < 1:
            raise ConfigurationError(f"epoch_max must be a positive integer, got {self.epoch_max}")

    def weight(self, e: float) -> float:
        return decay_weight(self, e)


def decay_weight(schedule: DistillSchedule, e: float) -> float:
    if not 0 <= e <= schedule.epoch_max:
        raise ParameterError(f"epoch {e} outside [0, {schedule.epoch_max}]")
    if schedule.family == "exponential":
        return math.exp(-schedule.gamma * e)
    if schedule.family == "cosine":
        return 0.5 * math.cos(math.pi * e / schedule.epoch_max) + 0.5
    return 1.0 - e / schedule.epoch_max


@dataclass
class LossBreakdown:
    """Scalar values of each term plus the differentiable total.

    Terms that are switched off are ``None``.  For PCL ``dk_per_peer`` holds
    the L_pm values, which share the same functional form.
    """

    ce_per_peer: List[float]
    pe_per_peer: Optional[List[float]]
    dk_per_peer: Optional[List[float]]
    ek_per_peer: Optional[List[float]]
    ce_ensemble: float
    omega: Optional[float]
    total: Tensor
    dk_weight: float = 0.0
    ek_weight: float = 0.0

    def recombine(self) -> float:
        """Re-add the reported parts with the weights used for ``total``."""
        acc = 0.0
        for p in range(len(self.ce_per_peer)):
            acc += self.ce_per_peer[p]
            if self.pe_per_peer is not None:
                acc += self.pe_per_peer[p]
            if self.ek_per_peer is not None:
                acc += self.ek_weight * self.ek_per_peer[p]
            if self.dk_per_peer is not None:
                acc += self.dk_weight * self.dk_per_peer[p]
        return acc + self.ce_ensemble


def distill_total(
    peer_logits: Sequence,
    ensemble_logits,
    teacher_logits: Optional[Sequence],
    labels,
    tau: float,
    *,
    omega: Optional[float] = None,
    use_pe: bool = True,
    use_dk: bool = True,
    use_ek: bool = True,
    pe_target=None,
) -> LossBreakdown:
    """Sum_p [ce + pe + w_ek * ek + w_dk * dk] + ce(ensemble).

    With both dk and ek on, ``w_ek = omega`` and ``w_dk = 1 - omega``.  With
    only one of them on, dk carries weight 1 and ek carries ``omega``.
    ``pe_target`` replaces the (detached) ensemble logits as the peer-ensemble
    target; finite-difference checks use it to hold the target fixed.
    """
    peers = [_as_tensor(s) for s in peer_logits]
    m = len(peers)
    needs_teacher = use_dk or use_ek
    if needs_teacher:
        if teacher_logits is None or len(teacher_logits) != m:
            got = None if teacher_logits is None else len(teacher_logits)
            raise ConfigurationError(f"{m} student peers but {got} teacher peers")
        if m < 2:
            raise ConfigurationError("distillation from other peers needs m >= 2")
        teacher_logits = [_const(t) for t in teacher_logits]
    if use_ek and omega is None:
        raise ConfigurationError("ensemble-knowledge term needs a decay weight omega")

    if use_dk and use_ek:
        w_ek, w_dk = float(omega), 1.0 - float(omega)
    else:
        w_ek = float(omega) if use_ek else 0.0
        w_dk = 1.0 if use_dk else 0.0

    ce_e = ce_loss(ensemble_logits, labels)
    total = ce_e
    ce_vals, pe_vals, dk_vals, ek_vals = [], [], [], []
    target = ensemble_logits if pe_target is None else pe_target
    pe_terms = pe_loss(peers, target, tau) if use_pe else None
    for p, s in enumerate(peers):
        ce = ce_loss(s, labels)
        total = total + ce
        ce_vals.append(ce.item())
        if use_pe:
            total = total + pe_terms[p]
            pe_vals.append(pe_terms[p].item())
        if use_ek:
            ek = ek_loss(s, teacher_logits, p, tau)
            total = total + ek * w_ek
            ek_vals.append(ek.item())
        if use_dk:
            others = [t for j, t in enumerate(teacher_logits) if j != p]
            dk = dk_loss(s, others, tau)
            total = total + dk * w_dk
            dk_vals.append(dk.item())

    return LossBreakdown(
        ce_per_peer=ce_vals,
        pe_per_peer=pe_vals if use_pe else None,
        dk_per_peer=dk_vals if use_dk else None,
        ek_per_peer=ek_vals if use_ek else None,
        ce_ensemble=ce_e.item(),
        omega=omega,
        total=total,
        dk_weight=w_dk,
        ek_weight=w_ek,
    )


def dkel_total(peer_outputs, ensemble_logits, teacher_logits, labels, schedule: DistillSchedule, e, tau: float) -> LossBreakdown:
    """Full DKEL objective with omega taken from ``schedule`` at epoch ``e``."""
    omega = decay_weight(schedule, e)
    return distill_total(peer_outputs, ensemble_logits, teacher_logits, labels, tau, omega=omega)


def pcl_total(peer_outputs, ensemble_logits, coupled_teacher_logits, labels, tau: float) -> LossBreakdown:
    """PCL objective: sum_p (ce + pe + pm) + ce(ensemble), pm reported under ``dk_per_peer``."""
    return distill_total(
        peer_outputs, ensemble_logits, coupled_teacher_logits, labels, tau, use_ek=False
    )
