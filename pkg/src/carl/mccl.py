"""Momentum continuous-label contrastive learning.

The online branch's predictions are compared with the target branch's
projections through a cosine similarity matrix; the valence/arousal labels
give a second cosine matrix. Both are turned into row distributions by a
temperature softmax and matched with a symmetric cross-entropy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .encoder import EncoderParams
from .errors import ContractError, DimensionError, ParameterError
from .tensor import Tensor

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
LABEL_NORM_EPS = 1e-8
LOG_FLOOR = 1e-12


@dataclass
class MCCLConfig:
    m_initial: float = 0.9996
    temperature_sim: float = 0.05
    temperature_va: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.m_initial <= 1.0:
            raise ParameterError(f"m_initial must be in [0, 1], got {self.m_initial}")
        if self.temperature_sim <= 0 or self.temperature_va <= 0:
            raise ParameterError("temperatures must be positive")


@dataclass
class MomentumState:
    m_initial: float = 0.9996
    k: int = 0
    K: int = 1
    m_current: float = 0.9996

    def advance(self, k: int) -> float:
        self.k = k
        self.m_current = momentum_schedule(k, self.K, self.m_initial)
        return self.m_current


def ema_update(target: EncoderParams, online: EncoderParams, m: float) -> None:
    """In place: every target tensor becomes ``m * target + (1 - m) * online``."""
    if not 0.0 <= m <= 1.0:
        raise ParameterError(f"momentum must be in [0, 1], got {m}")
    for name, t in target.items():
        if name not in online:
            raise ContractError(f"online branch has no parameter {name!r}")
        o = online[name]
        if o.shape != t.shape:
            raise ContractError(f"shape mismatch for {name!r}: {t.shape} vs {o.shape}")
        t.data *= m
        t.data += (1.0 - m) * o.data


def momentum_schedule(k: int, K: int, m_initial: float) -> float:
    """Cosine ramp of the EMA coefficient from ``m_initial`` at k=0 to 1 at k=K."""
    if K < 1:
        raise ContractError(f"total steps must be at least 1, got {K}")
    if not 0 <= k <= K:
        raise ContractError(f"step {k} outside [0, {K}]")
    return 1.0 - (1.0 - m_initial) * (math.cos(math.pi * k / K) + 1.0) / 2.0


def embedding_similarity(q_online, z_target) -> Tensor:
    """Cosine matrix between online rows and (gradient-detached) target rows."""
    q = tn.as_tensor(q_online)
    z = tn.as_tensor(z_target).detach()
    if q.ndim != 2 or z.ndim != 2 or q.shape[1] != z.shape[1]:
        raise DimensionError(f"similarity needs [N, d] inputs, got {q.shape} and {z.shape}")
    qn = tn.normalize_rows(q, NORM_EPS)
    zn = tn.normalize_rows(z, NORM_EPS)
    return tn.matmul(qn, tn.transpose(zn))


def label_similarity(labels) -> Tensor:
    """Cosine matrix of valence/arousal label vectors (a constant)."""
    va = np.asarray(labels, dtype=np.float64)
    if va.ndim != 2 or va.shape[1] != 2:
        raise DimensionError(f"labels must be [N, 2], got {va.shape}")
    norms = np.sqrt(va[:, 0] ** 2 + va[:, 1] ** 2)
    weak = np.flatnonzero(norms < 1e-6)
    if weak.size:
        log.warning("label direction ill-defined for records %s (near-zero valence/arousal)", weak.tolist())
    norms = np.maximum(norms, LABEL_NORM_EPS)
    dots = va[:, 0][:, None] * va[:, 0][None, :] + va[:, 1][:, None] * va[:, 1][None, :]
    return Tensor(dots / (norms[:, None] * norms[None, :]))


def to_distribution(similarity, temperature: float = 0.05) -> Tensor:
    return tn.softmax_rows(tn.as_tensor(similarity), temperature)


def mccl_loss(p_sim, p_va) -> Tensor:
    """Row-wise symmetric cross-entropy averaged over anchors.

    Gradients flow only through ``p_sim``; ``p_va`` is treated as a constant.
    """
    p_sim = tn.as_tensor(p_sim)
    p_va = tn.as_tensor(p_va).detach()
    if p_sim.shape != p_va.shape or p_sim.ndim != 2:
        raise ContractError(f"distribution shapes differ: {p_sim.shape} vs {p_va.shape}")
    n = p_sim.shape[0]
    log_va = Tensor(np.log(np.maximum(p_va.data, LOG_FLOOR)))
    log_sim = tn.log(p_sim, floor=LOG_FLOOR)
    total = tn.add(tn.sum(tn.mul(p_sim, log_va)), tn.sum(tn.mul(p_va, log_sim)))
    return tn.mul(total, -1.0 / n)


def mccl_objective(q_online, z_target, labels, cfg: MCCLConfig | None = None) -> Tensor:
    """Similarity matrices, row distributions and loss in one call."""
    cfg = cfg or MCCLConfig()
    p_sim = to_distribution(embedding_similarity(q_online, z_target), cfg.temperature_sim)
    p_va = to_distribution(label_similarity(labels), cfg.temperature_va)
    return mccl_loss(p_sim, p_va)
