"""Gradient-based perturbed token detection.

Tokens are ranked by the L2 norm of the contrastive loss gradient with
respect to their embeddings; the top fraction of each sentence is attacked
with a few projected gradient-sign steps, and a detection head learns to
spot the attacked positions under a focal loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .errors import ContractError, NumericError, ParameterError
from .tensor import Tensor

GRAD_NORM_FLOOR = 1e-12
LOG_FLOOR = 1e-12


@dataclass
class PTDConfig:
    ratio: float = 0.10
    pgd_steps: int = 3
    alpha: float = 5.0
    epsilon: float = 5e-9
    frobenius_cap: float | None = None  # None -> epsilon * sqrt(total salient tokens)
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ParameterError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ParameterError("alpha and epsilon must be positive")
        if self.frobenius_cap is not None and self.frobenius_cap <= 0:
            raise ParameterError("frobenius_cap must be positive")
        if self.gamma < 0:
            raise ParameterError(f"gamma must be non-negative, got {self.gamma}")
        if self.pgd_steps < 0:
            raise ParameterError("pgd_steps must be non-negative")

    def cap_for(self, n_salient: int) -> float:
        if self.frobenius_cap is not None:
            return self.frobenius_cap
        return self.epsilon * math.sqrt(n_salient)


@dataclass
class SalientSet:
    indices: list[np.ndarray]
    mask: np.ndarray

    @property
    def total(self) -> int:
        return int(self.mask.sum())


def scorable_mask(attention_mask: np.ndarray) -> np.ndarray:
    """Real tokens other than CLS."""
    m = np.asarray(attention_mask).astype(bool).copy()
    m[:, 0] = False
    return m


def token_saliency(embedding_grads: np.ndarray, mask: np.ndarray, step: int | None = None) -> np.ndarray:
    """Per-token gradient norms [N, T]; CLS and padding are zero."""
    g = np.asarray(embedding_grads, dtype=np.float64)
    if not np.isfinite(g).all():
        where = f" at step {step}" if step is not None else ""
        raise NumericError(f"non-finite embedding gradients{where}")
    scores = np.sqrt((g * g).sum(axis=-1))
    return np.where(scorable_mask(mask), scores, 0.0)


def select_salient(scores: np.ndarray, ratio: float, attention_mask: np.ndarray | None = None) -> SalientSet:
    """Top ``max(1, floor(ratio * T_real))`` tokens per sentence.

    ``T_real`` counts unpadded positions including CLS; CLS itself is never
    chosen. Ties go to the smaller position.
    """
    if not 0.0 < ratio <= 1.0:
        raise ParameterError(f"ratio must be in (0, 1], got {ratio}")
    scores = np.asarray(scores, dtype=np.float64)
    if attention_mask is None:
        attention_mask = np.ones_like(scores, dtype=np.int64)
    attention_mask = np.asarray(attention_mask)
    eligible = scorable_mask(attention_mask)
    N, T = scores.shape
    mask = np.zeros((N, T), dtype=np.int64)
    chosen = []
    for i in range(N):
        t_real = int(attention_mask[i].sum())
        k = max(1, math.floor(ratio * t_real))
        cand = np.flatnonzero(eligible[i])
        # stable sort on negated scores keeps the earliest index among ties
        order = cand[np.argsort(-scores[i, cand], kind="stable")]
        pick = np.sort(order[:k])
        mask[i, pick] = 1
        chosen.append(pick)
    return SalientSet(chosen, mask)


def pgd_attack(e0, salient: SalientSet | np.ndarray, loss_fn: Callable[[Tensor], Tensor],
               cfg: PTDConfig) -> np.ndarray:
    """Projected gradient-sign ascent on salient token embeddings.

    Returns the perturbation ``delta`` with the shape of ``e0``. Each salient
    token's step is ``alpha * sign(grad / ||grad||)`` followed by projection
    onto the L2 ball of radius ``epsilon`` around its clean embedding; the
    whole matrix is finally rescaled to respect the Frobenius cap.
    """
    e0 = np.asarray(e0.data if isinstance(e0, Tensor) else e0, dtype=np.float64)
    mask = salient.mask if isinstance(salient, SalientSet) else np.asarray(salient)
    sel = mask.astype(bool)
    delta = np.zeros_like(e0)
    for it in range(cfg.pgd_steps):
        x = Tensor(e0 + delta, requires_grad=True)
        loss = loss_fn(x)
        if not np.isfinite(loss.data).all():
            raise NumericError(f"non-finite loss during attack iteration {it}")
        tn.backward(loss)
        g = x.grad
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient during attack iteration {it}")
        gnorm = np.maximum(np.sqrt((g * g).sum(axis=-1, keepdims=True)), GRAD_NORM_FLOOR)
        step = cfg.alpha * np.sign(g / gnorm)
        delta = np.where(sel[..., None], delta + step, 0.0)
        norms = np.sqrt((delta * delta).sum(axis=-1, keepdims=True))
        delta = delta * np.minimum(1.0, cfg.epsilon / np.maximum(norms, GRAD_NORM_FLOOR))
    cap = cfg.cap_for(int(sel.sum()))
    fro = float(np.sqrt((delta * delta).sum()))
    if fro > cap:
        delta = delta * (cap / fro)
    return delta


def apply_perturbation(e, delta: np.ndarray, mask: np.ndarray):
    """Add ``delta`` at masked positions only; works on arrays and tensors.

    For a tensor input the perturbation is a constant, so gradients reach the
    clean embeddings but not the attack.
    """
    sel = np.asarray(mask).astype(bool)[..., None]
    masked_delta = np.where(sel, delta, 0.0)
    if isinstance(e, Tensor):
        return tn.add(e, Tensor(masked_delta))
    e = np.asarray(e, dtype=np.float64)
    return np.where(sel, e + delta, e)


def focal_loss(p, labels: np.ndarray, valid_mask: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Mean of ``-(1 - p_t)^gamma * log(p_t)`` over valid positions."""
    p = tn.as_tensor(p)
    if gamma < 0:
        raise ParameterError(f"gamma must be non-negative, got {gamma}")
    if not ((p.data > 0) & (p.data < 1)).all():
        raise ContractError("focal_loss needs predictions strictly inside (0, 1)")
    labels = np.asarray(labels).astype(bool)
    valid = np.asarray(valid_mask).astype(bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("focal_loss needs at least one valid position")
    # p_t = p where labelled perturbed, 1 - p otherwise
    sign = np.where(labels, 1.0, -1.0)
    offset = np.where(labels, 0.0, 1.0)
    p_t = tn.add(tn.mul(p, Tensor(sign)), Tensor(offset))
    logp = tn.log(p_t, floor=LOG_FLOOR)
    if gamma == 0:
        per_token = tn.mul(logp, -1.0)
    else:
        weight = tn.power(tn.sub(1.0, p_t), gamma)
        per_token = tn.mul(tn.mul(weight, logp), -1.0)
    per_token = tn.mul(per_token, Tensor(valid.astype(np.float64)))
    return tn.mul(tn.sum(per_token), 1.0 / n_valid)
