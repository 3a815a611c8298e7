"""CARL training loop: one step combines the contrastive objective on a clean
forward pass with perturbed-token detection on an attacked forward pass."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .data import Corpus, TokenBatch, make_batches
from .encoder import (EncoderConfig, EncoderParams, detect_perturbed, embed, encode,
                      init_params, predict, project, sentence_embeddings, target_copy)
from .errors import (CheckpointFormatError, CheckpointIOError, ContractError, DataError,
                     NumericError, ParameterError)
from .mccl import MCCLConfig, MomentumState, ema_update, mccl_objective
from .ptd import (PTDConfig, apply_perturbation, focal_loss, pgd_attack, scorable_mask,
                  select_salient, token_saliency)
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CARL"
CHECKPOINT_VERSION = 1
METRICS_COLUMNS = ("step", "l_mccl", "l_ptd", "l_total", "lr", "momentum",
                   "eval_r_valence", "eval_r_arousal")

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    lambda1: float = 0.8
    lambda2: float = 0.2
    lr_peak: float = 1e-3
    epochs: int = 2
    batch_size: int = 16
    warmup_frac: float = 0.10
    restart_period: int | None = None
    weight_decay: float = 0.01
    seed: int = 0
    eval_every: int = 10
    deterministic: bool = True
    holdout_frac: float = 0.2

    def __post_init__(self):
        if not self.lambda1 + self.lambda2 > 0:
            raise ParameterError("lambda1 + lambda2 must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ParameterError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if not self.lr_peak > 0:
            raise ParameterError("lr_peak must be positive")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be at least 2")
        if self.epochs < 1:
            raise ParameterError("epochs must be at least 1")
        if self.restart_period is not None and self.restart_period < 1:
            raise ParameterError("restart_period must be at least 1")


@dataclass
class StepReport:
    l_mccl: float
    l_ptd: float
    l_total: float
    m_used: float
    lr_used: float
    n_perturbed: int


@dataclass
class TrainState:
    online: EncoderParams
    target: EncoderParams
    moments: dict[str, tuple[np.ndarray, np.ndarray]]
    k: int
    K: int
    momentum: MomentumState
    seed: int
    best_metric: float = -math.inf
    best_step: int = -1

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.online.config


@dataclass
class TrainResult:
    state: TrainState
    log: list[dict]
    best: TrainState | None = None


def new_state(enc_cfg: EncoderConfig, total_steps: int, seed: int = 0,
              mccl_cfg: MCCLConfig | None = None) -> TrainState:
    mccl_cfg = mccl_cfg or MCCLConfig()
    online = init_params(enc_cfg, seed)
    target = target_copy(online)
    moments = {name: (np.zeros_like(t.data), np.zeros_like(t.data)) for name, t in online.items()}
    K = max(1, total_steps)
    mom = MomentumState(mccl_cfg.m_initial, 0, K, mccl_cfg.m_initial)
    return TrainState(online, target, moments, 0, K, mom, seed)


def total_loss(l_mccl, l_ptd, lambda1: float, lambda2: float):
    """Weighted sum of the two objectives; tensors stay differentiable."""
    for v in (l_mccl, l_ptd):
        val = v.data if isinstance(v, Tensor) else np.asarray(v)
        if not np.isfinite(val).all():
            raise NumericError("loss component is not finite")
    if isinstance(l_mccl, Tensor) or isinstance(l_ptd, Tensor):
        return tn.add(tn.mul(l_mccl, lambda1), tn.mul(l_ptd, lambda2))
    return lambda1 * float(l_mccl) + lambda2 * float(l_ptd)


def lr_schedule(k: int, K: int, cfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay restarting every ``restart_period`` steps."""
    if not 0 <= k <= K:
        raise ContractError(f"step {k} outside [0, {K}]")
    warm = math.floor(cfg.warmup_frac * K)
    if k < warm:
        return cfg.lr_peak * k / warm
    pos = k - warm
    period = cfg.restart_period or max(1, K - warm)
    # cycles are half-open on the left, (c*P, (c+1)*P], so the last step of a
    # cycle reaches the floor and the next one restarts at the peak
    if pos == 0:
        frac = 0.0
    else:
        cycle = (pos - 1) // period
        frac = (pos - cycle * period) / period
    return max(0.0, cfg.lr_peak * (math.cos(math.pi * frac) + 1.0) / 2.0)


def optimizer_step(state: TrainState, grads: dict[str, np.ndarray], lr: float,
                   weight_decay: float = 0.0, t: int | None = None) -> None:
    """AdamW with decoupled weight decay, online parameters only."""
    if lr < 0:
        raise ParameterError("learning rate must be non-negative")
    t = state.k + 1 if t is None else t
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {state.k}")
    for name, param in state.online.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        m, v = state.moments[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        param.data -= lr * update + lr * weight_decay * param.data


# ---------------------------------------------------------------------------
# one step


def _step_seeds(seed: int, k: int) -> tuple[int, int]:
    ss = np.random.SeedSequence([seed, k])
    a, b = ss.generate_state(2)
    return int(a), int(b)


def clean_forward(online: EncoderParams, target: EncoderParams, batch: TokenBatch,
                  mccl_cfg: MCCLConfig, dropout_seed: int | None, use_dropout: bool = True):
    """Online forward (with dropout) against the dropout-free target.

    Returns ``(l_mccl, e0, z_target)`` where ``e0`` is the online embedding
    node whose gradient gives token saliency.
    """
    e0 = embed(online, batch.token_ids)
    _, sent = encode(online, batch, use_dropout=use_dropout, override_embeddings=e0, seed=dropout_seed)
    q = predict(online, project(online, sent))
    _, t_sent = encode(target.detached(), batch, use_dropout=False)
    z = project(target.detached(), t_sent)
    return mccl_objective(q, z, batch.labels_va, mccl_cfg), e0, z.data


def attack_loss_fn(online: EncoderParams, batch: TokenBatch, z_target: np.ndarray,
                   mccl_cfg: MCCLConfig) -> Callable[[Tensor], Tensor]:
    """MCCL loss as a function of the online input embeddings only."""
    frozen = online.detached()

    def loss_fn(emb: Tensor) -> Tensor:
        _, sent = encode(frozen, batch, use_dropout=False, override_embeddings=emb)
        q = predict(frozen, project(frozen, sent))
        return mccl_objective(q, z_target, batch.labels_va, mccl_cfg)
    return loss_fn


def detection_loss(online: EncoderParams, batch: TokenBatch, delta: np.ndarray,
                   salient_mask: np.ndarray, ptd_cfg: PTDConfig, dropout_seed: int | None,
                   use_dropout: bool = True) -> tuple[Tensor, Tensor]:
    """Focal loss of the detection head on the perturbed forward; returns (loss, probs)."""
    e = embed(online, batch.token_ids)
    perturbed = apply_perturbation(e, delta, salient_mask)
    hidden, _ = encode(online, batch, use_dropout=use_dropout, override_embeddings=perturbed,
                       seed=dropout_seed)
    probs = detect_perturbed(online, hidden)
    return focal_loss(probs, salient_mask, scorable_mask(batch.attention_mask), ptd_cfg.gamma), probs


def train_step(state: TrainState, batch: TokenBatch, cfg: TrainConfig,
               mccl_cfg: MCCLConfig | None = None, ptd_cfg: PTDConfig | None = None) -> StepReport:
    mccl_cfg = mccl_cfg or MCCLConfig()
    ptd_cfg = ptd_cfg or PTDConfig()
    if batch.N < 2:
        raise ContractError("a contrastive step needs at least 2 sequences")
    k = state.k
    seed_clean, seed_ptd = _step_seeds(state.seed, k)
    online = state.online
    online.zero_grad()

    l_mccl, e0, z_target = clean_forward(online, state.target, batch, mccl_cfg, seed_clean)
    if not np.isfinite(l_mccl.data).all():
        raise NumericError(f"non-finite contrastive loss at step {k}")
    tn.backward(l_mccl)
    grads = {name: cfg.lambda1 * p.grad for name, p in online.items()}

    n_perturbed = 0
    l_ptd_value = 0.0
    if cfg.lambda2 != 0:
        scores = token_saliency(e0.grad, batch.attention_mask, step=k)
        salient = select_salient(scores, ptd_cfg.ratio, batch.attention_mask)
        delta = pgd_attack(e0.data, salient,
                           attack_loss_fn(online, batch, z_target, mccl_cfg), ptd_cfg)
        online.zero_grad()
        l_ptd, _ = detection_loss(online, batch, delta, salient.mask, ptd_cfg, seed_ptd)
        if not np.isfinite(l_ptd.data).all():
            raise NumericError(f"non-finite detection loss at step {k}")
        tn.backward(l_ptd)
        for name, p in online.items():
            grads[name] = grads[name] + cfg.lambda2 * p.grad
        l_ptd_value = l_ptd.item()
        n_perturbed = salient.total

    l_mccl_value = l_mccl.item()
    l_total = total_loss(l_mccl_value, l_ptd_value, cfg.lambda1, cfg.lambda2)

    lr = lr_schedule(k, state.K, cfg)
    optimizer_step(state, grads, lr, cfg.weight_decay)
    online.zero_grad()

    m = state.momentum.advance(k)
    ema_update(state.target, online, m)
    state.k = k + 1
    return StepReport(l_mccl_value, l_ptd_value, l_total, m, lr, n_perturbed)


def carl_objective(online: EncoderParams, target: EncoderParams, batch: TokenBatch,
                   delta: np.ndarray, salient_mask: np.ndarray, cfg: TrainConfig,
                   mccl_cfg: MCCLConfig, ptd_cfg: PTDConfig, seeds: tuple[int, int] = (0, 1),
                   use_dropout: bool = True) -> Tensor:
    """Total loss as one differentiable graph with a fixed perturbation.

    Gradient-equivalent to what :func:`train_step` accumulates; used for
    finite-difference checks.
    """
    l_mccl, _, _ = clean_forward(online, target, batch, mccl_cfg, seeds[0], use_dropout)
    l_ptd, _ = detection_loss(online, batch, delta, salient_mask, ptd_cfg, seeds[1], use_dropout)
    return total_loss(l_mccl, l_ptd, cfg.lambda1, cfg.lambda2)


# ---------------------------------------------------------------------------
# full runs


def split_corpus(corpus: Corpus, holdout_frac: float, seed: int) -> tuple[Corpus, Corpus]:
    n = len(corpus)
    order = np.random.default_rng([seed, 7919]).permutation(n)
    n_hold = int(round(holdout_frac * n))
    return corpus.subset(sorted(order[n_hold:])), corpus.subset(sorted(order[:n_hold]))


def evaluate_state(state: TrainState, corpus: Corpus, seed: int = 0) -> tuple[float, float]:
    """Held-out valence and arousal Pearson r of ridge probes on CLS embeddings."""
    from .evaluation import regression_probe

    emb = sentence_embeddings(state.online, corpus.records)
    labels = corpus.labels()
    r_v = regression_probe(emb, labels[:, 0], seed).pearson_r
    r_a = regression_probe(emb, labels[:, 1], seed).pearson_r
    return r_v, r_a


def attack_batch(online: EncoderParams, target: EncoderParams, batch: TokenBatch,
                 mccl_cfg: MCCLConfig, ptd_cfg: PTDConfig):
    """Dropout-free saliency selection plus PGD on one batch.

    Returns ``(e0, delta, salient, loss_fn)``; ``loss_fn`` maps input
    embeddings to the MCCL loss of the frozen online branch.
    """
    l_mccl, e0, z = clean_forward(online, target, batch, mccl_cfg, None, use_dropout=False)
    tn.backward(l_mccl)
    salient = select_salient(token_saliency(e0.grad, batch.attention_mask),
                             ptd_cfg.ratio, batch.attention_mask)
    online.zero_grad()
    loss_fn = attack_loss_fn(online, batch, z, mccl_cfg)
    return e0.data, pgd_attack(e0.data, salient, loss_fn, ptd_cfg), salient, loss_fn


def detection_scores(state: TrainState, corpus: Corpus, mccl_cfg: MCCLConfig | None = None,
                     ptd_cfg: PTDConfig | None = None, batch_size: int = 16,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Detector probabilities and perturbed/clean labels for every scorable
    token of ``corpus``, attacked the same way as in training."""
    mccl_cfg = mccl_cfg or MCCLConfig()
    ptd_cfg = ptd_cfg or PTDConfig()
    online = state.online
    frozen = online.detached()
    scores, labels = [], []
    for batch in make_batches(corpus, batch_size, seed, state.encoder_config.max_len):
        e0, delta, salient, _ = attack_batch(online, state.target, batch, mccl_cfg, ptd_cfg)
        hidden, _ = encode(frozen, batch, override_embeddings=Tensor(apply_perturbation(e0, delta, salient.mask)))
        valid = scorable_mask(batch.attention_mask).astype(bool)
        scores.append(detect_perturbed(frozen, hidden).data[valid])
        labels.append(salient.mask[valid])
    return np.concatenate(scores), np.concatenate(labels)


def steps_per_epoch(n_records: int, batch_size: int) -> int:
    full, rem = divmod(n_records, batch_size)
    return full + (1 if rem >= 2 else 0)


def run_training(corpus: Corpus, cfg: TrainConfig, enc_cfg: EncoderConfig | None = None,
                 mccl_cfg: MCCLConfig | None = None, ptd_cfg: PTDConfig | None = None,
                 eval_corpus: Corpus | None = None, state: TrainState | None = None,
                 max_steps: int | None = None,
                 on_step: Callable[[int, StepReport], None] | None = None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs, or resume ``state`` where it stopped.

    Without ``eval_corpus`` a seeded ``holdout_frac`` split of ``corpus`` is
    held out for the periodic probes. ``max_steps`` stops early (used to
    produce resumable partial runs).
    """
    enc_cfg = enc_cfg or EncoderConfig()
    mccl_cfg = mccl_cfg or MCCLConfig()
    ptd_cfg = ptd_cfg or PTDConfig()
    if len(corpus) < 2:
        raise DataError("training needs at least 2 records")
    train = corpus
    held = eval_corpus
    if held is None and cfg.holdout_frac > 0:
        train, held = split_corpus(corpus, cfg.holdout_frac, cfg.seed)
    if held is not None and len(held) < 10:
        held = None
    per_epoch = steps_per_epoch(len(train), cfg.batch_size)
    if per_epoch < 1:
        raise DataError("training split too small for one batch")
    K = per_epoch * cfg.epochs
    if state is None:
        state = new_state(enc_cfg, K, cfg.seed, mccl_cfg)
    elif state.K != K:
        raise ContractError(f"checkpoint expects {state.K} total steps, this run has {K}")

    history: list[dict] = []
    best: TrainState | None = None
    stop = K if max_steps is None else min(K, max_steps)
    batches: list[TokenBatch] = []
    cur_epoch = -1
    while state.k < stop:
        epoch, pos = divmod(state.k, per_epoch)
        if epoch != cur_epoch:
            batches = make_batches(train, cfg.batch_size, seed=_epoch_seed(cfg.seed, epoch),
                                   max_len=enc_cfg.max_len)
            cur_epoch = epoch
        report = train_step(state, batches[pos], cfg, mccl_cfg, ptd_cfg)
        row = {"step": state.k, "l_mccl": report.l_mccl, "l_ptd": report.l_ptd,
               "l_total": report.l_total, "lr": report.lr_used, "momentum": report.m_used,
               "eval_r_valence": None, "eval_r_arousal": None}
        if held is not None and (state.k % cfg.eval_every == 0 or state.k == K):
            r_v, r_a = evaluate_state(state, held, cfg.seed)
            row["eval_r_valence"], row["eval_r_arousal"] = r_v, r_a
            score = (r_v + r_a) / 2.0
            if score > state.best_metric:
                state.best_metric, state.best_step = score, state.k
                best = snapshot(state)
        history.append(row)
        if on_step is not None:
            on_step(state.k, report)
        log.debug("step %d l_mccl=%.5f l_ptd=%.5f", state.k, report.l_mccl, report.l_ptd)
    return TrainResult(state, history, best)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 104729, epoch]).generate_state(1)[0])


def snapshot(state: TrainState) -> TrainState:
    return TrainState(
        online=state.online.clone(),
        target=state.target.clone(requires_grad=False),
        moments={k: (m.copy(), v.copy()) for k, (m, v) in state.moments.items()},
        k=state.k, K=state.K, momentum=copy.copy(state.momentum), seed=state.seed,
        best_metric=state.best_metric, best_step=state.best_step)


# ---------------------------------------------------------------------------
# metrics log


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in METRICS_COLUMNS])


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = []
        for raw in csv.DictReader(fh):
            rows.append({k: (None if v == "" else (int(v) if k == "step" else float(v)))
                         for k, v in raw.items()})
    return rows


# ---------------------------------------------------------------------------
# checkpoints: b"CARL", u32 version, u64 manifest length, JSON manifest, float64 payload


def save_checkpoint(state: TrainState, path: str | Path, extra: dict | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for name, t in state.online.items():
        arrays.append(("online/" + name, t.data))
    for name, t in state.target.items():
        arrays.append(("target/" + name, t.data))
    for name, (m, v) in state.moments.items():
        arrays.append(("adam_m/" + name, m))
        arrays.append(("adam_v/" + name, v))
    manifest = {
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "encoder": state.online.config.to_dict(),
        "k": state.k,
        "K": state.K,
        "momentum": asdict(state.momentum),
        "seed": state.seed,
        "best_metric": None if not math.isfinite(state.best_metric) else state.best_metric,
        "best_step": state.best_step,
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _read_exact(raw: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(raw):
        raise CheckpointIOError(f"checkpoint truncated while reading {what}")
    return raw[offset:offset + n]


def read_checkpoint_manifest(path: str | Path) -> tuple[dict, bytes, int]:
    raw = Path(path).read_bytes()
    magic = _read_exact(raw, 0, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"not a CARL checkpoint (magic {magic!r})")
    (version,) = struct.unpack("<I", _read_exact(raw, 4, 4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<Q", _read_exact(raw, 8, 8, "manifest length"))
    try:
        manifest = json.loads(_read_exact(raw, 16, mlen, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError("corrupt checkpoint manifest") from exc
    return manifest, raw, 16 + mlen


def load_checkpoint(path: str | Path) -> TrainState:
    manifest, raw, offset = read_checkpoint_manifest(path)
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        chunk = _read_exact(raw, offset, 8 * count, entry["name"])
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(raw):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    enc_cfg = EncoderConfig(**manifest["encoder"])

    def branch(prefix: str, requires_grad: bool) -> EncoderParams:
        return EncoderParams({n[len(prefix):]: Tensor(a.copy(), requires_grad=requires_grad, name=n[len(prefix):])
                              for n, a in arrays.items() if n.startswith(prefix)}, enc_cfg)

    online = branch("online/", True)
    target = branch("target/", False)
    moments = {name: (arrays["adam_m/" + name].copy(), arrays["adam_v/" + name].copy())
               for name in online.names()}
    best = manifest.get("best_metric")
    return TrainState(online, target, moments, int(manifest["k"]), int(manifest["K"]),
                      MomentumState(**manifest["momentum"]), int(manifest["seed"]),
                      -math.inf if best is None else float(best), int(manifest["best_step"]))
