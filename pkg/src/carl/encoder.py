"""Tiny pre-norm transformer encoder plus the projection, prediction and
perturbed-token detection heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as tn
from .data import VOCAB_SIZE, TokenBatch, collate
from .errors import ContractError, DimensionError, ParameterError
from .tensor import Tensor

NEG_INF = -1e9
# token and position tables start small relative to the unit-scale residual branches
EMB_STD = 0.25

ENCODER_PREFIXES = ("tok_emb", "pos_emb", "layer", "ln_f", "pooler")
PROJECTION_PREFIXES = ("proj",)


@dataclass
class EncoderConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 32
    dropout_p: float = 0.1
    d_proj: int = 32

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len", "d_proj"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be at least 1")
        if self.d_model % self.n_heads:
            raise ParameterError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderParams:
    """Named collection of learnable tensors for one branch."""

    def __init__(self, tensors: dict[str, Tensor], config: EncoderConfig):
        self.tensors = dict(tensors)
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def detached(self) -> "EncoderParams":
        """View sharing storage but excluded from gradient tracking."""
        return EncoderParams({k: Tensor(v.data) for k, v in self.tensors.items()}, self.config)

    def clone(self, prefixes: tuple[str, ...] | None = None, requires_grad: bool = True) -> "EncoderParams":
        picked = {k: Tensor(v.data.copy(), requires_grad=requires_grad, name=k)
                  for k, v in self.tensors.items()
                  if prefixes is None or k.startswith(prefixes)}
        return EncoderParams(picked, self.config)

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self.tensors.values()]))


def init_params(config: EncoderConfig, seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    d, f, p = config.d_model, config.d_ff, config.d_proj
    shapes: dict[str, tuple] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
    }
    for i in range(config.n_layers):
        pre = f"layer{i}."
        shapes.update({
            pre + "ln1.g": (d,), pre + "ln1.b": (d,),
            pre + "wq": (d, d), pre + "bq": (d,),
            pre + "wk": (d, d), pre + "bk": (d,),
            pre + "wv": (d, d), pre + "bv": (d,),
            pre + "wo": (d, d), pre + "bo": (d,),
            pre + "ln2.g": (d,), pre + "ln2.b": (d,),
            pre + "w1": (d, f), pre + "b1": (f,),
            pre + "w2": (f, d), pre + "b2": (d,),
        })
    shapes.update({
        "ln_f.g": (d,), "ln_f.b": (d,),
        "pooler.w": (d, d), "pooler.b": (d,),
        "proj.w1": (d, p), "proj.b1": (p,),
        "proj.w2": (p, p), "proj.b2": (p,),
        "pred.w1": (p, p), "pred.b1": (p,),
        "pred.w2": (p, p), "pred.b2": (p,),
        "detect.w": (d, 1), "detect.b": (1,),
    })
    tensors = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("tok_emb", "pos_emb"):
            value = rng.normal(0.0, EMB_STD, size=shape)
        elif len(shape) == 2:
            value = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        elif leaf == "g":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        tensors[name] = Tensor(value, requires_grad=True, name=name)
    return EncoderParams(tensors, config)


def target_copy(online: EncoderParams) -> EncoderParams:
    """Encoder and projection weights for the EMA target branch."""
    return online.clone(ENCODER_PREFIXES + PROJECTION_PREFIXES, requires_grad=False)


def embed(params: EncoderParams, token_ids: np.ndarray) -> Tensor:
    cfg = params.config
    token_ids = np.asarray(token_ids)
    if token_ids.size and (token_ids.max() >= cfg.vocab_size or token_ids.min() < 0):
        raise ContractError(f"token id {int(token_ids.max())} outside vocabulary of {cfg.vocab_size}")
    T = token_ids.shape[1]
    if T > cfg.max_len:
        raise ContractError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    tok = tn.gather_rows(params["tok_emb"], token_ids)
    pos = tn.gather_rows(params["pos_emb"], np.arange(T))
    return tn.add(tok, pos)


def _attention(params: EncoderParams, pre: str, x: Tensor, key_pad: np.ndarray,
               drop, n_heads: int) -> Tensor:
    N, T, d = x.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return tn.permute(tn.reshape(t, (N, T, n_heads, dh)), (0, 2, 1, 3))

    q = heads(tn.linear(x, params[pre + "wq"], params[pre + "bq"]))
    k = heads(tn.linear(x, params[pre + "wk"], params[pre + "bk"]))
    v = heads(tn.linear(x, params[pre + "wv"], params[pre + "bv"]))
    scores = tn.mul(tn.bmm(q, tn.permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    scores = tn.masked_fill(scores, key_pad[:, None, None, :], NEG_INF)
    weights = tn.softmax_rows(scores)
    ctx = tn.reshape(tn.permute(tn.bmm(weights, v), (0, 2, 1, 3)), (N, T, d))
    return drop(tn.linear(ctx, params[pre + "wo"], params[pre + "bo"]))


def encode(params: EncoderParams, batch: TokenBatch, use_dropout: bool = False,
           override_embeddings: Tensor | None = None, seed: int | None = None) -> tuple[Tensor, Tensor]:
    """Run the encoder; returns (hidden states [N, T, d], CLS sentence vectors [N, d]).

    ``override_embeddings`` replaces the token+position embedding sum, which is
    how perturbed embeddings are fed back in.
    """
    cfg = params.config
    if override_embeddings is None:
        x = embed(params, batch.token_ids)
    else:
        x = override_embeddings
        expected = (batch.N, batch.T, cfg.d_model)
        if tuple(x.shape) != expected:
            raise DimensionError(f"override embeddings have shape {x.shape}, expected {expected}")
        if batch.token_ids.max() >= cfg.vocab_size:
            raise ContractError("token id outside vocabulary")

    if use_dropout and cfg.dropout_p > 0:
        rng = np.random.default_rng(seed)

        def drop(t: Tensor) -> Tensor:
            return tn.dropout(t, cfg.dropout_p, rng)
    else:
        def drop(t: Tensor) -> Tensor:
            return t

    # no dropout on the embedding sum itself: it would swamp the small
    # perturbations the detection head has to find
    key_pad = np.asarray(batch.attention_mask) == 0
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        h = tn.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        x = tn.add(x, _attention(params, pre, h, key_pad, drop, cfg.n_heads))
        h = tn.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        h = tn.gelu(tn.linear(h, params[pre + "w1"], params[pre + "b1"]))
        x = tn.add(x, drop(tn.linear(h, params[pre + "w2"], params[pre + "b2"])))
    hidden = tn.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    sentence = tn.linear(tn.take(hidden, 0, axis=1), params["pooler.w"], params["pooler.b"])
    return hidden, sentence


def _mlp(params: EncoderParams, pre: str, x: Tensor) -> Tensor:
    h = tn.gelu(tn.linear(x, params[pre + "w1"], params[pre + "b1"]))
    return tn.linear(h, params[pre + "w2"], params[pre + "b2"])


def project(params: EncoderParams, sentence: Tensor) -> Tensor:
    return _mlp(params, "proj.", sentence)


def predict(params: EncoderParams, z: Tensor) -> Tensor:
    return _mlp(params, "pred.", z)


def detect_perturbed(params: EncoderParams, hidden: Tensor) -> Tensor:
    """Per-token probability that the token embedding was perturbed, [N, T]."""
    N, T, _ = hidden.shape
    logits = tn.linear(hidden, params["detect.w"], params["detect.b"])
    return tn.sigmoid(tn.reshape(logits, (N, T)))


def sentence_embeddings(params: EncoderParams, records, max_len: int | None = None,
                        batch_size: int = 64) -> np.ndarray:
    """Dropout-free CLS sentence vectors for a sequence of records."""
    max_len = max_len or params.config.max_len
    records = list(records)
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        _, sent = encode(params.detached(), collate(chunk, max_len))
        out.append(sent.data)
    if not out:
        return np.zeros((0, params.config.d_model))
    return np.concatenate(out, axis=0)
