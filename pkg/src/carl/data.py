"""Corpus loading, label normalisation, byte tokenisation and batching."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, ParameterError, ParseError, RangeError, SchemaError

CLS_ID = 256
PAD_ID = 257
VOCAB_SIZE = 258

# (name, valence centre, arousal centre)
QUADRANTS = (
    ("joy", 0.7, 0.7),
    ("calm", 0.7, -0.7),
    ("sadness", -0.7, -0.7),
    ("anger", -0.7, 0.7),
)

DEFAULT_THEMES = {
    "joy": ["thrilled", "party", "celebrate", "wonderful", "dance", "amazing",
            "cheering", "victory", "bright", "laughing", "festival", "awesome"],
    "calm": ["peaceful", "serene", "gentle", "quiet", "relaxed", "cozy",
             "soothing", "meadow", "content", "tranquil", "breeze", "restful"],
    "sadness": ["lonely", "gloomy", "tired", "grief", "empty", "bored",
                "weary", "mourning", "dull", "tears", "hopeless", "sorrow"],
    "anger": ["furious", "rage", "hostile", "scream", "attack", "panic",
              "outraged", "fight", "threat", "violent", "hatred", "terror"],
}


@dataclass(frozen=True)
class Record:
    text: str
    valence: float
    arousal: float
    emotion: str | None = None


@dataclass(frozen=True)
class Corpus:
    records: tuple[Record, ...]
    source_scale: tuple[float, float] = (-1.0, 1.0)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def labels(self) -> np.ndarray:
        return np.array([[r.valence, r.arousal] for r in self.records], dtype=np.float64).reshape(-1, 2)

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus(tuple(self.records[i] for i in indices), self.source_scale)


@dataclass(frozen=True)
class TokenBatch:
    token_ids: np.ndarray
    attention_mask: np.ndarray
    labels_va: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def N(self) -> int:
        return self.token_ids.shape[0]

    @property
    def T(self) -> int:
        return self.token_ids.shape[1]


def normalize_labels(x: float, lo: float, hi: float, index: int | None = None) -> float:
    """Min-max map ``x`` from [lo, hi] onto [-1, 1]."""
    if not hi > lo:
        raise ParameterError(f"label scale needs hi > lo, got ({lo}, {hi})")
    if not lo <= x <= hi:
        where = f" (record {index})" if index is not None else ""
        raise RangeError(f"label {x} outside scale [{lo}, {hi}]{where}")
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def load_corpus(path: str | Path, scale: tuple[float, float]) -> Corpus:
    lo, hi = scale
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}:{lineno}: expected a JSON object")
            for key in ("text", "valence", "arousal"):
                if key not in obj:
                    raise SchemaError(f"{path}:{lineno}: missing key {key!r}")
            text = obj["text"]
            if not isinstance(text, str) or not text:
                raise SchemaError(f"{path}:{lineno}: 'text' must be a non-empty string")
            try:
                v = float(obj["valence"])
                a = float(obj["arousal"])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{lineno}: labels must be numbers") from exc
            idx = len(records)
            emotion = obj.get("emotion")
            records.append(Record(text, normalize_labels(v, lo, hi, idx),
                                  normalize_labels(a, lo, hi, idx),
                                  None if emotion is None else str(emotion)))
    if not records:
        warnings.warn(f"corpus {path} is empty", stacklevel=2)
    return Corpus(tuple(records), (float(lo), float(hi)))


def save_corpus(corpus: Corpus | Sequence[Record], path: str | Path) -> None:
    records = corpus.records if isinstance(corpus, Corpus) else corpus
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            obj = {"text": r.text, "valence": r.valence, "arousal": r.arousal}
            if r.emotion is not None:
                obj["emotion"] = r.emotion
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def tokenize(text: str, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Byte-level ids prefixed by CLS, cut to ``max_len`` and padded with PAD."""
    if max_len < 2:
        raise ParameterError(f"max_len must be at least 2, got {max_len}")
    body = list(text.encode("utf-8"))[: max_len - 1]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1:1 + len(body)] = body
    mask = np.zeros(max_len, dtype=np.int64)
    mask[: 1 + len(body)] = 1
    return ids, mask


def detokenize(ids) -> str:
    raw = bytes(int(i) for i in ids if int(i) < 256)
    return raw.decode("utf-8", errors="replace")


def collate(records: Sequence[Record], max_len: int, indices=None) -> TokenBatch:
    """Tokenise records into one batch trimmed to its longest sequence."""
    toks = [tokenize(r.text, max_len) for r in records]
    ids = np.stack([t[0] for t in toks])
    mask = np.stack([t[1] for t in toks])
    T = int(mask.sum(axis=1).max())
    labels = np.array([[r.valence, r.arousal] for r in records], dtype=np.float64)
    if indices is None:
        indices = np.arange(len(records))
    return TokenBatch(ids[:, :T].copy(), mask[:, :T].copy(), labels,
                      np.asarray(indices, dtype=np.int64))


def make_batches(corpus: Corpus, batch_size: int, seed: int, max_len: int = 32,
                 shuffle: bool = True) -> list[TokenBatch]:
    if batch_size < 2:
        raise ParameterError(f"batch_size must be at least 2, got {batch_size}")
    n = len(corpus)
    if n < 2:
        raise ContractError(f"contrastive batching needs at least 2 records, got {n}")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            break
        batches.append(collate([corpus.records[i] for i in idx], max_len, idx))
    return batches


def generate_synthetic(n_per_quadrant: int, vocab_themes: Mapping[str, Sequence[str]] | Sequence[Sequence[str]] | None = None,
                       noise: float = 0.1, seed: int = 0) -> Corpus:
    """Four-quadrant valence/arousal corpus with theme words per quadrant.

    ``vocab_themes`` is either a mapping keyed by quadrant name or four word
    lists in quadrant order (joy, calm, sadness, anger).
    """
    if not 0.0 <= noise < 0.5:
        raise ParameterError(f"noise must be in [0, 0.5), got {noise}")
    if n_per_quadrant < 0:
        raise ParameterError("n_per_quadrant must be non-negative")
    if vocab_themes is None:
        vocab_themes = DEFAULT_THEMES
    if isinstance(vocab_themes, Mapping):
        themes = [list(vocab_themes[name]) for name, _, _ in QUADRANTS]
    else:
        themes = [list(t) for t in vocab_themes]
    if len(themes) != 4:
        raise ParameterError(f"need 4 theme lists, got {len(themes)}")
    for (name, _, _), words in zip(QUADRANTS, themes):
        if not words:
            raise ParameterError(f"theme list for quadrant {name!r} is empty")
    seen: set[str] = set()
    for words in themes:
        if seen & set(words):
            raise ParameterError(f"theme lists overlap on {sorted(seen & set(words))}")
        seen |= set(words)

    rng = np.random.default_rng(seed)
    records = []
    for (name, cv, ca), words in zip(QUADRANTS, themes):
        for _ in range(n_per_quadrant):
            length = int(rng.integers(5, 13))
            picks = rng.integers(0, len(words), size=length)
            text = " ".join(words[i] for i in picks)
            dv, da = rng.uniform(-noise, noise, size=2) if noise > 0 else (0.0, 0.0)
            v = float(np.clip(cv + dv, -1.0, 1.0))
            a = float(np.clip(ca + da, -1.0, 1.0))
            records.append(Record(text, v, a, name))
    return Corpus(tuple(records), (-1.0, 1.0))
