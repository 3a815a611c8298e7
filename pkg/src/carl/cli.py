"""Command-line entry point: ``carl synth | train | eval | export-embeddings``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import SECTIONS, RunConfig, build_config, load_config
from .data import VOCAB_SIZE, Corpus, generate_synthetic, load_corpus, save_corpus
from .encoder import sentence_embeddings
from .errors import (CarlError, CheckpointFormatError, CheckpointIOError, CompatibilityError,
                     ConfigError, DataError, NumericError)
from .trainer import (TrainState, load_checkpoint, read_metrics_csv, run_training,
                      save_checkpoint, write_metrics_csv)

log = logging.getLogger("carl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

TASKS = ("valence", "arousal", "emotion", "geometry", "pca")

_NUM = {"type": "number"}
_OPT_NUM = {"type": ["number", "null"]}

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["checkpoint", "corpus", "n", "d", "tasks", "results"],
    "properties": {
        "checkpoint": {"type": "string"},
        "corpus": {"type": "string"},
        "n": {"type": "integer", "minimum": 0},
        "d": {"type": "integer", "minimum": 1},
        "split_seed": {"type": "integer"},
        "tasks": {"type": "array", "items": {"enum": list(TASKS)}},
        "results": {
            "type": "object",
            "properties": {
                "valence": {"$ref": "#/definitions/regression"},
                "arousal": {"$ref": "#/definitions/regression"},
                "emotion": {"$ref": "#/definitions/classification"},
                "geometry": {
                    "type": "object",
                    "required": ["alignment", "uniformity"],
                    "properties": {"alignment": {"type": "number", "minimum": 0},
                                   "uniformity": {"type": "number", "maximum": 0}},
                },
                "pca": {
                    "type": "object",
                    "required": ["path", "explained_variance"],
                    "properties": {"path": {"type": "string"},
                                   "explained_variance": {"type": "array", "items": _NUM}},
                },
            },
            "additionalProperties": False,
        },
    },
    "definitions": {
        "regression": {
            "type": "object",
            "required": ["task", "mae", "pearson_r", "spearman_rho"],
            "properties": {"task": {"type": "string"},
                           "mae": {"type": "number", "minimum": 0},
                           "pearson_r": {"type": "number", "minimum": -1, "maximum": 1},
                           "spearman_rho": {"type": "number", "minimum": -1, "maximum": 1}},
        },
        "classification": {
            "type": "object",
            "required": ["task", "accuracy", "precision", "recall", "f1"],
            "properties": {k: {"type": "number", "minimum": 0, "maximum": 1}
                           for k in ("accuracy", "precision", "recall", "f1")},
        },
    },
}


# ---------------------------------------------------------------------------
# flags generated from the config dataclasses


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _field_parser(tp):
    if tp is bool or tp == "bool":
        return lambda s: {"true": True, "1": True, "false": False, "0": False}[s.lower()]
    text = str(tp)
    if "int" in text and "float" not in text:
        return int
    return float


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for section, cls in SECTIONS.items():
        group = p.add_argument_group(f"[{section}] overrides")
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            group.add_argument(_flag(f.name), dest=f"{section}.{f.name}", default=None,
                               type=_field_parser(hints[f.name]), metavar=f.name.upper())


def _collect_overrides(args: argparse.Namespace) -> dict:
    out: dict = {}
    for key, value in vars(args).items():
        if "." in key and value is not None:
            section, name = key.split(".", 1)
            out.setdefault(section, {})[name] = value
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        base = load_config(args.config, preset=args.preset).to_dict()
    else:
        base = build_config(args.preset or "desk").to_dict()
    for section, values in _collect_overrides(args).items():
        base[section].update(values)
    for key in ("corpus", "eval_corpus", "out_dir"):
        if getattr(args, key, None):
            base[key] = getattr(args, key)
    if getattr(args, "scale", None):
        base["scale"] = args.scale
    return build_config(base.pop("preset"), base)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args: argparse.Namespace) -> int:
    corpus = generate_synthetic(args.n_per_quadrant, noise=args.noise, seed=args.seed)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} records to {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not cfg.corpus:
        raise ConfigError("no corpus given (set 'corpus' in the config or pass --corpus)")
    corpus = load_corpus(cfg.corpus, cfg.scale)
    held = load_corpus(cfg.eval_corpus, cfg.scale) if cfg.eval_corpus else None
    state = None
    resumed_at = 0
    if args.resume:
        state = load_checkpoint(args.resume)
        _check_compatible(state, cfg.encoder.max_len, cfg.encoder.vocab_size)
        resumed_at = state.k
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_training(corpus, cfg.train, cfg.encoder, cfg.mccl, cfg.ptd,
                          eval_corpus=held, state=state, max_steps=args.max_steps)
    rows = result.log
    metrics = out / "metrics.csv"
    if resumed_at and metrics.exists():
        # keep the rows logged before the resume point
        rows = [r for r in read_metrics_csv(metrics) if r["step"] <= resumed_at] + rows
    write_metrics_csv(rows, metrics)
    extra = {"config": cfg.to_dict()}
    save_checkpoint(result.state, out / "final.ckpt", extra)
    if result.best is not None:
        save_checkpoint(result.best, out / "best.ckpt", extra)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    last = rows[-1] if rows else None
    if last is not None:
        print(f"step {last['step']}/{result.state.K} l_total={last['l_total']:.6f}")
    print(f"outputs in {out}")
    return EXIT_OK


def _check_compatible(state: TrainState, max_len: int | None, vocab_size: int = VOCAB_SIZE) -> None:
    enc = state.encoder_config
    if enc.vocab_size != vocab_size:
        raise CompatibilityError(f"checkpoint vocabulary {enc.vocab_size} != tokenizer vocabulary {vocab_size}")
    if max_len is not None and max_len != enc.max_len:
        raise CompatibilityError(f"checkpoint max_len {enc.max_len} != requested max_len {max_len}")


def _load_for_embedding(args: argparse.Namespace) -> tuple[TrainState, Corpus, np.ndarray]:
    state = load_checkpoint(args.checkpoint)
    _check_compatible(state, args.max_len)
    corpus = load_corpus(args.corpus, tuple(args.scale))
    emb = sentence_embeddings(state.online, corpus.records)
    if not np.isfinite(emb).all():
        raise NumericError("non-finite sentence embeddings")
    return state, corpus, emb


def parse_tasks(text: str) -> list[str]:
    tasks = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in tasks if t not in TASKS]
    if bad or not tasks:
        raise ConfigError(f"unknown task(s) {bad}; valid tasks: {', '.join(TASKS)}")
    return tasks


def evaluate_embeddings(emb: np.ndarray, corpus: Corpus, tasks: list[str], split_seed: int = 0,
                        pca_path: str | Path | None = None) -> dict:
    labels = corpus.labels()
    tags = [r.emotion for r in corpus.records]
    results: dict = {}
    if "valence" in tasks:
        results["valence"] = ev.regression_probe(emb, labels[:, 0], split_seed, "valence").to_dict()
    if "arousal" in tasks:
        results["arousal"] = ev.regression_probe(emb, labels[:, 1], split_seed, "arousal").to_dict()
    if "emotion" in tasks or "geometry" in tasks:
        if any(t is None for t in tags):
            raise DataError("emotion tags are required for the emotion and geometry tasks")
    if "emotion" in tasks:
        results["emotion"] = ev.classification_probe(emb, tags, split_seed, task="emotion").to_dict()
    if "geometry" in tasks:
        results["geometry"] = ev.geometry(emb, tags, seed=split_seed).to_dict()
    if "pca" in tasks:
        coords, fracs = ev.pca_project(emb, 2, seed=split_seed)
        path = str(pca_path) if pca_path else "pca.csv"
        ev.write_pca_csv(path, coords, tags)
        results["pca"] = {"path": path, "explained_variance": [float(f) for f in fracs]}
    return results


def cmd_eval(args: argparse.Namespace) -> int:
    tasks = parse_tasks(args.tasks)
    _, corpus, emb = _load_for_embedding(args)
    pca_path = args.pca_out or str(Path(args.out).with_suffix("")) + "_pca.csv"
    report = {
        "checkpoint": str(args.checkpoint),
        "corpus": str(args.corpus),
        "n": int(emb.shape[0]),
        "d": int(emb.shape[1]),
        "split_seed": args.split_seed,
        "tasks": tasks,
        "results": evaluate_embeddings(emb, corpus, tasks, args.split_seed, pca_path),
    }
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"report written to {args.out}")
    return EXIT_OK


def write_embeddings(emb: np.ndarray, path: str | Path, fmt: str) -> None:
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(["id"] + [f"e{j}" for j in range(emb.shape[1])]) + "\n")
            for i, row in enumerate(emb):
                fh.write(",".join([str(i)] + [repr(float(v)) for v in row]) + "\n")
    else:
        path.write_bytes(np.ascontiguousarray(emb, dtype="<f8").tobytes())
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps({"n": int(emb.shape[0]), "d": int(emb.shape[1])}) + "\n")


def read_embeddings(path: str | Path) -> np.ndarray:
    """Inverse of the binary export (reads the ``.json`` sidecar for the shape)."""
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    flat = np.frombuffer(path.read_bytes(), dtype="<f8")
    return flat.reshape(meta["n"], meta["d"]).astype(np.float64)


def cmd_export(args: argparse.Namespace) -> int:
    _, _, emb = _load_for_embedding(args)
    write_embeddings(emb, args.out, args.format)
    print(f"exported {emb.shape[0]} x {emb.shape[1]} embeddings to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the four-quadrant synthetic corpus as JSON lines")
    p.add_argument("--n-per-quadrant", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a TOML/JSON config and/or flags")
    p.add_argument("--config")
    p.add_argument("--preset", choices=("paper", "desk", "smoke"))
    p.add_argument("--corpus")
    p.add_argument("--eval-corpus")
    p.add_argument("--scale", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--out-dir")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this global step")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, helptext in (("eval", "probe, geometry and PCA report for a checkpoint"),
                           ("export-embeddings", "dump sentence embeddings")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--scale", type=float, nargs=2, default=(-1.0, 1.0), metavar=("LO", "HI"))
        p.add_argument("--max-len", type=int, help="must match the checkpoint if given")
        p.add_argument("--out", required=True)
        if name == "eval":
            p.add_argument("--tasks", default=",".join(TASKS))
            p.add_argument("--split-seed", type=int, default=0)
            p.add_argument("--pca-out")
            p.set_defaults(func=cmd_eval)
        else:
            p.add_argument("--format", choices=("csv", "bin"), default="csv")
            p.set_defaults(func=cmd_export)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, CompatibilityError, CheckpointFormatError, CheckpointIOError, OSError)):
        return EXIT_DATA
    if isinstance(exc, CarlError):
        return EXIT_CONFIG
    raise exc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CarlError, OSError) as exc:
        code = exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
