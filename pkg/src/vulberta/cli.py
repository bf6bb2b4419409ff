"""Command-line entry point: one subcommand per pipeline stage.

Stages talk only through files::

    extract -> train-tokenizer -> encode -> pretrain -> finetune -> evaluate / predict

Exit status is 0 on success, 1 on a validation error (bad flags, missing
inputs, invalid config or data) and 2 on a runtime failure. Logs go to
stderr; ``predict`` writes JSON lines to stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import warnings
from dataclasses import fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .ingest import SplitSpec, extract_from_directory, extract_functions, load_dataset, split
from .lexer import LexWarning, lex
from .model import PRESETS, preset
from .tokenizer import DEFAULT_MAX_SIZE, encode_batch, encode_source, load_vocab, save_vocab, train_bpe
from .train import (SchedulerConfig, TrainConfig, TrainingError, evaluate, finetune,
                    load_classifier, predict_proba, pretrain)

__all__ = ["main", "build_parser", "resolve_train_config", "CACHE_ENV"]

logger = logging.getLogger("vulberta")

CACHE_ENV = "VULBERTA_CACHE"

# TrainConfig fields that get their own flag; scheduler is flattened below.
_SCHEDULER_FLAGS = {f"scheduler_{f.name}": f.name for f in fields(SchedulerConfig)}


class UsageError(ConfigError):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _optional_int(text: str) -> Optional[int]:
    return None if text.lower() in ("none", "null") else int(text)


def _class_weights(text: str):
    if text.lower() in ("none", "null"):
        return None
    if text == "auto":
        return "auto"
    return [float(x) for x in text.split(",")]


_FIELD_TYPES = {
    "phase": str, "lr": float, "max_steps": _optional_int, "max_epochs": int, "batch_size": int,
    "class_weights": _class_weights, "seed": int, "checkpoint_every": int, "eval_every": int,
    "mask_rate": float, "max_len": int, "weight_decay": float,
    "early_stop_patience": _optional_int, "valid_fraction": float, "grad_accum": int, "dtype": str,
    "scheduler_factor": float, "scheduler_patience": int, "scheduler_min_lr": float,
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config (overrides --config)")
    g.add_argument("--config", help="JSON document with TrainConfig fields")
    for name, typ in _FIELD_TYPES.items():
        if name == "phase":
            continue
        opts = [f"--{name.replace('_', '-')}"]
        if "_" in name:
            opts.append(f"--{name}")
        g.add_argument(*opts, dest=name, type=typ, default=argparse.SUPPRESS)


def _read_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return obj


def resolve_train_config(phase: str, config: Optional[dict], flags: Dict[str, object]) -> TrainConfig:
    """Merge phase defaults, then the config document, then explicit flags."""
    merged = TrainConfig.for_phase(phase).to_dict()
    for layer in (config or {}, flags):
        layer = dict(layer)
        sched = layer.pop("scheduler", None)
        if sched is not None:
            if not isinstance(sched, dict):
                raise ConfigError("scheduler must be an object")
            unknown = sorted(set(sched) - set(merged["scheduler"]))
            if unknown:
                raise ConfigError(f"unknown scheduler fields: {unknown}")
            merged["scheduler"].update(sched)
        for flag, key in _SCHEDULER_FLAGS.items():
            if flag in layer:
                merged["scheduler"][key] = layer.pop(flag)
        unknown = sorted(set(layer) - set(merged))
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {unknown}")
        merged.update(layer)
    if merged["phase"] != phase:
        raise ConfigError(f"config phase {merged['phase']!r} does not match command {phase!r}")
    return TrainConfig.from_dict(merged)


def _train_config_from_args(args, phase: str) -> TrainConfig:
    flags = {k: getattr(args, k) for k in _FIELD_TYPES if hasattr(args, k)}
    config = _read_config(args.config) if args.config else None
    return resolve_train_config(phase, config, flags)


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and p != "-" and not os.path.isfile(p):
            raise InputError(f"no such file: {p}")


def _write_atomic(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_codes(path: str) -> List[str]:
    """``code`` fields of a JSONL file (labels, if any, are ignored)."""
    codes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                raise InputError(f"{path}:{lineno}: not valid JSON") from None
            if not isinstance(rec, dict) or not isinstance(rec.get("code"), str):
                raise InputError(f"{path}:{lineno}: record has no string 'code'")
            codes.append(rec["code"])
    if not codes:
        raise InputError(f"{path}: no functions")
    return codes


def _encode_codes(codes: Sequence[str], vocab, max_len: int) -> np.ndarray:
    ids, mask = encode_batch([encode_source(c, vocab, max_len) for c in codes])
    return np.stack([ids, mask])


def _load_encoded(path: str, vocab, max_len: int) -> np.ndarray:
    """Encoded ``[2, n, max_len]`` corpus from a ``.npy`` file or a JSONL of functions.

    JSONL input is encoded once and cached under ``$VULBERTA_CACHE`` keyed by
    file content, vocabulary and ``max_len``.
    """
    if path.endswith(".npy"):
        arr = np.load(path, allow_pickle=False)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise InputError(f"{path}: expected an encoded [2, n, max_len] array")
        if arr.shape[2] != max_len:
            raise ConfigError(f"{path}: encoded with max_len {arr.shape[2]}, config says {max_len}")
        return arr.astype(np.int64, copy=False)
    cache = os.environ.get(CACHE_ENV)
    cache_path = None
    if cache:
        h = hashlib.sha256()
        with open(path, "rb") as fh:
            h.update(fh.read())
        h.update(vocab.checksum.encode())
        h.update(str(max_len).encode())
        cache_path = os.path.join(cache, f"encoded-{h.hexdigest()[:32]}.npy")
        if os.path.isfile(cache_path):
            logger.info("using cached encoding %s", cache_path)
            return np.load(cache_path, allow_pickle=False)
    arr = _encode_codes(_read_codes(path), vocab, max_len)
    if cache_path:
        _write_atomic(cache_path, _npy_bytes(arr))
    return arr


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


# --- commands ------------------------------------------------------------------

def cmd_extract(args) -> int:
    if not os.path.isdir(args.dir):
        raise InputError(f"no such directory: {args.dir}")
    samples = extract_from_directory(args.dir)
    lines = [json.dumps({"code": s.code, "label": args.label, "origin": s.origin}, sort_keys=True)
             for s in samples]
    _write_atomic(args.out, "".join(line + "\n" for line in lines).encode("utf-8"))
    logger.info("extracted %d functions to %s", len(samples), args.out)
    return 0


def cmd_train_tokenizer(args) -> int:
    _require_files(args.corpus)
    codes = _read_codes(args.corpus)
    vocab = train_bpe((lex(c) for c in codes), max_size=args.max_vocab_size)
    save_vocab(vocab, args.out)
    logger.info("vocabulary of %d entries written to %s", len(vocab), args.out)
    return 0


def cmd_encode(args) -> int:
    _require_files(args.input, args.vocab)
    vocab = load_vocab(args.vocab)
    if args.max_len < 2:
        raise ConfigError("max_len must be >= 2")
    arr = _encode_codes(_read_codes(args.input), vocab, args.max_len)
    _write_atomic(args.out, _npy_bytes(arr))
    logger.info("encoded %d functions to %s", arr.shape[1], args.out)
    return 0


def cmd_pretrain(args) -> int:
    _require_files(args.corpus, args.vocab, args.config, args.resume)
    tc = _train_config_from_args(args, "pretrain")
    vocab = load_vocab(args.vocab)
    overrides = {k: getattr(args, k) for k in ("hidden", "layers", "heads", "ffn", "dropout")
                 if getattr(args, k) is not None}
    mc = preset(args.preset, len(vocab), max_positions=tc.max_len + 2, **overrides)
    arr = _load_encoded(args.corpus, vocab, tc.max_len)
    os.makedirs(args.out, exist_ok=True)
    path, log, _ = pretrain(mc, tc, (arr[0], arr[1]), out_dir=args.out,
                            vocab_checksum=vocab.checksum, resume_from=args.resume,
                            log_path=os.path.join(args.out, "pretrain-log.jsonl"))
    logger.info("pre-training finished at step %d: %s", log.records[-1]["step"], path)
    return 0


def _load_labelled(path: str, n_classes: int):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return load_dataset(path, n_classes=n_classes)


def cmd_finetune(args) -> int:
    _require_files(args.checkpoint, args.vocab, args.train, args.valid, args.config)
    tc = _train_config_from_args(args, "finetune")
    vocab = load_vocab(args.vocab)
    train = _load_labelled(args.train, args.n_classes)
    if args.valid:
        valid = _load_labelled(args.valid, args.n_classes)
    else:
        f = tc.valid_fraction
        train, valid, _ = split(list(train), SplitSpec((1 - f, f, 0.0), seed=tc.seed))
        if not valid:
            raise ConfigError("valid_fraction leaves no validation samples; pass --valid")
    os.makedirs(args.out, exist_ok=True)
    path, log, _ = finetune(args.checkpoint, args.head, tc, train, valid, vocab,
                            n_classes=args.n_classes, out_dir=args.out,
                            kernels=tuple(args.kernels), filters=args.filters,
                            log_path=os.path.join(args.out, f"{args.head}-log.jsonl"))
    logger.info("best checkpoint: %s", path)
    return 0


def cmd_evaluate(args) -> int:
    _require_files(args.checkpoint, args.data, args.vocab)
    vocab = load_vocab(args.vocab)
    test = _load_labelled(args.data, args.n_classes)
    report, _ = evaluate(args.checkpoint, test, vocab, report_path=args.out,
                         probs_path=args.probs, batch_size=args.batch_size)
    logger.info("report written to %s", args.out)
    return 0


def _functions_from_input(path: str) -> List[str]:
    if path.endswith(".jsonl"):
        return _read_codes(path)
    if path == "-":
        text = sys.stdin.read()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LexWarning)
        funcs = extract_functions(text)
    return funcs or ([text] if text.strip() else [])


def cmd_predict(args) -> int:
    _require_files(args.checkpoint, args.vocab, args.input)
    vocab = load_vocab(args.vocab)
    codes = _functions_from_input(args.input)
    if not codes:
        raise InputError("no source to classify")
    model, header = load_classifier(args.checkpoint)
    if header.get("vocab_checksum") not in (None, vocab.checksum):
        raise ConfigError("checkpoint was trained with a different vocabulary")
    max_len = args.max_len or header["max_len"]
    probs = predict_proba(model, codes, vocab, max_len, args.batch_size)
    out = sys.stdout
    for i, p in enumerate(probs):
        out.write(json.dumps({"index": i, "probabilities": [float(x) for x in p]}) + "\n")
    out.flush()
    return 0


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vulberta", description="Vulnerability detection pipeline over C/C++ functions.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("extract", help="pull function definitions out of a source tree")
    s.add_argument("dir")
    s.add_argument("--out", required=True, help="output JSONL")
    s.add_argument("--label", type=int, default=0, help="label stamped on every record")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train-tokenizer", help="learn the BPE vocabulary")
    s.add_argument("corpus", help="JSONL with a 'code' field")
    s.add_argument("--out", required=True, help="vocab JSON")
    s.add_argument("--max-vocab-size", type=int, default=DEFAULT_MAX_SIZE)
    s.set_defaults(func=cmd_train_tokenizer)

    s = sub.add_parser("encode", help="encode functions to an id array")
    s.add_argument("input", help="JSONL with a 'code' field")
    s.add_argument("--vocab", required=True)
    s.add_argument("--out", required=True, help="output .npy, shape [2, n, max_len]")
    s.add_argument("--max-len", type=int, default=512)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("pretrain", help="masked language model pre-training")
    s.add_argument("--corpus", required=True, help="encoded .npy or JSONL of functions")
    s.add_argument("--vocab", required=True)
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--resume", help="pre-training checkpoint to continue from")
    s.add_argument("--preset", choices=sorted(PRESETS), default="small")
    for name in ("hidden", "layers", "heads", "ffn"):
        s.add_argument(f"--{name}", type=int)
    s.add_argument("--dropout", type=float)
    _add_train_flags(s)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="train a classifier head")
    s.add_argument("--checkpoint", required=True, help="pre-training checkpoint")
    s.add_argument("--vocab", required=True)
    s.add_argument("--train", required=True, help="labelled JSONL or CSV")
    s.add_argument("--valid", help="labelled validation set (default: hold out valid_fraction)")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--head", choices=("mlp", "cnn"), default="mlp")
    s.add_argument("--n-classes", type=int, default=2)
    s.add_argument("--kernels", type=int, nargs="+", default=[3, 4, 5])
    s.add_argument("--filters", type=int, default=200)
    _add_train_flags(s)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", help="score a classifier on a labelled set")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="report JSON")
    s.add_argument("--probs", help="optional per-sample probability JSONL")
    s.add_argument("--n-classes", type=int, default=2)
    s.add_argument("--batch-size", type=int, default=8)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="class probabilities for each function, as JSON lines")
    s.add_argument("input", nargs="?", default="-", help="source file, JSONL, or - for stdin")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--max-len", type=int)
    s.add_argument("--batch-size", type=int, default=8)
    s.set_defaults(func=cmd_predict)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        return args.func(args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        sys.stderr.write(f"{e}\nrun with --help for usage\n")
        return 1
    except (ValueError, FileNotFoundError) as e:
        logger.error("%s", e)
        return 1
    except (TrainingError, RuntimeError, OSError) as e:
        logger.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
