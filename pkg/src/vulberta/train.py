"""Pre-training and fine-tuning drivers, plateau scheduling, evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import (check_state_shapes, file_sha256, load_checkpoint, read_header,
                         save_checkpoint)
from .errors import CheckpointError, ConfigError, IntegrityError
from .heads import CNNClassifier, DEFAULT_FILTERS, DEFAULT_KERNELS, MLPClassifier, extract_embeddings
from .ingest import Sample, class_weights as inverse_frequency_weights
from .metrics import EvalReport, build_report, report_to_json
from .model import MaskedLanguageModel, ModelConfig, extend_positions, mask_batch, mlm_loss
from .tokenizer import Vocab, encode_batch, encode_source

logger = logging.getLogger(__name__)

__all__ = [
    "SchedulerConfig",
    "TrainConfig",
    "TrainLog",
    "PlateauScheduler",
    "TrainingError",
    "pretrain",
    "save_pretrained",
    "finetune",
    "load_classifier",
    "predict_proba",
    "evaluate",
    "report_from_probabilities",
]

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingError(RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        if last_checkpoint:
            message = f"{message} (last good checkpoint: {last_checkpoint})"
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class SchedulerConfig:
    factor: float = 0.1
    patience: int = 2
    min_lr: float = 0.0


@dataclass
class TrainConfig:
    phase: str = "finetune"
    lr: float = 3e-5
    max_steps: Optional[int] = None
    max_epochs: int = 10
    batch_size: int = 8
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    class_weights: Optional[Union[List[float], str]] = None
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 100
    mask_rate: float = 0.15
    max_len: int = 1024
    weight_decay: float = 0.01
    early_stop_patience: Optional[int] = 3
    valid_fraction: float = 0.01
    grad_accum: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.scheduler, dict):
            self.scheduler = SchedulerConfig(**self.scheduler)
        self.validate()

    @classmethod
    def for_phase(cls, phase: str, **overrides) -> "TrainConfig":
        if phase == "pretrain":
            base = dict(phase="pretrain", lr=5e-4, max_steps=500_000, batch_size=16, max_len=512)
        elif phase == "finetune":
            base = dict(phase="finetune", lr=3e-5, max_epochs=10, batch_size=8, max_len=1024)
        else:
            raise ConfigError(f"unknown phase {phase!r}")
        return cls(**{**base, **overrides})

    def validate(self) -> None:
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"phase must be 'pretrain' or 'finetune', got {self.phase!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")
        if self.phase == "pretrain" and self.max_steps is None:
            raise ConfigError("pretraining needs max_steps")
        for name in ("batch_size", "grad_accum", "max_epochs", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if not 0 < self.mask_rate < 1:
            raise ConfigError("mask_rate must be in (0, 1)")
        if not 0 < self.valid_fraction < 1:
            raise ConfigError("valid_fraction must be in (0, 1)")
        s = self.scheduler
        if not 0 < s.factor < 1 or s.patience < 1 or s.min_lr < 0:
            raise ConfigError(f"bad scheduler settings {s}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        cw = self.class_weights
        if cw is not None and cw != "auto":
            if not isinstance(cw, (list, tuple)) or not all(
                    isinstance(w, (int, float)) and w > 0 for w in cw):
                raise ConfigError("class_weights must be 'auto' or a list of positive numbers")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {unknown}")
        return cls(**d)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` evaluations
    in a row fail to improve on the best monitored value; never below ``min_lr``.
    """

    def __init__(self, optimizer, factor=0.1, patience=2, min_lr=0.0, lr=None):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.lr = lr if lr is not None else optimizer.param_groups[0]["lr"]
        self.best = math.inf
        self.bad = 0

    def step(self, value: float) -> float:
        if value < self.best:
            self.best = value
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.min_lr, self.lr * self.factor)
                self.bad = 0
        if self.optimizer is not None:
            for group in self.optimizer.param_groups:
                group["lr"] = self.lr
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "best": None if math.isinf(self.best) else self.best, "bad": self.bad}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.best = math.inf if state["best"] is None else state["best"]
        self.bad = state["bad"]
        if self.optimizer is not None:
            for group in self.optimizer.param_groups:
                group["lr"] = self.lr


class TrainLog:
    """Ordered per-step/per-epoch records, persisted as JSONL."""

    def __init__(self, records=None):
        self.records: List[dict] = list(records or [])

    def append(self, **record) -> None:
        if self.records and record["step"] < self.records[-1]["step"]:
            raise ValueError("TrainLog records must be ordered by step")
        self.records.append(record)

    def losses(self, key="train_loss") -> List[float]:
        return [r[key] for r in self.records if r.get(key) is not None]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    def __len__(self):
        return len(self.records)


# --- shared helpers ------------------------------------------------------------

def _make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if p.ndim < 2 or "norm" in name else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)


def _optimizer_tensors(opt) -> Tuple[Dict[str, torch.Tensor], dict]:
    sd = opt.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, val in state.items():
            tensors[f"optim.{idx}.{key}"] = val if isinstance(val, torch.Tensor) else torch.tensor(val)
    return tensors, sd["param_groups"]


def _restore_optimizer(opt, tensors: Dict[str, torch.Tensor], groups) -> None:
    state: Dict[int, dict] = {}
    for name, val in tensors.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = val
    opt.load_state_dict({"state": state, "param_groups": groups})


def _rng_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def _set_seed(seed: int) -> None:
    torch.manual_seed(seed)


def _as_arrays(seqs) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(seqs, tuple) and len(seqs) == 2 and isinstance(seqs[0], np.ndarray):
        return seqs
    return encode_batch(list(seqs))


# --- pre-training --------------------------------------------------------------

def save_pretrained(model: MaskedLanguageModel, path, vocab_checksum: Optional[str],
                    step: int = 0, history=None, extra=None) -> str:
    header = {
        "kind": "pretrain",
        "model_config": model.config.to_dict(),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "vocab_checksum": vocab_checksum,
        "step": step,
        "history": history or [],
        "extra": extra or {},
    }
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    return save_checkpoint(path, tensors, header)


def _load_pretrained(path) -> Tuple[MaskedLanguageModel, dict, Dict[str, torch.Tensor]]:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "pretrain":
        raise CheckpointError(f"{path}: expected a pre-training checkpoint, got {header.get('kind')!r}")
    cfg = ModelConfig.from_dict(header["model_config"])
    model = MaskedLanguageModel(cfg).to(_DTYPES.get(header.get("dtype", "float32"), torch.float32))
    state = check_state_shapes(model, tensors, path=str(path))
    model.load_state_dict(state)
    return model, header, tensors


def _mlm_eval(model, ids, mask, labels, batch_size: int) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(ids), batch_size):
            lab = torch.from_numpy(labels[i:i + batch_size])
            n = int((lab != -100).sum())
            if n == 0:
                continue
            loss = mlm_loss(model, torch.from_numpy(ids[i:i + batch_size]),
                            torch.from_numpy(mask[i:i + batch_size]), lab)
            total += float(loss) * n
            count += n
    model.train()
    return total / max(count, 1)


def pretrain(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus, out_dir=None,
             vocab_checksum: Optional[str] = None, resume_from=None,
             log_path=None) -> Tuple[Optional[str], TrainLog, MaskedLanguageModel]:
    """Masked-language-model pre-training.

    ``corpus`` is a list of :class:`EncodedSeq` (or an ``(ids, mask)`` array
    pair). A seeded ``valid_fraction`` slice (at least one sequence) is held
    out with a fixed masking, and its loss drives the plateau scheduler every
    ``eval_every`` steps. Step 0 logs the untrained validation loss.

    Returns ``(last_checkpoint_path, log, model)``; the path is None when
    ``out_dir`` is None.
    """
    if train_cfg.phase != "pretrain":
        train_cfg = replace(train_cfg, phase="pretrain")
    ids_all, mask_all = _as_arrays(corpus)
    if len(ids_all) < 2:
        raise ConfigError("pre-training corpus needs at least two sequences")
    model_cfg.check_max_len(ids_all.shape[1])
    dtype = _DTYPES[train_cfg.dtype]

    order = np.random.default_rng(train_cfg.seed).permutation(len(ids_all))
    n_val = max(1, int(round(train_cfg.valid_fraction * len(ids_all))))
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    val_ids, val_labels, _ = mask_batch(ids_all[val_idx], mask_all[val_idx], train_cfg.mask_rate,
                                        np.random.default_rng(train_cfg.seed + 1),
                                        model_cfg.vocab_size)
    val_mask = mask_all[val_idx]

    _set_seed(train_cfg.seed)
    model = MaskedLanguageModel(model_cfg).to(dtype)
    model.train()
    opt = _make_optimizer(model, train_cfg)
    sched = PlateauScheduler(opt, train_cfg.scheduler.factor, train_cfg.scheduler.patience,
                             train_cfg.scheduler.min_lr)
    rng = np.random.default_rng(train_cfg.seed + 2)
    perm = rng.permutation(train_idx)
    cursor = 0
    step = 0
    log = TrainLog()
    last_ckpt = None

    if resume_from is not None:
        model, header, tensors = _load_pretrained(resume_from)
        model.train()
        opt = _make_optimizer(model, train_cfg)
        _restore_optimizer(opt, tensors, header["extra"]["optim_groups"])
        sched = PlateauScheduler(opt, train_cfg.scheduler.factor, train_cfg.scheduler.patience,
                                 train_cfg.scheduler.min_lr)
        sched.load_state_dict(header["extra"]["scheduler"])
        rng = _rng_from_json(header["extra"]["rng"])
        perm = tensors["data.perm"].numpy().copy()
        cursor = header["extra"]["cursor"]
        torch.set_rng_state(tensors["rng.torch"])
        step = header["step"]
        log = TrainLog(header["history"])
        last_ckpt = str(resume_from)

    def checkpoint(tag):
        nonlocal last_ckpt
        if out_dir is None:
            return
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"pretrain-{tag}.ckpt")
        otensors, groups = _optimizer_tensors(opt)
        tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
        tensors.update(otensors)
        tensors["data.perm"] = torch.from_numpy(np.asarray(perm, dtype=np.int64))
        tensors["rng.torch"] = torch.get_rng_state()
        header = {
            "kind": "pretrain",
            "model_config": model_cfg.to_dict(),
            "train_config": train_cfg.to_dict(),
            "dtype": train_cfg.dtype,
            "vocab_checksum": vocab_checksum,
            "step": step,
            "history": log.records,
            "extra": {"optim_groups": groups, "scheduler": sched.state_dict(),
                      "rng": _rng_to_json(rng), "cursor": cursor},
        }
        save_checkpoint(path, tensors, header)
        last_ckpt = path

    t0 = time.perf_counter()
    if step == 0:
        v = _mlm_eval(model, val_ids, val_mask, val_labels, train_cfg.batch_size)
        log.append(step=0, lr=sched.lr, train_loss=None, valid_loss=v, valid_metric=None,
                   wall_time=0.0)

    while step < train_cfg.max_steps:
        opt.zero_grad(set_to_none=True)
        step_loss = 0.0
        for _ in range(train_cfg.grad_accum):
            if cursor + train_cfg.batch_size > len(perm):
                perm = rng.permutation(train_idx)
                cursor = 0
            idx = perm[cursor:cursor + train_cfg.batch_size]
            cursor += train_cfg.batch_size
            m_ids, labels, _ = mask_batch(ids_all[idx], mask_all[idx], train_cfg.mask_rate, rng,
                                          model_cfg.vocab_size)
            loss = mlm_loss(model, torch.from_numpy(m_ids), torch.from_numpy(mask_all[idx]),
                            torch.from_numpy(labels))
            (loss / train_cfg.grad_accum).backward()
            step_loss += float(loss.detach()) / train_cfg.grad_accum
        if not math.isfinite(step_loss):
            raise TrainingError(f"non-finite loss at step {step + 1}", last_ckpt)
        opt.step()
        step += 1

        record = dict(step=step, lr=sched.lr, train_loss=step_loss, valid_loss=None,
                      valid_metric=None, wall_time=time.perf_counter() - t0)
        if step % train_cfg.eval_every == 0 or step == train_cfg.max_steps:
            v = _mlm_eval(model, val_ids, val_mask, val_labels, train_cfg.batch_size)
            record["valid_loss"] = v
            sched.step(v)
        log.append(**record)
        if train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            checkpoint(step)

    if out_dir is not None and (last_ckpt is None or not last_ckpt.endswith(f"-{step}.ckpt")):
        checkpoint(step)
    if log_path:
        log.write(log_path)
    return last_ckpt, log, model


# --- fine-tuning ---------------------------------------------------------------

def _encode_samples(samples: Sequence[Sample], vocab: Vocab, max_len: int):
    seqs = [encode_source(s.code, vocab, max_len) for s in samples]
    ids, mask = encode_batch(seqs)
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    return ids, mask, labels


def _build_classifier(checkpoint, head_kind: str, n_classes: int, max_len: int,
                      vocab: Optional[Vocab], kernels, filters, dtype):
    if head_kind == "mlp":
        if isinstance(checkpoint, MaskedLanguageModel):
            pre, source_hash = checkpoint, None
        else:
            if vocab is not None and read_header(checkpoint).get("vocab_checksum") != vocab.checksum:
                raise IntegrityError(f"{checkpoint}: vocab checksum does not match the current vocabulary")
            pre, _, _ = _load_pretrained(checkpoint)
            source_hash = file_sha256(checkpoint)
        cfg = replace(pre.config, n_classes=n_classes)
        model = MLPClassifier(cfg).to(dtype)
        model.encoder.load_state_dict(pre.encoder.state_dict())
        if cfg.max_positions < max_len + 2:
            extend_positions(model, max_len + 2)
        model.source_hash = source_hash
        return model
    if head_kind == "cnn":
        if isinstance(checkpoint, MaskedLanguageModel):
            emb = checkpoint.encoder.embeddings.token.weight.detach().clone()
            emb[1] = 0  # <pad>
            source_hash = None
        else:
            emb, source_hash = extract_embeddings(checkpoint, vocab, zero_pad=True)
        return CNNClassifier(emb.to(dtype), n_classes=n_classes, kernels=kernels,
                             filters=filters, source_hash=source_hash)
    raise ConfigError(f"head_kind must be 'mlp' or 'cnn', got {head_kind!r}")


def _classifier_header(model, head_kind, max_len, vocab_checksum, step, epoch, history, extra=None):
    header = {"kind": head_kind, "max_len": max_len, "vocab_checksum": vocab_checksum,
              "step": step, "epoch": epoch, "history": history,
              "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
              "source_hash": getattr(model, "source_hash", None), "extra": extra or {}}
    if head_kind == "mlp":
        header["model_config"] = model.config.to_dict()
    else:
        header["cnn"] = {"vocab_size": model.embedding.num_embeddings,
                         "embed_dim": model.embedding.embedding_dim,
                         "kernels": list(model.kernels), "filters": model.filters,
                         "n_classes": model.n_classes}
    return header


def save_classifier(model, head_kind, path, max_len, vocab_checksum, step=0, epoch=0,
                    history=None) -> str:
    header = _classifier_header(model, head_kind, max_len, vocab_checksum, step, epoch, history or [])
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    return save_checkpoint(path, tensors, header)


def load_classifier(path):
    """Rebuild a fine-tuned MLP or CNN classifier; returns ``(model, header)``."""
    header, tensors = load_checkpoint(path)
    kind = header.get("kind")
    dtype = _DTYPES.get(header.get("dtype", "float32"), torch.float32)
    if kind == "mlp":
        model = MLPClassifier(ModelConfig.from_dict(header["model_config"])).to(dtype)
    elif kind == "cnn":
        c = header["cnn"]
        model = CNNClassifier(torch.zeros(c["vocab_size"], c["embed_dim"], dtype=dtype),
                              n_classes=c["n_classes"], kernels=c["kernels"], filters=c["filters"],
                              source_hash=header.get("source_hash"))
    else:
        raise CheckpointError(f"{path}: not a classifier checkpoint (kind={kind!r})")
    model.load_state_dict(check_state_shapes(model, tensors, path=str(path)))
    model.source_hash = header.get("source_hash")
    model.eval()
    return model, header


def _predict(model, ids, mask, batch_size: int) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(ids), batch_size):
            logits = model(torch.from_numpy(ids[i:i + batch_size]),
                           torch.from_numpy(mask[i:i + batch_size]))
            out.append(torch.softmax(logits.double(), dim=-1).numpy())
    if was_training:
        model.train()
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def _selection_metric(labels, probs, n_classes) -> float:
    report = build_report(labels, probs.argmax(axis=1), n_classes)
    return report.f1 if n_classes == 2 else report.weighted_f1


def finetune(checkpoint, head_kind: str, train_cfg: TrainConfig, train: Sequence[Sample],
             valid: Sequence[Sample], vocab: Optional[Vocab], n_classes: int = 2, out_dir=None,
             kernels=DEFAULT_KERNELS, filters: int = DEFAULT_FILTERS, log_path=None):
    """Fine-tune a classifier head and keep the best epoch by validation F1.

    ``checkpoint`` is a pre-training checkpoint path (or an in-memory
    :class:`MaskedLanguageModel`). Selection uses binary F1, or weighted F1
    when ``n_classes > 2``. Training stops at ``max_epochs``, at
    ``max_steps`` optimizer steps if set, or after ``early_stop_patience``
    epochs without improvement. The learning rate follows the plateau
    scheduler on the epoch's mean training loss.

    Returns ``(best_checkpoint_path_or_None, log, best_model)``.
    """
    if train_cfg.phase != "finetune":
        train_cfg = replace(train_cfg, phase="finetune")
    if not train or not valid:
        raise ConfigError("fine-tuning needs non-empty train and valid splits")
    for s in list(train) + list(valid):
        if not 0 <= s.label < n_classes:
            raise ConfigError(f"label {s.label} inconsistent with n_classes={n_classes}")
    dtype = _DTYPES[train_cfg.dtype]

    weights = None
    if train_cfg.class_weights == "auto":
        weights = inverse_frequency_weights(train, n_classes)
    elif train_cfg.class_weights is not None:
        weights = list(train_cfg.class_weights)
        if len(weights) != n_classes:
            raise ConfigError(f"{len(weights)} class weights for {n_classes} classes")
    weight_t = torch.tensor(weights, dtype=dtype) if weights is not None else None

    tr_ids, tr_mask, tr_y = _encode_samples(train, vocab, train_cfg.max_len)
    va_ids, va_mask, va_y = _encode_samples(valid, vocab, train_cfg.max_len)

    _set_seed(train_cfg.seed)
    model = _build_classifier(checkpoint, head_kind, n_classes, train_cfg.max_len, vocab,
                              kernels, filters, dtype)
    model.train()
    opt = _make_optimizer(model, train_cfg)
    sched = PlateauScheduler(opt, train_cfg.scheduler.factor, train_cfg.scheduler.patience,
                             train_cfg.scheduler.min_lr)
    rng = np.random.default_rng(train_cfg.seed + 2)
    vocab_checksum = vocab.checksum if vocab is not None else None

    log = TrainLog()
    best_metric = -math.inf
    best_state = None
    best_path = None
    since_best = 0
    step = 0
    t0 = time.perf_counter()
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(len(tr_ids))
        losses = []
        for i in range(0, len(order), train_cfg.batch_size):
            if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                break
            idx = order[i:i + train_cfg.batch_size]
            logits = model(torch.from_numpy(tr_ids[idx]), torch.from_numpy(tr_mask[idx]))
            loss = F.cross_entropy(logits, torch.from_numpy(tr_y[idx]), weight=weight_t)
            if not math.isfinite(float(loss.detach())):
                raise TrainingError(f"non-finite loss at step {step + 1}", best_path)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            losses.append(float(loss.detach()))
        if not losses:
            break

        va_probs = _predict(model, va_ids, va_mask, train_cfg.batch_size)
        va_loss = float(F.nll_loss(torch.log(torch.from_numpy(va_probs).clamp_min(1e-300)),
                                   torch.from_numpy(va_y),
                                   weight=weight_t.double() if weight_t is not None else None))
        metric = _selection_metric(va_y, va_probs, n_classes)
        tr_acc = float((_predict(model, tr_ids, tr_mask, train_cfg.batch_size).argmax(1) == tr_y).mean())
        train_loss = float(np.mean(losses))
        log.append(step=step, epoch=epoch, lr=sched.lr, train_loss=train_loss, valid_loss=va_loss,
                   valid_metric=metric, train_accuracy=tr_acc, wall_time=time.perf_counter() - t0)
        sched.step(train_loss)

        if metric > best_metric:
            best_metric = metric
            since_best = 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if out_dir is not None:
                os.makedirs(out_dir, exist_ok=True)
                best_path = os.path.join(out_dir, f"{head_kind}-best.ckpt")
                save_classifier(model, head_kind, best_path, train_cfg.max_len, vocab_checksum,
                                step=step, epoch=epoch, history=log.records)
        else:
            since_best += 1
            if train_cfg.early_stop_patience is not None and since_best >= train_cfg.early_stop_patience:
                logger.info("early stop after epoch %d", epoch)
                break
        if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if log_path:
        log.write(log_path)
    return best_path, log, model


# --- evaluation ----------------------------------------------------------------

def predict_proba(model, codes: Sequence[str], vocab: Vocab, max_len: int,
                  batch_size: int = 8) -> np.ndarray:
    seqs = [encode_source(c, vocab, max_len) for c in codes]
    ids, mask = encode_batch(seqs)
    return _predict(model, ids, mask, batch_size)


def _report(labels, probs, n_classes) -> EvalReport:
    preds = probs.argmax(axis=1)
    scores = probs[:, 1] if n_classes == 2 else None
    return build_report(labels, preds, n_classes, scores=scores)


def evaluate(checkpoint, test: Sequence[Sample], vocab: Vocab, report_path=None,
             probs_path=None, batch_size: int = 8) -> Tuple[EvalReport, np.ndarray]:
    """Deterministic inference on ``test`` and the full metric report.

    Writes the JSON report and a ``{id, label, score}`` JSONL probability file
    when paths are given.
    """
    if not test:
        raise ConfigError("test split is empty")
    model, header = load_classifier(checkpoint)
    if vocab is not None and header.get("vocab_checksum") not in (None, vocab.checksum):
        raise IntegrityError(f"{checkpoint}: vocab checksum does not match the current vocabulary")
    probs = predict_proba(model, [s.code for s in test], vocab, header["max_len"], batch_size)
    labels = np.asarray([s.label for s in test], dtype=np.int64)
    report = _report(labels, probs, model.n_classes)
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(report_to_json(report))
    if probs_path:
        with open(probs_path, "w", encoding="utf-8") as fh:
            for i, (s, p) in enumerate(zip(test, probs)):
                score = float(p[1]) if model.n_classes == 2 else [float(x) for x in p]
                fh.write(json.dumps({"id": s.origin if s.origin is not None else i,
                                     "label": int(s.label), "score": score}, sort_keys=True) + "\n")
    return report, probs


def report_from_probabilities(probs_path, n_classes: int = 2) -> EvalReport:
    """Rebuild an :class:`EvalReport` from a persisted probability file."""
    labels, rows = [], []
    with open(probs_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            labels.append(rec["label"])
            s = rec["score"]
            rows.append([1.0 - s, s] if n_classes == 2 else s)
    return _report(np.asarray(labels, dtype=np.int64), np.asarray(rows, dtype=np.float64), n_classes)
