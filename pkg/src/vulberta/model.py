"""RoBERTa-style encoder with a masked-language-modelling head.

Post-layer-norm transformer: token + position embeddings, layer norm, then
``layers`` blocks of self-attention and GELU feed-forward, each followed by a
residual add and layer norm. The MLM output projection is tied to the token
embedding matrix.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError
from .tokenizer import MASK, N_RESERVED, EncodedSeq

__all__ = [
    "ModelConfig",
    "PRESETS",
    "preset",
    "MaskingPlan",
    "Encoder",
    "MaskedLanguageModel",
    "batch_tensors",
    "forward",
    "mask_batch",
    "apply_masking",
    "mlm_loss",
    "count_params",
    "extend_positions",
    "IGNORE_INDEX",
]

IGNORE_INDEX = -100


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden: int = 768
    layers: int = 12
    heads: int = 12
    ffn: int = 3072
    max_positions: int = 514
    dropout: float = 0.1
    n_classes: int = 2
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "hidden", "layers", "heads", "ffn", "max_positions", "n_classes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")

    def check_max_len(self, max_len: int) -> None:
        if self.max_positions < max_len + 2:
            raise ConfigError(
                f"max_positions={self.max_positions} must be >= max_len + 2 = {max_len + 2}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    "small": dict(hidden=256, layers=4, heads=4, ffn=1024),
    "medium": dict(hidden=512, layers=8, heads=8, ffn=2048),
    "base": dict(hidden=768, layers=12, heads=12, ffn=3072),
    "toy": dict(hidden=8, layers=1, heads=2, ffn=16),
}


def preset(name: str, vocab_size: int, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(vocab_size=vocab_size, **{**PRESETS[name], **overrides})


@dataclass
class MaskingPlan:
    positions: List[int] = field(default_factory=list)
    replacements: List[str] = field(default_factory=list)  # "mask" | "random" | "unchanged"
    replacement_ids: List[int] = field(default_factory=list)
    originals: List[int] = field(default_factory=list)


# --- modules ---------------------------------------------------------------

class Embeddings(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.token = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.position = nn.Embedding(cfg.max_positions, cfg.hidden)
        self.norm = nn.LayerNorm(cfg.hidden, eps=cfg.layer_norm_eps)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, ids):
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.token(ids) + self.position(pos)[None]
        return self.dropout(self.norm(x))


class SelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.hidden // cfg.heads
        self.query = nn.Linear(cfg.hidden, cfg.hidden)
        self.key = nn.Linear(cfg.hidden, cfg.hidden)
        self.value = nn.Linear(cfg.hidden, cfg.hidden)
        self.output = nn.Linear(cfg.hidden, cfg.hidden)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, attention_mask):
        b, n, h = x.shape

        def split(t):
            return t.view(b, n, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        # finfo.min rather than -inf: a fully padded row stays finite
        blocked = (attention_mask == 0)[:, None, None, :]
        scores = scores.masked_fill(blocked, torch.finfo(scores.dtype).min)
        probs = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (probs @ v).transpose(1, 2).reshape(b, n, h)
        return self.output(ctx)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attention = SelfAttention(cfg)
        self.attention_norm = nn.LayerNorm(cfg.hidden, eps=cfg.layer_norm_eps)
        self.ffn_in = nn.Linear(cfg.hidden, cfg.ffn)
        self.ffn_out = nn.Linear(cfg.ffn, cfg.hidden)
        self.ffn_norm = nn.LayerNorm(cfg.hidden, eps=cfg.layer_norm_eps)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, attention_mask):
        x = self.attention_norm(x + self.dropout(self.attention(x, attention_mask)))
        y = self.ffn_out(F.gelu(self.ffn_in(x)))
        return self.ffn_norm(x + self.dropout(y))


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Embedding, nn.Conv1d)):
        nn.init.normal_(module.weight, mean=0.0, std=0.02)
        if getattr(module, "bias", None) is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.embeddings = Embeddings(cfg)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.apply(_init_weights)

    def forward(self, ids, attention_mask):
        if ids.numel() and (int(ids.max()) >= self.config.vocab_size or int(ids.min()) < 0):
            raise InputError(f"token id outside 0..{self.config.vocab_size - 1}")
        if ids.shape[1] > self.config.max_positions:
            raise InputError(
                f"sequence length {ids.shape[1]} exceeds max_positions {self.config.max_positions}")
        x = self.embeddings(ids)
        for layer in self.layers:
            x = layer(x, attention_mask)
        return x


class MaskedLanguageModel(nn.Module):
    """Encoder plus the MLM head (dense, GELU, layer norm, tied decoder)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.head_dense = nn.Linear(cfg.hidden, cfg.hidden)
        self.head_norm = nn.LayerNorm(cfg.hidden, eps=cfg.layer_norm_eps)
        self.head_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        _init_weights(self.head_dense)

    def logits(self, hidden):
        h = self.head_norm(F.gelu(self.head_dense(hidden)))
        return F.linear(h, self.encoder.embeddings.token.weight, self.head_bias)

    def forward(self, ids, attention_mask):
        return self.logits(self.encoder(ids, attention_mask))


# --- functional API ------------------------------------------------------------

def batch_tensors(batch: Sequence[EncodedSeq]) -> Tuple[torch.Tensor, torch.Tensor]:
    if not batch:
        raise InputError("empty batch")
    ids = torch.tensor([s.ids for s in batch], dtype=torch.long)
    mask = torch.tensor([s.attention_mask for s in batch], dtype=torch.long)
    return ids, mask


def forward(encoder: Encoder, batch: Sequence[EncodedSeq]) -> torch.Tensor:
    """Hidden states ``[batch, max_len, hidden]`` for a list of encoded sequences."""
    ids, mask = batch_tensors(batch)
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        return encoder(ids, mask).to(dtype)


def mask_batch(ids: np.ndarray, attention_mask: np.ndarray, rate: float,
               rng: np.random.Generator, vocab_size: int):
    """Vectorised 80/10/10 masking.

    Returns ``(masked_ids, labels, kinds)`` where ``labels`` holds the
    original id at selected positions and ``IGNORE_INDEX`` elsewhere, and
    ``kinds`` is 0 unselected, 1 ``<mask>``, 2 random token, 3 unchanged.
    """
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"mask rate must be in (0, 1), got {rate}")
    ids = np.asarray(ids, dtype=np.int64)
    eligible = (np.asarray(attention_mask) == 1) & (ids >= N_RESERVED)
    selected = eligible & (rng.random(ids.shape) < rate)
    u = rng.random(ids.shape)
    random_ids = rng.integers(N_RESERVED, vocab_size, size=ids.shape)
    kinds = np.zeros(ids.shape, dtype=np.int8)
    kinds[selected & (u < 0.8)] = 1
    kinds[selected & (u >= 0.8) & (u < 0.9)] = 2
    kinds[selected & (u >= 0.9)] = 3
    masked = ids.copy()
    masked[kinds == 1] = MASK
    masked[kinds == 2] = random_ids[kinds == 2]
    labels = np.where(selected, ids, IGNORE_INDEX)
    return masked, labels, kinds


_KIND_NAMES = {1: "mask", 2: "random", 3: "unchanged"}


def apply_masking(seq: EncodedSeq, rate: float, rng: np.random.Generator,
                  vocab_size: int) -> Tuple[EncodedSeq, MaskingPlan]:
    masked, _, kinds = mask_batch(np.asarray([seq.ids]), np.asarray([seq.attention_mask]),
                                  rate, rng, vocab_size)
    masked, kinds = masked[0], kinds[0]
    plan = MaskingPlan()
    for pos in np.nonzero(kinds)[0]:
        plan.positions.append(int(pos))
        plan.replacements.append(_KIND_NAMES[int(kinds[pos])])
        plan.replacement_ids.append(int(masked[pos]))
        plan.originals.append(int(seq.ids[pos]))
    return EncodedSeq(tuple(int(i) for i in masked), seq.attention_mask, seq.true_len), plan


def mlm_loss(model: MaskedLanguageModel, ids: torch.Tensor, attention_mask: torch.Tensor,
             labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over positions whose label is not ``IGNORE_INDEX``.

    With no masked position in the batch the loss is a zero that still
    carries a (zero) gradient, and a warning is issued.
    """
    hidden = model.encoder(ids, attention_mask)
    selected = labels != IGNORE_INDEX
    if not bool(selected.any()):
        warnings.warn("no masked positions in batch; loss defined as 0", RuntimeWarning, stacklevel=2)
        return hidden.sum() * 0.0
    logits = model.logits(hidden[selected])
    return F.cross_entropy(logits, labels[selected])


def plans_to_labels(batch: Sequence[EncodedSeq], plans: Sequence[MaskingPlan]) -> torch.Tensor:
    labels = torch.full((len(batch), batch[0].max_len), IGNORE_INDEX, dtype=torch.long)
    for row, plan in enumerate(plans):
        for pos, orig in zip(plan.positions, plan.originals):
            labels[row, pos] = orig
    return labels


def count_params(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count of :class:`MaskedLanguageModel`."""
    h, f, v, p = cfg.hidden, cfg.ffn, cfg.vocab_size, cfg.max_positions
    embeddings = v * h + p * h + 2 * h
    per_layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h
    mlm_head = (h * h + h) + 2 * h + v  # decoder weight is tied
    return embeddings + cfg.layers * per_layer + mlm_head


def extend_positions(model: nn.Module, max_positions: int) -> None:
    """Grow the position table in place, tiling the trained rows."""
    enc = model.encoder if hasattr(model, "encoder") else model
    old = enc.embeddings.position.weight.data
    if max_positions <= old.shape[0]:
        return
    reps = -(-max_positions // old.shape[0])
    new = old.repeat(reps, 1)[:max_positions].clone()
    emb = nn.Embedding(max_positions, old.shape[1], dtype=old.dtype)
    emb.weight.data.copy_(new)
    enc.embeddings.position = emb
    enc.config = replace(enc.config, max_positions=max_positions)
    if hasattr(model, "config") and model is not enc:
        model.config = enc.config
