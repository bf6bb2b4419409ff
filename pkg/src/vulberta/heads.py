"""Fine-tuning classifiers.

``MLPClassifier`` fine-tunes the whole encoder with a tanh dense layer on the
``<s>`` position. ``CNNClassifier`` is a text-CNN over the frozen pre-trained
token embeddings: three 1-d convolution banks, global max-pooling, then dense
layers of 256 and 128 units.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, read_header, file_sha256
from .errors import ConfigError, IntegrityError, InputError
from .model import Encoder, ModelConfig, _init_weights
from .tokenizer import PAD, Vocab

__all__ = [
    "MLPClassifier",
    "CNNClassifier",
    "cnn_trainable_params",
    "trainable_param_count",
    "extract_embeddings",
    "DEFAULT_KERNELS",
    "DEFAULT_FILTERS",
]

DEFAULT_KERNELS = (3, 4, 5)
DEFAULT_FILTERS = 200
HEAD_DROPOUT = 0.1


def trainable_param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


class MLPClassifier(nn.Module):
    def __init__(self, cfg: ModelConfig, dropout: float = HEAD_DROPOUT):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.dense = nn.Linear(cfg.hidden, cfg.hidden)
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(cfg.hidden, cfg.n_classes)
        _init_weights(self.dense)
        _init_weights(self.out)

    @property
    def n_classes(self) -> int:
        return self.out.out_features

    def forward(self, ids, attention_mask):
        first = self.encoder(ids, attention_mask)[:, 0]
        x = self.dropout(torch.tanh(self.dense(self.dropout(first))))
        return self.out(x)


class CNNClassifier(nn.Module):
    def __init__(self, embeddings: torch.Tensor, n_classes: int = 2,
                 kernels: Sequence[int] = DEFAULT_KERNELS, filters: int = DEFAULT_FILTERS,
                 dropout: float = HEAD_DROPOUT, source_hash: Optional[str] = None):
        super().__init__()
        kernels = tuple(int(k) for k in kernels)
        if len(kernels) != 3 or list(kernels) != sorted(set(kernels)):
            raise ConfigError(f"need three increasing kernel widths, got {kernels}")
        if n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        vocab_size, dim = embeddings.shape
        self.kernels = kernels
        self.filters = filters
        self.source_hash = source_hash
        self.embedding = nn.Embedding(vocab_size, dim, dtype=embeddings.dtype)
        self.embedding.weight.data.copy_(embeddings)
        self.embedding.weight.requires_grad_(False)
        self.convs = nn.ModuleList(nn.Conv1d(dim, filters, k) for k in kernels)
        self.fc1 = nn.Linear(len(kernels) * filters, 256)
        self.fc2 = nn.Linear(256, 128)
        self.out = nn.Linear(128, n_classes)
        self.dropout = nn.Dropout(dropout)
        for m in (*self.convs, self.fc1, self.fc2, self.out):
            _init_weights(m)
        self.to(embeddings.dtype)

    @property
    def n_classes(self) -> int:
        return self.out.out_features

    def pooled(self, ids) -> torch.Tensor:
        """Concatenated max-pooled convolution features ``[batch, 3 * filters]``."""
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise InputError("CNN head needs a non-empty [batch, length] id tensor")
        x = self.embedding(ids).transpose(1, 2)  # [batch, dim, length]
        short = max(self.kernels) - x.shape[2]
        if short > 0:
            x = F.pad(x, (0, short))
        feats = [torch.relu(conv(x)).amax(dim=2) for conv in self.convs]
        return torch.cat(feats, dim=1)

    def forward(self, ids, attention_mask=None):
        x = self.dropout(self.pooled(ids))
        x = torch.relu(self.fc1(x))
        x = torch.relu(self.fc2(x))
        return self.out(x)


def cnn_trainable_params(embed_dim: int = 768, kernels: Sequence[int] = DEFAULT_KERNELS,
                         filters: int = DEFAULT_FILTERS, n_classes: int = 2) -> int:
    conv = sum((k * embed_dim + 1) * filters for k in kernels)
    return conv + (len(kernels) * filters * 256 + 256) + (256 * 128 + 128) + (128 * n_classes + n_classes)


def extract_embeddings(checkpoint_path, vocab: Optional[Vocab] = None,
                       zero_pad: bool = False) -> Tuple[torch.Tensor, str]:
    """Token embedding matrix of a pre-trained checkpoint plus the file's sha256.

    When ``vocab`` is given its checksum must equal the one recorded in the
    checkpoint. ``zero_pad`` clears the ``<pad>`` row, as the CNN head wants.
    """
    header = read_header(checkpoint_path)
    if vocab is not None and header.get("vocab_checksum") != vocab.checksum:
        raise IntegrityError(
            f"{checkpoint_path}: vocab checksum {header.get('vocab_checksum')!r} does not match "
            f"the current vocabulary {vocab.checksum!r}")
    _, tensors = load_checkpoint(checkpoint_path)
    key = "model.encoder.embeddings.token.weight"
    if key not in tensors:
        raise IntegrityError(f"{checkpoint_path}: no token embedding matrix")
    matrix = tensors[key].clone()
    if zero_pad:
        matrix[PAD] = 0
    return matrix, file_sha256(checkpoint_path)
