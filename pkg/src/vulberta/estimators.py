"""scikit-learn style wrappers around the tokenizer, pre-trainer and classifiers.

These follow the estimator conventions (constructor stores hyperparameters
verbatim, ``fit`` returns ``self``, learned state ends in ``_``) so they work
with ``clone``, ``get_params`` and pipelines.
"""

from __future__ import annotations

import warnings
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .ingest import Sample, SplitSpec, split
from .lexer import LexWarning, lex
from .model import ModelConfig, preset
from .tokenizer import Vocab, decode, encode_batch, encode_source, load_vocab, save_vocab, train_bpe
from .train import TrainConfig, finetune, predict_proba, pretrain
from .validation import check_codes, check_encoded, check_labels

__all__ = ["CodeTokenizer", "MaskedLMPretrainer", "VulnerabilityClassifier"]


class CodeTokenizer(BaseEstimator, TransformerMixin):
    """Learn the BPE vocabulary on source functions and encode them to id arrays."""

    def __init__(self, max_vocab_size: int = 50_000, max_len: int = 512):
        self.max_vocab_size = max_vocab_size
        self.max_len = max_len

    def fit(self, X, y=None):
        codes = check_codes(X)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LexWarning)
            self.vocab_ = train_bpe((lex(c) for c in codes), max_size=self.max_vocab_size)
        return self

    def encode(self, X):
        """``(ids, attention_mask)`` int64 arrays of shape ``[n, max_len]``."""
        check_is_fitted(self, "vocab_")
        return encode_batch([encode_source(c, self.vocab_, self.max_len) for c in check_codes(X)])

    def transform(self, X):
        return self.encode(X)[0]

    def inverse_transform(self, X):
        check_is_fitted(self, "vocab_")
        return [decode(row, self.vocab_) for row in np.asarray(X)]

    def save(self, path) -> None:
        check_is_fitted(self, "vocab_")
        save_vocab(self.vocab_, path)

    @classmethod
    def from_vocab(cls, vocab, max_len: int = 512) -> "CodeTokenizer":
        tok = cls(max_vocab_size=None, max_len=max_len)
        tok.vocab_ = load_vocab(vocab) if not isinstance(vocab, Vocab) else vocab
        tok.max_vocab_size = tok.vocab_.max_size
        return tok


class MaskedLMPretrainer(BaseEstimator):
    """Pre-train a RoBERTa-style encoder with masked language modelling.

    ``X`` is an ``(ids, attention_mask)`` pair or an ids array (padding is
    taken to be id 1). ``preset`` picks the layer sizes; explicit ``hidden``
    etc. override it.
    """

    def __init__(self, preset: str = "small", hidden: Optional[int] = None,
                 layers: Optional[int] = None, heads: Optional[int] = None,
                 ffn: Optional[int] = None, dropout: float = 0.1, max_steps: int = 1000,
                 lr: float = 5e-4, batch_size: int = 16, mask_rate: float = 0.15,
                 eval_every: int = 100, valid_fraction: float = 0.01, seed: int = 0,
                 dtype: str = "float32", vocab_size: Optional[int] = None):
        self.preset = preset
        self.hidden = hidden
        self.layers = layers
        self.heads = heads
        self.ffn = ffn
        self.dropout = dropout
        self.max_steps = max_steps
        self.lr = lr
        self.batch_size = batch_size
        self.mask_rate = mask_rate
        self.eval_every = eval_every
        self.valid_fraction = valid_fraction
        self.seed = seed
        self.dtype = dtype
        self.vocab_size = vocab_size

    def _model_config(self, vocab_size: int, max_len: int) -> ModelConfig:
        overrides = {k: getattr(self, k) for k in ("hidden", "layers", "heads", "ffn")
                     if getattr(self, k) is not None}
        return preset(self.preset, vocab_size, max_positions=max_len + 2, dropout=self.dropout,
                      **overrides)

    def fit(self, X, y=None, vocab: Optional[Vocab] = None):
        ids, mask = check_encoded(X)
        vocab_size = self.vocab_size or (len(vocab) if vocab is not None else int(ids.max()) + 1)
        self.config_ = self._model_config(vocab_size, ids.shape[1])
        tc = TrainConfig.for_phase(
            "pretrain", max_steps=self.max_steps, lr=self.lr, batch_size=self.batch_size,
            mask_rate=self.mask_rate, eval_every=self.eval_every, max_len=ids.shape[1],
            valid_fraction=self.valid_fraction, seed=self.seed, dtype=self.dtype)
        _, self.log_, self.model_ = pretrain(
            self.config_, tc, (ids, mask), vocab_checksum=vocab.checksum if vocab else None)
        return self

    def score(self, X, y=None) -> float:
        """Negative final held-out MLM loss recorded during ``fit`` (higher is better)."""
        check_is_fitted(self, "log_")
        return -self.log_.losses("valid_loss")[-1]


class VulnerabilityClassifier(BaseEstimator, ClassifierMixin):
    """Fine-tuned vulnerability detector over raw function source.

    ``head="mlp"`` fine-tunes the whole pre-trained encoder; ``head="cnn"``
    trains a text-CNN on its frozen token embeddings. ``pretrained`` is a
    pre-training checkpoint path or an in-memory model; ``vocab`` a
    :class:`Vocab` or a vocab file path. A seeded ``valid_fraction`` of the
    training data is held out for model selection.
    """

    def __init__(self, pretrained=None, vocab=None, head: str = "mlp", max_len: int = 1024,
                 lr: float = 3e-5, max_epochs: int = 10, max_steps: Optional[int] = None,
                 batch_size: int = 8, class_weight=None, early_stop_patience: Optional[int] = 3,
                 valid_fraction: float = 0.1, kernels: Sequence[int] = (3, 4, 5),
                 filters: int = 200, seed: int = 0, dtype: str = "float32"):
        self.pretrained = pretrained
        self.vocab = vocab
        self.head = head
        self.max_len = max_len
        self.lr = lr
        self.max_epochs = max_epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.class_weight = class_weight
        self.early_stop_patience = early_stop_patience
        self.valid_fraction = valid_fraction
        self.kernels = kernels
        self.filters = filters
        self.seed = seed
        self.dtype = dtype

    def _vocab(self) -> Vocab:
        return self.vocab if isinstance(self.vocab, Vocab) else load_vocab(self.vocab)

    def fit(self, X, y, X_valid=None, y_valid=None):
        codes = check_codes(X)
        self.classes_, y_idx = np.unique(check_labels(y, len(codes), integer=False),
                                             return_inverse=True)
        n_classes = max(2, len(self.classes_))
        samples = [Sample(c, int(l)) for c, l in zip(codes, y_idx)]
        if X_valid is not None:
            v_codes = check_codes(X_valid)
            lookup = {c: i for i, c in enumerate(self.classes_)}
            y_v = check_labels(y_valid, len(v_codes), integer=False)
            valid = [Sample(c, lookup[l]) for c, l in zip(v_codes, y_v)]
            train = samples
        elif len(samples) >= 10:
            f = self.valid_fraction
            train, valid, test = split(samples, SplitSpec((1 - f, f, 0.0), seed=self.seed))
        else:
            train, valid = samples, samples
        tc = TrainConfig.for_phase(
            "finetune", lr=self.lr, max_epochs=self.max_epochs, max_steps=self.max_steps,
            batch_size=self.batch_size, max_len=self.max_len, seed=self.seed,
            class_weights=self.class_weight, early_stop_patience=self.early_stop_patience,
            dtype=self.dtype)
        self.vocab_ = self._vocab()
        _, self.log_, self.model_ = finetune(self.pretrained, self.head, tc, train, valid,
                                             self.vocab_, n_classes=n_classes,
                                             kernels=self.kernels, filters=self.filters)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        probs = predict_proba(self.model_, check_codes(X), self.vocab_, self.max_len, self.batch_size)
        return probs[:, : len(self.classes_)] if len(self.classes_) >= 2 else probs

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
