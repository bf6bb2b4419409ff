"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

from typing import List

import numpy as np
from sklearn.utils.validation import column_or_1d

from .tokenizer import EncodedSeq, PAD, encode_batch


def check_codes(X) -> List[str]:
    """Coerce ``X`` to a non-empty list of source strings."""
    if isinstance(X, str):
        raise ValueError("expected a sequence of source strings, got a single string")
    codes = list(np.asarray(X, dtype=object).ravel()) if not isinstance(X, list) else list(X)
    if not codes:
        raise ValueError("no samples given")
    for i, c in enumerate(codes):
        if not isinstance(c, str):
            raise TypeError(f"sample {i} is {type(c).__name__}, expected str")
    return codes


def check_labels(y, n_samples: int, integer: bool = True) -> np.ndarray:
    """1-d labels of the right length; ``integer=False`` allows any class labels."""
    y = column_or_1d(np.asarray(y), warn=True)
    if y.shape[0] != n_samples:
        raise ValueError(f"{y.shape[0]} labels for {n_samples} samples")
    if integer and not np.issubdtype(y.dtype, np.integer):
        if np.issubdtype(y.dtype, np.floating) and np.all(np.mod(y, 1) == 0):
            y = y.astype(np.int64)
        else:
            raise ValueError("labels must be integers")
    return y


def check_encoded(X):
    """Accept ``(ids, mask)``, a bare ids array, or a list of EncodedSeq."""
    if isinstance(X, tuple) and len(X) == 2:
        ids, mask = (np.asarray(a, dtype=np.int64) for a in X)
    elif isinstance(X, (list, tuple)) and X and isinstance(X[0], EncodedSeq):
        ids, mask = encode_batch(list(X))
    else:
        ids = np.asarray(X, dtype=np.int64)
        mask = (ids != PAD).astype(np.int64)
    if ids.ndim != 2 or ids.shape != mask.shape or ids.shape[0] == 0:
        raise ValueError(f"expected a non-empty [n, max_len] id array, got shape {ids.shape}")
    if ids.min() < 0:
        raise ValueError("negative token id")
    return ids, mask
