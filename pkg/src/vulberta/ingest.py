"""Function extraction, dataset loading, splitting and class weights."""

from __future__ import annotations

import csv
import json
import logging
import os
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DatasetError
from .lexer import LexWarning, TokenKind, lex, strip_comments

logger = logging.getLogger(__name__)

__all__ = [
    "Sample",
    "SplitSpec",
    "extract_functions",
    "extract_from_directory",
    "load_dataset",
    "split",
    "load_split_manifest",
    "apply_manifest",
    "class_weights",
    "C_SUFFIXES",
]

C_SUFFIXES = (".c", ".h", ".cc", ".cpp", ".cxx", ".hpp", ".hh", ".hxx", ".c++")


@dataclass(frozen=True)
class Sample:
    code: str
    label: int
    origin: Optional[str] = None


@dataclass(frozen=True)
class SplitSpec:
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ConfigError(f"fractions must be three non-negative numbers, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"fractions must sum to 1, got {sum(self.fractions)!r}")


# --- function extraction ---------------------------------------------------

# tokens that may legally sit between ``)`` and ``{`` of a definition
_TRAILERS = frozenset({"const", "volatile", "noexcept", "override", "final", "throw", "&", "&&"})
_NOT_FUNCTIONS = frozenset({
    "if", "for", "while", "switch", "catch", "return", "sizeof", "do", "else",
    "alignof", "decltype", "typeid", "static_assert", "_Generic",
})


def _match_paren(tokens, i: int) -> int:
    """Index of the ``)`` closing ``tokens[i] == '('``, or -1."""
    depth = 0
    for j in range(i, len(tokens)):
        t = tokens[j].text
        if t == "(":
            depth += 1
        elif t == ")":
            depth -= 1
            if depth == 0:
                return j
    return -1


def _match_brace(tokens, i: int) -> int:
    depth = 0
    for j in range(i, len(tokens)):
        t = tokens[j].text
        if t == "{":
            depth += 1
        elif t == "}":
            depth -= 1
            if depth == 0:
                return j
    return -1


def _opens_scope(tokens, i: int) -> bool:
    """True when the ``{`` at ``i`` opens a namespace or ``extern "C"`` block."""
    prev = [t.text for t in tokens[max(0, i - 3):i]]
    if prev[-1:] == ["namespace"]:
        return True
    if len(prev) >= 2 and prev[-2] == "namespace":
        return True
    if len(prev) >= 2 and prev[-2] == "extern" and tokens[i - 1].kind == TokenKind.LITERAL:
        return True
    return False


def _definition_start(tokens, name_idx: int, prev_end: int) -> int:
    """Walk back from the function name over its return type/qualifiers."""
    j = name_idx
    while j - 1 > prev_end:
        t = tokens[j - 1]
        if t.text in (";", "}", "{", ")", "#") or t.kind == TokenKind.LITERAL:
            break
        j -= 1
    return j


def extract_functions(source: str) -> List[str]:
    """Return the text of each top-level function definition in ``source``.

    Definitions are found lexically, as ``name ( ... ) {`` at brace depth
    zero followed by a balanced body; braces inside literals are ignored
    because matching runs over lexer tokens. Nested definitions (lambdas,
    local classes) stay inside their enclosing function. Comments are removed
    from the returned text. On unbalanced braces the functions found so far
    are returned with a :class:`LexWarning`.
    """
    text = strip_comments(source)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LexWarning)
        tokens = lex(text)
    out: List[str] = []
    depth = 0
    scopes: List[bool] = []  # True for transparent namespace/extern blocks
    prev_end = -1  # index of the last token consumed by a definition or statement end
    i = 0
    n = len(tokens)
    while i < n:
        t = tokens[i].text
        if t == "{":
            transparent = depth == 0 and _opens_scope(tokens, i)
            scopes.append(transparent)
            if transparent:
                prev_end = i
            else:
                depth += 1
        elif t == "}":
            if scopes and not scopes.pop():
                depth -= 1
            if depth == 0:
                prev_end = i
        elif t == ";" and depth == 0:
            prev_end = i
        elif (depth == 0 and tokens[i].kind == TokenKind.IDENTIFIER
              and i + 1 < n and tokens[i + 1].text == "("
              and tokens[i].text not in _NOT_FUNCTIONS):
            close = _match_paren(tokens, i + 1)
            if close < 0:
                break
            k = close + 1
            while k < n and tokens[k].text in _TRAILERS:
                if tokens[k].text == "throw" and k + 1 < n and tokens[k + 1].text == "(":
                    k = _match_paren(tokens, k + 1)
                    if k < 0:
                        break
                k += 1
            if k < 0:
                break
            if k < n and tokens[k].text == "->":  # trailing return type
                k += 1
                while k < n and tokens[k].text not in ("{", ";"):
                    k += 1
            if 0 <= k < n and tokens[k].text == "{":
                end = _match_brace(tokens, k)
                if end < 0:
                    warnings.warn("unbalanced braces at end of input", LexWarning, stacklevel=2)
                    return out
                start = _definition_start(tokens, i, prev_end)
                out.append(text[tokens[start].start:tokens[end].end])
                prev_end = end
                i = end + 1
                continue
            i = close + 1
            continue
        i += 1
    if depth > 0:
        warnings.warn("unbalanced braces at end of input", LexWarning, stacklevel=2)
    return out


def extract_from_directory(root, suffixes: Sequence[str] = C_SUFFIXES) -> List[Sample]:
    """Walk ``root`` (sorted, deterministic) and extract every function.

    Extracted samples carry label 0 and ``origin = relative/path:index``.
    """
    samples = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fn in sorted(filenames):
            if not fn.lower().endswith(tuple(suffixes)):
                continue
            path = os.path.join(dirpath, fn)
            with open(path, "r", encoding="utf-8", errors="replace") as fh:
                src = fh.read()
            rel = os.path.relpath(path, root)
            for k, code in enumerate(extract_functions(src)):
                samples.append(Sample(code=code, label=0, origin=f"{rel}:{k}"))
    return samples


# --- datasets --------------------------------------------------------------

def _validate(code, label, n_classes: int):
    if not isinstance(code, str) or not strip_comments(code).strip():
        return None, "empty or non-string code"
    try:
        if isinstance(label, bool):
            raise ValueError
        lab = int(label)
        if isinstance(label, float) and lab != label:
            raise ValueError
    except (TypeError, ValueError):
        return None, f"non-integer label {label!r}"
    if not 0 <= lab < n_classes:
        return None, f"label {lab} outside 0..{n_classes - 1}"
    return lab, None


def load_dataset(path, schema: Optional[str] = None, n_classes: int = 2,
                 code_key: str = "code", label_key: str = "label",
                 origin_key: Optional[str] = None) -> List[Sample]:
    """Load labelled functions from JSONL or CSV.

    Invalid records are skipped and counted (the count is logged and kept on
    the returned list as ``skipped``); a file with no valid record raises
    :class:`DatasetError`.
    """
    if schema is None:
        schema = "csv" if str(path).lower().endswith(".csv") else "jsonl"
    if schema not in ("jsonl", "csv"):
        raise ConfigError(f"unknown dataset schema {schema!r}")

    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        if schema == "jsonl":
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    obj = None
                records.append((lineno, obj if isinstance(obj, dict) else None))
        else:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise DatasetError(f"{path}: CSV header row required")
            for rec in reader:
                records.append((reader.line_num, rec))

    samples = _LoadedSamples()
    for where, rec in records:
        if rec is None:
            reason = "unparseable record"
        elif code_key not in rec or label_key not in rec:
            reason = f"missing {code_key!r} or {label_key!r}"
        else:
            label, reason = _validate(rec[code_key], rec[label_key], n_classes)
        if reason:
            samples.skipped += 1
            warnings.warn(f"{path}:{where}: skipped record ({reason})", stacklevel=2)
            continue
        origin = rec.get(origin_key) if origin_key else None
        samples.append(Sample(code=rec[code_key], label=label,
                              origin=str(origin) if origin is not None else f"{path}:{where}"))
    if not samples:
        raise DatasetError(f"{path}: no valid records ({samples.skipped} skipped)")
    if samples.skipped:
        logger.warning("%s: skipped %d invalid records", path, samples.skipped)
    return samples


class _LoadedSamples(list):
    skipped = 0


def split(samples: Sequence, spec: SplitSpec = SplitSpec()):
    """Seeded shuffle, then floor-sized valid/test parts; remainder to train."""
    n = len(samples)
    if n < 10:
        raise ConfigError(f"need at least 10 samples to split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_valid = int(np.floor(spec.fractions[1] * n + 1e-9))
    n_test = int(np.floor(spec.fractions[2] * n + 1e-9))
    n_train = n - n_valid - n_test
    parts = (order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:])
    return tuple([samples[int(i)] for i in part] for part in parts)


def load_split_manifest(path) -> Dict[str, List[int]]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    for key in ("train", "valid", "test"):
        if not isinstance(obj.get(key), list):
            raise DatasetError(f"{path}: manifest needs a {key!r} index list")
    seen = set()
    for key in ("train", "valid", "test"):
        for idx in obj[key]:
            if idx in seen:
                raise DatasetError(f"{path}: index {idx} appears in more than one split")
            seen.add(idx)
    return {k: [int(i) for i in obj[k]] for k in ("train", "valid", "test")}


def apply_manifest(samples: Sequence, manifest: Dict[str, List[int]]):
    """Honour a dataset's original split given as index lists."""
    return tuple([samples[i] for i in manifest[k]] for k in ("train", "valid", "test"))


def class_weights(train: Sequence[Sample], n_classes: int) -> List[float]:
    """Inverse-frequency weights ``N / (n_classes * count_c)``."""
    counts = np.bincount([s.label for s in train], minlength=n_classes)[:n_classes]
    missing = [c for c in range(n_classes) if counts[c] == 0]
    if missing:
        raise DatasetError(f"classes absent from training split: {missing}")
    total = len(train)
    return [total / (n_classes * int(c)) for c in counts]
