"""Byte-level BPE with a reserved C/C++ vocabulary, plus the sequence encoder.

Keywords, punctuators and standard API names are single vocabulary entries
that BPE never splits or produces. Every other lexer token (identifiers,
literals, unknown bytes) is one BPE "word": merges never cross token
boundaries.

Subword strings use a byte alphabet in which ``[A-Za-z0-9_]`` bytes stand for
themselves and every other byte maps to ``chr(0x100 + b)``. That keeps
identifier subwords readable while guaranteeing that no atom can collide with
a single-character punctuator such as ``=`` or ``;``.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import os
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, IntegrityError, VocabFormatError
from .lexer import LexToken, LexWarning, TokenKind, TokenTables, lex, load_tables

__all__ = [
    "RESERVED_TOKENS",
    "BOS", "PAD", "EOS", "UNK", "MASK",
    "N_RESERVED",
    "VOCAB_VERSION",
    "Vocab",
    "EncodedSeq",
    "byte_atoms",
    "word_to_atoms",
    "atoms_to_text",
    "min_vocab_size",
    "train_bpe",
    "apply_merges",
    "tokenize",
    "encode",
    "encode_batch",
    "decode",
    "save_vocab",
    "load_vocab",
    "dumps_vocab",
    "encode_source",
]

RESERVED_TOKENS = ("<s>", "<pad>", "</s>", "<unk>", "<mask>")
BOS, PAD, EOS, UNK, MASK = range(5)
N_RESERVED = len(RESERVED_TOKENS)
VOCAB_VERSION = 1
DEFAULT_MAX_SIZE = 50_000

_PLAIN = frozenset(b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_")
_BYTE_TO_ATOM = tuple(chr(b) if b in _PLAIN else chr(0x100 + b) for b in range(256))
_ATOM_TO_BYTE = {a: b for b, a in enumerate(_BYTE_TO_ATOM)}


def byte_atoms() -> Tuple[str, ...]:
    return _BYTE_TO_ATOM


def word_to_atoms(text: str) -> Tuple[str, ...]:
    return tuple(_BYTE_TO_ATOM[b] for b in text.encode("utf-8"))


def atoms_to_text(subword: str) -> str:
    """Inverse of the byte alphabet for one subword (or a concatenation)."""
    return bytes(_ATOM_TO_BYTE[c] for c in subword).decode("utf-8", errors="replace")


def min_vocab_size(tables: Optional[TokenTables] = None) -> int:
    tables = tables or load_tables()
    return N_RESERVED + len(tables.predefined) + 256


@dataclass(eq=False)
class Vocab:
    """Token/id maps plus the ordered merge list.

    Ids are laid out as reserved (0-4), pre-defined (5-450), the 256 byte
    atoms, then merge products in merge order.
    """

    reserved: Tuple[str, ...]
    predefined: Tuple[str, ...]
    atoms: Tuple[str, ...]
    merges: Tuple[Tuple[str, str], ...]
    max_size: int = DEFAULT_MAX_SIZE
    table_checksums: Dict[str, str] = field(default_factory=dict)
    version: int = VOCAB_VERSION

    def __post_init__(self):
        self.id_to_token: List[str] = []
        self.token_to_id: Dict[str, int] = {}
        for tok in self.reserved + self.predefined + self.atoms:
            if tok in self.token_to_id:
                raise VocabFormatError(f"duplicate vocabulary entry {tok!r}")
            self._add(tok)
        for left, right in self.merges:
            if left not in self.token_to_id or right not in self.token_to_id:
                raise VocabFormatError(f"merge ({left!r}, {right!r}) uses unknown symbols")
            merged = left + right
            if merged not in self.token_to_id:
                self._add(merged)
        if len(self.token_to_id) > self.max_size:
            raise VocabFormatError(
                f"vocabulary has {len(self.token_to_id)} entries, over max_size {self.max_size}")
        self.merge_ranks = {pair: r for r, pair in enumerate(self.merges)}
        self.predefined_set = frozenset(self.predefined)
        self._cache: Dict[str, Tuple[str, ...]] = {}

    def _add(self, tok: str) -> None:
        self.token_to_id[tok] = len(self.id_to_token)
        self.id_to_token.append(tok)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Vocab):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def segment(self, word: str) -> Tuple[str, ...]:
        """BPE segmentation of one non-predefined token text (memoised)."""
        seg = self._cache.get(word)
        if seg is None:
            seg = apply_merges(word_to_atoms(word), self.merge_ranks)
            self._cache[word] = seg
        return seg

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "max_size": self.max_size,
            "reserved": list(self.reserved),
            "predefined": list(self.predefined),
            "atoms": list(self.atoms),
            "merges": [list(m) for m in self.merges],
            "table_checksums": dict(self.table_checksums),
        }

    @property
    def checksum(self) -> str:
        return hashlib.sha256(dumps_vocab(self).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EncodedSeq:
    ids: Tuple[int, ...]
    attention_mask: Tuple[int, ...]
    true_len: int

    @property
    def max_len(self) -> int:
        return len(self.ids)


def _is_bpe_token(tok: LexToken, api: frozenset) -> bool:
    if tok.kind in (TokenKind.KEYWORD, TokenKind.PUNCTUATION):
        return False
    if tok.kind == TokenKind.IDENTIFIER and tok.text in api:
        return False
    return True


def _word_pairs(symbols: Sequence[str]):
    return zip(symbols, symbols[1:])


def _merge_word(symbols: Tuple[str, ...], left: str, right: str) -> Tuple[str, ...]:
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def train_bpe(corpus: Iterable[Sequence[LexToken]], max_size: int = DEFAULT_MAX_SIZE,
              tables: Optional[TokenTables] = None) -> Vocab:
    """Learn BPE merges over the identifier/literal/unknown tokens of a corpus.

    The most frequent adjacent pair is merged first; ties go to the
    lexicographically smallest ``(left, right)``. A pair whose product would
    equal a reserved or pre-defined token is never merged. Training stops when
    the vocabulary reaches ``max_size`` or no pair occurs at least twice.
    """
    tables = tables or load_tables()
    floor = N_RESERVED + len(tables.predefined)
    minimum = floor + 256
    if max_size <= floor or max_size < minimum:
        raise ConfigError(
            f"max_size={max_size} too small: must exceed {floor} "
            f"({N_RESERVED} reserved + {len(tables.predefined)} pre-defined) and hold "
            f"the 256 byte atoms, i.e. max_size >= {minimum}")

    api = frozenset(tables.api)
    counts: Counter = Counter()
    n_docs = 0
    for tokens in corpus:
        n_docs += 1
        for tok in tokens:
            if _is_bpe_token(tok, api):
                counts[tok.text] += 1
    if n_docs == 0:
        raise ConfigError("train_bpe needs a non-empty corpus")

    forbidden = set(RESERVED_TOKENS) | set(tables.predefined)
    words = [word_to_atoms(w) for w in sorted(counts)]
    freqs = [counts[w] for w in sorted(counts)]

    pair_counts: Dict[Tuple[str, str], int] = defaultdict(int)
    where: Dict[Tuple[str, str], set] = defaultdict(set)
    for idx, (sym, f) in enumerate(zip(words, freqs)):
        for pair in _word_pairs(sym):
            pair_counts[pair] += f
            where[pair].add(idx)

    heap = [(-c, p[0], p[1]) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    known = set(RESERVED_TOKENS) | set(tables.predefined) | set(_BYTE_TO_ATOM)
    size = len(known)
    merges: List[Tuple[str, str]] = []
    while size < max_size and heap:
        negc, left, right = heapq.heappop(heap)
        pair = (left, right)
        count = pair_counts.get(pair, 0)
        if -negc != count:
            continue  # stale heap entry
        if count < 2:
            break
        if left + right in forbidden:
            continue
        merges.append(pair)
        merged = left + right
        if merged not in known:
            known.add(merged)
            size += 1

        touched = set()
        for idx in sorted(where.pop(pair, ())):
            old = words[idx]
            new = _merge_word(old, left, right)
            if new == old:
                continue
            f = freqs[idx]
            for p in _word_pairs(old):
                pair_counts[p] -= f
                touched.add(p)
            for p in _word_pairs(new):
                pair_counts[p] += f
                where[p].add(idx)
                touched.add(p)
            words[idx] = new
        pair_counts.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c <= 0:
                pair_counts.pop(p, None)
            elif p != pair:
                heapq.heappush(heap, (-c, p[0], p[1]))

    return Vocab(
        reserved=RESERVED_TOKENS,
        predefined=tables.predefined,
        atoms=_BYTE_TO_ATOM,
        merges=tuple(merges),
        max_size=max_size,
        table_checksums=tables.checksums(),
    )


def apply_merges(symbols: Tuple[str, ...], ranks: Dict[Tuple[str, str], int]) -> Tuple[str, ...]:
    """Repeatedly merge the lowest-ranked adjacent pair until none applies."""
    while len(symbols) > 1:
        best = None
        best_rank = None
        for pair in _word_pairs(symbols):
            r = ranks.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best, best_rank = pair, r
        if best is None:
            break
        symbols = _merge_word(symbols, *best)
    return symbols


def tokenize(tokens: Sequence[LexToken], vocab: Vocab) -> List[str]:
    """Map lexer tokens to vocabulary strings, in source order."""
    out: List[str] = []
    predefined = vocab.predefined_set
    for tok in tokens:
        if tok.kind != TokenKind.LITERAL and tok.kind != TokenKind.UNKNOWN and tok.text in predefined:
            out.append(tok.text)
        else:
            out.extend(vocab.segment(tok.text))
    return out


def encode(subwords: Sequence[str], vocab: Vocab, max_len: int) -> EncodedSeq:
    """Frame with ``<s> ... </s>``, truncate the tail, pad right with ``<pad>``."""
    if max_len < 2:
        raise ConfigError(f"max_len must be >= 2, got {max_len}")
    lookup = vocab.token_to_id
    body = [lookup.get(s, UNK) for s in subwords[: max_len - 2]]
    ids = [BOS] + body + [EOS]
    true_len = len(ids)
    pad = max_len - true_len
    return EncodedSeq(
        ids=tuple(ids + [PAD] * pad),
        attention_mask=tuple([1] * true_len + [0] * pad),
        true_len=true_len,
    )


def encode_batch(seqs: Sequence[EncodedSeq]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack encoded sequences into ``(ids, attention_mask)`` int64 arrays."""
    ids = np.asarray([s.ids for s in seqs], dtype=np.int64)
    mask = np.asarray([s.attention_mask for s in seqs], dtype=np.int64)
    return ids, mask


def decode(ids: Iterable[int], vocab: Vocab) -> List[str]:
    out = []
    n = len(vocab)
    for i in ids:
        i = int(i)
        if i < 0 or i >= n:
            raise IndexError(f"token id {i} out of range for vocabulary of size {n}")
        if i >= N_RESERVED:
            out.append(vocab.id_to_token[i])
    return out


# --- persistence -----------------------------------------------------------

def dumps_vocab(vocab: Vocab) -> str:
    return json.dumps(vocab.to_dict(), sort_keys=True, ensure_ascii=False, indent=1) + "\n"


def save_vocab(vocab: Vocab, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_vocab(vocab))
    os.replace(tmp, path)


_REQUIRED = {
    "version": int, "max_size": int, "reserved": list, "predefined": list,
    "atoms": list, "merges": list, "table_checksums": dict,
}


def load_vocab(path, tables: Optional[TokenTables] = None) -> Vocab:
    """Read a vocabulary file and check it against the installed token tables."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise VocabFormatError(exc.msg, lineno=exc.lineno) from None
    if not isinstance(obj, dict):
        raise VocabFormatError("top level must be an object", lineno=1)
    for key, typ in _REQUIRED.items():
        if not isinstance(obj.get(key), typ):
            raise VocabFormatError(f"missing or mistyped field {key!r}")
    if obj["version"] != VOCAB_VERSION:
        raise VocabFormatError(f"unsupported vocab version {obj['version']}")
    for m in obj["merges"]:
        if not (isinstance(m, list) and len(m) == 2 and all(isinstance(s, str) for s in m)):
            raise VocabFormatError(f"malformed merge entry {m!r}")

    tables = tables or load_tables()
    if obj["table_checksums"] != tables.checksums() or tuple(obj["predefined"]) != tables.predefined:
        raise IntegrityError(
            f"{path}: token-table checksums do not match the installed tables")
    if tuple(obj["reserved"]) != RESERVED_TOKENS:
        raise VocabFormatError(f"unexpected reserved tokens {obj['reserved']!r}")
    if tuple(obj["atoms"]) != _BYTE_TO_ATOM:
        raise VocabFormatError("byte atom table does not match this tokenizer")

    return Vocab(
        reserved=tuple(obj["reserved"]),
        predefined=tuple(obj["predefined"]),
        atoms=tuple(obj["atoms"]),
        merges=tuple(tuple(m) for m in obj["merges"]),
        max_size=obj["max_size"],
        table_checksums=dict(obj["table_checksums"]),
        version=obj["version"],
    )


def encode_source(code: str, vocab: Vocab, max_len: int) -> EncodedSeq:
    """lex -> tokenize -> encode for one function, silencing lexer warnings."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LexWarning)
        tokens = lex(code)
    return encode(tokenize(tokens, vocab), vocab, max_len)
