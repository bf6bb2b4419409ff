"""C/C++ comment stripping and lexing.

The lexer performs no preprocessing and builds no syntax tree. It turns a
function's source into a flat list of :class:`LexToken` objects using maximal
munch, which is all the downstream tokenizer needs.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
import warnings
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, List, Tuple

__all__ = [
    "LexWarning",
    "TokenKind",
    "LexToken",
    "TokenTables",
    "load_tables",
    "read_table",
    "strip_comments",
    "lex",
    "tokens_to_jsonl",
]


class LexWarning(UserWarning):
    """Recoverable problem in the input (unterminated comment or literal)."""


class TokenKind(str, enum.Enum):
    KEYWORD = "keyword"
    PUNCTUATION = "punctuation"
    LITERAL = "literal"
    IDENTIFIER = "identifier"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class LexToken:
    text: str
    kind: TokenKind
    span: Tuple[int, int]

    @property
    def start(self) -> int:
        return self.span[0]

    @property
    def end(self) -> int:
        return self.span[1]


def read_table(text: str) -> List[str]:
    """Parse a token-table file body.

    One token per line. Blank lines and lines starting with ``"# "`` are
    comments; a bare ``#`` or ``##`` line is a token.
    """
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("# "):
            continue
        out.append(line)
    return out


def _checksum(items: Iterable[str]) -> str:
    return hashlib.sha256("\n".join(items).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TokenTables:
    keywords: Tuple[str, ...]
    punctuation: Tuple[str, ...]
    api: Tuple[str, ...]

    def __post_init__(self):
        for name, items in (("keywords", self.keywords),
                            ("punctuation", self.punctuation),
                            ("api", self.api)):
            if len(set(items)) != len(items):
                raise ValueError(f"duplicate entries in {name} table")

    @property
    def predefined(self) -> Tuple[str, ...]:
        """Keywords, then punctuation, then API names: vocabulary order."""
        return self.keywords + self.punctuation + self.api

    def checksums(self) -> dict:
        return {
            "keywords": _checksum(self.keywords),
            "punctuation": _checksum(self.punctuation),
            "api": _checksum(self.api),
        }


@lru_cache(maxsize=None)
def load_tables() -> TokenTables:
    pkg = resources.files("vulberta") / "data"
    return TokenTables(
        keywords=tuple(read_table((pkg / "keywords.txt").read_text("utf-8"))),
        punctuation=tuple(read_table((pkg / "punctuation.txt").read_text("utf-8"))),
        api=tuple(read_table((pkg / "api.txt").read_text("utf-8"))),
    )


# --- comment stripping -----------------------------------------------------

def _skip_quoted(source: str, i: int, quote: str) -> Tuple[int, bool]:
    """Return the index just past the literal opened at ``source[i]``.

    The second item is False when the literal is unterminated; in that case
    the index points at the end of the line (the newline is not consumed).
    """
    n = len(source)
    j = i + 1
    while j < n:
        c = source[j]
        if c == "\\":
            j += 2
            continue
        if c == quote:
            return j + 1, True
        if c == "\n":
            return j, False
        j += 1
    return n, False


def strip_comments(source: str) -> str:
    """Replace every ``//`` and ``/* */`` comment with a single space.

    Text inside string and character literals is left alone, as are the
    newlines that end line comments. An unterminated block comment is
    stripped to the end of input with a :class:`LexWarning`.
    """
    out = []
    n = len(source)
    i = 0
    start = 0
    while i < n:
        c = source[i]
        if c == '"' or c == "'":
            i, _ = _skip_quoted(source, i, c)
            continue
        if c == "/" and i + 1 < n:
            nxt = source[i + 1]
            if nxt == "/":
                out.append(source[start:i])
                out.append(" ")
                j = source.find("\n", i + 2)
                # a backslash-newline splices the next line into the comment
                while j > 0 and source[j - 1 - (source[j - 1] == "\r")] == "\\":
                    j = source.find("\n", j + 1)
                i = start = n if j < 0 else j
                continue
            if nxt == "*":
                out.append(source[start:i])
                out.append(" ")
                j = source.find("*/", i + 2)
                if j < 0:
                    warnings.warn("unterminated block comment", LexWarning, stacklevel=2)
                    i = start = n
                else:
                    i = start = j + 2
                continue
        i += 1
    out.append(source[start:])
    return "".join(out)


# --- lexing ----------------------------------------------------------------

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
# preprocessing-number: covers hex/octal/suffixes and exponents with signs
_NUMBER_RE = re.compile(r"\.?[0-9](?:[eEpP][+-]|[A-Za-z0-9_.])*")
_STRING_PREFIXES = frozenset({"L", "u", "U", "u8", "R", "LR", "uR", "UR", "u8R"})


@lru_cache(maxsize=None)
def _tables_index():
    tables = load_tables()
    by_len = {}
    for p in tables.punctuation:
        by_len.setdefault(len(p), set()).add(p)
    lengths = sorted(by_len, reverse=True)
    return frozenset(tables.keywords), [(k, frozenset(by_len[k])) for k in lengths]


def lex(source: str) -> List[LexToken]:
    """Split C/C++ source into classified tokens by maximal munch.

    Comments are stripped first, so spans index into
    ``strip_comments(source)``. Bytes that start no known token become
    one-character UNKNOWN tokens. Unterminated string or character literals
    run to the end of their line and raise a :class:`LexWarning`.

    >>> [(t.kind.value, t.text) for t in lex("int x = 10;")]
    [('keyword', 'int'), ('identifier', 'x'), ('punctuation', '='), ('literal', '10'), ('punctuation', ';')]
    """
    text = strip_comments(source)
    keywords, punct_by_len = _tables_index()
    tokens: List[LexToken] = []
    n = len(text)
    i = 0
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue

        if c == '"' or c == "'":
            j, ok = _skip_quoted(text, i, c)
            if not ok:
                warnings.warn(f"unterminated literal at offset {i}", LexWarning, stacklevel=2)
            tokens.append(LexToken(text[i:j].rstrip(), TokenKind.LITERAL, (i, i + len(text[i:j].rstrip()))))
            i = j
            continue

        m = _IDENT_RE.match(text, i)
        if m:
            word = m.group()
            j = m.end()
            if word in _STRING_PREFIXES and j < n and text[j] in "\"'":
                k, ok = _skip_quoted(text, j, text[j])
                if not ok:
                    warnings.warn(f"unterminated literal at offset {i}", LexWarning, stacklevel=2)
                lit = text[i:k].rstrip()
                tokens.append(LexToken(lit, TokenKind.LITERAL, (i, i + len(lit))))
                i = k
                continue
            kind = TokenKind.KEYWORD if word in keywords else TokenKind.IDENTIFIER
            tokens.append(LexToken(word, kind, (i, j)))
            i = j
            continue

        m = _NUMBER_RE.match(text, i)
        if m:
            tokens.append(LexToken(m.group(), TokenKind.LITERAL, (i, m.end())))
            i = m.end()
            continue

        for length, options in punct_by_len:
            piece = text[i:i + length]
            if piece in options:
                tokens.append(LexToken(piece, TokenKind.PUNCTUATION, (i, i + length)))
                i += length
                break
        else:
            tokens.append(LexToken(c, TokenKind.UNKNOWN, (i, i + 1)))
            i += 1
    return tokens


def tokens_to_jsonl(tokens: Iterable[LexToken]) -> str:
    """Debug dump: one ``{text, kind, start, end}`` object per line."""
    lines = [
        json.dumps({"text": t.text, "kind": t.kind.value, "start": t.start, "end": t.end},
                   ensure_ascii=False)
        for t in tokens
    ]
    return "".join(line + "\n" for line in lines)
