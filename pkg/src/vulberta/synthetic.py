"""Random C function generator for fuzzing and toy training runs.

Functions are built from a small grammar of statements over random
identifiers, literals, keywords and standard API calls, so every token
class of the lexer shows up. Labelled corpora mark a function vulnerable
when it copies into a fixed buffer with an unbounded API.
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from .ingest import Sample
from .lexer import load_tables

__all__ = ["random_identifier", "generate_function", "generate_corpus", "generate_labelled"]

_TYPES = ("int", "char", "unsigned", "long", "size_t", "void *", "const char *", "double", "short")
_OPS = ("+", "-", "*", "/", "%", "<<", ">>", "&", "|", "^", "&&", "||", "==", "!=", "<", ">",
        "<=", ">=")
_ASSIGN = ("=", "+=", "-=", "*=", "|=", "&=", "^=", "<<=", ">>=")
_CHARS = "abcdefghijklmnopqrstuvwxyz"
_STEMS = ("buf", "len", "size", "count", "idx", "ptr", "data", "node", "ctx", "tmp", "src", "dst",
          "val", "res", "flag", "item", "str", "key", "off", "cur")


def random_identifier(rng: np.random.Generator) -> str:
    """Identifier that is never a keyword or API name."""
    tables = load_tables()
    reserved = set(tables.keywords) | set(tables.api)
    while True:
        u = rng.random()
        if u < 0.55:
            name = str(rng.choice(_STEMS))
        elif u < 0.9:
            name = f"{rng.choice(_STEMS)}_{rng.choice(_STEMS)}"
        else:
            n = int(rng.integers(1, 9))
            name = "".join(rng.choice(list(_CHARS + "_"), size=n))
        if rng.random() < 0.1:
            name += str(int(rng.integers(0, 10)))
        if name not in reserved:
            return name


_COMMON_INTS = ("0", "1", "-1", "2", "4", "8", "16", "32", "64", "256", "1024")


def _literal(rng) -> str:
    if rng.random() < 0.6:
        return str(rng.choice(_COMMON_INTS))
    k = rng.integers(0, 6)
    if k == 0:
        return str(int(rng.integers(0, 1000)))
    if k == 1:
        return hex(int(rng.integers(0, 1 << 16))).upper().replace("0X", "0x")
    if k == 2:
        return f"{rng.random() * 100:.3f}f"
    if k == 3:
        words = " ".join(str(rng.choice(_STEMS)) for _ in range(int(rng.integers(1, 4))))
        return f'"{words}%d\\n"'
    if k == 4:
        return f"'{rng.choice(list(_CHARS))}'"
    return f"{int(rng.integers(1, 1 << 20))}UL"


def _expr(rng, names, depth=0) -> str:
    if depth > 1 or rng.random() < 0.4:
        return str(rng.choice(names)) if rng.random() < 0.6 else _literal(rng)
    k = rng.integers(0, 4)
    if k == 0:
        return f"{_expr(rng, names, depth + 1)} {rng.choice(_OPS)} {_expr(rng, names, depth + 1)}"
    if k == 1:
        return f"({_expr(rng, names, depth + 1)})"
    if k == 2:
        return f"{rng.choice(names)}[{_expr(rng, names, depth + 1)}]"
    return f"{rng.choice(names)}->{random_identifier(rng)}"


def _idiom(rng, names) -> str:
    a, b = (str(x) for x in rng.choice(names, size=2))
    k = rng.integers(0, 6)
    if k == 0:
        return f"if ({a} == NULL) {{ return -1; }}"
    if k == 1:
        return f"for (i = 0; i < {b}; i++) {{ {a}[i] = 0; }}"
    if k == 2:
        return f"memset({a}, 0, sizeof({a}));"
    if k == 3:
        return f"if ({a} < 0) {{ goto error; }}"
    if k == 4:
        return f'printf("%d\\n", {a});'
    return f"{a} = malloc({b} * sizeof(int));"


def _statement(rng, names, api, depth=0) -> str:
    if rng.random() < 0.4:
        return _idiom(rng, names)
    k = rng.integers(0, 7 if depth < 2 else 4)
    if k == 0:
        return f"{rng.choice(names)} {rng.choice(_ASSIGN)} {_expr(rng, names)};"
    if k == 1:
        fn = str(rng.choice(api))
        args = ", ".join(_expr(rng, names) for _ in range(int(rng.integers(1, 4))))
        return f"{fn}({args});"
    if k == 2:
        return f"{rng.choice(names)}{rng.choice(['++', '--'])};"
    if k == 3:
        return f"return {_expr(rng, names)};"
    body = " ".join(_statement(rng, names, api, depth + 1) for _ in range(int(rng.integers(1, 3))))
    if k == 4:
        return f"if ({_expr(rng, names)}) {{ {body} }} else {{ {_statement(rng, names, api, depth + 1)} }}"
    if k == 5:
        i = random_identifier(rng)
        return f"for (int {i} = 0; {i} < {_expr(rng, names)}; {i}++) {{ {body} }}"
    return f"while ({_expr(rng, names)}) {{ {body} }}"


def generate_function(rng: np.random.Generator, n_statements: Optional[int] = None,
                      comments: bool = True, extra: str = "") -> str:
    tables = load_tables()
    api = tables.api
    name = random_identifier(rng)
    params = [random_identifier(rng) for _ in range(int(rng.integers(0, 4)))]
    locals_ = [random_identifier(rng) for _ in range(int(rng.integers(1, 4)))]
    names = params + locals_
    lines = [f"{rng.choice(_TYPES)} {name}("
             + ", ".join(f"{rng.choice(_TYPES)} {p}" for p in params) + ") {"]
    if extra:
        # first, so truncation to a short max_len keeps it
        lines.append("    " + extra)
    for v in locals_:
        lines.append(f"    {rng.choice(_TYPES)} {v} = {_literal(rng)};")
    if comments and rng.random() < 0.5:
        lines.append(f"    /* {rng.choice(_STEMS)} // nested */")
    n = int(rng.integers(2, 8)) if n_statements is None else n_statements
    for _ in range(n):
        stmt = _statement(rng, names, api)
        if comments and rng.random() < 0.15:
            stmt += f" // {rng.choice(_STEMS)}"
        lines.append("    " + stmt)
    lines.append("}")
    return "\n".join(lines)


def generate_corpus(n: int, seed: int = 0, **kwargs) -> List[str]:
    rng = np.random.default_rng(seed)
    return [generate_function(rng, **kwargs) for _ in range(n)]


def generate_labelled(n: int, seed: int = 0) -> List[Sample]:
    """Balanced, linearly separable toy set: label 1 iff ``strcpy`` into a stack buffer."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        if label:
            extra = "char local_buf[16]; strcpy(local_buf, input);"
        else:
            extra = "char local_buf[16]; strncpy(local_buf, input, sizeof(local_buf) - 1);"
        code = generate_function(rng, n_statements=2, comments=False, extra=extra)
        out.append(Sample(code=code, label=label, origin=f"synthetic:{i}"))
    return out
