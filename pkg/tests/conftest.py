import os
import warnings

import numpy as np
import pytest

from vulberta.lexer import LexWarning, lex
from vulberta.synthetic import generate_corpus
from vulberta.tokenizer import train_bpe

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

# the vocabulary the golden encoding was frozen against
FIXTURE_VOCAB_CORPUS = dict(n=200, seed=7)
FIXTURE_VOCAB_SIZE = 1200


def fixture_path(name):
    return os.path.join(FIXTURES, name)


def read_fixture(name):
    with open(fixture_path(name), "r", encoding="utf-8") as fh:
        return fh.read()


def lex_quiet(code):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LexWarning)
        return lex(code)


@pytest.fixture(scope="session")
def fixture_corpus():
    return generate_corpus(**FIXTURE_VOCAB_CORPUS)


@pytest.fixture(scope="session")
def fixture_vocab(fixture_corpus):
    return train_bpe((lex(c) for c in fixture_corpus), max_size=FIXTURE_VOCAB_SIZE)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance summary --------------------------------------------------------

ACCEPTANCE_RESULTS = {}


def record_criterion(number, title, ok, detail=""):
    """Remember one criterion outcome; printed at the end of the run."""
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
    if detail:
        line += f"  ({detail})"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
