"""Transformer pre-training and fine-tuning for C/C++ vulnerability detection.

The pipeline runs lexer -> BPE tokenizer -> masked-LM encoder -> classifier
head (MLP or text-CNN) -> metrics. ``vulberta.estimators`` wraps the stages
in scikit-learn style classes; ``python -m vulberta`` is the command line.
"""

from .errors import (CheckpointError, ConfigError, DatasetError, InputError, IntegrityError,
                     VocabFormatError)
from .estimators import CodeTokenizer, MaskedLMPretrainer, VulnerabilityClassifier
from .lexer import LexToken, TokenKind, lex, strip_comments
from .metrics import EvalReport, build_report, confusion
from .model import ModelConfig, count_params, preset
from .tokenizer import Vocab, decode, encode, load_vocab, save_vocab, tokenize, train_bpe
from .train import TrainConfig, evaluate, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DatasetError", "InputError", "IntegrityError",
    "VocabFormatError", "CodeTokenizer", "MaskedLMPretrainer", "VulnerabilityClassifier",
    "LexToken", "TokenKind", "lex", "strip_comments", "EvalReport", "build_report", "confusion",
    "ModelConfig", "count_params", "preset", "Vocab", "decode", "encode", "load_vocab",
    "save_vocab", "tokenize", "train_bpe", "TrainConfig", "evaluate", "finetune", "pretrain",
]
