"""Coattention question answering with a dynamic decoder and a mixed training objective."""

from .config import RunConfig
from .data import QAExample, Vocabulary, make_synthetic_corpus, parse_squad
from .metrics import EvalReport, evaluate_corpus, exact_match, f1_score
from .model import QAModel
from .train import evaluate_model, load_trained, predict

__all__ = [
    "EvalReport",
    "QAExample",
    "QAModel",
    "RunConfig",
    "Vocabulary",
    "evaluate_corpus",
    "evaluate_model",
    "exact_match",
    "f1_score",
    "load_trained",
    "make_synthetic_corpus",
    "parse_squad",
    "predict",
]
