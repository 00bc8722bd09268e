"""SQuAD-style answer scoring: normalisation, exact match, token F1, corpus reports."""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Mapping, Sequence

QUESTION_TYPES = ("what", "which", "who", "when", "where", "why", "how")
QUESTION_LENGTH_BUCKETS = ((0, 8, "<=8"), (9, 12, "9-12"), (13, 16, "13-16"), (17, None, ">=17"))
ANSWER_LENGTH_BUCKETS = ((1, 1, "1"), (2, 3, "2-3"), (4, 7, "4-7"), (8, None, ">=8"))

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def _f1_tokens(pred_tokens, gold_tokens) -> float:
    if not pred_tokens and not gold_tokens:
        # both normalise to nothing: an exact match, so F1 must not fall below EM
        return 1.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_score(pred: str, gold: str) -> float:
    return _f1_tokens(normalize_answer(pred).split(), normalize_answer(gold).split())


def _check_golds(golds):
    if not golds:
        raise ValueError("at least one gold answer is required")


def exact_match(pred: str, golds: Sequence[str]) -> int:
    _check_golds(golds)
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def f1_match(pred: str, golds: Sequence[str]) -> float:
    _check_golds(golds)
    return max(f1_score(pred, g) for g in golds)


@dataclass
class EvalReport:
    em: float
    f1: float
    n_examples: int
    missing: int = 0
    breakdowns: Dict[str, Dict[str, dict]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "em": self.em,
            "f1": self.f1,
            "n_examples": self.n_examples,
            "missing": self.missing,
            "breakdowns": self.breakdowns,
        }


def question_type(question: str) -> str:
    words = normalize_answer(question).split()
    first = words[0] if words else ""
    return first if first in QUESTION_TYPES else "other"


def _bucket(n: int, buckets) -> str:
    for lo, hi, label in buckets:
        if n >= lo and (hi is None or n <= hi):
            return label
    return buckets[0][2]


def evaluate_corpus(predictions: Mapping[str, str], examples) -> EvalReport:
    """Score ``{id: answer}`` against examples exposing ``id``, ``question_text`` and ``answer_texts``."""
    from .data import tokenize

    groups: Dict[str, Dict[str, list]] = {"question_type": {}, "question_length": {}, "answer_length": {}}
    em_total = f1_total = 0.0
    missing = 0
    for ex in examples:
        pred = predictions.get(ex.id)
        if pred is None:
            missing += 1
            em, f1 = 0, 0.0
        else:
            em, f1 = exact_match(pred, ex.answer_texts), f1_match(pred, ex.answer_texts)
        em_total += em
        f1_total += f1
        labels = {
            "question_type": question_type(ex.question_text),
            "question_length": _bucket(len(tokenize(ex.question_text).tokens), QUESTION_LENGTH_BUCKETS),
            "answer_length": _bucket(len(tokenize(ex.answer_texts[0]).tokens), ANSWER_LENGTH_BUCKETS),
        }
        for group, label in labels.items():
            groups[group].setdefault(label, []).append((em, f1))
    n = len(examples)
    breakdowns = {
        group: {
            label: {
                "em": 100.0 * sum(e for e, _ in rows) / len(rows),
                "f1": 100.0 * sum(f for _, f in rows) / len(rows),
                "count": len(rows),
            }
            for label, rows in sorted(buckets.items())
        }
        for group, buckets in groups.items()
    }
    return EvalReport(
        em=100.0 * em_total / n if n else 0.0,
        f1=100.0 * f1_total / n if n else 0.0,
        n_examples=n,
        missing=missing,
        breakdowns=breakdowns,
    )
