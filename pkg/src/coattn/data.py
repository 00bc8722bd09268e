"""SQuAD ingestion, tokenisation, vocabularies, batching and synthetic corpora."""

from __future__ import annotations

import json
import logging
import string
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_PUNCT = set(string.punctuation)


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TokenizedText:
    text: str
    tokens: List[str]
    char_spans: List[tuple]

    def __len__(self) -> int:
        return len(self.tokens)

    def span_text(self, start: int, end: int) -> str:
        """Original text covered by tokens ``start..end`` (inclusive); '' if ``end < start``."""
        if end < start:
            return ""
        return self.text[self.char_spans[start][0] : self.char_spans[end][1]]


@dataclass(frozen=True)
class AnswerSpan:
    start: int
    end: int

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"answer span start {self.start} > end {self.end}")


@dataclass
class QAExample:
    id: str
    document: TokenizedText
    question: TokenizedText
    answers: List[AnswerSpan]
    answer_texts: List[str]

    @property
    def question_text(self) -> str:
        return self.question.text


@dataclass
class SquadRecord:
    """One question as it appears in the file, before any alignment."""

    id: str
    context: str
    question_text: str
    answer_texts: List[str]
    answer_starts: List[int]


def tokenize(text: str) -> TokenizedText:
    """Whitespace split, then peel leading/trailing ASCII punctuation into single-character tokens."""
    tokens, spans = [], []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace():
            j += 1
        lo, hi = i, j
        head = []
        while lo < hi and text[lo] in _PUNCT:
            head.append((lo, lo + 1))
            lo += 1
        tail = []
        while hi > lo and text[hi - 1] in _PUNCT:
            tail.append((hi - 1, hi))
            hi -= 1
        pieces = head + ([(lo, hi)] if lo < hi else []) + tail[::-1]
        for a, b in pieces:
            tokens.append(text[a:b])
            spans.append((a, b))
        i = j
    return TokenizedText(text, tokens, spans)


def align_answer(doc: TokenizedText, char_start: int, answer_text: str) -> Optional[AnswerSpan]:
    """Token span whose boundaries coincide exactly with the answer's character range."""
    stripped = answer_text.strip()
    if not stripped:
        return None
    char_start += len(answer_text) - len(answer_text.lstrip())
    char_end = char_start + len(stripped)
    if doc.text[char_start:char_end] != stripped:
        return None
    starts = {s: k for k, (s, _) in enumerate(doc.char_spans)}
    ends = {e: k for k, (_, e) in enumerate(doc.char_spans)}
    if char_start not in starts or char_end not in ends:
        return None
    s, e = starts[char_start], ends[char_end]
    return AnswerSpan(s, e) if s <= e else None


def _field(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"missing field '{key}' in {where}")
    return obj[key]


def read_squad_records(path) -> List[SquadRecord]:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return squad_records_from_json(raw)


def squad_records_from_json(raw) -> List[SquadRecord]:
    records = []
    for a, article in enumerate(_field(raw, "data", "top level")):
        for p, para in enumerate(_field(article, "paragraphs", f"data[{a}]")):
            where = f"data[{a}].paragraphs[{p}]"
            context = _field(para, "context", where)
            for q, qa in enumerate(_field(para, "qas", where)):
                qwhere = f"{where}.qas[{q}]"
                answers = _field(qa, "answers", qwhere)
                records.append(
                    SquadRecord(
                        id=str(_field(qa, "id", qwhere)),
                        context=context,
                        question_text=_field(qa, "question", qwhere),
                        answer_texts=[_field(x, "text", f"{qwhere}.answers") for x in answers],
                        answer_starts=[int(_field(x, "answer_start", f"{qwhere}.answers")) for x in answers],
                    )
                )
    return records


@dataclass
class ParseStats:
    kept: int = 0
    dropped: int = 0
    dropped_answers: int = 0


def examples_from_records(records: Iterable[SquadRecord], stats: Optional[ParseStats] = None) -> List[QAExample]:
    stats = stats if stats is not None else ParseStats()
    out = []
    doc_cache = {}
    for rec in records:
        doc = doc_cache.get(rec.context)
        if doc is None:
            doc = doc_cache[rec.context] = tokenize(rec.context)
        spans, texts = [], []
        for text, start in zip(rec.answer_texts, rec.answer_starts):
            span = align_answer(doc, start, text)
            if span is None:
                stats.dropped_answers += 1
                continue
            spans.append(span)
            texts.append(text)
        if not spans:
            stats.dropped += 1
            continue
        stats.kept += 1
        out.append(QAExample(rec.id, doc, tokenize(rec.question_text), spans, list(rec.answer_texts)))
    if stats.dropped:
        logger.warning("dropped %d examples whose answers do not align to token boundaries", stats.dropped)
    return out


def parse_squad(path, stats: Optional[ParseStats] = None) -> List[QAExample]:
    return examples_from_records(read_squad_records(path), stats)


def to_squad_json(examples: Sequence[QAExample], title: str = "synthetic") -> dict:
    paragraphs = []
    for ex in examples:
        answers = []
        for span, text in zip(ex.answers, ex.answer_texts):
            answers.append({"text": text, "answer_start": ex.document.char_spans[span.start][0]})
        paragraphs.append(
            {"context": ex.document.text, "qas": [{"id": ex.id, "question": ex.question.text, "answers": answers}]}
        )
    return {"version": "1.1", "data": [{"title": title, "paragraphs": paragraphs}]}


# ---------------------------------------------------------------------------
# Vocabulary and batching
# ---------------------------------------------------------------------------


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = [PAD_TOKEN, UNK_TOKEN]
        self.stoi = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return idx

    def __len__(self) -> int:
        return len(self.itos)

    def lookup(self, token: str) -> int:
        return self.stoi.get(token.lower(), UNK_ID)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.lookup(t) for t in tokens]

    @classmethod
    def build(cls, examples: Iterable[QAExample], min_count: int = 1) -> "Vocabulary":
        counts = {}
        for ex in examples:
            for tok in ex.document.tokens + ex.question.tokens:
                key = tok.lower()
                counts[key] = counts.get(key, 0) + 1
        return cls(sorted(t for t, c in counts.items() if c >= min_count))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos[2:]))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        return cls(text.split("\n") if text else [])


@dataclass
class Batch:
    doc_token_ids: np.ndarray
    q_token_ids: np.ndarray
    doc_mask: np.ndarray
    q_mask: np.ndarray
    gold_spans: List[AnswerSpan]
    examples: List[QAExample] = field(default_factory=list)

    @property
    def doc_lengths(self) -> np.ndarray:
        return self.doc_mask.sum(axis=1).astype(np.int64)

    @property
    def q_lengths(self) -> np.ndarray:
        return self.q_mask.sum(axis=1).astype(np.int64)

    def __len__(self) -> int:
        return len(self.gold_spans)


def _pad(rows: List[List[int]]):
    width = max(len(r) for r in rows)
    ids = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = 1.0
    return ids, mask


def make_batch(examples: Sequence[QAExample], vocab: Vocabulary) -> Batch:
    for ex in examples:
        if len(ex.document) == 0 or len(ex.question) == 0:
            raise ValueError(f"example {ex.id} has an empty document or question")
    d_ids, d_mask = _pad([vocab.encode(ex.document.tokens) for ex in examples])
    q_ids, q_mask = _pad([vocab.encode(ex.question.tokens) for ex in examples])
    return Batch(d_ids, q_ids, d_mask, q_mask, [ex.answers[0] for ex in examples], list(examples))


def iterate_batches(examples: Sequence[QAExample], vocab: Vocabulary, batch_size: int, rng=None):
    """Yield batches in file order, or in an order shuffled by ``rng``."""
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for lo in range(0, len(order), batch_size):
        yield make_batch([examples[i] for i in order[lo : lo + batch_size]], vocab)


def word_dropout(batch: Batch, p: float, rng: np.random.Generator) -> Batch:
    """Replace each real document token by the zero-embedding id with probability ``p``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"word dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return batch
    drop = (rng.random(batch.doc_token_ids.shape) < p) & (batch.doc_mask > 0)
    ids = np.where(drop, UNK_ID, batch.doc_token_ids)
    return Batch(ids, batch.q_token_ids, batch.doc_mask, batch.q_mask, batch.gold_spans, batch.examples)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    vocab_size: int = 100
    doc_len: int = 20
    corpus_size: int = 2000
    seed: int = 0
    distractors: int = 2
    max_answer_len: int = 3

    @classmethod
    def from_text(cls, text: str) -> "SyntheticConfig":
        cfg = cls()
        for key, value in parse_key_values(text).items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown synthetic corpus key '{key}'")
            setattr(cfg, key, int(value))
        return cfg


def parse_key_values(text: str) -> dict:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def synthetic_key_tokens(vocab_size: int) -> List[str]:
    return [f"k{i}" for i in range(max(2, vocab_size // 5))]


def synthetic_answer_length(key_index: int, max_answer_len: int) -> int:
    return 1 + key_index % max_answer_len


def make_synthetic_corpus(config: SyntheticConfig) -> List[QAExample]:
    """Key-lookup QA: the question names a key token, the answer is the tokens right after it.

    Documents contain the true key exactly once plus a few distractor keys; the
    answer length is a fixed function of the key, so the task is solvable
    exactly.
    """
    c = config
    keys = synthetic_key_tokens(c.vocab_size)
    n_fill = c.vocab_size - len(keys)
    needed = 1 + c.max_answer_len + c.distractors
    if c.vocab_size < 10 or c.doc_len < 4:
        raise ConfigError("synthetic corpus needs vocab_size >= 10 and doc_len >= 4")
    if c.doc_len < needed or c.distractors >= len(keys) or c.max_answer_len < 1 or c.corpus_size < 1:
        raise ConfigError(f"inconsistent synthetic sizes: {c}")
    fillers = [f"w{i}" for i in range(n_fill)]
    rng = np.random.default_rng(c.seed)
    examples = []
    for k in range(c.corpus_size):
        key_idx = int(rng.integers(len(keys)))
        length = synthetic_answer_length(key_idx, c.max_answer_len)
        toks = [fillers[i] for i in rng.integers(n_fill, size=c.doc_len)]
        pos = int(rng.integers(c.doc_len - length))
        toks[pos] = keys[key_idx]
        others = [i for i in range(len(keys)) if i != key_idx]
        free = [i for i in range(c.doc_len) if i < pos or i > pos + length]
        for slot, kid in zip(
            rng.choice(free, size=c.distractors, replace=False),
            rng.choice(others, size=c.distractors, replace=False),
        ):
            toks[int(slot)] = keys[int(kid)]
        doc = tokenize(" ".join(toks))
        question = tokenize(f"what follows {keys[key_idx]} ?")
        span = AnswerSpan(pos + 1, pos + length)
        examples.append(QAExample(f"syn-{c.seed}-{k}", doc, question, [span], [doc.span_text(span.start, span.end)]))
    return examples


def find_key_answer(example: QAExample, max_answer_len: int = 3, vocab_size: int = 100) -> Optional[AnswerSpan]:
    """Brute-force reference solver: scan every span for the one following the question's key."""
    keys = synthetic_key_tokens(vocab_size)
    key = next(t for t in example.question.tokens if t in keys)
    length = synthetic_answer_length(keys.index(key), max_answer_len)
    m = len(example.document)
    for s in range(m):
        for e in range(s, m):
            if s > 0 and example.document.tokens[s - 1] == key and e - s + 1 == length:
                return AnswerSpan(s, e)
    return None
