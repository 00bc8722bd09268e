import json

import numpy as np
import pytest

from coattn.config import RunConfig
from coattn.data import SyntheticConfig, make_synthetic_corpus


def squad_doc(*paragraphs):
    """Build SQuAD v1.1 JSON from (context, [(id, question, [(text, start), ...]), ...]) tuples."""
    paras = []
    for context, qas in paragraphs:
        paras.append(
            {
                "context": context,
                "qas": [
                    {"id": qid, "question": q, "answers": [{"text": t, "answer_start": s} for t, s in answers]}
                    for qid, q, answers in qas
                ],
            }
        )
    return {"version": "1.1", "data": [{"title": "t", "paragraphs": paras}]}


@pytest.fixture
def write_json(tmp_path):
    def write(obj, name="data.json"):
        path = tmp_path / name
        path.write_text(obj if isinstance(obj, str) else json.dumps(obj))
        return path

    return write


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    cfg = RunConfig(seed=0)
    cfg.model.emb_dim = 6
    cfg.model.hidden = 6
    cfg.decoder.maxout_pool = 3
    cfg.decoder.moe_experts = 4
    cfg.decoder.t_max = 3
    cfg.train.batch_size = 8
    cfg.train.epochs = 1
    return cfg


@pytest.fixture(scope="session")
def synthetic_small():
    return make_synthetic_corpus(SyntheticConfig(corpus_size=40, seed=11))


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
