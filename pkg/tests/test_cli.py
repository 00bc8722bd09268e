import json

import numpy as np
import pytest

from coattn import tensor as T
from coattn.cli import build_config, main, make_parser
from coattn.config import SEED_ENV
from coattn.gradcheck import check_op, gradcheck_config, gradcheck_model

from conftest import squad_doc

TINY_FLAGS = [
    "--model.emb_dim", "6", "--model.hidden", "6", "--decoder.maxout_pool", "3",
    "--decoder.moe_experts", "4", "--decoder.t_max", "2", "--train.batch_size", "8", "--train.epochs", "1",
]


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def corpus(tmp_path, capsys):
    paths = {}
    for name, size, seed in (("train", 24, 1), ("dev", 8, 2)):
        paths[name] = tmp_path / f"{name}.json"
        code, _, _ = run_cli(capsys, "synth", "--size", size, "--seed", seed, "--out", paths[name])
        assert code == 0
    return paths


@pytest.fixture
def trained(tmp_path, corpus, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run_cli(
        capsys, "train", *TINY_FLAGS, "--data.train", corpus["train"], "--data.dev", corpus["dev"], "--data.out_dir", out
    )
    assert code == 0
    return out, json.loads(stdout)


class TestConfigFlags:
    def test_every_key_has_a_flag(self):
        args = make_parser().parse_args(["train", "--decoder.moe_enabled", "false", "--optim.lr", "0.01"])
        cfg = build_config(args)
        assert cfg.decoder.moe_enabled is False and cfg.optim.lr == 0.01

    def test_precedence(self, tmp_path, monkeypatch):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 3\ntrain.epochs = 4\ntrain.batch_size = 5\n")
        monkeypatch.setenv(SEED_ENV, "8")
        cfg = build_config(make_parser().parse_args(["train", "--config", str(path), "--train.epochs", "2"]))
        assert (cfg.seed, cfg.train.epochs, cfg.train.batch_size) == (8, 2, 5)

    def test_bad_flag_value_exit_code(self, capsys):
        code, _, err = run_cli(capsys, "train", "--train.batch_size", "big", "--data.train", "x.json")
        assert code == 2 and "train.batch_size" in err


class TestSynth:
    def test_stdout_is_squad_json(self, capsys):
        code, out, _ = run_cli(capsys, "synth", "--size", 5, "--doc-len", 12)
        data = json.loads(out)
        paras = data["data"][0]["paragraphs"]
        assert code == 0 and sum(len(p["qas"]) for p in paras) == 5

    def test_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "s.cfg"
        cfg.write_text("corpus_size = 3\nseed = 4\n")
        _, a, _ = run_cli(capsys, "synth", "--config", cfg)
        _, b, _ = run_cli(capsys, "synth", "--size", 3, "--seed", 4)
        assert a == b


class TestTrainPredictEvaluate:
    def test_train_summary(self, trained):
        out, summary = trained
        assert summary["steps"] == 3 and "dev_f1" in summary["final"]
        assert (out / "best.ckpt").exists()

    def test_predict_then_evaluate(self, trained, corpus, tmp_path, capsys):
        run, summary = trained
        pred = tmp_path / "pred.json"
        assert run_cli(capsys, "predict", "--run", run, "--data", corpus["dev"], "--out", pred)[0] == 0
        code, out, _ = run_cli(capsys, "evaluate", "--data", corpus["dev"], "--pred", pred)
        report = json.loads(out)
        assert code == 0 and report["f1"] == pytest.approx(summary["final"]["dev_f1"])
        code, out, _ = run_cli(capsys, "evaluate", "--data", corpus["dev"], "--run", run)
        assert json.loads(out) == report

    def test_resume_flag(self, trained, corpus, capsys):
        run, _ = trained
        code, out, _ = run_cli(
            capsys, "train", *TINY_FLAGS, "--train.epochs", "2", "--data.train", corpus["train"],
            "--data.dev", corpus["dev"], "--data.out_dir", run, "--resume",
        )
        assert code == 0 and json.loads(out)["steps"] == 3
        assert len((run / "metrics.jsonl").read_text().splitlines()) == 6

    def test_schema_error_before_training(self, tmp_path, write_json, capsys):
        bad = write_json({"version": "1.1", "data": [{"title": "t", "paragraphs": [{"qas": []}]}]})
        out = tmp_path / "never"
        code, _, err = run_cli(capsys, "train", *TINY_FLAGS, "--data.train", bad, "--data.out_dir", out)
        assert code == 2 and "context" in err
        assert not out.exists()

    def test_malformed_json(self, write_json, capsys):
        bad = write_json("{not json")
        assert run_cli(capsys, "evaluate", "--data", bad, "--pred", bad)[0] == 2

    def test_predictions_must_be_object(self, write_json, capsys):
        data = write_json(squad_doc(("a b c", [("q1", "what ?", [("b", 2)])])))
        pred = write_json([1, 2], name="pred.json")
        code, _, err = run_cli(capsys, "evaluate", "--data", data, "--pred", pred)
        assert code == 2 and "predictions" in err

    def test_missing_file(self, capsys):
        assert run_cli(capsys, "evaluate", "--data", "/nonexistent.json", "--pred", "/nonexistent.json")[0] == 2

    def test_shape_incompatible_checkpoint(self, trained, corpus, tmp_path, capsys):
        run, _ = trained
        (run / "config.txt").write_text((run / "config.txt").read_text().replace("model.hidden = 6", "model.hidden = 7"))
        code, _, err = run_cli(capsys, "predict", "--run", run, "--data", corpus["dev"])
        assert code == 2 and "shape mismatch" in err


def _bad_tanh(x):
    y = np.tanh(x.data)
    return T._result(y, (x,), lambda g: (g * (1.0 - y),))


class TestGradcheck:
    def test_command_passes(self, capsys):
        code, out, _ = run_cli(capsys, "gradcheck", "--seeds", 0, "--m", 4, "--n", 3, "--max-entries", 3)
        assert code == 0 and out.startswith("seed 0: PASS")

    def test_corrupted_backward_is_named(self, monkeypatch, capsys):
        monkeypatch.setattr(T, "tanh", _bad_tanh)
        assert check_op("tanh", np.random.default_rng(0)).max_rel_error > 1e-2
        code, out, _ = run_cli(capsys, "gradcheck", "--seeds", 0, "--m", 4, "--n", 3, "--max-entries", 3)
        assert code == 1
        assert "FAIL" in out and "failing op 'tanh'" in out

    def test_failing_report_names_parameter(self, monkeypatch):
        monkeypatch.setattr(T, "tanh", _bad_tanh)
        report = gradcheck_model(gradcheck_config(0), 0, m=4, n=3, max_entries=3, include_ops=False)
        assert not report.passed
        assert any(c.kind == "param" for c in report.failures)
        assert "failing param" in report.summary()

    def test_untouched_ops_still_pass(self, monkeypatch):
        monkeypatch.setattr(T, "tanh", _bad_tanh)
        assert check_op("sigmoid", np.random.default_rng(0)).max_rel_error < 1e-6
