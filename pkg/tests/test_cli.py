"""CLI tests: subcommand behavior, exit codes, error prefixes."""

import json

import pytest

from dualscribe.cli import main

FAST_FLAGS = [
    "--d-model", "32", "--ffn-dim", "32", "--n-heads", "2", "--memory-slots", "2",
    "--n-enc-layers", "1", "--n-dec-layers", "1", "--epochs", "2",
    "--batch-size", "8", "--min-freq", "1", "--grid-h", "2", "--grid-w", "2",
    "--general-channels", "4", "--domain-channels", "4",
]


@pytest.fixture(scope="module")
def corpus_path(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("data") / "corpus.jsonl")
    code = main(["synth", "--out", path, "--n", "30", "--seed", "4",
                 "--image-size", "16"])
    assert code == 0
    return path


class TestSynth:
    def test_writes_requested_entries(self, corpus_path):
        lines = [l for l in open(corpus_path) if l.strip()]
        assert len(lines) == 30
        row = json.loads(lines[0])
        assert {"id", "report", "image"} <= set(row)

    def test_same_seed_reproduces_file(self, tmp_path, corpus_path):
        other = str(tmp_path / "again.jsonl")
        assert main(["synth", "--out", other, "--n", "30", "--seed", "4",
                     "--image-size", "16"]) == 0
        assert open(other).read() == open(corpus_path).read()


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, corpus_path):
    out = tmp_path_factory.mktemp("ckpt")
    ckpt = str(out / "model.m2ck")
    loss_csv = str(out / "loss.csv")
    code = main(["train", "--corpus", corpus_path, "--out", ckpt,
                 "--loss-csv", loss_csv, "--variant", "double_feature",
                 "--seed", "1", *FAST_FLAGS])
    assert code == 0
    return ckpt, loss_csv


class TestTrainGenerateEvaluate:
    def test_train_writes_checkpoint_and_csv(self, checkpoint):
        ckpt, loss_csv = checkpoint
        assert open(ckpt, "rb").read(4) == b"M2CK"
        header = open(loss_csv).readline().strip()
        assert header == "step,epoch,loss"

    def test_generate_writes_candidates(self, checkpoint, corpus_path, tmp_path):
        ckpt, _ = checkpoint
        out = str(tmp_path / "cands.jsonl")
        assert main(["generate", "--checkpoint", ckpt, "--corpus", corpus_path,
                     "--out", out, "--strategy", "greedy"]) == 0
        rows = [json.loads(l) for l in open(out) if l.strip()]
        assert len(rows) == 30
        assert all("candidate" in r for r in rows)

    def test_evaluate_identity_scores_one(self, corpus_path, tmp_path, capsys):
        out = str(tmp_path / "metrics.json")
        code = main(["evaluate", "--candidates", corpus_path,
                     "--references", corpus_path, "--out", out])
        assert code == 0
        doc = json.loads(open(out).read())
        assert doc["nlg"]["bleu_1"] == 1.0
        assert doc["nlg"]["bleu_4"] == 1.0
        assert doc["nlg"]["rouge_l"] == 1.0
        assert doc["clinical"]["overall_f1"] == 1.0

    def test_evaluate_pairs_mode(self, tmp_path):
        pairs = str(tmp_path / "pairs.jsonl")
        with open(pairs, "w") as fh:
            fh.write(json.dumps({
                "id": "p1", "candidate": "no pleural effusion .",
                "references": ["no pleural effusion ."],
            }) + "\n")
            fh.write(json.dumps({
                "id": "p2", "candidate": "severe cardiomegaly .",
                "references": ["severe cardiomegaly ."],
            }) + "\n")
        out = str(tmp_path / "m.json")
        assert main(["evaluate", "--pairs", pairs, "--out", out]) == 0
        assert json.loads(open(out).read())["nlg"]["bleu_1"] == 1.0

    def test_label_writes_vectors(self, corpus_path, tmp_path):
        out = str(tmp_path / "labels.jsonl")
        assert main(["label", "--input", corpus_path, "--out", out]) == 0
        rows = [json.loads(l) for l in open(out) if l.strip()]
        assert len(rows) == 30
        assert len(rows[0]["labels"]) == 14


class TestCompareCommand:
    def test_compare_twice_is_bitwise_identical(self, corpus_path, tmp_path, capsys):
        out_a = str(tmp_path / "a")
        out_b = str(tmp_path / "b")
        for out in (out_a, out_b):
            code = main(["compare", "--corpus", corpus_path, "--out-dir", out,
                         "--seed", "7", *FAST_FLAGS])
            assert code == 0
        for name in ("summary_metrics.json", "summary_metrics.csv",
                     "condition_f1.json", "condition_f1.csv"):
            assert open(f"{out_a}/{name}").read() == open(f"{out_b}/{name}").read()

    def test_config_file_with_flag_override(self, corpus_path, tmp_path, capsys):
        config = tmp_path / "exp.toml"
        config.write_text(
            "d_model = 32\nffn_dim = 32\nn_heads = 2\nmemory_slots = 2\n"
            "n_enc_layers = 1\nn_dec_layers = 1\nepochs = 1\nbatch_size = 8\n"
            "min_freq = 1\ngrid_h = 2\ngrid_w = 2\n"
            "general_channels = 4\ndomain_channels = 4\n"
        )
        out = str(tmp_path / "ckpt.m2ck")
        # flag overrides the config's epochs=1 with 2
        code = main(["train", "--corpus", corpus_path, "--out", out,
                     "--config", str(config), "--epochs", "2", "--seed", "0"])
        assert code == 0
        captured = capsys.readouterr().out
        assert "8 steps" in captured  # 30 entries / batch 8 = 4 steps x 2 epochs


class TestErrorContract:
    def test_missing_corpus_is_data_error(self, tmp_path, capsys):
        code = main(["label", "--input", "/nonexistent/x.jsonl",
                     "--out", str(tmp_path / "o.jsonl")])
        captured = capsys.readouterr()
        assert code == 2
        assert captured.err.startswith("error[data]:")
        assert "/nonexistent/x.jsonl" in captured.err

    def test_usage_error_is_exit_one(self, capsys):
        code = main(["synth", "--n", "5"])  # missing --out
        captured = capsys.readouterr()
        assert code == 1
        assert captured.err.startswith("error[usage]:")

    def test_evaluate_requires_inputs(self, capsys):
        code = main(["evaluate"])
        assert code == 1
        assert capsys.readouterr().err.startswith("error[usage]:")

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_bad_toml_is_data_error(self, corpus_path, tmp_path, capsys):
        config = tmp_path / "bad.toml"
        config.write_text("this is not toml ][")
        code = main(["train", "--corpus", corpus_path,
                     "--out", str(tmp_path / "c.m2ck"), "--config", str(config)])
        assert code == 2
        assert capsys.readouterr().err.startswith("error[data]:")
