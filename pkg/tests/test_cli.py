from __future__ import annotations

import json
from pathlib import Path

import cli
from cli import main

TINY = ["data.num_tokens=4", "data.feature_dim=6", "data.duration_max=6", "data.transcript_min=2",
        "data.transcript_max=4", "data.num_train=8", "data.num_dev=2", "data.num_test=3",
        "data.num_text_sentences=20", "encoder.d_model=16", "encoder.num_heads=2", "encoder.d_ff=32",
        "encoder.num_layers=1", "encoder.block_length=2", "decoder.d_model=16", "decoder.num_heads=2",
        "decoder.d_ff=32", "decoder.num_layers=1", "decoder.max_prompts=128", "decoder.max_tokens=32",
        "train.epochs=1", "train.batch_size=4", "train.warmup_steps=2", "decode.beam=2"]


def _run(*argv) -> int:
    args = []
    for item in TINY:
        args += ["--set", item]
    return main(args + list(argv))


def test_bad_override_is_config_error(tmp_path: Path):
    assert main(["--set", "decode.beam=0", "gen-data", "--out", str(tmp_path / "c")]) == 2
    assert main(["--set", "train.scheme=mystery", "gen-data", "--out", str(tmp_path / "c")]) == 2


def test_missing_corpus_is_data_error(tmp_path: Path):
    assert main(["pretrain-encoder", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "e")]) == 3


def test_malformed_decode_output_is_data_error(tmp_path: Path):
    decoded = tmp_path / "decoded.jsonl"
    decoded.write_text('{"reference": ["a"], "hypothesis": ["a"]}\n{"reference": \n', encoding="utf-8")
    assert main(["eval", "--decoded", str(decoded)]) == 3


def test_full_pipeline(tmp_path: Path, capsys):
    corpus, enc, dec, model = (str(tmp_path / name) for name in ("corpus", "encoder", "decoder", "model"))
    assert _run("gen-data", "--out", corpus) == 0
    assert _run("pretrain-encoder", "--corpus", corpus, "--out", enc) == 0
    assert _run("pretrain-lm", "--corpus", corpus, "--out", dec) == 0
    assert _run("finetune", "--corpus", corpus, "--encoder", enc, "--decoder", dec, "--scheme", "forced-align",
                "--prompts", "both", "--out", model) == 0

    decoded = tmp_path / "decoded.jsonl"
    assert _run("decode", "--mode", "stream", "--model", model, "--corpus", corpus, "--out", str(decoded)) == 0
    records = [json.loads(line) for line in decoded.read_text(encoding="utf-8").splitlines()]
    assert len(records) == 3
    for record in records:
        assert [e["token"] for e in record["emissions"]] == record["hypothesis"]
        assert record["rtf"] >= 0

    capsys.readouterr()
    summary_path = tmp_path / "eval.json"
    assert _run("eval", "--decoded", str(decoded), "--out", str(summary_path)) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["num_utterances"] == 3
    assert summary == json.loads(summary_path.read_text(encoding="utf-8"))

    assert _run("bench", "--model", model, "--corpus", corpus, "--mode", "ctc") == 0
    bench = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert bench["mode"] == "ctc" and bench["num_utterances"] == 3


def test_finetune_without_pretrained_encoder(tmp_path: Path):
    corpus = str(tmp_path / "corpus")
    assert _run("gen-data", "--out", corpus) == 0
    assert _run("finetune", "--corpus", corpus, "--encoder", str(tmp_path / "missing"), "--decoder",
                str(tmp_path / "missing"), "--out", str(tmp_path / "model")) == 3


def test_run_experiment_honours_global_flags(tmp_path: Path, monkeypatch):
    manifest = tmp_path / "experiment.yaml"
    manifest.write_text("seeds: [0, 1]\nasr:\n  decode:\n    beam: 5\n    lambda_ctc: 0.3\n", encoding="utf-8")
    asr_config = tmp_path / "asr.yaml"
    asr_config.write_text("decode:\n  beam: 3\ntrain:\n  epochs: 2\n", encoding="utf-8")
    captured = {}

    def fake_run(exp):
        captured["exp"] = exp
        return {"cells": []}

    monkeypatch.setattr(cli, "run_experiment", fake_run)
    monkeypatch.setattr(cli, "write_report", lambda report, out: None)
    monkeypatch.setattr(cli, "render_table", lambda cells: "")
    monkeypatch.setattr(cli.torch, "set_num_threads", lambda n: captured.setdefault("threads", n))

    argv = ["--seed", "7", "--threads", "2", "--config", str(asr_config), "--set", "asr.decode.lambda_dec=0.9",
            "run-experiment", "--manifest", str(manifest), "--out", str(tmp_path / "report")]
    assert main(argv) == 0
    exp = captured["exp"]
    assert exp.seeds == [7]
    assert exp.asr.seed == exp.asr.train.seed == 7
    assert exp.asr.threads == 2 and captured["threads"] == 2
    assert exp.asr.decode.beam == 3
    assert exp.asr.train.epochs == 2
    assert exp.asr.decode.lambda_ctc == 0.3
    assert exp.asr.decode.lambda_dec == 0.9


def test_run_experiment_missing_config_is_config_error(tmp_path: Path):
    manifest = tmp_path / "experiment.yaml"
    manifest.write_text("seeds: [0]\n", encoding="utf-8")
    argv = ["--config", str(tmp_path / "absent.yaml"), "run-experiment", "--manifest", str(manifest),
            "--out", str(tmp_path / "report")]
    assert main(argv) == 2
