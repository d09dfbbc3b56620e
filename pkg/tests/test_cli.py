import json

import numpy as np
import pytest

from tokdrop.cli import RunConfig, UsageError, main, parse_config_text
from tokdrop.corpus import N_RESERVED, read_documents, tokenize
from tokdrop.packing import read_packed


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-corpus", "--tokens", "30000", "--seed", "1", "--out", str(d / "c.txt")]) == 0
    assert main(["build-vocab", str(d / "c.txt"), "--out", str(d / "v.txt"),
                 "--max-size", "500"]) == 0
    assert main(["pack", str(d / "c.txt"), "--vocab", str(d / "v.txt"), "--length", "32",
                 "--out", str(d / "p.bin")]) == 0
    return d


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_vocab_line_count(tmp_path, capsys):
    corpus = tmp_path / "c.txt"
    corpus.write_text("the cat sat. the dog sat!\nA cat ran?\n")
    distinct = len({t for t in tokenize(corpus.read_text()) if t not in ".!?"})
    for max_size in (6, 8, 64):
        out = tmp_path / f"v{max_size}.txt"
        assert main(["build-vocab", str(corpus), "--out", str(out), "--max-size", str(max_size)]) == 0
        assert len(out.read_text().splitlines()) == min(max_size, distinct + N_RESERVED)


def test_missing_corpus_exits_2(tmp_path, capsys):
    assert main(["build-vocab", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "v")]) == 2
    assert "error" in capsys.readouterr().err


def test_usage_errors_exit_2(workspace, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["pretrain", "--variant", "bogus"])
    assert exc.value.code == 2
    assert main(["pretrain", "--vocab", str(workspace / "v.txt"),
                 "--data", str(tmp_path / "missing.bin")]) == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("steps = 5\nlearning_rate = 3\n")
    assert main(["pretrain", "--config", str(cfg)]) == 2


def test_build_vocab_is_idempotent(workspace, tmp_path):
    main(["build-vocab", str(workspace / "c.txt"), "--out", str(tmp_path / "v2.txt"),
          "--max-size", "500"])
    assert (tmp_path / "v2.txt").read_bytes() == (workspace / "v.txt").read_bytes()


def test_pack_reports(workspace, tmp_path, capsys):
    main(["pack", str(workspace / "c.txt"), "--vocab", str(workspace / "v.txt"),
          "--length", "32", "--out", str(tmp_path / "p.bin")])
    packed = last_json(capsys)
    assert packed["pad"] == 0
    assert (tmp_path / "p.bin").read_bytes() == (workspace / "p.bin").read_bytes()
    assert packed["sequences"] * 32 >= packed["tokens_out"]
    T, seqs = read_packed(tmp_path / "p.bin")
    assert T == 32 and len(seqs) == packed["sequences"]
    main(["pack", str(workspace / "c.txt"), "--vocab", str(workspace / "v.txt"),
          "--length", "64", "--no-pack", "--out", str(tmp_path / "q.bin")])
    assert last_json(capsys)["pad"] > 0


def pretrain(workspace, out, *extra):
    return main(["pretrain", "--vocab", str(workspace / "v.txt"), "--data",
                 str(workspace / "p.bin"), "--out", str(out), "--steps", "20",
                 "--log-interval", "5", "--batch-size", "4", "--seed", "3",
                 "--n-layers", "2", "--d-model", "16", *extra])


def test_drop_rate_zero_matches_baseline(workspace, tmp_path):
    assert pretrain(workspace, tmp_path / "b", "--variant", "baseline") == 0
    assert pretrain(workspace, tmp_path / "d", "--variant", "drop", "--drop-rate", "0") == 0
    assert (tmp_path / "b" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "d" / "metrics.jsonl").read_bytes()
    assert len((tmp_path / "b" / "metrics.jsonl").read_text().splitlines()) == 4


def test_pretrain_outputs_and_flop_report(workspace, tmp_path):
    assert pretrain(workspace, tmp_path / "b", "--variant", "baseline") == 0
    assert pretrain(workspace, tmp_path / "d", "--variant", "drop") == 0
    run = json.loads((tmp_path / "d" / "run.json").read_text())
    assert run["seed"] == 3 and run["config"]["variant"] == "drop"
    fb = json.loads((tmp_path / "b" / "flops.json").read_text())
    fd = json.loads((tmp_path / "d" / "flops.json").read_text())
    assert fd["analytic_per_sequence"]["savings_fraction"] == 0.25
    assert fd["measured_total"] < fb["measured_total"]
    for name in ("final.ckpt", "final.table"):
        assert (tmp_path / "d" / name).exists()


def test_pretrain_is_idempotent(workspace, tmp_path):
    for out in ("x", "y"):
        assert pretrain(workspace, tmp_path / out, "--variant", "half-rand") == 0
    for name in ("metrics.jsonl", "final.ckpt", "final.table", "flops.json"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_config_file_and_flag_precedence(workspace, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# desk run\nvocab = {workspace / 'v.txt'}\ndata = {workspace / 'p.bin'}\n"
                   "variant = pass\nsteps = 10\nlog_interval = 5\nbatch_size = 2\n"
                   "n_layers = 2\nd_model = 16\n")
    assert main(["pretrain", "--config", str(cfg), "--steps", "5",
                 "--out", str(tmp_path / "r")]) == 0
    run = json.loads((tmp_path / "r" / "run.json").read_text())
    assert run["config"]["steps"] == 5 and run["config"]["variant"] == "pass"


def test_parse_config_text():
    assert parse_config_text("steps = 7\npeak_lr=1e-3  # note\n\n") == {"steps": 7, "peak_lr": 1e-3}
    with pytest.raises(UsageError):
        parse_config_text("stpes = 7")
    with pytest.raises(UsageError):
        parse_config_text("steps = many")
    with pytest.raises(UsageError):
        parse_config_text("just words")
    assert set(RunConfig.keys()) >= {"variant", "drop_rate", "stage2_fraction", "steps", "seed"}


def test_resume_matches_uninterrupted_run(workspace, tmp_path):
    assert pretrain(workspace, tmp_path / "full", "--variant", "drop") == 0
    assert pretrain(workspace, tmp_path / "part", "--variant", "drop",
                    "--checkpoint-interval", "10") == 0
    ckpt = tmp_path / "part" / "step_10.ckpt"
    assert pretrain(workspace, tmp_path / "rest", "--variant", "drop", "--resume", str(ckpt)) == 0
    full = (tmp_path / "full" / "metrics.jsonl").read_text().splitlines()
    rest = (tmp_path / "rest" / "metrics.jsonl").read_text().splitlines()
    assert rest == full[2:]
    assert (tmp_path / "rest" / "final.ckpt").read_bytes() == \
        (tmp_path / "full" / "final.ckpt").read_bytes()


def test_reports(workspace, tmp_path, capsys):
    assert pretrain(workspace, tmp_path / "d", "--variant", "drop") == 0
    table, vocab = str(tmp_path / "d" / "final.table"), str(workspace / "v.txt")
    n_vocab = len((workspace / "v.txt").read_text().splitlines())

    assert main(["report", "scores", "--table", table, "--vocab", vocab,
                 "--out", str(tmp_path / "s.txt")]) == 0
    lines = (tmp_path / "s.txt").read_text().splitlines()
    assert len(lines) == n_vocab
    scores = [float(l.rsplit("\t", 1)[1]) for l in lines]
    assert scores == sorted(scores, reverse=True)

    assert main(["report", "histogram", "--table", table, "--vocab", vocab,
                 "--out", str(tmp_path / "h.csv")]) == 0
    rows = (tmp_path / "h.csv").read_text().splitlines()
    assert rows[0] == "bucket_low,bucket_high,count"
    assert sum(int(r.rsplit(",", 1)[1]) for r in rows[1:]) == n_vocab

    capsys.readouterr()
    assert main(["report", "examples", "--table", table, "--vocab", vocab, "--data",
                 str(workspace / "p.bin"), "--count", "4", "--drop-rate", "0.5"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 4
    for line in out:
        toks = line.split(" ")
        assert len(toks) == 32
        assert sum(t.startswith("*") and t.endswith("*") and len(t) > 1 for t in toks) == 16

    assert main(["report", "flops", "--n-layers", "12", "--drop-rate", "0.25"]) == 0
    assert last_json(capsys)["savings_fraction"] == 0.125
    assert main(["report", "scores"]) == 2


def test_fresh_table_histogram_spikes_at_default(workspace, tmp_path):
    from tokdrop.importance import ImportanceTable

    n_vocab = len((workspace / "v.txt").read_text().splitlines())
    ImportanceTable(n_vocab).save(tmp_path / "fresh.table")
    main(["report", "histogram", "--table", str(tmp_path / "fresh.table"),
          "--vocab", str(workspace / "v.txt"), "--out", str(tmp_path / "h.csv")])
    rows = [r.split(",") for r in (tmp_path / "h.csv").read_text().splitlines()[1:]]
    nonzero = [(float(lo), float(hi), int(c)) for lo, hi, c in rows if int(c)]
    spike = [r for r in nonzero if abs(r[0]) != 1e4]
    assert len(spike) == 1 and spike[0][0] <= 10 < spike[0][1]
    assert spike[0][2] == n_vocab - 4


def test_probe_and_evaluate(workspace, tmp_path, capsys):
    assert pretrain(workspace, tmp_path / "d", "--variant", "drop") == 0
    ckpt = str(tmp_path / "d" / "final.ckpt")
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", ckpt, "--data", str(workspace / "p.bin"),
                 "--limit", "16"]) == 0
    assert last_json(capsys)["mlm_loss"] > 0
    assert main(["probe", "--checkpoint", ckpt, "--vocab", str(workspace / "v.txt"),
                 "--corpus", str(workspace / "c.txt"), "--length", "32", "--n-train", "32",
                 "--n-val", "32", "--epochs", "1"]) == 0
    assert 0 <= last_json(capsys)["accuracy"] <= 1
