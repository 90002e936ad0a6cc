"""End-to-end CLI behavior via subprocess: exit codes, files, determinism."""

import json
import subprocess
import sys

import numpy as np
import pytest

from moelab.analysis import (
    expert_ratios,
    read_trace_csv,
    routing_overlap,
    write_ratios_csv,
)
from moelab.data import ByteTokenizer, language_of_token, load_corpus
from moelab.training import load_checkpoint


def run_cli(*args, env=None):
    import os

    full_env = dict(os.environ)
    if env:
        full_env.update(env)
    return subprocess.run(
        [sys.executable, "-m", "moelab", *map(str, args)],
        capture_output=True,
        text=True,
        env=full_env,
    )


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpora, a run config, and one completed training run."""
    root = tmp_path_factory.mktemp("cli")
    for domain, seed in (("text", 0), ("code", 1)):
        result = run_cli(
            "corpus-gen", "--domain", domain, "--docs", 20, "--seed", seed,
            "--out", root / f"{domain}.txt",
        )
        assert result.returncode == 0, result.stderr
    config = {
        "model": {
            "hidden": 16,
            "ffn_hidden": 16,
            "heads": 2,
            "head_dim": 8,
            "layers": 2,
            "moe_every": 2,
            "max_seq_len": 24,
            "router": {"num_experts": 2, "top_k": 2, "capacity_factor": 1.25},
        },
        "train": {"batch_size": 4, "steps": 8, "checkpoint_every": 4, "seed": 0},
        "data": {
            "corpora": ["text.txt", "code.txt"],
            "mixture": [["text", 0.5], ["code", 0.5]],
            "objectives": [{"kind": "causal_lm", "weight": 1.0}],
        },
    }
    (root / "config.json").write_text(json.dumps(config, indent=2))
    result = run_cli("train", "--config", root / "config.json", "--out-dir", root / "run")
    assert result.returncode == 0, result.stderr
    return root


# ---------------------------------------------------------------------------
# corpus-gen


def test_corpus_gen_deterministic(tmp_path):
    for name in ("a.txt", "b.txt"):
        result = run_cli(
            "corpus-gen", "--domain", "text", "--docs", 5, "--seed", 3,
            "--out", tmp_path / name,
        )
        assert result.returncode == 0
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_corpus_gen_zero_docs(tmp_path):
    result = run_cli(
        "corpus-gen", "--domain", "code", "--docs", 0, "--seed", 0,
        "--out", tmp_path / "empty.txt",
    )
    assert result.returncode == 0
    assert (tmp_path / "empty.txt").read_text() == "#domain:code\n"


def test_corpus_gen_unknown_domain_exit_2(tmp_path):
    result = run_cli(
        "corpus-gen", "--domain", "nope", "--docs", 1, "--out", tmp_path / "x.txt"
    )
    assert result.returncode == 2


def test_code_corpus_newline_in_top_tokens(tmp_path):
    run_cli("corpus-gen", "--domain", "code", "--docs", 30, "--seed", 5,
            "--out", tmp_path / "code.txt")
    tok = ByteTokenizer()
    corpus = load_corpus(tmp_path / "code.txt")
    counts = {}
    for doc in corpus.docs:
        for t in tok.tokenize(doc):
            counts[t] = counts.get(t, 0) + 1
    top3 = sorted(counts, key=lambda t: -counts[t])[:3]
    assert tok.tokenize(b"\n")[0] in top3


# ---------------------------------------------------------------------------
# train


def test_train_outputs_and_effective_config(workspace):
    run_dir = workspace / "run"
    assert (run_dir / "metrics.csv").exists()
    assert (run_dir / "ckpt_0000008.omoe").exists()
    effective = json.loads((run_dir / "effective_config.json").read_text())
    # default loss weights surface in the resolved config
    assert effective["model"]["w_balance"] == 0.01
    assert effective["model"]["w_z_logits"] == 0.001
    assert effective["model"]["w_z_router"] == 0.0001
    assert effective["train"]["peak_lr"] == 0.01
    rows = (run_dir / "metrics.csv").read_text().strip().split("\n")
    assert len(rows) == 9
    for row in rows[1:]:
        values = row.split(",")
        assert all(np.isfinite(float(v)) for v in values[1:])


def test_train_resume_bit_identical_metrics(workspace):
    resumed = workspace / "resumed"
    result = run_cli(
        "train", "--resume", workspace / "run" / "ckpt_0000004.omoe",
        "--out-dir", resumed,
    )
    assert result.returncode == 0, result.stderr
    full_rows = (workspace / "run" / "metrics.csv").read_text().strip().split("\n")
    resumed_rows = (resumed / "metrics.csv").read_text().strip().split("\n")
    assert resumed_rows[1:] == full_rows[5:]


def test_train_missing_config_exit_2(tmp_path):
    result = run_cli("train", "--config", tmp_path / "missing.json", "--out-dir", tmp_path)
    assert result.returncode == 2


def test_train_unknown_key_exit_2(workspace, tmp_path):
    config = json.loads((workspace / "config.json").read_text())
    config["model"]["wrong_knob"] = 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(config))
    result = run_cli("train", "--config", bad, "--out-dir", tmp_path / "out")
    assert result.returncode == 2
    assert "wrong_knob" in result.stderr


def test_train_nan_exit_4(workspace, tmp_path):
    from moelab.training import save_checkpoint

    ckpt = load_checkpoint(workspace / "run" / "ckpt_0000004.omoe")
    ckpt.tensors["lm_head"][0, 0] = np.nan
    broken = tmp_path / "broken.omoe"
    save_checkpoint(broken, ckpt)
    result = run_cli("train", "--resume", broken, "--out-dir", tmp_path / "out")
    assert result.returncode == 4
    assert "non-finite" in result.stderr


def test_out_dir_env_override(workspace, tmp_path):
    target = tmp_path / "env_dir"
    result = run_cli(
        "train", "--config", workspace / "config.json", "--out-dir", tmp_path / "ignored",
        env={"MOELAB_OUT_DIR": str(target)},
    )
    assert result.returncode == 0, result.stderr
    assert (target / "metrics.csv").exists()
    assert not (tmp_path / "ignored").exists()


# ---------------------------------------------------------------------------
# trace


def test_trace_row_count_and_determinism(workspace):
    out_a = workspace / "trace_a.csv"
    out_b = workspace / "trace_b.csv"
    for out in (out_a, out_b):
        result = run_cli(
            "trace", "--checkpoint", workspace / "run" / "ckpt_0000008.omoe",
            "--corpus", workspace / "text.txt", "--seq-len", 16, "--out", out,
        )
        assert result.returncode == 0, result.stderr
    assert out_a.read_bytes() == out_b.read_bytes()

    tok = ByteTokenizer()
    corpus = load_corpus(workspace / "text.txt")
    expected = 0
    for doc in corpus.docs:
        ids = tok.tokenize(doc)
        for start in range(0, len(ids) - 1, 16):
            if len(ids[start : start + 16]) >= 2:
                expected += len(ids[start : start + 16])
    trace = read_trace_csv(out_a)
    assert len(trace) == expected
    # only one MoE layer in this model, so the default layer is 1
    assert trace.layers() == [1]


def test_trace_invalid_layer_lists_valid_ones(workspace, tmp_path):
    result = run_cli(
        "trace", "--checkpoint", workspace / "run" / "ckpt_0000008.omoe",
        "--corpus", workspace / "text.txt", "--layer", 0, "--out", tmp_path / "t.csv",
    )
    assert result.returncode == 2
    assert "[1]" in result.stderr


# ---------------------------------------------------------------------------
# analyze


def test_analyze_overlap_with_itself(workspace, tmp_path):
    trace = workspace / "trace_a.csv"
    out = tmp_path / "overlap.csv"
    result = run_cli(
        "analyze", "--report", "overlap", "--trace", trace, "--trace", trace,
        "--min-support", 1, "--out", out,
    )
    assert result.returncode == 0, result.stderr
    assert out.read_text().splitlines()[1] == "1.0"


def test_analyze_ratios_matches_library_bytes(workspace, tmp_path):
    trace_path = workspace / "trace_a.csv"
    cli_out = tmp_path / "ratios_cli.csv"
    result = run_cli(
        "analyze", "--report", "ratios", "--trace", trace_path, "--group-by", "token_id",
        "--num-experts", 2, "--out", cli_out,
    )
    assert result.returncode == 0, result.stderr

    trace = read_trace_csv(trace_path)
    tok = ByteTokenizer()
    report = expert_ratios(
        trace, "token_id", layer=1, num_experts=2,
        language_of=lambda t: language_of_token(t, tok),
    )
    lib_out = tmp_path / "ratios_lib.csv"
    write_ratios_csv(report, lib_out)
    assert cli_out.read_bytes() == lib_out.read_bytes()
    # every group's ratios sum to 1
    for key, (ratios, _) in report.entries.items():
        assert abs(ratios.sum() - 1.0) < 1e-9


def test_analyze_svg_and_reports(workspace, tmp_path):
    trace = workspace / "trace_a.csv"
    for report, extra in (
        ("std", ["--group-by", "position_id", "--min-support", 1]),
        ("top-tokens", ["--expert", 0]),
        ("drop-curve", ["--bucket-size", 4]),
    ):
        out = tmp_path / f"{report}.csv"
        svg = tmp_path / f"{report}.svg"
        result = run_cli(
            "analyze", "--report", report, "--trace", trace, "--out", out, "--svg", svg,
            *extra,
        )
        assert result.returncode == 0, (report, result.stderr)
        assert out.exists()
        if report != "top-tokens":
            assert svg.exists() and svg.read_text().lstrip().startswith("<?xml")


def test_analyze_token_stats(workspace, tmp_path):
    out = tmp_path / "stats.csv"
    result = run_cli(
        "analyze", "--report", "token-stats", "--corpus", workspace / "code.txt",
        "--out", out,
    )
    assert result.returncode == 0, result.stderr
    header, row = out.read_text().strip().split("\n")
    assert header == "num_tokens,vocab_used"
    total, vocab = map(int, row.split(","))
    tok = ByteTokenizer()
    corpus = load_corpus(workspace / "code.txt")
    ids = [t for doc in corpus.docs for t in tok.tokenize(doc)]
    assert (total, vocab) == (len(ids), len(set(ids)))


def test_analyze_overlap_arity_exit_2(workspace, tmp_path):
    result = run_cli(
        "analyze", "--report", "overlap", "--trace", workspace / "trace_a.csv",
        "--out", tmp_path / "o.csv",
    )
    assert result.returncode == 2
