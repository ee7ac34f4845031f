"""Command-line workflows, exit codes, and artifact cross-checks."""

import json
import shutil

import pytest

from focusrl import cli
from focusrl.artifacts import read_metrics_csv

from conftest import MINI_TOML

BAD_THRESHOLDS_TOML = MINI_TOML.replace(
    "sft_epochs = 30", "sft_epochs = 0"
) + "\n[thresholds]\nresp_win = 11\n"


def write_config(tmp_path, body=MINI_TOML):
    path = tmp_path / "config.toml"
    path.write_text(body)
    return path


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """One full command-line run: iterate, baseline, eval, report."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(root)
    out = root / "run"
    base = ["--config", str(cfg_path), "--out", str(out)]
    assert cli.main(["iterate", *base]) == 0
    assert cli.main(["baseline-dpo", *base]) == 0
    assert cli.main(["eval", *base]) == 0
    assert cli.main(["report", *base]) == 0
    return cfg_path, out


def test_gen_world_determinism_and_seed_override(tmp_path):
    cfg_path = write_config(tmp_path)
    outs = [tmp_path / name for name in ("a", "b", "c")]
    assert cli.main(["gen-world", "--config", str(cfg_path), "--out", str(outs[0])]) == 0
    assert (
        cli.main(
            ["gen-world", "--config", str(cfg_path), "--out", str(outs[1]), "--workers", "2"]
        )
        == 0
    )
    assert (
        cli.main(["gen-world", "--config", str(cfg_path), "--out", str(outs[2]), "--seed", "9"])
        == 0
    )
    for label in ("sft", "rl", "eval"):
        name = f"world/{label}_tasks.jsonl"
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        assert (outs[0] / name).read_bytes() != (outs[2] / name).read_bytes()


def test_stepwise_workflow_matches_iterate(tmp_path, cli_run):
    _, iterate_out = cli_run
    cfg_path = write_config(tmp_path)
    out = tmp_path / "wf"
    base = ["--config", str(cfg_path), "--out", str(out)]
    for cmd in ("gen-world", "sft", "gen-prefs", "rl1", "rl2", "eval"):
        assert cli.main([cmd, *base]) == 0, cmd
    rows = read_metrics_csv(out / "metrics" / "eval.csv")
    assert len(rows) == 6
    assert {r[1] for r in rows} == {"sft", "stage2"}
    # the stepwise commands and the one-shot loop produce the same bytes
    for name in (
        "prefs/pairs_iter0.jsonl",
        "checkpoints/post_sft.bin",
        "checkpoints/iter1_stage1.bin",
        "checkpoints/iter1.bin",
        "metrics/eval.csv",
    ):
        assert (out / name).read_bytes() == (iterate_out / name).read_bytes(), name


def test_report_summary_and_figures(cli_run):
    _, out = cli_run
    summary = json.loads((out / "report" / "summary.json").read_text())
    assert summary["status"] == "complete"
    assert summary["pools"] == {"sft": 24, "rl": 40, "eval": 16}
    assert len(summary["iterations"]) == 1
    assert summary["iterations"][0]["retained_pairs"] >= 1
    assert summary["baseline"] is not None
    assert summary["full_minus_baseline_answer"] == pytest.approx(
        summary["final"]["answer_accuracy"] - summary["baseline"]["answer_accuracy"]
    )
    assert summary["figures"]
    for name in summary["figures"]:
        path = out / "report" / name
        assert path.suffix == ".png"
        data = path.read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        assert len(data) > 1000


def test_eval_rows_cover_all_checkpoints(cli_run):
    _, out = cli_run
    rows = read_metrics_csv(out / "metrics" / "eval.csv")
    assert len(rows) == 6
    assert {(r[1], r[2]) for r in rows} == {("sft", ""), ("stage2", "0")}


def test_config_error_exit_codes(tmp_path, capsys):
    assert cli.main(["iterate", "--config", str(tmp_path / "absent.toml")]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ConfigParse"
    broken = tmp_path / "broken.toml"
    broken.write_text("[train\n")
    assert cli.main(["iterate", "--config", str(broken)]) == 2


def test_missing_input_exit_codes(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    out = tmp_path / "empty"
    assert cli.main(["sft", "--config", str(cfg_path), "--out", str(out)]) == 3
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "MissingInput"
    assert cli.main(["report", "--config", str(cfg_path), "--out", str(out)]) == 3
    # world files exist but no checkpoints were written
    assert cli.main(["gen-world", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert cli.main(["eval", "--config", str(cfg_path), "--out", str(out)]) == 3


def test_unreachable_thresholds_exit_code(tmp_path):
    cfg_path = tmp_path / "strict.toml"
    cfg_path.write_text(BAD_THRESHOLDS_TOML)
    out = tmp_path / "strict"
    base = ["--config", str(cfg_path), "--out", str(out)]
    assert cli.main(["gen-world", *base]) == 0
    assert cli.main(["sft", *base]) == 0
    assert cli.main(["gen-prefs", *base]) == 4


def test_rl2_refuses_wrong_checkpoint(tmp_path, cli_run, capsys):
    _, run_out = cli_run
    cfg_path = write_config(tmp_path)
    copy = tmp_path / "copy"
    shutil.copytree(run_out, copy)
    code = cli.main(
        [
            "rl2",
            "--config",
            str(cfg_path),
            "--out",
            str(copy),
            "--checkpoint",
            str(copy / "checkpoints" / "post_sft"),
        ]
    )
    assert code == 9
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "WrongReference"


def tampered_copy(src, tmp_path):
    copy = tmp_path / "tampered"
    shutil.copytree(src, copy)
    return copy


def test_report_rejects_tampered_run_report(tmp_path, cli_run):
    cfg_path, run_out = cli_run
    copy = tampered_copy(run_out, tmp_path)
    report_path = copy / "report" / "run_report.json"
    report = json.loads(report_path.read_text())
    report["seed"] = 999
    report_path.write_text(json.dumps(report))
    assert cli.main(["report", "--config", str(cfg_path), "--out", str(copy)]) == 14


def test_report_rejects_tampered_stats_sidecar(tmp_path, cli_run):
    cfg_path, run_out = cli_run
    copy = tampered_copy(run_out, tmp_path)
    stats_path = copy / "prefs" / "pairs_iter0.stats.json"
    stats = json.loads(stats_path.read_text())
    stats["config_hash"] = "0" * 64
    stats_path.write_text(json.dumps(stats))
    assert cli.main(["report", "--config", str(cfg_path), "--out", str(copy)]) == 14


def test_report_rejects_tampered_baseline(tmp_path, cli_run):
    cfg_path, run_out = cli_run
    copy = tampered_copy(run_out, tmp_path)
    base_path = copy / "report" / "baseline_report.json"
    baseline = json.loads(base_path.read_text())
    baseline["config_hash"] = "0" * 64
    base_path.write_text(json.dumps(baseline))
    assert cli.main(["report", "--config", str(cfg_path), "--out", str(copy)]) == 14


def test_eval_rejects_foreign_checkpoint(tmp_path, cli_run):
    cfg_path, run_out = cli_run
    copy = tampered_copy(run_out, tmp_path)
    meta_path = copy / "checkpoints" / "post_sft.meta.json"
    meta = json.loads(meta_path.read_text())
    meta["config_hash"] = "0" * 64
    meta_path.write_text(json.dumps(meta))
    assert cli.main(["eval", "--config", str(cfg_path), "--out", str(copy)]) == 3
