"""Orchestration: pools, warm-up, staged training, reports, reproducibility."""

import json
import math

import numpy as np
import pytest

from focusrl.artifacts import read_jsonl, read_metrics_csv
from focusrl.config import config_hash, run_id
from focusrl.datagen import FilterThresholds, build_preference_dataset
from focusrl.errors import EmptyDataset
from focusrl.policy import load_checkpoint, snapshot
from focusrl.trainer import (
    apply_gradient_step,
    build_pools,
    evaluate_policy,
    fresh_params,
    prepare_pairs,
    run_baseline,
    run_iterations,
    sft_warmup,
    train_stage1,
    train_stage2,
)
from focusrl.world import FeatureCache

from conftest import mini_train_config

LN2 = math.log(2.0)


@pytest.fixture(scope="module")
def mini_pipeline():
    """Pools, a warmed-up policy, and prepared pairs for the mini config."""
    cfg = mini_train_config()
    pools = build_pools(cfg)
    params = fresh_params(cfg)
    curve = sft_warmup(params, pools["sft"], cfg)
    pairs, stats = build_preference_dataset(
        params,
        pools["rl"],
        n_rounds=cfg.rounds,
        diversity=cfg.diversity,
        thresholds=cfg.thresholds,
        focus_rho=cfg.focus_rho,
        temperature=cfg.temperature,
        seed=cfg.seed,
        iteration=0,
    )
    prepared = prepare_pairs(pairs, pools["rl"], FeatureCache(cfg.world))
    return cfg, pools, params, curve, prepared, stats


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    cfg = mini_train_config()
    out = tmp_path_factory.mktemp("run")
    report = run_iterations(cfg, out)
    return cfg, out, report


def test_build_pools_disjoint_and_contiguous():
    cfg = mini_train_config()
    pools = build_pools(cfg)
    assert [t.task_id for t in pools["sft"].tasks] == list(range(0, 24))
    assert [t.task_id for t in pools["rl"].tasks] == list(range(24, 64))
    assert [t.task_id for t in pools["eval"].tasks] == list(range(64, 80))
    for label, pool in pools.items():
        assert pool.label == label
        for task in pool.tasks:
            assert task.scene_id in pool.scenes


def test_sft_zero_epochs_is_identity():
    cfg = mini_train_config(sft_epochs=0)
    pools = build_pools(cfg)
    params = fresh_params(cfg)
    before = params.flat.copy()
    curve = sft_warmup(params, pools["sft"], cfg)
    assert len(curve) == 1
    assert np.array_equal(params.flat, before)


def test_sft_loss_drops(mini_pipeline):
    _, _, _, curve, _, _ = mini_pipeline
    assert len(curve) == 31
    assert curve[-1] < 0.3 * curve[0]
    assert curve[0] > 10.0  # roughly -4 ln(1/16) - ln(1/10) at init


def test_stage_curves_start_at_identity(mini_pipeline):
    cfg, _, params, _, prepared, _ = mini_pipeline
    assert len(prepared) >= 2
    work = params.copy()
    ref = snapshot(work, "post-sft")
    curve1 = train_stage1(work, ref, prepared, cfg, iteration=0)
    assert len(curve1) == cfg.stage1_epochs + 1
    assert curve1[0] == pytest.approx(LN2, abs=1e-12)
    assert curve1[-1] <= curve1[0]
    curve2 = train_stage2(work, prepared, cfg, iteration=0)
    assert len(curve2) == cfg.stage2_epochs + 1
    lam = cfg.dpo.lambda_box + cfg.dpo.lambda_resp
    assert curve2[0] == pytest.approx(lam * LN2, abs=1e-12)


def test_apply_gradient_step_clipping(mini_pipeline):
    cfg, _, params, _, _, _ = mini_pipeline
    work = params.copy()
    base = work.flat.copy()
    grad = np.zeros_like(base)
    grad[:4] = (3.0, 4.0, 0.0, 0.0)  # norm 5
    apply_gradient_step(work, grad, lr=0.1, clip=2.5)
    assert np.allclose(base - work.flat, 0.1 * grad * 0.5, atol=1e-15)
    work = params.copy()
    apply_gradient_step(work, grad, lr=0.1, clip=10.0)
    assert np.allclose(base - work.flat, 0.1 * grad, atol=1e-15)
    work = params.copy()
    apply_gradient_step(work, grad, lr=0.1, clip=0.0)  # clip disabled
    assert np.allclose(base - work.flat, 0.1 * grad, atol=1e-15)
    work = params.copy()
    apply_gradient_step(work, grad, lr=0.0, clip=2.5)
    assert np.array_equal(work.flat, base)


def test_run_iterations_zero_rounds(tmp_path):
    cfg = mini_train_config(iterations=0)
    report = run_iterations(cfg, tmp_path)
    assert report["status"] == "complete"
    assert report["error"] is None
    assert report["iterations"] == []
    assert report["final"] == report["sft"]["eval"]
    for name in ("sft_tasks", "rl_tasks", "eval_tasks"):
        assert (tmp_path / "world" / f"{name}.jsonl").exists()
    assert (tmp_path / "checkpoints" / "post_sft.bin").exists()
    assert (tmp_path / "metrics" / "metrics.csv").exists()
    assert not (tmp_path / "prefs").exists()
    assert str(tmp_path) not in json.dumps(report)


def test_run_report_shape(mini_run):
    cfg, out, report = mini_run
    assert report["status"] == "complete"
    assert report["run_id"] == run_id(cfg)
    assert report["config_hash"] == config_hash(cfg)
    assert report["pools"] == {"sft": 24, "rl": 40, "eval": 16}
    assert len(report["iterations"]) == 1
    entry = report["iterations"][0]
    assert entry["data"]["actor"] == "post-sft"
    assert entry["data"]["retained"] >= 1
    assert len(entry["stage1"]["loss_curve"]) == cfg.stage1_epochs + 1
    assert len(entry["stage2"]["loss_curve"]) == cfg.stage2_epochs + 1
    for phase in ("stage1", "stage2"):
        for key in ("detection_accuracy", "answer_accuracy", "bbox_format_ratio"):
            assert 0.0 <= entry[phase]["eval"][key] <= 1.0
    assert report["final"] == entry["stage2"]["eval"]
    # sidecar stats match the report copy
    sidecar = json.loads((out / "prefs" / "pairs_iter0.stats.json").read_text())
    assert sidecar == entry["data"]
    assert sidecar["critic"] == "ground-truth oracle"


def test_run_artifacts_on_disk(mini_run):
    cfg, out, report = mini_run
    chash = config_hash(cfg)
    meta, recs = read_jsonl(out / "prefs" / "pairs_iter0.jsonl", expect_kind="preference_pairs")
    assert meta["config_hash"] == chash
    assert len(recs) == report["iterations"][0]["data"]["retained"]
    for name in ("original", "post_sft", "iter1_stage1", "iter1"):
        params, meta = load_checkpoint(out / "checkpoints" / name)
        assert meta["config_hash"] == chash
        assert meta["seed"] == cfg.seed
    assert load_checkpoint(out / "checkpoints" / "iter1_stage1")[1]["provenance"] == "post-stage1"
    rows = read_metrics_csv(out / "metrics" / "metrics.csv")
    phases = {r[1] for r in rows}
    assert phases == {"sft", "datagen", "stage1", "stage2"}
    assert all(r[0] == run_id(cfg) for r in rows)


def test_run_is_reproducible(mini_run, tmp_path):
    cfg, out, report = mini_run
    again = run_iterations(cfg, tmp_path)
    assert json.dumps(report, sort_keys=True) == json.dumps(again, sort_keys=True)
    rel = [
        "world/sft_tasks.jsonl",
        "world/rl_tasks.jsonl",
        "world/eval_tasks.jsonl",
        "prefs/pairs_iter0.jsonl",
        "prefs/pairs_iter0.stats.json",
        "checkpoints/original.bin",
        "checkpoints/post_sft.bin",
        "checkpoints/iter1_stage1.bin",
        "checkpoints/iter1.bin",
        "checkpoints/iter1.meta.json",
        "metrics/metrics.csv",
        "report/run_report.json",
    ]
    for name in rel:
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_partial_report_written_on_failure(tmp_path):
    cfg = mini_train_config(thresholds=FilterThresholds(resp_win=11))
    with pytest.raises(EmptyDataset):
        run_iterations(cfg, tmp_path)
    report = json.loads((tmp_path / "report" / "run_report.json").read_text())
    assert report["status"] == "partial"
    assert report["error"]["error"] == "EmptyDataset"
    assert report["sft"] is not None
    rows = read_metrics_csv(tmp_path / "metrics" / "metrics.csv")
    assert {r[1] for r in rows} == {"sft"}


def test_run_baseline(tmp_path):
    cfg = mini_train_config()
    report = run_baseline(cfg, tmp_path / "a")
    assert report["variant"] == "response-only"
    assert report["run_id"] == run_id(cfg)
    assert report["pairs"] >= 1
    assert len(report["loss_curve"]) == cfg.baseline_epochs + 1
    assert report["loss_curve"][0] == pytest.approx(LN2, abs=1e-12)
    assert 0.0 <= report["final"]["answer_accuracy"] <= 1.0
    assert (tmp_path / "a" / "checkpoints" / "baseline.bin").exists()
    rows = read_metrics_csv(tmp_path / "a" / "metrics" / "baseline_metrics.csv")
    assert {r[1] for r in rows} == {"baseline"}
    again = run_baseline(cfg, tmp_path / "b")
    assert json.dumps(report, sort_keys=True) == json.dumps(again, sort_keys=True)
    assert (tmp_path / "a" / "report" / "baseline_report.json").read_bytes() == (
        tmp_path / "b" / "report" / "baseline_report.json"
    ).read_bytes()
    with pytest.raises(EmptyDataset):
        run_baseline(
            mini_train_config(thresholds=FilterThresholds(resp_win=11)), tmp_path / "c"
        )


def test_evaluate_policy_is_keyed_by_tag(mini_pipeline):
    cfg, pools, params, _, _, _ = mini_pipeline
    a = evaluate_policy(params, pools["eval"], cfg, "probe")
    b = evaluate_policy(params, pools["eval"], cfg, "probe")
    assert a == b
    assert set(a) == {"detection_accuracy", "answer_accuracy", "bbox_format_ratio"}
    c = evaluate_policy(params, pools["eval"], cfg, "other")
    assert c["detection_accuracy"] == a["detection_accuracy"]
    assert c["answer_accuracy"] == a["answer_accuracy"]
