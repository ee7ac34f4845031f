"""Training orchestration for the localize-then-answer policy.

The full loop is: supervised warm-up on ground-truth boxes and answers, then
repeated rounds of (generate preference data with the current policy, box
stage against a frozen entry reference, joint stage against the post-box
reference).  Preference data is regenerated from scratch every round, so the
policy always trains on its own current mistakes.  A response-only baseline
trains the answer head with plain pair preferences on the uncropped scene.

Any randomness is drawn from streams keyed by (seed, purpose, iteration),
so reruns with the same config and seed produce byte-identical artifacts.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import artifacts
from .config import TrainConfig, config_as_dict, config_hash, run_id
from .datagen import build_preference_dataset, pair_record
from .dpo import PreparedPair, response_dpo_batch, stage1_batch, stage2_batch
from .errors import EmptyDataset, PipelineError
from .geometry import BoundingBox, box_from_tokens, tokens_from_box
from .metrics import answer_accuracy, bbox_format_ratio, detection_accuracy
from .policy import (
    BBOX_HEAD,
    RESPONSE_HEAD,
    PolicyDims,
    PolicyParams,
    accumulate_grad_logprob,
    greedy_bbox,
    greedy_response,
    init_params,
    logprob,
    sample_response,
    save_checkpoint,
    snapshot,
)
from .world import FeatureCache, TaskPool, generate_pool, task_record

_INIT_SALT = 31
_SFT_SALT = 37
_STAGE_SALT = 41
_EVAL_SALT = 47
_BASELINE_SALT = 53

POOL_LABELS = ("sft", "rl", "eval")


def policy_dims(cfg: TrainConfig) -> PolicyDims:
    return PolicyDims.from_world(cfg.world, cfg.bins, cfg.hidden)


def build_pools(cfg: TrainConfig) -> dict:
    """The three disjoint splits; ids are contiguous so seed streams never
    overlap across splits."""
    sizes = {"sft": cfg.sft_size, "rl": cfg.rl_size, "eval": cfg.eval_size}
    pools = {}
    start = 0
    for label in POOL_LABELS:
        pools[label] = generate_pool(cfg.world, label, start, sizes[label], cfg.seed)
        start += sizes[label]
    return pools


def fresh_params(cfg: TrainConfig) -> PolicyParams:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _INIT_SALT)))
    return init_params(policy_dims(cfg), rng, cfg.init_scale)


def apply_gradient_step(params: PolicyParams, grad: np.ndarray, lr: float, clip: float):
    """Plain gradient descent with a global norm clip."""
    norm = float(np.linalg.norm(grad))
    if clip > 0.0 and norm > clip:
        grad = grad * (clip / norm)
    params.flat -= lr * grad


@dataclass(frozen=True, eq=False)
class _SftExample:
    bbox_tokens: tuple
    answer_idx: int
    features: np.ndarray
    query: np.ndarray
    crop: np.ndarray


def _sft_examples(pool: TaskPool, cache: FeatureCache, bins: int) -> list:
    vocab = pool.cfg.vocab
    out = []
    for task in pool.tasks:
        scene = pool.scene_for(task)
        out.append(
            _SftExample(
                bbox_tokens=tokens_from_box(task.gt_region, bins),
                answer_idx=vocab.index(task.gt_answer),
                features=cache.features(scene),
                query=task.query_embedding,
                crop=cache.crop(scene, task.gt_region),
            )
        )
    return out


def _sft_loss(params: PolicyParams, examples) -> float:
    total = 0.0
    for ex in examples:
        total -= logprob(params, BBOX_HEAD, (ex.features, ex.query), ex.bbox_tokens)
        total -= logprob(params, RESPONSE_HEAD, (ex.query, ex.crop), ex.answer_idx)
    return total / len(examples)


def sft_warmup(params: PolicyParams, pool: TaskPool, cfg: TrainConfig) -> list:
    """Cross-entropy warm-up toward ground-truth tokens and answers.

    Returns the full-pool loss curve, entry 0 measured before any update.
    """
    cache = FeatureCache(pool.cfg)
    examples = _sft_examples(pool, cache, cfg.bins)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _SFT_SALT)))
    curve = [_sft_loss(params, examples)]
    grad = np.zeros(params.dims.n_params)
    for _ in range(cfg.sft_epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(order), cfg.sft_batch):
            batch = order[start : start + cfg.sft_batch]
            grad[:] = 0.0
            w = -1.0 / len(batch)
            for idx in batch:
                ex = examples[idx]
                accumulate_grad_logprob(
                    params, BBOX_HEAD, (ex.features, ex.query), ex.bbox_tokens, w, grad
                )
                accumulate_grad_logprob(
                    params, RESPONSE_HEAD, (ex.query, ex.crop), ex.answer_idx, w, grad
                )
            apply_gradient_step(params, grad, cfg.sft_lr, cfg.grad_clip)
        curve.append(_sft_loss(params, examples))
    return curve


def prepare_pairs(pairs, pool: TaskPool, cache: FeatureCache) -> list:
    """Join preference pairs with model inputs; both answers condition on
    the winning crop."""
    vocab = pool.cfg.vocab
    tasks_by_id = {t.task_id: t for t in pool.tasks}
    out = []
    for pair in pairs:
        task = tasks_by_id[pair.task_id]
        scene = pool.scene_for(task)
        feats = cache.features(scene)
        out.append(
            PreparedPair(
                task_id=pair.task_id,
                bbox_inputs=(feats, task.query_embedding),
                resp_inputs=(task.query_embedding, cache.crop(scene, pair.win.box)),
                win_bbox_tokens=pair.win.bbox_tokens,
                lose_bbox_tokens=pair.lose.bbox_tokens,
                win_resp=vocab.index(pair.win.response),
                lose_resp=vocab.index(pair.lose.response),
            )
        )
    return out


def _stage_epochs(params, prepared, cfg, *, iteration, stage, batch_fn, lr, epochs):
    """Shared minibatch loop: epoch-0 loss first, then per-epoch full loss."""
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, _STAGE_SALT, iteration, stage))
    )
    curve = [batch_fn(prepared, grad=False)]
    for _ in range(epochs):
        order = rng.permutation(len(prepared))
        for start in range(0, len(order), cfg.rl_batch):
            batch = [prepared[i] for i in order[start : start + cfg.rl_batch]]
            loss, grad = batch_fn(batch, grad=True)
            apply_gradient_step(params, grad, lr, cfg.grad_clip)
        curve.append(batch_fn(prepared, grad=False))
    return curve


def train_stage1(params: PolicyParams, ref, prepared, cfg: TrainConfig, iteration: int = 0) -> list:
    """Box-head preference stage against the frozen entry reference."""

    def batch_fn(batch, grad):
        loss, g = stage1_batch(params, ref, batch, cfg.dpo.beta_stage1)
        return (loss, g) if grad else loss

    return _stage_epochs(
        params,
        prepared,
        cfg,
        iteration=iteration,
        stage=1,
        batch_fn=batch_fn,
        lr=cfg.stage1_lr,
        epochs=cfg.stage1_epochs,
    )


def train_stage2(params: PolicyParams, prepared, cfg: TrainConfig, iteration: int = 0) -> list:
    """Joint stage; snapshots the post-box-stage parameters as its reference
    before the first update."""
    ref_hat = snapshot(params, "post-stage1")

    def batch_fn(batch, grad):
        loss, g = stage2_batch(params, ref_hat, batch, cfg.dpo)
        return (loss, g) if grad else loss

    return _stage_epochs(
        params,
        prepared,
        cfg,
        iteration=iteration,
        stage=2,
        batch_fn=batch_fn,
        lr=cfg.stage2_lr,
        epochs=cfg.stage2_epochs,
    )


def _full_box() -> BoundingBox:
    return BoundingBox(0.0, 0.0, 1.0, 1.0)


def evaluate_policy(params: PolicyParams, pool: TaskPool, cfg: TrainConfig, tag: str) -> dict:
    """Greedy-decoded detection and answer accuracy plus sampled format ratio.

    ``tag`` keys the sampling stream so every evaluation point is
    independently reproducible.
    """
    cache = FeatureCache(pool.cfg)
    preds = []
    answers = []
    gts = []
    gt_answers = []
    vocab = pool.cfg.vocab
    for task in pool.tasks:
        scene = pool.scene_for(task)
        feats = cache.features(scene)
        tokens = greedy_bbox(params, feats, task.query_embedding)
        try:
            box = box_from_tokens(tokens, cfg.bins, pool.cfg.min_box_area)
        except ValueError:
            box = _full_box()
        preds.append(box)
        gts.append(task.gt_region)
        answers.append(vocab[greedy_response(params, task.query_embedding, cache.crop(scene, box))])
        gt_answers.append(task.gt_answer)
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, _EVAL_SALT, zlib.crc32(tag.encode())))
    )
    return {
        "detection_accuracy": detection_accuracy(preds, gts, cfg.detection_iou),
        "answer_accuracy": answer_accuracy(answers, gt_answers),
        "bbox_format_ratio": bbox_format_ratio(params, pool, rng, cfg.temperature),
    }


def _eval_rows(rows, rid, phase, iteration, evals: dict):
    for metric, value in sorted(evals.items()):
        rows.append((rid, phase, iteration, metric, float(value)))


def _datagen_rows(rows, rid, iteration, stats):
    d = stats.as_dict()
    quality = d.pop("quality")
    for metric, value in sorted(d.items()):
        rows.append((rid, "datagen", iteration, metric, float(value)))
    if quality is not None:
        for metric, value in sorted(quality.items()):
            if value is not None:
                rows.append((rid, "datagen", iteration, f"quality_{metric}", float(value)))


def run_iterations(cfg: TrainConfig, out_dir, *, workers: int = 1, progress=None) -> dict:
    """End-to-end run: pools, warm-up, K self-improvement iterations.

    Writes task files, preference datasets with stats sidecars, checkpoints,
    a metrics CSV, and the run report.  On a mid-run failure the partial
    report is still written, marked with the error, before the exception
    propagates.
    """
    out_dir = Path(out_dir)
    say = progress or (lambda msg: None)
    chash = config_hash(cfg)
    rid = run_id(cfg)
    report = {
        "run_id": rid,
        "config_hash": chash,
        "seed": cfg.seed,
        "config": config_as_dict(cfg),
        "critic": "ground-truth oracle",
        "status": "partial",
        "error": None,
        "pools": {},
        "sft": None,
        "iterations": [],
        "final": None,
    }
    rows = []
    try:
        say("building task pools")
        pools = build_pools(cfg)
        for label, pool in pools.items():
            report["pools"][label] = len(pool.tasks)
            artifacts.write_jsonl(
                out_dir / "world" / f"{label}_tasks.jsonl",
                (task_record(pool.scene_for(t), t) for t in pool.tasks),
                kind="tasks",
                config_hash=chash,
                seed=cfg.seed,
            )
        params = fresh_params(cfg)
        save_checkpoint(params, out_dir / "checkpoints" / "original", "original", chash, cfg.seed)

        say("supervised warm-up")
        sft_curve = sft_warmup(params, pools["sft"], cfg)
        save_checkpoint(params, out_dir / "checkpoints" / "post_sft", "post-sft", chash, cfg.seed)
        sft_eval = evaluate_policy(params, pools["eval"], cfg, "sft")
        report["sft"] = {"loss_curve": sft_curve, "eval": sft_eval}
        _eval_rows(rows, rid, "sft", None, sft_eval)

        cache = FeatureCache(cfg.world)
        for k in range(cfg.iterations):
            actor = "post-sft" if k == 0 else f"iteration-{k}"
            say(f"iteration {k}: generating preference data (actor: {actor})")
            pairs, stats = build_preference_dataset(
                params,
                pools["rl"],
                n_rounds=cfg.rounds,
                diversity=cfg.diversity,
                thresholds=cfg.thresholds,
                focus_rho=cfg.focus_rho,
                temperature=cfg.temperature,
                seed=cfg.seed,
                iteration=k,
                workers=workers,
            )
            artifacts.write_jsonl(
                out_dir / "prefs" / f"pairs_iter{k}.jsonl",
                (pair_record(p) for p in pairs),
                kind="preference_pairs",
                config_hash=chash,
                seed=cfg.seed,
            )
            stats_payload = stats.as_dict()
            stats_payload.update(
                {
                    "iteration": k,
                    "actor": actor,
                    "critic": "ground-truth oracle",
                    "config_hash": chash,
                    "seed": cfg.seed,
                }
            )
            artifacts.write_json(out_dir / "prefs" / f"pairs_iter{k}.stats.json", stats_payload)
            _datagen_rows(rows, rid, k, stats)

            prepared = prepare_pairs(pairs, pools["rl"], cache)
            entry_ref = snapshot(params, actor)

            say(f"iteration {k}: box stage on {len(prepared)} pairs")
            stage1_curve = train_stage1(params, entry_ref, prepared, cfg, iteration=k)
            save_checkpoint(
                params,
                out_dir / "checkpoints" / f"iter{k + 1}_stage1",
                "post-stage1",
                chash,
                cfg.seed,
            )
            stage1_eval = evaluate_policy(params, pools["eval"], cfg, f"stage1-{k}")
            _eval_rows(rows, rid, "stage1", k, stage1_eval)

            say(f"iteration {k}: joint stage")
            stage2_curve = train_stage2(params, prepared, cfg, iteration=k)
            save_checkpoint(
                params,
                out_dir / "checkpoints" / f"iter{k + 1}",
                f"iteration-{k + 1}",
                chash,
                cfg.seed,
            )
            stage2_eval = evaluate_policy(params, pools["eval"], cfg, f"stage2-{k}")
            _eval_rows(rows, rid, "stage2", k, stage2_eval)

            report["iterations"].append(
                {
                    "iteration": k,
                    "data": stats_payload,
                    "stage1": {"loss_curve": stage1_curve, "eval": stage1_eval},
                    "stage2": {"loss_curve": stage2_curve, "eval": stage2_eval},
                }
            )

        final_eval = report["iterations"][-1]["stage2"]["eval"] if report["iterations"] else sft_eval
        report["final"] = final_eval
        report["status"] = "complete"
    except PipelineError as exc:
        report["error"] = {"error": exc.code, "message": str(exc)}
        raise
    finally:
        artifacts.write_metrics_csv(out_dir / "metrics" / "metrics.csv", rows)
        artifacts.write_json(out_dir / "report" / "run_report.json", report)
    say("run complete" if report["status"] == "complete" else "run failed")
    return report


def _baseline_pairs(params, pool, cfg: TrainConfig, cache, iteration: int) -> list:
    """Answer-only preferences: sample responses on the uncropped scene,
    keep tasks with at least one correct and one incorrect answer."""
    vocab = pool.cfg.vocab
    out = []
    for task in sorted(pool.tasks, key=lambda t: t.task_id):
        rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, _BASELINE_SALT, iteration, task.task_id))
        )
        scene = pool.scene_for(task)
        feats = cache.features(scene)
        scored = []
        for _ in range(2 * cfg.rounds):
            idx = sample_response(params, task.query_embedding, feats, rng, cfg.temperature)
            score = 10 if vocab[idx] == task.gt_answer else 0
            scored.append((idx, score))
        wins = [i for i, s in scored if s >= cfg.thresholds.resp_win]
        loses = [i for i, s in scored if s < cfg.thresholds.resp_lose]
        if not wins or not loses:
            continue
        out.append(
            PreparedPair(
                task_id=task.task_id,
                bbox_inputs=None,
                resp_inputs=(task.query_embedding, feats),
                win_bbox_tokens=None,
                lose_bbox_tokens=None,
                win_resp=wins[0],
                lose_resp=loses[0],
            )
        )
    return out


def evaluate_direct_answers(params: PolicyParams, pool: TaskPool, cfg: TrainConfig) -> float:
    """Answer accuracy when the policy answers from the whole scene."""
    cache = FeatureCache(pool.cfg)
    vocab = pool.cfg.vocab
    answers = []
    gt = []
    for task in pool.tasks:
        feats = cache.features(pool.scene_for(task))
        answers.append(vocab[greedy_response(params, task.query_embedding, feats)])
        gt.append(task.gt_answer)
    return answer_accuracy(answers, gt)


def run_baseline(cfg: TrainConfig, out_dir, *, progress=None) -> dict:
    """Response-only pipeline sharing the seed, pools, and warm-up with the
    full run, so the comparison isolates the box step."""
    out_dir = Path(out_dir)
    say = progress or (lambda msg: None)
    chash = config_hash(cfg)
    rid = run_id(cfg)
    pools = build_pools(cfg)
    params = fresh_params(cfg)
    say("supervised warm-up (shared with the full run)")
    sft_warmup(params, pools["sft"], cfg)
    cache = FeatureCache(cfg.world)
    say("building answer preference pairs from warm-up samples")
    prepared = _baseline_pairs(params, pools["rl"], cfg, cache, 0)
    if not prepared:
        raise EmptyDataset("baseline produced no answer preference pairs")
    # One plain DPO pass: fixed dataset, fixed reference, no self-evolution.
    ref = snapshot(params, "baseline-reference")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _BASELINE_SALT + 1)))
    curve = []

    def full_loss():
        loss, _ = response_dpo_batch(params, ref, prepared, cfg.dpo.beta)
        return loss

    curve.append(full_loss())
    for _ in range(cfg.baseline_epochs):
        order = rng.permutation(len(prepared))
        for start in range(0, len(order), cfg.rl_batch):
            batch = [prepared[i] for i in order[start : start + cfg.rl_batch]]
            loss, grad = response_dpo_batch(params, ref, batch, cfg.dpo.beta)
            apply_gradient_step(params, grad, cfg.baseline_lr, cfg.grad_clip)
        curve.append(full_loss())
    acc = evaluate_direct_answers(params, pools["eval"], cfg)
    say(f"baseline answer accuracy {acc:.3f}")
    rows = [
        (rid, "baseline", None, "answer_accuracy", acc),
        (rid, "baseline", None, "pairs", float(len(prepared))),
    ]
    report = {
        "run_id": rid,
        "config_hash": chash,
        "seed": cfg.seed,
        "variant": "response-only",
        "pairs": len(prepared),
        "loss_curve": curve,
        "final": {"answer_accuracy": acc},
    }
    save_checkpoint(params, out_dir / "checkpoints" / "baseline", "baseline", chash, cfg.seed)
    artifacts.write_metrics_csv(out_dir / "metrics" / "baseline_metrics.csv", rows)
    artifacts.write_json(out_dir / "report" / "baseline_report.json", report)
    return report
