"""Command-line entry point.

Subcommands cover the full workflow: world generation, supervised warm-up,
preference-data generation, the box and joint optimization stages, the full
iteration loop, the answer-only baseline, held-out evaluation, and report
aggregation with rendered figures.  Every command exits 0 on success and
nonzero with a one-line JSON error on stderr otherwise; the exit code
identifies the error class.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import artifacts, plots, world
from .config import TrainConfig, config_hash, load_config, run_id
from .datagen import build_preference_dataset, pair_from_record, pair_record
from .errors import HashMismatch, MissingInput, PipelineError, WrongReference
from .policy import load_checkpoint, save_checkpoint, snapshot
from .trainer import (
    POOL_LABELS,
    evaluate_policy,
    fresh_params,
    prepare_pairs,
    run_baseline,
    run_iterations,
    sft_warmup,
    train_stage1,
    train_stage2,
)
from .world import FeatureCache, pool_from_records, task_record


def _say(msg: str):
    print(msg)


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, default=None, help="TOML config file")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument("--out", type=Path, default=None, help="output directory")


def _resolve(args) -> tuple:
    cfg = load_config(args.config, seed_override=args.seed)
    out = args.out if args.out is not None else Path("runs") / run_id(cfg)
    return cfg, out


def _load_pool(cfg: TrainConfig, out: Path, label: str):
    path = out / "world" / f"{label}_tasks.jsonl"
    meta, records = artifacts.read_jsonl(path, expect_kind="tasks")
    artifacts.check_same_run(path, config_hash(cfg), cfg.seed, meta)
    return pool_from_records(label, cfg.world, records)


def _pool_slice_records(payload: tuple) -> list:
    cfg, label, start, count, seed = payload
    pool = world.generate_pool(cfg, label, start, count, seed)
    return [task_record(pool.scene_for(t), t) for t in pool.tasks]


def _cmd_gen_world(args) -> int:
    cfg, out = _resolve(args)
    chash = config_hash(cfg)
    sizes = {"sft": cfg.sft_size, "rl": cfg.rl_size, "eval": cfg.eval_size}
    start = 0
    for label in POOL_LABELS:
        count = sizes[label]
        workers = max(1, args.workers)
        if workers > 1 and count > 1:
            bounds = np.linspace(start, start + count, workers + 1).astype(int)
            payloads = [
                (cfg.world, label, int(lo), int(hi - lo), cfg.seed)
                for lo, hi in zip(bounds[:-1], bounds[1:])
                if hi > lo
            ]
            records = []
            with ProcessPoolExecutor(max_workers=workers) as ex:
                for part in ex.map(_pool_slice_records, payloads):
                    records.extend(part)
        else:
            records = _pool_slice_records((cfg.world, label, start, count, cfg.seed))
        path = artifacts.write_jsonl(
            out / "world" / f"{label}_tasks.jsonl",
            records,
            kind="tasks",
            config_hash=chash,
            seed=cfg.seed,
        )
        _say(f"wrote {len(records)} {label} tasks to {path}")
        start += count
    return 0


def _cmd_sft(args) -> int:
    cfg, out = _resolve(args)
    chash = config_hash(cfg)
    rid = run_id(cfg)
    sft_pool = _load_pool(cfg, out, "sft")
    eval_pool = _load_pool(cfg, out, "eval")
    params = fresh_params(cfg)
    save_checkpoint(params, out / "checkpoints" / "original", "original", chash, cfg.seed)
    curve = sft_warmup(params, sft_pool, cfg)
    save_checkpoint(params, out / "checkpoints" / "post_sft", "post-sft", chash, cfg.seed)
    evals = evaluate_policy(params, eval_pool, cfg, "sft")
    rows = [(rid, "sft", None, metric, float(v)) for metric, v in sorted(evals.items())]
    rows.append((rid, "sft", None, "final_loss", curve[-1]))
    artifacts.write_metrics_csv(out / "metrics" / "sft_metrics.csv", rows)
    _say(
        f"warm-up done in {len(curve) - 1} epochs: loss {curve[0]:.3f} -> {curve[-1]:.3f}, "
        f"format ratio {evals['bbox_format_ratio']:.3f}, "
        f"answer accuracy {evals['answer_accuracy']:.3f}"
    )
    return 0


def _cmd_gen_prefs(args) -> int:
    cfg, out = _resolve(args)
    chash = config_hash(cfg)
    ckpt = args.checkpoint or out / "checkpoints" / "post_sft"
    params, meta = load_checkpoint(ckpt)
    rl_pool = _load_pool(cfg, out, "rl")
    pairs, stats = build_preference_dataset(
        params,
        rl_pool,
        n_rounds=cfg.rounds,
        diversity=cfg.diversity,
        thresholds=cfg.thresholds,
        focus_rho=cfg.focus_rho,
        temperature=cfg.temperature,
        seed=cfg.seed,
        iteration=args.iteration,
        workers=max(1, args.workers),
    )
    path = artifacts.write_jsonl(
        out / "prefs" / f"pairs_iter{args.iteration}.jsonl",
        (pair_record(p) for p in pairs),
        kind="preference_pairs",
        config_hash=chash,
        seed=cfg.seed,
    )
    payload = stats.as_dict()
    payload.update(
        {
            "iteration": args.iteration,
            "actor": meta.get("provenance", "unknown"),
            "critic": "ground-truth oracle",
            "config_hash": chash,
            "seed": cfg.seed,
        }
    )
    artifacts.write_json(out / "prefs" / f"pairs_iter{args.iteration}.stats.json", payload)
    _say(
        f"retained {stats.retained}/{stats.tasks_total} tasks "
        f"(too hard {stats.dropped_too_hard}, too easy {stats.dropped_too_easy}, "
        f"non-extremal {stats.dropped_non_extremal}) -> {path}"
    )
    return 0


def _load_pairs(cfg: TrainConfig, out: Path, iteration: int):
    path = out / "prefs" / f"pairs_iter{iteration}.jsonl"
    meta, records = artifacts.read_jsonl(path, expect_kind="preference_pairs")
    artifacts.check_same_run(path, config_hash(cfg), cfg.seed, meta)
    return [pair_from_record(r) for r in records]


def _cmd_rl1(args) -> int:
    cfg, out = _resolve(args)
    chash = config_hash(cfg)
    rid = run_id(cfg)
    ckpt = args.checkpoint or out / "checkpoints" / "post_sft"
    params, meta = load_checkpoint(ckpt)
    pairs = _load_pairs(cfg, out, args.iteration)
    rl_pool = _load_pool(cfg, out, "rl")
    eval_pool = _load_pool(cfg, out, "eval")
    prepared = prepare_pairs(pairs, rl_pool, FeatureCache(cfg.world))
    ref = snapshot(params, meta.get("provenance", "unknown"))
    curve = train_stage1(params, ref, prepared, cfg, iteration=args.iteration)
    save_checkpoint(
        params,
        out / "checkpoints" / f"iter{args.iteration + 1}_stage1",
        "post-stage1",
        chash,
        cfg.seed,
    )
    evals = evaluate_policy(params, eval_pool, cfg, f"stage1-{args.iteration}")
    rows = [(rid, "stage1", args.iteration, m, float(v)) for m, v in sorted(evals.items())]
    rows.append((rid, "stage1", args.iteration, "final_loss", curve[-1]))
    artifacts.write_metrics_csv(
        out / "metrics" / f"stage1_iter{args.iteration}_metrics.csv", rows
    )
    _say(
        f"box stage on {len(prepared)} pairs: loss {curve[0]:.4f} -> {curve[-1]:.4f}, "
        f"detection accuracy {evals['detection_accuracy']:.3f}"
    )
    return 0


def _cmd_rl2(args) -> int:
    cfg, out = _resolve(args)
    chash = config_hash(cfg)
    rid = run_id(cfg)
    ckpt = args.checkpoint or out / "checkpoints" / f"iter{args.iteration + 1}_stage1"
    params, meta = load_checkpoint(ckpt)
    if meta.get("provenance") != "post-stage1":
        raise WrongReference(
            f"joint stage must start from a 'post-stage1' checkpoint, "
            f"got {meta.get('provenance')!r} from {ckpt}"
        )
    pairs = _load_pairs(cfg, out, args.iteration)
    rl_pool = _load_pool(cfg, out, "rl")
    eval_pool = _load_pool(cfg, out, "eval")
    prepared = prepare_pairs(pairs, rl_pool, FeatureCache(cfg.world))
    curve = train_stage2(params, prepared, cfg, iteration=args.iteration)
    save_checkpoint(
        params,
        out / "checkpoints" / f"iter{args.iteration + 1}",
        f"iteration-{args.iteration + 1}",
        chash,
        cfg.seed,
    )
    evals = evaluate_policy(params, eval_pool, cfg, f"stage2-{args.iteration}")
    rows = [(rid, "stage2", args.iteration, m, float(v)) for m, v in sorted(evals.items())]
    rows.append((rid, "stage2", args.iteration, "final_loss", curve[-1]))
    artifacts.write_metrics_csv(
        out / "metrics" / f"stage2_iter{args.iteration}_metrics.csv", rows
    )
    _say(
        f"joint stage on {len(prepared)} pairs: loss {curve[0]:.4f} -> {curve[-1]:.4f}, "
        f"answer accuracy {evals['answer_accuracy']:.3f}"
    )
    return 0


def _cmd_iterate(args) -> int:
    cfg, out = _resolve(args)
    report = run_iterations(cfg, out, workers=max(1, args.workers), progress=_say)
    final = report["final"]
    _say(
        f"final held-out metrics: detection {final['detection_accuracy']:.3f}, "
        f"answer {final['answer_accuracy']:.3f} "
        f"(report: {out / 'report' / 'run_report.json'})"
    )
    return 0


def _cmd_baseline(args) -> int:
    cfg, out = _resolve(args)
    report = run_baseline(cfg, out, progress=_say)
    _say(f"baseline final answer accuracy: {report['final']['answer_accuracy']:.3f}")
    return 0


def _cmd_eval(args) -> int:
    cfg, out = _resolve(args)
    chash = config_hash(cfg)
    rid = run_id(cfg)
    eval_pool = _load_pool(cfg, out, "eval")
    targets = [("sft", None, out / "checkpoints" / "post_sft")]
    for k in range(cfg.iterations):
        targets.append(("stage2", k, out / "checkpoints" / f"iter{k + 1}"))
    rows = []
    for phase, iteration, ckpt in targets:
        bin_path = ckpt.with_name(ckpt.name + ".bin")
        if not bin_path.exists():
            continue
        params, meta = load_checkpoint(ckpt)
        if meta.get("config_hash") != chash or int(meta.get("seed", -1)) != cfg.seed:
            raise MissingInput(
                f"checkpoint {ckpt} belongs to a different run "
                f"(hash {meta.get('config_hash')!r}, seed {meta.get('seed')!r})"
            )
        tag = phase if iteration is None else f"{phase}-{iteration}"
        evals = evaluate_policy(params, eval_pool, cfg, tag)
        for metric, value in sorted(evals.items()):
            rows.append((rid, phase, iteration, metric, float(value)))
        label = meta.get("provenance", ckpt.name)
        _say(
            f"{label}: detection {evals['detection_accuracy']:.3f}, "
            f"answer {evals['answer_accuracy']:.3f}, "
            f"format {evals['bbox_format_ratio']:.3f}"
        )
    if not rows:
        raise MissingInput(f"no evaluable checkpoints under {out / 'checkpoints'}")
    path = artifacts.write_metrics_csv(out / "metrics" / "eval.csv", rows)
    _say(f"wrote {len(rows)} metric rows to {path}")
    return 0


def _cmd_report(args) -> int:
    cfg, out = _resolve(args)
    chash = config_hash(cfg)
    report = artifacts.read_json(out / "report" / "run_report.json")
    if report.get("config_hash") != chash or int(report.get("seed", -1)) != cfg.seed:
        raise HashMismatch(
            f"run report belongs to config_hash={report.get('config_hash')!r} "
            f"seed={report.get('seed')!r}, expected {chash!r} seed={cfg.seed}"
        )
    for entry in report.get("iterations", []):
        k = entry["iteration"]
        stats_path = out / "prefs" / f"pairs_iter{k}.stats.json"
        if stats_path.exists():
            stats = artifacts.read_json(stats_path)
            artifacts.check_same_run(stats_path, chash, cfg.seed, stats)
    summary = {
        "run_id": report["run_id"],
        "config_hash": report["config_hash"],
        "seed": report["seed"],
        "status": report.get("status"),
        "pools": report.get("pools"),
        "warm_up": report.get("sft", {}).get("eval") if report.get("sft") else None,
        "final": report.get("final"),
        "iterations": [
            {
                "iteration": entry["iteration"],
                "retained_pairs": entry["data"]["retained"],
                "clean_pair_share": entry["data"]["quality"]["win_pos_lose_neg"],
                "detection_accuracy": entry["stage2"]["eval"]["detection_accuracy"],
                "answer_accuracy": entry["stage2"]["eval"]["answer_accuracy"],
            }
            for entry in report.get("iterations", [])
        ],
    }
    baseline_path = out / "report" / "baseline_report.json"
    if baseline_path.exists():
        baseline = artifacts.read_json(baseline_path)
        if baseline.get("config_hash") != chash or int(baseline.get("seed", -1)) != cfg.seed:
            raise HashMismatch(
                f"baseline report belongs to a different run: {baseline_path}"
            )
        summary["baseline"] = baseline.get("final")
        if report.get("final"):
            summary["full_minus_baseline_answer"] = (
                report["final"]["answer_accuracy"] - baseline["final"]["answer_accuracy"]
            )
    fig_dir = out / "report"
    figures = plots.render_report_figures(report, fig_dir)
    summary["figures"] = [p.name for p in figures]
    path = artifacts.write_json(out / "report" / "summary.json", summary)
    _say(f"wrote {path}")
    for p in figures:
        _say(f"rendered {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="focusrl",
        description="Self-improving localize-then-answer training pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate the task splits")
    _add_common(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=_cmd_gen_world)

    p = sub.add_parser("sft", help="supervised warm-up")
    _add_common(p)
    p.set_defaults(fn=_cmd_sft)

    p = sub.add_parser("gen-prefs", help="generate preference pairs")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--iteration", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=_cmd_gen_prefs)

    p = sub.add_parser("rl1", help="box preference stage")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--iteration", type=int, default=0)
    p.set_defaults(fn=_cmd_rl1)

    p = sub.add_parser("rl2", help="joint preference stage")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--iteration", type=int, default=0)
    p.set_defaults(fn=_cmd_rl2)

    p = sub.add_parser("iterate", help="full warm-up plus K iterations")
    _add_common(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=_cmd_iterate)

    p = sub.add_parser("baseline-dpo", help="answer-only baseline")
    _add_common(p)
    p.set_defaults(fn=_cmd_baseline)

    p = sub.add_parser("eval", help="evaluate stored checkpoints")
    _add_common(p)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("report", help="aggregate results and render figures")
    _add_common(p)
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except PipelineError as exc:
        print(artifacts.error_payload(exc), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
