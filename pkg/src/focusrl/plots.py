"""Figure rendering for run reports.

Uses the headless backend and writes deterministic PNGs (no timestamps);
the config hash and seed ride along as PNG text metadata so figures carry
the same provenance as every other artifact.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_DPI = 120


def _png_metadata(report: dict) -> dict:
    return {
        "Software": "focusrl",
        "config_hash": str(report.get("config_hash", "")),
        "seed": str(report.get("seed", "")),
    }


def _save(fig, path: Path, report: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_DPI, metadata=_png_metadata(report))
    plt.close(fig)
    return path


def _model_points(report: dict) -> tuple:
    """x labels and eval dicts for post-warm-up plus each iteration."""
    labels = ["warm-up"]
    evals = [report["sft"]["eval"]]
    for entry in report["iterations"]:
        labels.append(f"iter {entry['iteration'] + 1}")
        evals.append(entry["stage2"]["eval"])
    return labels, evals


def accuracy_figure(report: dict, path: Path) -> Path:
    """Detection and answer accuracy across self-improvement iterations."""
    labels, evals = _model_points(report)
    xs = range(len(labels))
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for metric, style in (("detection_accuracy", "o-"), ("answer_accuracy", "s-")):
        ax.plot(xs, [100.0 * e[metric] for e in evals], style, label=metric.replace("_", " "))
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels)
    ax.set_ylabel("accuracy (%)")
    ax.set_xlabel("model version")
    ax.set_title("Held-out accuracy per iteration")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path, report)


def data_quality_figure(report: dict, path: Path) -> Path:
    """Share of clean pairs (good win box, bad lose box) and retained count
    per data-generation round."""
    iters = [entry["iteration"] for entry in report["iterations"]]
    clean = [
        100.0 * entry["data"]["quality"]["win_pos_lose_neg"] for entry in report["iterations"]
    ]
    retained = [entry["data"]["retained"] for entry in report["iterations"]]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(iters, clean, "o-", color="tab:blue", label="clean pair share")
    ax.set_xticks(iters)
    ax.set_xlabel("data generation round")
    ax.set_ylabel("clean pair share (%)", color="tab:blue")
    ax.grid(True, alpha=0.3)
    twin = ax.twinx()
    twin.plot(iters, retained, "s--", color="tab:orange", label="retained pairs")
    twin.set_ylabel("retained pairs", color="tab:orange")
    ax.set_title("Preference data quality per round")
    fig.tight_layout()
    return _save(fig, path, report)


def loss_curves_figure(report: dict, path: Path) -> Path:
    """Warm-up and per-iteration stage losses, one panel per phase."""
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.6))
    axes[0].plot(report["sft"]["loss_curve"], "o-", ms=3)
    axes[0].set_title("warm-up")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    for ax, stage in zip(axes[1:], ("stage1", "stage2")):
        for entry in report["iterations"]:
            ax.plot(entry[stage]["loss_curve"], "o-", ms=3, label=f"iter {entry['iteration'] + 1}")
        ax.set_title("box stage" if stage == "stage1" else "joint stage")
        ax.set_xlabel("epoch")
        if report["iterations"]:
            ax.legend(fontsize=8)
    for ax in axes:
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _save(fig, path, report)


def render_report_figures(report: dict, out_dir) -> list:
    """All report figures; skips iteration plots when no iteration ran."""
    out_dir = Path(out_dir)
    paths = [loss_curves_figure(report, out_dir / "loss_curves.png")]
    if report.get("sft") is not None:
        paths.insert(0, accuracy_figure(report, out_dir / "accuracy.png"))
    if report.get("iterations"):
        paths.append(data_quality_figure(report, out_dir / "data_quality.png"))
    return paths
