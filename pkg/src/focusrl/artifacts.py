"""Artifact I/O: JSONL with a provenance header line, metrics CSV, and
machine-readable error payloads.

Every file starts from the same two facts, the config hash and the seed, so
downstream aggregation can refuse to mix artifacts from different runs.
Writers are timestamp-free and fully ordered; identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .errors import HashMismatch, MissingInput, PipelineError

METRICS_HEADER = ("run_id", "phase", "iteration", "metric", "value")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_jsonl(path, records, *, kind: str, config_hash: str, seed: int) -> Path:
    """Write a meta line followed by one record per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"record": "meta", "kind": kind, "config_hash": config_hash, "seed": int(seed)}
    with path.open("w") as fh:
        fh.write(_dump(meta) + "\n")
        for rec in records:
            fh.write(_dump(rec) + "\n")
    return path


def read_jsonl(path, *, expect_kind: str | None = None) -> tuple:
    """Read back (meta, records); validates the header line."""
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing artifact: {path}")
    with path.open() as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise MissingInput(f"empty artifact: {path}")
    try:
        meta = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as exc:
        raise MissingInput(f"malformed JSONL in {path}: {exc}") from exc
    if meta.get("record") != "meta" or "config_hash" not in meta or "seed" not in meta:
        raise MissingInput(f"missing meta header in {path}")
    if expect_kind is not None and meta.get("kind") != expect_kind:
        raise MissingInput(f"expected {expect_kind!r} records in {path}, got {meta.get('kind')!r}")
    return meta, records


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing artifact: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MissingInput(f"malformed JSON in {path}: {exc}") from exc


def write_metrics_csv(path, rows) -> Path:
    """Rows are (run_id, phase, iteration, metric, value); floats keep six
    decimal places, iteration may be empty for pre-iteration phases."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for run, phase, iteration, metric, value in rows:
            writer.writerow(
                (
                    run,
                    phase,
                    "" if iteration is None else int(iteration),
                    metric,
                    f"{value:.6f}" if isinstance(value, float) else value,
                )
            )
    return path


def read_metrics_csv(path) -> list:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing metrics file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != METRICS_HEADER:
            raise MissingInput(f"unexpected metrics header in {path}: {header}")
        return [tuple(row) for row in reader]


def check_same_run(path, config_hash: str, seed: int, meta: dict):
    """Refuse to mix artifacts produced under a different config or seed."""
    if meta.get("config_hash") != config_hash or int(meta.get("seed", -1)) != int(seed):
        raise HashMismatch(
            f"{path} was produced by config_hash={meta.get('config_hash')!r} "
            f"seed={meta.get('seed')!r}, expected {config_hash!r} seed={seed}"
        )


def error_payload(err: PipelineError) -> str:
    return _dump({"error": err.code, "message": str(err)})
