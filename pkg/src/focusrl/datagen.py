"""Self-generated preference data: sample, diversify, score, filter, pair.

Each task gets ``n_rounds`` rounds of two sampled boxes; within a round the
second box is replaced by a disjoint sample whenever it overlaps the first
too much, so candidates do not collapse onto one region.  Every surviving
box is cropped, answered by the policy, and scored by the critic.  Threshold
filtering splits candidates into win and lose sets, and a task contributes
exactly one training pair: the candidate simultaneously best on both scores
against the one simultaneously worst, or nothing.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .critic import score_bbox, score_response
from .errors import EmptyDataset, EmptyPool, MissingInput, NoFeasibleBox
from .geometry import BoundingBox, DiversityParams, box_from_tokens, diversity_adjust, iou, tokens_from_box
from .metrics import DataQuality, data_quality_table
from .policy import PolicyDims, PolicyParams, sample_bbox, sample_response
from .world import FeatureCache, QueryInstance, Scene, TaskPool

_DATAGEN_SALT = 23


@dataclass(frozen=True)
class FilterThresholds:
    """Score cutoffs: wins need both scores at or above the win cutoffs,
    losses need both strictly below the lose cutoffs."""

    box_win: int = 8
    box_lose: int = 5
    resp_win: int = 8
    resp_lose: int = 5

    def __post_init__(self):
        for name in ("box_win", "box_lose", "resp_win", "resp_lose"):
            v = getattr(self, name)
            if not isinstance(v, int):
                raise ValueError(f"{name} must be an integer: {v!r}")
        if self.box_win < self.box_lose:
            raise ValueError("box_win must be at least box_lose")
        if self.resp_win < self.resp_lose:
            raise ValueError("resp_win must be at least resp_lose")


@dataclass(frozen=True)
class CandidatePath:
    """One sampled localize-then-answer attempt with its critic scores."""

    task_id: int
    bbox_tokens: tuple
    box: BoundingBox
    response: str
    box_score: int
    resp_score: int
    diversity_replaced: bool = False


@dataclass(frozen=True)
class PreferencePair:
    task_id: int
    win: CandidatePath
    lose: CandidatePath


@dataclass
class GenerationStats:
    tasks_total: int = 0
    retained: int = 0
    dropped_too_hard: int = 0
    dropped_too_easy: int = 0
    dropped_non_extremal: int = 0
    infeasible_rounds: int = 0
    quality: DataQuality | None = None

    def as_dict(self) -> dict:
        return {
            "tasks_total": self.tasks_total,
            "retained": self.retained,
            "dropped_too_hard": self.dropped_too_hard,
            "dropped_too_easy": self.dropped_too_easy,
            "dropped_non_extremal": self.dropped_non_extremal,
            "infeasible_rounds": self.infeasible_rounds,
            "quality": None if self.quality is None else self.quality.as_dict(),
        }


def generate_candidates(
    params: PolicyParams,
    task: QueryInstance,
    scene: Scene,
    cache: FeatureCache,
    rng: np.random.Generator,
    *,
    n_rounds: int,
    diversity: DiversityParams,
    focus_rho: float,
    temperature: float = 1.0,
) -> tuple:
    """Sample up to 2 * n_rounds scored candidates for one task.

    Returns (candidates, infeasible_rounds).  A round loses its second
    candidate only when the diversity replacement has no feasible box.
    """
    if n_rounds < 1:
        raise ValueError("n_rounds must be positive")
    cfg = cache.cfg
    bins = params.dims.bins
    feats = cache.features(scene)
    query = task.query_embedding
    vocab = cfg.vocab
    out = []
    infeasible = 0
    for _ in range(n_rounds):
        drawn = []
        tokens1 = sample_bbox(params, feats, query, rng, temperature)
        box1 = box_from_tokens(tokens1, bins, cfg.min_box_area)
        drawn.append((tokens1, box1, False))
        tokens2 = sample_bbox(params, feats, query, rng, temperature)
        box2 = box_from_tokens(tokens2, bins, cfg.min_box_area)
        replaced = iou(box1, box2) >= diversity.reject_threshold
        if not replaced:
            drawn.append((tokens2, box2, False))
        else:
            try:
                box2 = diversity_adjust(box1, box2, diversity, rng)
                drawn.append((tokens_from_box(box2, bins), box2, True))
            except NoFeasibleBox:
                infeasible += 1
        for tokens, box, was_replaced in drawn:
            crop = cache.crop(scene, box)
            response = vocab[sample_response(params, query, crop, rng, temperature)]
            out.append(
                CandidatePath(
                    task_id=task.task_id,
                    bbox_tokens=tokens,
                    box=box,
                    response=response,
                    box_score=score_bbox(task, scene, box, focus_rho),
                    resp_score=score_response(task, response, vocab),
                    diversity_replaced=was_replaced,
                )
            )
    return out, infeasible


def filter_candidates(candidates, thresholds: FilterThresholds) -> tuple:
    """Split candidates into (win_set, lose_set); the sets can overlap only
    if the cutoffs do, and order follows the input."""
    win = [
        c
        for c in candidates
        if c.box_score >= thresholds.box_win and c.resp_score >= thresholds.resp_win
    ]
    lose = [
        c
        for c in candidates
        if c.box_score < thresholds.box_lose and c.resp_score < thresholds.resp_lose
    ]
    return win, lose


def _simultaneous_extremum(paths, best: bool):
    box_target = max(p.box_score for p in paths) if best else min(p.box_score for p in paths)
    resp_target = max(p.resp_score for p in paths) if best else min(p.resp_score for p in paths)
    for p in paths:
        if p.box_score == box_target and p.resp_score == resp_target:
            return p
    return None


def select_pair(win_set, lose_set):
    """One pair per task: the win-set element maximal on both scores against
    the lose-set element minimal on both; None when a set is empty or no
    element is extremal on both axes at once.  Ties keep the earliest."""
    if not win_set or not lose_set:
        return None
    win = _simultaneous_extremum(win_set, best=True)
    lose = _simultaneous_extremum(lose_set, best=False)
    if win is None or lose is None:
        return None
    return PreferencePair(task_id=win.task_id, win=win, lose=lose)


def _task_outcome(params, cache, task, scene, rng, settings) -> tuple:
    """(pair or None, drop reason or None, infeasible rounds) for one task."""
    candidates, infeasible = generate_candidates(
        params,
        task,
        scene,
        cache,
        rng,
        n_rounds=settings["n_rounds"],
        diversity=settings["diversity"],
        focus_rho=settings["focus_rho"],
        temperature=settings["temperature"],
    )
    win, lose = filter_candidates(candidates, settings["thresholds"])
    if not win:
        return None, "too_hard", infeasible
    if not lose:
        return None, "too_easy", infeasible
    pair = select_pair(win, lose)
    if pair is None:
        return None, "non_extremal", infeasible
    return pair, None, infeasible


def _task_rng(seed: int, iteration: int, task_id: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((seed, _DATAGEN_SALT, iteration, task_id))
    )


def _chunk_outcomes(payload: dict) -> list:
    """Worker entry: score a slice of tasks and return ordered outcomes."""
    params = PolicyParams(PolicyDims(**payload["dims"]), payload["flat"])
    cache = FeatureCache(payload["cfg"])
    settings = payload["settings"]
    out = []
    for task, scene in payload["items"]:
        rng = _task_rng(payload["seed"], payload["iteration"], task.task_id)
        out.append((task.task_id, _task_outcome(params, cache, task, scene, rng, settings)))
    return out


def build_preference_dataset(
    params: PolicyParams,
    pool: TaskPool,
    *,
    n_rounds: int,
    diversity: DiversityParams,
    thresholds: FilterThresholds,
    focus_rho: float,
    temperature: float = 1.0,
    seed: int = 0,
    iteration: int = 0,
    workers: int = 1,
) -> tuple:
    """Run the generate/filter/select pipeline over a whole task pool.

    Per-task randomness is keyed by (seed, iteration, task id), so the result
    is identical for any worker count.  Returns (pairs, GenerationStats);
    raises EmptyDataset when no task yields a pair.
    """
    if not pool.tasks:
        raise EmptyPool(f"pool {pool.label!r} has no tasks")
    settings = {
        "n_rounds": n_rounds,
        "diversity": diversity,
        "thresholds": thresholds,
        "focus_rho": focus_rho,
        "temperature": temperature,
    }
    tasks = sorted(pool.tasks, key=lambda t: t.task_id)
    if workers > 1 and len(tasks) > 1:
        chunks = np.array_split(np.arange(len(tasks)), min(workers, len(tasks)))
        payloads = []
        for idx in chunks:
            payloads.append(
                {
                    "dims": asdict(params.dims),
                    "flat": params.flat.copy(),
                    "cfg": pool.cfg,
                    "items": [(tasks[i], pool.scene_for(tasks[i])) for i in idx],
                    "settings": settings,
                    "seed": seed,
                    "iteration": iteration,
                }
            )
        outcomes = []
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for part in ex.map(_chunk_outcomes, payloads):
                outcomes.extend(part)
        outcomes.sort(key=lambda item: item[0])
        results = [outcome for _, outcome in outcomes]
    else:
        cache = FeatureCache(pool.cfg)
        results = [
            _task_outcome(
                params, cache, task, pool.scene_for(task), _task_rng(seed, iteration, task.task_id), settings
            )
            for task in tasks
        ]
    pairs = []
    stats = GenerationStats(tasks_total=len(tasks))
    for pair, reason, infeasible in results:
        stats.infeasible_rounds += infeasible
        if pair is not None:
            pairs.append(pair)
            stats.retained += 1
        elif reason == "too_hard":
            stats.dropped_too_hard += 1
        elif reason == "too_easy":
            stats.dropped_too_easy += 1
        else:
            stats.dropped_non_extremal += 1
    if not pairs:
        raise EmptyDataset(
            "no task produced a preference pair; thresholds may be unreachable"
        )
    stats.quality = data_quality_table(pairs, {t.task_id: t for t in pool.tasks})
    return pairs, stats


def _path_record(path: CandidatePath) -> dict:
    return {
        "bbox_tokens": list(path.bbox_tokens),
        "box": path.box.as_list(),
        "response": path.response,
        "s_b": path.box_score,
        "s_r": path.resp_score,
        "diversity_replaced": path.diversity_replaced,
    }


def pair_record(pair: PreferencePair) -> dict:
    """JSONL record: task id plus win and lose paths with their scores."""
    return {
        "task_id": pair.task_id,
        "win": _path_record(pair.win),
        "lose": _path_record(pair.lose),
    }


def _path_from_record(task_id: int, rec: dict) -> CandidatePath:
    return CandidatePath(
        task_id=task_id,
        bbox_tokens=tuple(int(t) for t in rec["bbox_tokens"]),
        box=BoundingBox.from_list(rec["box"]),
        response=rec["response"],
        box_score=int(rec["s_b"]),
        resp_score=int(rec["s_r"]),
        diversity_replaced=bool(rec.get("diversity_replaced", False)),
    )


def pair_from_record(rec: dict) -> PreferencePair:
    try:
        task_id = int(rec["task_id"])
        return PreferencePair(
            task_id=task_id,
            win=_path_from_record(task_id, rec["win"]),
            lose=_path_from_record(task_id, rec["lose"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MissingInput(f"malformed preference record: {exc}") from exc
