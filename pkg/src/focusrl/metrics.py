"""Evaluation metrics and preference-data quality audit.

Detection accuracy thresholds box overlap against ground truth, answer
accuracy is exact match, and the format ratio measures how often sampled
coordinate tokens already come out ordered and non-degenerate.  The quality
table cross-tabulates each retained pair by whether its winning and losing
boxes localize the evidence region.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import EmptyPool, LengthMismatch, MissingGroundTruth
from .geometry import iou
from .policy import sample_bbox
from .world import FeatureCache, TaskPool


def detection_accuracy(pred_boxes, gt_boxes, threshold: float = 0.5) -> float:
    """Fraction of predictions with iou strictly above ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1): {threshold}")
    if len(pred_boxes) != len(gt_boxes):
        raise LengthMismatch(f"{len(pred_boxes)} predictions vs {len(gt_boxes)} references")
    if not pred_boxes:
        raise LengthMismatch("no predictions to score")
    hits = sum(1 for p, g in zip(pred_boxes, gt_boxes) if iou(p, g) > threshold)
    return hits / len(pred_boxes)


def answer_accuracy(responses, gt_answers) -> float:
    """Fraction of exact-match answers."""
    if len(responses) != len(gt_answers):
        raise LengthMismatch(f"{len(responses)} responses vs {len(gt_answers)} references")
    if not responses:
        raise LengthMismatch("no responses to score")
    hits = sum(1 for r, g in zip(responses, gt_answers) if r == g)
    return hits / len(responses)


def bbox_format_ratio(params, pool: TaskPool, rng, temperature: float = 1.0) -> float:
    """Fraction of sampled token tuples that are already well formed.

    Well formed means x_lo < x_hi and y_lo < y_hi as raw tokens, before any
    decoder repair.
    """
    if not pool.tasks:
        raise EmptyPool(f"pool {pool.label!r} has no tasks")
    cache = FeatureCache(pool.cfg)
    good = 0
    for task in pool.tasks:
        feats = cache.features(pool.scene_for(task))
        t = sample_bbox(params, feats, task.query_embedding, rng, temperature)
        if t[0] < t[2] and t[1] < t[3]:
            good += 1
    return good / len(pool.tasks)


@dataclass(frozen=True)
class DataQuality:
    """Cross-tabulation of retained pairs by box correctness.

    Cell names read win-then-lose: ``win_pos_lose_neg`` counts pairs whose
    winning box localizes the ground-truth region (iou above threshold) while
    the losing box does not.  Fractions are exact; all None when no pairs.
    """

    count: int
    win_pos_lose_pos: Fraction | None
    win_pos_lose_neg: Fraction | None
    win_neg_lose_pos: Fraction | None
    win_neg_lose_neg: Fraction | None

    def as_dict(self) -> dict:
        def f(x):
            return None if x is None else float(x)

        return {
            "count": self.count,
            "win_pos_lose_pos": f(self.win_pos_lose_pos),
            "win_pos_lose_neg": f(self.win_pos_lose_neg),
            "win_neg_lose_pos": f(self.win_neg_lose_pos),
            "win_neg_lose_neg": f(self.win_neg_lose_neg),
        }


def data_quality_table(pairs, tasks_by_id: dict, threshold: float = 0.5) -> DataQuality:
    """Audit retained pairs against ground-truth regions.

    Raises MissingGroundTruth when a pair references a task id that is not
    in the mapping.  An empty pair list yields count 0 with None fractions.
    """
    if not pairs:
        return DataQuality(0, None, None, None, None)
    counts = {(True, True): 0, (True, False): 0, (False, True): 0, (False, False): 0}
    for pair in pairs:
        task = tasks_by_id.get(pair.task_id)
        if task is None or task.gt_region is None:
            raise MissingGroundTruth(f"no ground truth for task {pair.task_id}")
        win_ok = iou(pair.win.box, task.gt_region) > threshold
        lose_ok = iou(pair.lose.box, task.gt_region) > threshold
        counts[(win_ok, lose_ok)] += 1
    n = len(pairs)
    return DataQuality(
        count=n,
        win_pos_lose_pos=Fraction(counts[(True, True)], n),
        win_pos_lose_neg=Fraction(counts[(True, False)], n),
        win_neg_lose_pos=Fraction(counts[(False, True)], n),
        win_neg_lose_neg=Fraction(counts[(False, False)], n),
    )
