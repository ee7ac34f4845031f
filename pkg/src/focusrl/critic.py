"""Deterministic scoring oracle for candidate boxes and answers.

The box score rewards crops that contain the evidence region without
ballooning far past it: containment (how much of the ground-truth region the
box covers) times a focus factor that decays once the box grows beyond
``focus_rho`` times the region, scaled to an integer 0..10.  The answer
score is exact match, 10 or 0.  Only this module reads ground truth; the
policy never sees it.
"""

from __future__ import annotations

import math

from .errors import InvalidToken
from .geometry import BoundingBox
from .world import QueryInstance, Scene

DEFAULT_FOCUS_RHO = 4.0


def score_bbox(
    task: QueryInstance, scene: Scene, box: BoundingBox, focus_rho: float = DEFAULT_FOCUS_RHO
) -> int:
    """Integer 0..10; 10 iff the box tightly covers the ground-truth region.

    containment = area(gt intersect box) / area(gt)
    focus       = min(1, focus_rho * area(gt) / area(box))
    score       = round(10 * containment * focus), half away from zero
    """
    if focus_rho <= 0.0:
        raise ValueError("focus_rho must be positive")
    gt = task.gt_region
    ix = min(gt.x_hi, box.x_hi) - max(gt.x_lo, box.x_lo)
    iy = min(gt.y_hi, box.y_hi) - max(gt.y_lo, box.y_lo)
    inter = ix * iy if ix > 0.0 and iy > 0.0 else 0.0
    containment = inter / gt.area
    focus = min(1.0, focus_rho * gt.area / box.area)
    return int(math.floor(10.0 * containment * focus + 0.5))


def score_response(task: QueryInstance, response: str, vocab) -> int:
    """10 for the exact ground-truth answer, 0 for any other vocabulary token."""
    if response not in vocab:
        raise InvalidToken(f"response {response!r} not in the answer vocabulary")
    return 10 if response == task.gt_answer else 0
