"""Axis-aligned box arithmetic on the unit square.

A box is a normalized rectangle (x_lo, y_lo, x_hi, y_hi) with
0 <= lo < hi <= 1 on both axes.  Coordinate tokens index a per-axis grid of
``bins`` edge positions: token t sits at t/bins except the last token, which
is pinned to 1.0 so the full image stays expressible.  Decoding sorts each
axis pair and widens collapsed axes by one grid step, so any token tuple in
range yields a valid box and re-encoding a decoded box is a fixed point.
"""

from __future__ import annotations

import math
import operator
from dataclasses import dataclass

import numpy as np

from .errors import InvalidToken, NoFeasibleBox

DEFAULT_MIN_BOX_AREA = 1e-4

# +/- half-span of the log-aspect jitter used when resampling a box.
_LOG_ASPECT_JITTER = math.log(2.0)

# Float slack on the area acceptance check, well under any caller tolerance.
_AREA_SLACK = 1e-12


@dataclass(frozen=True)
class BoundingBox:
    """Normalized axis-aligned rectangle with strictly positive area."""

    x_lo: float
    y_lo: float
    x_hi: float
    y_hi: float

    def __post_init__(self):
        ok = 0.0 <= self.x_lo < self.x_hi <= 1.0 and 0.0 <= self.y_lo < self.y_hi <= 1.0
        if not ok:
            raise ValueError(f"degenerate or out-of-range box: {self}")

    @property
    def area(self) -> float:
        return (self.x_hi - self.x_lo) * (self.y_hi - self.y_lo)

    def as_list(self, ndigits: int = 6) -> list:
        """Serialization form: [x_lo, y_lo, x_hi, y_hi] rounded."""
        return [
            round(self.x_lo, ndigits),
            round(self.y_lo, ndigits),
            round(self.x_hi, ndigits),
            round(self.y_hi, ndigits),
        ]

    @classmethod
    def from_list(cls, values) -> "BoundingBox":
        x_lo, y_lo, x_hi, y_hi = (float(v) for v in values)
        return cls(x_lo, y_lo, x_hi, y_hi)


@dataclass(frozen=True)
class DiversityParams:
    """Controls when a second sampled box gets rejected and resampled.

    ``area_tolerance`` is an absolute difference in normalized area; ``None``
    means half the area of the first box, computed per call.
    """

    reject_threshold: float = 0.5
    area_tolerance: float | None = None
    max_rejection_attempts: int = 200

    def __post_init__(self):
        if not 0.0 <= self.reject_threshold <= 1.0:
            raise ValueError(f"reject_threshold must be in [0, 1]: {self.reject_threshold}")
        if self.area_tolerance is not None and not 0.0 <= self.area_tolerance <= 1.0:
            raise ValueError(f"area_tolerance must be in [0, 1]: {self.area_tolerance}")
        if self.max_rejection_attempts < 1:
            raise ValueError("max_rejection_attempts must be positive")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 1.0 iff the boxes coincide, 0.0 iff their
    interiors are disjoint."""
    ix = min(a.x_hi, b.x_hi) - max(a.x_lo, b.x_lo)
    iy = min(a.y_hi, b.y_hi) - max(a.y_lo, b.y_lo)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def token_positions(bins: int) -> np.ndarray:
    """Edge coordinates addressable by tokens 0..bins-1 (0.0 and 1.0 included)."""
    if bins < 4:
        raise ValueError(f"bins must be at least 4: {bins}")
    pos = np.arange(bins, dtype=float) / bins
    pos[-1] = 1.0
    return pos


def _widen_collapsed(lo: int, hi: int, bins: int) -> tuple:
    """Push a collapsed token pair one grid step apart, staying in range."""
    if lo != hi:
        return lo, hi
    if hi == bins - 1:
        return bins - 2, hi
    return lo, hi + 1


def box_from_tokens(tokens, bins: int, min_box_area: float = DEFAULT_MIN_BOX_AREA) -> BoundingBox:
    """Decode coordinate tokens (x_a, y_a, x_b, y_b) into a valid box.

    Token pairs are sorted per axis; a collapsed axis is widened by one grid
    step (shifting the low edge instead when already at the top border).
    Total function over in-range tokens, deterministic, and a fixed point
    under re-encoding via ``tokens_from_box``.
    """
    try:
        toks = tuple(operator.index(t) for t in tokens)
    except TypeError as exc:
        raise InvalidToken(f"coordinate tokens must be integers: {tokens!r}") from exc
    if len(toks) != 4:
        raise InvalidToken(f"expected 4 coordinate tokens, got {len(toks)}")
    if any(t < 0 or t >= bins for t in toks):
        raise InvalidToken(f"coordinate tokens out of range [0, {bins - 1}]: {toks}")
    pos = token_positions(bins)
    x_lo, x_hi = _widen_collapsed(*sorted((toks[0], toks[2])), bins)
    y_lo, y_hi = _widen_collapsed(*sorted((toks[1], toks[3])), bins)
    box = BoundingBox(pos[x_lo], pos[y_lo], pos[x_hi], pos[y_hi])
    if box.area < min_box_area:
        raise ValueError(f"decoded box area {box.area:.3g} below minimum {min_box_area:.3g}")
    return box


def tokens_from_box(box: BoundingBox, bins: int) -> tuple:
    """Encode a box as nearest-grid coordinate tokens, ties rounding down.

    Returns (x_lo, y_lo, x_hi, y_hi) tokens; a pair that snaps to the same
    grid edge is widened exactly as in ``box_from_tokens``.
    """
    pos = token_positions(bins)
    mid = (pos[:-1] + pos[1:]) / 2.0

    def nearest(v: float) -> int:
        return int(np.searchsorted(mid, v, side="left"))

    x_lo, x_hi = _widen_collapsed(nearest(box.x_lo), nearest(box.x_hi), bins)
    y_lo, y_hi = _widen_collapsed(nearest(box.y_lo), nearest(box.y_hi), bins)
    return (x_lo, y_lo, x_hi, y_hi)


def _overlaps(a: BoundingBox, b: BoundingBox) -> bool:
    ix = min(a.x_hi, b.x_hi) - max(a.x_lo, b.x_lo)
    iy = min(a.y_hi, b.y_hi) - max(a.y_lo, b.y_lo)
    return ix > 0.0 and iy > 0.0


def sample_disjoint_box(
    b1: BoundingBox, params: DiversityParams, rng: np.random.Generator
) -> BoundingBox:
    """Draw a box disjoint from ``b1`` with comparable area.

    Rejection-samples a uniform center with aspect jitter until the candidate
    lies inside the unit square, has zero overlap with ``b1``, and matches its
    area within the tolerance.  Raises NoFeasibleBox once the attempt budget
    is spent, which is the guaranteed outcome when no such box exists (for
    example when ``b1`` covers the whole image).
    """
    base_area = b1.area
    tol = params.area_tolerance
    if tol is None:
        tol = 0.5 * base_area
    for _ in range(params.max_rejection_attempts):
        area = base_area + rng.uniform(-tol, tol)
        if area <= 0.0 or area > 1.0:
            continue
        ratio = math.exp(rng.uniform(-_LOG_ASPECT_JITTER, _LOG_ASPECT_JITTER))
        w = math.sqrt(area * ratio)
        if w > 1.0 or area / w > 1.0:
            continue
        h = area / w
        cx = rng.uniform(w / 2.0, 1.0 - w / 2.0)
        cy = rng.uniform(h / 2.0, 1.0 - h / 2.0)
        x_lo = max(0.0, cx - w / 2.0)
        y_lo = max(0.0, cy - h / 2.0)
        cand = BoundingBox(x_lo, y_lo, min(1.0, x_lo + w), min(1.0, y_lo + h))
        if _overlaps(cand, b1):
            continue
        if abs(cand.area - base_area) > tol + _AREA_SLACK:
            continue
        return cand
    raise NoFeasibleBox(
        f"no box disjoint from {b1.as_list()} with area within {tol:.3g} "
        f"after {params.max_rejection_attempts} attempts"
    )


def diversity_adjust(
    b1: BoundingBox, b2: BoundingBox, params: DiversityParams, rng: np.random.Generator
) -> BoundingBox:
    """Keep ``b2`` when its overlap with ``b1`` is below the rejection
    threshold, otherwise replace it with a disjoint comparable-area sample."""
    if iou(b1, b2) < params.reject_threshold:
        return b2
    return sample_disjoint_box(b1, params, rng)
