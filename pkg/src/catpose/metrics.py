"""Benchmark-style pose metrics: sampled 3-D box IoU, angular/translation
errors with symmetric-object handling, and threshold accuracy tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import CANONICAL_UP, SimilarityTransform, rotation_geodesic_deg

# Categories with a continuous rotational symmetry about the canonical up
# axis. Mugs are treated as symmetric too (handle visibility is unreliable
# across benchmarks), which only relaxes their rotation error.
DEFAULT_SYMMETRIC_CATEGORIES = frozenset({"bottle", "bowl", "can", "mug"})
KNOWN_CATEGORIES = ("bottle", "bowl", "camera", "can", "laptop", "mug")


@dataclass(frozen=True)
class OrientedBox:
    pose: SimilarityTransform
    extents: np.ndarray  # (3,) canonical units; world size is pose.s * extents

    def __post_init__(self):
        object.__setattr__(self, "extents", np.asarray(self.extents, dtype=np.float64).reshape(3))

    def validate(self) -> "OrientedBox":
        if (self.extents <= 0).any():
            raise ValidationError("box extents must be positive")
        self.pose.validate()
        return self

    def corners(self) -> np.ndarray:
        half = self.extents / 2.0
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                         dtype=np.float64)
        return self.pose.apply(signs * half)

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = self.pose.invert().apply(points)
        half = self.extents / 2.0
        return (np.abs(local) <= half + 1e-12).all(axis=1)


@dataclass(frozen=True)
class SymmetrySpec:
    """Per-category symmetry kinds: 'none' or 'continuous' about canonical up."""

    categories: dict = field(default_factory=lambda: {
        c: ("continuous" if c in DEFAULT_SYMMETRIC_CATEGORIES else "none")
        for c in KNOWN_CATEGORIES
    })

    def kind_for(self, category: str | None) -> str:
        if category is None:
            return "none"
        return self.categories.get(category.lower(), "none")


def iou3d(a: OrientedBox, b: OrientedBox, samples: int = 100_000, seed: int = 0) -> float:
    """Monte-Carlo IoU of two oriented boxes.

    Samples uniformly in the axis-aligned bounding volume of both boxes and
    counts containment. Deterministic given the seed. Identical boxes
    short-circuit to exactly 1.0.
    """
    a.validate()
    b.validate()
    if samples < 1:
        raise ValidationError("sample count must be positive")
    if (np.array_equal(a.pose.r, b.pose.r) and np.array_equal(a.pose.t, b.pose.t)
            and a.pose.s == b.pose.s and np.array_equal(a.extents, b.extents)):
        return 1.0
    corners = np.vstack([a.corners(), b.corners()])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = lo + rng.random((samples, 3)) * (hi - lo)
    in_a = a.contains(pts)
    in_b = b.contains(pts)
    union = int(in_a.sum()) + int(in_b.sum()) - int((in_a & in_b).sum())
    if union == 0:
        return 0.0
    return float((in_a & in_b).sum() / union)


def symmetric_rotation_error_deg(r_pred: np.ndarray, r_gt: np.ndarray,
                                 axis: np.ndarray = CANONICAL_UP) -> float:
    """Minimum geodesic error over all rotations of the prediction about `axis`.

    The minimum over the symmetry orbit equals the angle between the two
    transformed symmetry axes, so no sweep is needed.
    """
    a1 = np.asarray(r_pred, dtype=np.float64) @ axis
    a2 = np.asarray(r_gt, dtype=np.float64) @ axis
    c = np.clip(np.dot(a1, a2) / (np.linalg.norm(a1) * np.linalg.norm(a2)), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def pose_error(pred: SimilarityTransform, gt: SimilarityTransform,
               sym: SymmetrySpec | None = None,
               category: str | None = None) -> tuple[float, float]:
    """(rotation error in degrees, translation error in centimeters)."""
    kind = (sym or SymmetrySpec()).kind_for(category)
    if kind == "continuous":
        rot = symmetric_rotation_error_deg(pred.r, gt.r)
    else:
        rot = rotation_geodesic_deg(pred.r, gt.r)
    trans = float(np.linalg.norm(pred.t - gt.t)) * 100.0
    return rot, trans


IOU_THRESHOLDS = (0.25, 0.5)
POSE_THRESHOLDS = ((5.0, 2.0), (5.0, 5.0), (10.0, 2.0), (10.0, 5.0))


def accuracy_table(results: list[tuple[tuple[float, float], float]]) -> dict:
    """Fractions of results under the standard thresholds, as percentages.

    `results` holds ((rot_deg, trans_cm), iou) per instance. Output keys:
    iou_0.25, iou_0.5, 5deg_2cm, 5deg_5cm, 10deg_2cm, 10deg_5cm, count.
    """
    n = len(results)
    table: dict = {"count": n}
    for thr in IOU_THRESHOLDS:
        hits = sum(1 for (_, iou) in results if iou >= thr)
        table[f"iou_{thr:g}"] = round(100.0 * hits / n, 2) if n else 0.0
    for deg, cm in POSE_THRESHOLDS:
        hits = sum(1 for ((r, t), _) in results if r < deg and t < cm)
        table[f"{deg:g}deg_{cm:g}cm"] = round(100.0 * hits / n, 2) if n else 0.0
    return table


def format_table(rows: dict[str, dict]) -> str:
    """Aligned text table: one row per label of accuracy_table outputs."""
    cols = ["iou_0.25", "iou_0.5", "5deg_2cm", "5deg_5cm", "10deg_2cm", "10deg_5cm", "count"]
    width = max([len(c) for c in cols] + [8])
    name_w = max([len(n) for n in rows] + [6])
    header = "name".ljust(name_w) + "".join(c.rjust(width + 2) for c in cols)
    lines = [header]
    for name, rec in rows.items():
        cells = []
        for c in cols:
            v = rec.get(c, "")
            cells.append((f"{v:.2f}" if isinstance(v, float) else str(v)).rjust(width + 2))
        lines.append(name.ljust(name_w) + "".join(cells))
    return "\n".join(lines)
