"""Cosine score matrix, cyclical-distance filtering, Top-M correspondence picks.

A correspondence is a target patch paired with its best-scoring reference
patch. The cyclical distance of a target patch p is the patch-grid distance
between p and the patch you land on after the round trip
target -> best reference -> best target; consistent matches come back home.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .tensorio import FeatureMap, normalize_rows


@dataclass(frozen=True)
class ScoreMatrix:
    """Cosine similarities, target patches as rows, reference patches as columns."""

    values: np.ndarray  # (N_t, N_r) float64
    target_grid: tuple[int, int]
    reference_grid: tuple[int, int]

    @property
    def n_target(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_reference(self) -> int:
        return int(self.values.shape[1])

    def validate(self) -> "ScoreMatrix":
        if self.values.ndim != 2:
            raise ValidationError("score matrix must be 2-D")
        if np.abs(self.values).max(initial=0.0) > 1.0 + 1e-6:
            raise ValidationError("cosine similarity out of [-1, 1]")
        th, tw = self.target_grid
        rh, rw = self.reference_grid
        if th * tw != self.n_target or rh * rw != self.n_reference:
            raise ValidationError("grid shapes do not match matrix dimensions")
        return self


@dataclass(frozen=True)
class CorrespondenceSet:
    """Selected patch pairs, ascending by (cyclical distance, -similarity, p)."""

    p: np.ndarray    # target patch indices
    q: np.ndarray    # reference patch indices
    sim: np.ndarray  # cosine similarity per pair
    cyc: np.ndarray  # cyclical distance per pair, patch units

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.int64))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.int64))
        object.__setattr__(self, "sim", np.asarray(self.sim, dtype=np.float64))
        object.__setattr__(self, "cyc", np.asarray(self.cyc, dtype=np.float64))

    def __len__(self) -> int:
        return int(self.p.shape[0])

    def pairs(self) -> list[dict]:
        return [
            {"p": int(p), "q": int(q), "sim": float(s), "cyc": float(c)}
            for p, q, s, c in zip(self.p, self.q, self.sim, self.cyc)
        ]


def score_matrix(ft: FeatureMap, fr: FeatureMap) -> ScoreMatrix:
    """Pairwise cosine similarity between target and reference patch vectors.

    Zero vectors score 0 against everything.
    """
    ft.validate()
    fr.validate()
    if ft.channels != fr.channels:
        raise ValidationError(f"channel mismatch: {ft.channels} vs {fr.channels}")
    a = normalize_rows(ft.flat().astype(np.float64))
    b = normalize_rows(fr.flat().astype(np.float64))
    s = np.clip(a @ b.T, -1.0, 1.0)
    return ScoreMatrix(s, (ft.grid_h, ft.grid_w), (fr.grid_h, fr.grid_w)).validate()


def cyclical_distances(s: ScoreMatrix, ft_grid: tuple[int, int] | None = None) -> np.ndarray:
    """Round-trip patch-grid distance for every target patch.

    For target patch p: q* = argmax_q S(p, q), p' = argmax_p'' S(p'', q*),
    D_p = Euclidean distance between the grid coordinates of p and p'.
    Ties break toward the lowest index.
    """
    s.validate()
    grid_h, grid_w = ft_grid if ft_grid is not None else s.target_grid
    if grid_h * grid_w != s.n_target:
        raise ValidationError("target grid does not match score matrix rows")
    q_star = np.argmax(s.values, axis=1)           # best reference per target
    col_best = np.argmax(s.values, axis=0)         # best target per reference
    p_prime = col_best[q_star]
    p_idx = np.arange(s.n_target)
    dr = (p_idx // grid_w) - (p_prime // grid_w)
    dc = (p_idx % grid_w) - (p_prime % grid_w)
    return np.sqrt((dr.astype(np.float64)) ** 2 + (dc.astype(np.float64)) ** 2)


def select_correspondences(s: ScoreMatrix, d: np.ndarray, m: int,
                           valid_target: np.ndarray | None = None) -> CorrespondenceSet:
    """Pick the m most cycle-consistent target patches with their best matches.

    `valid_target` optionally masks out target patches (e.g. background) before
    selection. Output ordering is the deterministic (cyc, -sim, p) sort; if
    fewer than m patches survive masking, all survivors are returned.
    """
    s.validate()
    if m <= 0:
        raise ValidationError("m must be positive")
    if m > s.n_target:
        raise ValidationError(f"m={m} exceeds target patch count {s.n_target}")
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (s.n_target,):
        raise ValidationError("cyclical distance vector has wrong length")
    p_idx = np.arange(s.n_target)
    q_star = np.argmax(s.values, axis=1)
    sim = s.values[p_idx, q_star]
    if valid_target is not None:
        keep = np.asarray(valid_target, dtype=bool)
        if keep.shape != (s.n_target,):
            raise ValidationError("valid_target has wrong length")
        p_idx, q_star, sim, d = p_idx[keep], q_star[keep], sim[keep], d[keep]
    order = np.lexsort((p_idx, -sim, d))
    order = order[: min(m, order.size)]
    return CorrespondenceSet(p=p_idx[order], q=q_star[order],
                             sim=sim[order], cyc=d[order])


def view_confidence(c: CorrespondenceSet) -> float:
    """Mean cosine similarity over the selected pairs; empty set scores -1."""
    if len(c) == 0:
        return -1.0
    return float(np.mean(c.sim))


def mask_patch_fraction(mask: np.ndarray, fm: FeatureMap) -> np.ndarray:
    """Fraction of every patch's pixel footprint that lies inside the mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (fm.image_h_px, fm.image_w_px):
        raise ValidationError(
            f"mask shape {mask.shape} does not match feature map image "
            f"{(fm.image_h_px, fm.image_w_px)}")
    fr = np.empty(fm.n_patches, dtype=np.float64)
    for row in range(fm.grid_h):
        y0 = int(round(row * fm.image_h_px / fm.grid_h))
        y1 = int(round((row + 1) * fm.image_h_px / fm.grid_h))
        for col in range(fm.grid_w):
            x0 = int(round(col * fm.image_w_px / fm.grid_w))
            x1 = int(round((col + 1) * fm.image_w_px / fm.grid_w))
            cell = mask[y0:max(y1, y0 + 1), x0:max(x1, x0 + 1)]
            fr[row * fm.grid_w + col] = cell.mean() if cell.size else 0.0
    return fr


def foreground_patches(mask: np.ndarray, fm: FeatureMap,
                       min_frac: float = 0.5) -> np.ndarray:
    """Boolean validity of target patches: footprint at least min_frac in-mask."""
    return mask_patch_fraction(mask, fm) >= min_frac
