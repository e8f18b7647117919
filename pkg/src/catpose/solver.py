"""Closed-form similarity-transform fitting and its RANSAC wrapper.

`umeyama` solves min over (R, T, s) of 0.5 * sum ||dst - (s R src + T)||^2
via centroid subtraction, SVD of the 3x3 cross-covariance with reflection
correction, and the variance-ratio scale. `ransac_umeyama` wraps it with
seeded minimal-sample consensus and a single all-inlier refit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, NoConsensusError, ValidationError
from .geometry import PointCloud, SimilarityTransform


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def umeyama(p_r, p_t) -> SimilarityTransform:
    """Least-squares similarity transform mapping source p_r onto target p_t."""
    src = _as_points(p_r)
    dst = _as_points(p_t)
    if src.shape != dst.shape:
        raise ValidationError(f"point counts differ: {src.shape[0]} vs {dst.shape[0]}")
    n = src.shape[0]
    if n < 3:
        raise ValidationError(f"need at least 3 correspondences, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = float((xs ** 2).sum() / n)
    if var_s <= 0:
        raise DegenerateGeometryError("source points are all identical")
    cov = xd.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    if d[0] <= 0 or d[1] <= d[0] * 1e-12:
        raise DegenerateGeometryError("correspondences are collinear or degenerate")
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    r = u @ np.diag(sign) @ vt
    s = float((d * sign).sum() / var_s)
    if s <= 0:
        raise DegenerateGeometryError("non-positive scale; correspondences inconsistent")
    t = mu_d - s * (r @ mu_s)
    return SimilarityTransform(r, t, s).validate()


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 1000
    sample_size: int = 4
    inlier_threshold_rel: float = 0.05  # fraction of the target bbox diagonal
    confidence_stop: float = 0.999
    seed: int = 0

    def validate(self) -> "RansacConfig":
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.sample_size < 3:
            raise ValidationError("sample_size must be >= 3")
        if self.inlier_threshold_rel <= 0:
            raise ValidationError("inlier threshold must be positive")
        if not (0 < self.confidence_stop < 1):
            raise ValidationError("confidence_stop must be in (0,1)")
        return self


@dataclass(frozen=True)
class RobustFitResult:
    transform: SimilarityTransform
    inliers: np.ndarray  # boolean per correspondence
    rms_inlier_error: float
    iterations_used: int = 0

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.sum())


def _batch_umeyama(src: np.ndarray, dst: np.ndarray):
    """Vectorized minimal-sample solves. src/dst: (K, m, 3).

    Returns (R (K,3,3), s (K,), t (K,3), valid (K,) bool).
    """
    m = src.shape[1]
    mu_s = src.mean(axis=1, keepdims=True)
    mu_d = dst.mean(axis=1, keepdims=True)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = (xs ** 2).sum(axis=(1, 2)) / m
    cov = np.einsum("kni,knj->kij", xd, xs) / m
    u, d, vt = np.linalg.svd(cov)
    det = np.linalg.det(u) * np.linalg.det(vt)
    sign = np.ones_like(d)
    sign[det < 0, 2] = -1.0
    r = np.einsum("kij,kj,kjl->kil", u, sign, vt)
    valid = (var_s > 1e-18) & (d[:, 1] > d[:, 0] * 1e-9) & (d[:, 0] > 0)
    s = (d * sign).sum(axis=1) / np.where(valid, var_s, 1.0)
    valid &= s > 0
    t = mu_d[:, 0, :] - s[:, None] * np.einsum("kij,kj->ki", r, mu_s[:, 0, :])
    return r, s, t, valid


def ransac_umeyama(p_r, p_t, cfg: RansacConfig = RansacConfig()) -> RobustFitResult:
    """Robust Umeyama: best minimal-sample hypothesis by inlier count, then one refit.

    Residual per correspondence is ||p_t - (s R p_r + T)||; the inlier
    threshold is cfg.inlier_threshold_rel times the target cloud's bounding
    box diagonal. The hypothesis schedule is derived from cfg.seed, selection
    ties break toward the lower hypothesis index, and the loop exits early
    once the standard (1 - (1 - w^m)^k) consensus bound reaches
    cfg.confidence_stop, so results are reproducible bit-for-bit per seed.
    """
    cfg.validate()
    src = _as_points(p_r)
    dst = _as_points(p_t)
    if src.shape != dst.shape:
        raise ValidationError(f"point counts differ: {src.shape[0]} vs {dst.shape[0]}")
    n = src.shape[0]
    m = cfg.sample_size
    if n < m:
        raise ValidationError(f"need at least sample_size={m} correspondences, got {n}")
    diag = float(np.linalg.norm(dst.max(axis=0) - dst.min(axis=0)))
    if diag <= 0:
        raise DegenerateGeometryError("target cloud has zero extent")
    thr = cfg.inlier_threshold_rel * diag

    rng = np.random.default_rng(cfg.seed)
    k_max = cfg.max_iters
    samples = np.argsort(rng.random((k_max, n)), axis=1)[:, :m]
    r_all, s_all, t_all, valid = _batch_umeyama(src[samples], dst[samples])
    # residuals for every hypothesis against every correspondence
    pred = s_all[:, None, None] * np.einsum("kij,nj->kni", r_all, src) + t_all[:, None, :]
    resid = np.linalg.norm(pred - dst[None], axis=2)
    counts = np.where(valid, (resid < thr).sum(axis=1), -1)

    best_k = -1
    best_count = -1
    used = k_max
    for k in range(k_max):
        if counts[k] > best_count:
            best_count = int(counts[k])
            best_k = k
        w = best_count / n
        if 0 < w < 1:
            needed = np.log(1.0 - cfg.confidence_stop) / np.log(1.0 - w ** m)
            if k + 1 >= needed:
                used = k + 1
                break
        elif w >= 1.0:
            used = k + 1
            break

    if best_k < 0 or best_count < m:
        raise NoConsensusError(
            f"no hypothesis reached {m} inliers in {used} iterations "
            f"(best {max(best_count, 0)}/{n}, threshold {thr:.4g} m)")

    inliers = resid[best_k] < thr
    tf = umeyama(src[inliers], dst[inliers])
    final_resid = np.linalg.norm(dst[inliers] - tf.apply(src[inliers]), axis=1)
    rms = float(np.sqrt(np.mean(final_resid ** 2)))
    return RobustFitResult(transform=tf, inliers=inliers,
                           rms_inlier_error=rms, iterations_used=used)
