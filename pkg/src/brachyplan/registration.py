"""Rigid alignment of device models to patient scans.

A closed-form least-squares fit over user landmark pairs gives the initial
transform; iterated closest point against a segmented surface cloud refines
it. Transforms map device coordinates into image (patient) coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ORTHONORMAL_TOL = 1e-9


class DegenerateLandmarksError(ValueError):
    """Landmark configuration does not determine a unique rigid transform."""


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: p -> rotation @ p + translation (mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not proper (det != +1)")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix_rows(cls, rows) -> "RigidTransform":
        """Build from 12 numbers, row-major 3x4 (rotation | translation)."""
        m = np.asarray(rows, dtype=float).reshape(3, 4)
        return cls(orthonormalize(m[:, :3]), m[:, 3])

    def matrix_rows(self) -> list[float]:
        """Serialize as 12 numbers, row-major 3x4."""
        m = np.hstack([self.rotation, self.translation.reshape(3, 1)])
        return [float(x) for x in m.ravel()]


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto the closest proper rotation matrix."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=float).reshape(3, 3))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def apply_transform(t: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Apply t to an (n, 3) point cloud (or a single 3-vector)."""
    p = np.asarray(points, dtype=float)
    return p @ t.rotation.T + t.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equal to applying b first, then a."""
    return RigidTransform(
        orthonormalize(a.rotation @ b.rotation),
        a.rotation @ b.translation + a.translation,
    )


def invert(t: RigidTransform) -> RigidTransform:
    rt = orthonormalize(t.rotation.T)
    return RigidTransform(rt, -(rt @ t.translation))


@dataclass(frozen=True)
class LandmarkPairs:
    """Corresponding model/image points picked by the user (>= 3 pairs)."""

    model_points: np.ndarray
    image_points: np.ndarray

    def __post_init__(self):
        mp = np.atleast_2d(np.asarray(self.model_points, dtype=float))
        ip = np.atleast_2d(np.asarray(self.image_points, dtype=float))
        object.__setattr__(self, "model_points", mp)
        object.__setattr__(self, "image_points", ip)
        if mp.shape != ip.shape or mp.shape[1] != 3:
            raise ValueError("model and image points must both be (n, 3)")
        if len(mp) < 3:
            raise DegenerateLandmarksError("at least 3 landmark pairs required")
        _check_not_collinear(mp)


def _check_not_collinear(points: np.ndarray, ratio_tol: float = 1e-9):
    centered = points - points.mean(axis=0)
    # eigenvalues of the covariance, descending; rank <= 1 means collinear
    sv = np.linalg.svd(centered, compute_uv=False) ** 2
    if sv[0] <= 0.0 or sv[1] / sv[0] <= ratio_tol:
        raise DegenerateLandmarksError("landmarks are collinear or coincident")


def fit_landmarks(pairs: LandmarkPairs) -> RigidTransform:
    """Closed-form least-squares rigid fit (SVD of the cross-covariance).

    Exact (residual < 1e-9 mm) when the correspondences are noise free.
    Reflections are suppressed by the determinant correction.
    """
    a = pairs.model_points
    b = pairs.image_points
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    r = orthonormalize(r)
    return RigidTransform(r, cb - r @ ca)


def landmark_residual_rms(t: RigidTransform, pairs: LandmarkPairs) -> float:
    diff = apply_transform(t, pairs.model_points) - pairs.image_points
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 100
    rms_change_tol: float = 1e-4
    outlier_trim_fraction: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.rms_change_tol <= 0:
            raise ValueError("rms_change_tol must be > 0")
        if not 0.0 <= self.outlier_trim_fraction < 1.0:
            raise ValueError("outlier_trim_fraction must be in [0, 1)")


@dataclass(frozen=True)
class IcpReport:
    transform: RigidTransform
    iterations_used: int
    final_rms: float
    converged: bool
    rms_history: list[float] = field(default_factory=list)


def icp_refine(
    model_cloud: np.ndarray,
    target_cloud: np.ndarray,
    init: RigidTransform | None = None,
    cfg: IcpConfig | None = None,
) -> IcpReport:
    """Refine a rigid transform by iterated closest point (point-to-point).

    Alternates nearest-neighbor correspondence against target_cloud with a
    closed-form rigid re-fit, until the RMS change drops below tolerance or
    max_iterations is hit. rms_history is monotone non-increasing when
    trimming is off.
    """
    model = np.atleast_2d(np.asarray(model_cloud, dtype=float))
    target = np.atleast_2d(np.asarray(target_cloud, dtype=float))
    if model.size == 0 or target.size == 0:
        raise ValueError("point clouds must be non-empty")
    if init is None:
        init = RigidTransform.identity()
    if cfg is None:
        cfg = IcpConfig()

    tree = cKDTree(target)
    current = init
    moved = apply_transform(current, model)
    dists, idx = tree.query(moved)
    rms = float(np.sqrt(np.mean(dists**2)))
    history = [rms]
    converged = False
    iterations = 0

    for _ in range(cfg.max_iterations):
        iterations += 1
        src = model
        dst = target[idx]
        if cfg.outlier_trim_fraction > 0.0:
            keep = max(3, int(np.ceil(len(dists) * (1.0 - cfg.outlier_trim_fraction))))
            order = np.argsort(dists)[:keep]
            src, dst = model[order], dst[order]
        try:
            current = fit_landmarks(LandmarkPairs(src, dst))
        except DegenerateLandmarksError:
            break
        moved = apply_transform(current, model)
        dists, idx = tree.query(moved)
        new_rms = float(np.sqrt(np.mean(dists**2)))
        history.append(new_rms)
        if abs(rms - new_rms) < cfg.rms_change_tol:
            rms = new_rms
            converged = True
            break
        rms = new_rms

    return IcpReport(
        transform=current,
        iterations_used=iterations,
        final_rms=rms,
        converged=converged,
        rms_history=history,
    )
