"""Non-learned distance/gradient evaluators over configuration space.

Three flavours live here:

* the expectation field over a collision sample set (mean distance, mean
  unit direction),
* the single-nearest baseline over a sparse boundary set, and
* a task-space SDF pulled back through the point Jacobian.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .geometry import INF, RobotModel, Scene, jacobian_point, link_point, task_sdf


class Provenance(str, enum.Enum):
    ORACLE = "oracle"
    EMPIRICAL = "empirical"
    BASELINE_CDF = "baseline_cdf"
    SDF_PULLBACK = "sdf_pullback"
    LEARNED_DIRECT = "learned_direct"
    LEARNED_MC = "learned_mc"


class EmptySampleSetError(ValueError):
    pass


class SingularDirectionError(ValueError):
    """A sample coincides with the query, so its unit direction is undefined."""


@dataclass
class FieldAnswer:
    distance: float
    gradient: np.ndarray | None  # None marks an undefined gradient
    provenance: Provenance

    def __post_init__(self):
        self.provenance = Provenance(self.provenance)
        if self.gradient is not None:
            self.gradient = np.asarray(self.gradient, dtype=float)
            if not np.all(np.isfinite(self.gradient)):
                raise ValueError("defined gradients must be finite")

    @property
    def gradient_defined(self) -> bool:
        return self.gradient is not None


def _as_samples(S) -> np.ndarray:
    samples = getattr(S, "samples", S)
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.size == 0:
        raise EmptySampleSetError("sample set is empty")
    return samples


def empirical_distance(q, S) -> float:
    """Mean distance from ``q`` to the members of ``S``."""
    samples = _as_samples(S)
    return float(np.mean(np.linalg.norm(np.asarray(q, dtype=float) - samples, axis=1)))


def empirical_gradient(q, S, eps: float = 1e-12) -> np.ndarray:
    """Mean unit direction from the samples towards ``q``.

    Deliberately not renormalised: disagreement between modes shrinks the
    norm, and planners read that as a confidence signal.
    """
    samples = _as_samples(S)
    diff = np.asarray(q, dtype=float) - samples
    norms = np.linalg.norm(diff, axis=1)
    if np.any(norms <= eps):
        raise SingularDirectionError("a sample coincides with the query")
    return np.mean(diff / norms[:, None], axis=0)


def baseline_cdf(q, boundary_samples) -> FieldAnswer:
    """Single nearest sample: distance and unit direction to the argmin.

    Ties go to the lowest index (``np.argmin`` semantics).
    """
    samples = _as_samples(boundary_samples)
    q = np.asarray(q, dtype=float)
    diff = q - samples
    norms = np.linalg.norm(diff, axis=1)
    k = int(np.argmin(norms))
    if norms[k] == 0.0:
        return FieldAnswer(0.0, None, Provenance.BASELINE_CDF)
    return FieldAnswer(float(norms[k]), diff[k] / norms[k], Provenance.BASELINE_CDF)


def task_sdf_gradient(scene: Scene, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    d = np.linalg.norm(scene.centers - p, axis=-1) - scene.radii
    k = int(np.argmin(d))
    r = p - scene.centers[k]
    n = np.linalg.norm(r)
    if n == 0.0:
        return np.zeros(2)
    return r / n


def sdf_pullback_gradient(model: RobotModel, scene: Scene, q, control_points=None,
                          singular_tol: float = 1e-9) -> FieldAnswer:
    """Task-space SDF at control points, pulled back to joint space.

    ``control_points`` is a list of ``(link_index, point_param)``; the default
    is the tip of the last link only.
    """
    q = model.check(q)
    if control_points is None:
        control_points = [(model.dof - 1, 1.0)]
    if len(control_points) == 0:
        raise ValueError("need at least one control point")
    if not scene.obstacles:
        return FieldAnswer(INF, None, Provenance.SDF_PULLBACK)
    best = None
    for link, s in control_points:
        p = link_point(model, q[None], link, s)[0]
        d = task_sdf(scene, p)
        if best is None or d < best[0]:
            best = (d, link, s, p)
    d, link, s, p = best
    g = jacobian_point(model, q, link, s) @ task_sdf_gradient(scene, p)
    n = float(np.linalg.norm(g))
    if n <= singular_tol:
        return FieldAnswer(float(d), None, Provenance.SDF_PULLBACK)
    return FieldAnswer(float(d), g / n, Provenance.SDF_PULLBACK)


def count_clusters(points, eps: float) -> int:
    """Connected components of the ``eps``-neighbourhood graph (single linkage)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    if n <= 1:
        return n
    from scipy.cluster.hierarchy import fcluster, linkage

    labels = fcluster(linkage(points, method="single"), t=eps, criterion="distance")
    return int(labels.max())


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0 or math.isnan(na) or math.isnan(nb):
        return float("nan")
    return float(a @ b / (na * nb))
