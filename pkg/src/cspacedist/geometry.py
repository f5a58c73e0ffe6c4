"""Planar serial-chain kinematics and exact capsule/disc clearance.

Links are capsules (segment plus radius), obstacles are discs, so every
robot-scene distance has a closed form. Configurations are plain float
arrays of length ``dof``; batched helpers accept ``(N, dof)`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

INF = float("inf")
LIMIT_EPS = 1e-12


class LimitViolationError(ValueError):
    """A configuration lies outside the joint box."""


@dataclass(frozen=True)
class RobotModel:
    link_lengths: tuple
    link_radii: tuple
    joint_limits: tuple  # ((lo, hi), ...) radians

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.link_lengths)
        radii = tuple(float(v) for v in self.link_radii)
        limits = tuple((float(lo), float(hi)) for lo, hi in self.joint_limits)
        if not lengths:
            raise ValueError("robot needs at least one link")
        if not (len(lengths) == len(radii) == len(limits)):
            raise ValueError("link_lengths, link_radii and joint_limits must have equal length")
        if any(v <= 0 for v in lengths):
            raise ValueError("link lengths must be positive")
        if any(v < 0 for v in radii):
            raise ValueError("link radii must be non-negative")
        for lo, hi in limits:
            if not (lo <= hi) or lo < -math.pi - LIMIT_EPS or hi > math.pi + LIMIT_EPS:
                raise ValueError(f"joint limit ({lo}, {hi}) must be a non-empty sub-interval of [-pi, pi]")
        object.__setattr__(self, "link_lengths", lengths)
        object.__setattr__(self, "link_radii", radii)
        object.__setattr__(self, "joint_limits", limits)

    @classmethod
    def planar(cls, link_lengths, link_radius=0.05, limits=(-math.pi, math.pi)):
        n = len(link_lengths)
        return cls(tuple(link_lengths), (link_radius,) * n, (tuple(limits),) * n)

    @property
    def dof(self) -> int:
        return len(self.link_lengths)

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.joint_limits])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.joint_limits])

    def within_limits(self, q) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.lower - LIMIT_EPS) and np.all(q <= self.upper + LIMIT_EPS))

    def check(self, q) -> np.ndarray:
        """Return ``q`` as a float array, raising if it leaves the joint box."""
        q = np.asarray(q, dtype=float)
        if q.shape[-1] != self.dof:
            raise ValueError(f"expected configuration of length {self.dof}, got shape {q.shape}")
        if not np.all(np.isfinite(q)):
            raise LimitViolationError(f"non-finite configuration {q}")
        if np.any(q < self.lower - LIMIT_EPS) or np.any(q > self.upper + LIMIT_EPS):
            raise LimitViolationError(f"configuration {q} outside joint limits {self.joint_limits}")
        return q

    def clamp(self, q) -> np.ndarray:
        return np.clip(np.asarray(q, dtype=float), self.lower, self.upper)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dof))


@dataclass(frozen=True)
class Obstacle:
    center: tuple
    radius: float

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        if len(c) != 2:
            raise ValueError("obstacle center must be a 2D point")
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))


@dataclass(frozen=True)
class Scene:
    obstacles: tuple = ()
    id: str = "scene"

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))

    @classmethod
    def discs(cls, spec: Sequence, id: str = "scene") -> "Scene":
        """Build from ``[(cx, cy, r), ...]``."""
        return cls(tuple(Obstacle((cx, cy), r) for cx, cy, r in spec), id)

    @property
    def centers(self) -> np.ndarray:
        return np.array([o.center for o in self.obstacles], dtype=float).reshape(-1, 2)

    @property
    def radii(self) -> np.ndarray:
        return np.array([o.radius for o in self.obstacles], dtype=float)

    def subset(self, indices, id=None) -> "Scene":
        return Scene(tuple(self.obstacles[i] for i in indices), id or self.id)


@dataclass(frozen=True)
class LinkPose:
    segments: np.ndarray = field(repr=False)  # (n_links, 2, 2): start, end

    def __iter__(self):
        return iter((tuple(s[0]), tuple(s[1])) for s in self.segments)

    def __len__(self):
        return len(self.segments)


def _chain(model: RobotModel, Q: np.ndarray):
    """Joint positions for a batch: returns (N, dof+1, 2) and cumulative angles (N, dof)."""
    theta = np.cumsum(Q, axis=-1)
    lengths = np.asarray(model.link_lengths)
    steps = np.stack([np.cos(theta), np.sin(theta)], axis=-1) * lengths[:, None]
    joints = np.concatenate([np.zeros(Q.shape[:-1] + (1, 2)), np.cumsum(steps, axis=-2)], axis=-2)
    return joints, theta


def forward_kinematics(model: RobotModel, q) -> LinkPose:
    q = model.check(q)
    if q.ndim != 1:
        raise ValueError("forward_kinematics takes a single configuration; use link_segments for batches")
    joints, _ = _chain(model, q[None])
    joints = joints[0]
    return LinkPose(np.stack([joints[:-1], joints[1:]], axis=1))


def link_segments(model: RobotModel, Q) -> np.ndarray:
    """Batched link segments, shape (N, dof, 2, 2). No limit check."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    joints, _ = _chain(model, Q)
    return np.stack([joints[:, :-1], joints[:, 1:]], axis=2)


def link_point(model: RobotModel, Q, link_index: int, point_param: float) -> np.ndarray:
    """Workspace point at fraction ``point_param`` along link ``link_index`` (batched)."""
    seg = link_segments(model, Q)[:, link_index]
    return seg[:, 0] + point_param * (seg[:, 1] - seg[:, 0])


def task_sdf(scene: Scene, p) -> float:
    """Signed distance from a workspace point to the union of discs."""
    if not scene.obstacles:
        return INF
    p = np.asarray(p, dtype=float)
    return float(np.min(np.linalg.norm(scene.centers - p, axis=-1) - scene.radii))


def task_sdf_batch(scene: Scene, P) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if not scene.obstacles:
        return np.full(len(P), INF)
    d = np.linalg.norm(P[:, None, :] - scene.centers[None], axis=-1) - scene.radii
    return d.min(axis=1)


def segment_point_distance(a, b, c) -> np.ndarray:
    """Distance from points ``c`` to segments ``a``-``b``; broadcasts over leading axes."""
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    t = np.sum((c - a) * ab, axis=-1) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(c - closest, axis=-1)


def pairwise_clearance(model: RobotModel, scene: Scene, Q) -> np.ndarray:
    """Clearance of every (link, obstacle) pair, shape (N, dof, K)."""
    seg = link_segments(model, Q)
    a = seg[:, :, None, 0, :]
    b = seg[:, :, None, 1, :]
    c = scene.centers[None, None]
    d = segment_point_distance(a, b, c)
    return d - np.asarray(model.link_radii)[None, :, None] - scene.radii[None, None, :]


def clearance_batch(model: RobotModel, scene: Scene, Q) -> np.ndarray:
    """Minimum robot-scene clearance for a batch of configurations (no limit check)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if not scene.obstacles:
        return np.full(len(Q), INF)
    return pairwise_clearance(model, scene, Q).reshape(len(Q), -1).min(axis=1)


def robot_scene_distance(model: RobotModel, scene: Scene, q) -> float:
    q = model.check(q)
    return float(clearance_batch(model, scene, q[None])[0])


def is_colliding(model: RobotModel, scene: Scene, q) -> bool:
    # boundary counts as collision so the colliding set is closed
    return robot_scene_distance(model, scene, q) <= 0.0


def jacobian_point(model: RobotModel, q, link_index: int, point_param: float) -> np.ndarray:
    """Rows are d(point)/d(q_j) for each joint j; shape (dof, 2)."""
    q = model.check(q)
    if not 0.0 <= point_param <= 1.0:
        raise ValueError("point_param must lie in [0, 1]")
    if not 0 <= link_index < model.dof:
        raise IndexError(f"link_index {link_index} out of range")
    joints, _ = _chain(model, q[None])
    joints = joints[0]
    p = joints[link_index] + point_param * (joints[link_index + 1] - joints[link_index])
    J = np.zeros((model.dof, 2))
    for j in range(link_index + 1):
        r = p - joints[j]
        J[j] = (-r[1], r[0])
    return J
