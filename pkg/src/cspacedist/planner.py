"""Consumers of the distance fields: projection to contact and trajectory optimization.

A field provider is any object with ``name``, ``__call__(q) -> FieldAnswer``
and ``batch(Q) -> (d, G, defined)``. Providers here wrap the oracle, the
single-nearest baseline, the task-space SDF pullback and the two learned
read-outs.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import neural
from .field import FieldAnswer, Provenance, baseline_cdf, sdf_pullback_gradient
from .fixtures import engineered_button_scenes  # noqa: F401  (re-export)
from .geometry import RobotModel, Scene, clearance_batch, robot_scene_distance
from .oracle import CollisionGrid, build_collision_grid

NORMALIZE_THRESHOLD = 0.1
MC_ODE_STEPS = 10


# -- providers ----------------------------------------------------------------

class Provider:
    name = "provider"

    def __call__(self, q) -> FieldAnswer:
        raise NotImplementedError

    def batch(self, Q):
        Q = np.atleast_2d(Q)
        d = np.empty(len(Q))
        G = np.zeros(Q.shape)
        ok = np.zeros(len(Q), dtype=bool)
        for i, q in enumerate(Q):
            a = self(q)
            d[i] = a.distance
            if a.gradient is not None:
                G[i], ok[i] = a.gradient, True
        return d, G, ok


class OracleProvider(Provider):
    """Dense-grid answers; a k-d tree over colliding cell centres keeps queries cheap."""
    name = "oracle"

    def __init__(self, grid: CollisionGrid, tol: float | None = None):
        self.grid = grid
        self.tol = grid.default_tol if tol is None else tol
        self.tree = cKDTree(grid.colliding_points) if len(grid.colliding_points) else None

    @classmethod
    def build(cls, robot: RobotModel, scene: Scene, resolution=256):
        return cls(build_collision_grid(robot, scene, resolution))

    def __call__(self, q):
        d, G, ok = self.batch(np.asarray(q, float)[None])
        return FieldAnswer(float(d[0]), G[0] if ok[0] else None, Provenance.ORACLE)

    def batch(self, Q):
        Q = np.atleast_2d(np.asarray(Q, float))
        G = np.zeros(Q.shape)
        if self.tree is None:
            return np.full(len(Q), np.inf), G, np.zeros(len(Q), dtype=bool)
        d, _ = self.tree.query(Q)
        hit = np.array([self.grid.flags[self.grid.cell_index(q)] for q in Q], dtype=bool)
        d[hit] = 0.0
        P = self.grid.colliding_points
        for i in np.flatnonzero(~hit):
            diff = Q[i] - P[self.tree.query_ball_point(Q[i], d[i] + self.tol)]
            G[i] = np.mean(diff / np.linalg.norm(diff, axis=1)[:, None], axis=0)
        return d, G, ~hit


class BaselineProvider(Provider):
    """Nearest member of a fixed sparse boundary sample set."""
    name = "baseline_cdf"

    def __init__(self, boundary_samples):
        self.samples = np.atleast_2d(np.asarray(boundary_samples, float))

    def __call__(self, q):
        return baseline_cdf(q, self.samples)

    def batch(self, Q):
        Q = np.atleast_2d(Q)
        diff = Q[:, None, :] - self.samples[None]
        r = np.linalg.norm(diff, axis=2)
        k = np.argmin(r, axis=1)
        d = r[np.arange(len(Q)), k]
        ok = d > 0
        G = np.where(ok[:, None], diff[np.arange(len(Q)), k] / np.where(ok, d, 1.0)[:, None], 0.0)
        return d, G, ok


class SdfPullbackProvider(Provider):
    name = "sdf_pullback"

    def __init__(self, robot: RobotModel, scene: Scene, control_points=None):
        self.robot, self.scene, self.control_points = robot, scene, control_points

    def __call__(self, q):
        return sdf_pullback_gradient(self.robot, self.scene, q, self.control_points)


class LearnedDirectProvider(Provider):
    name = "learned_direct"

    def __init__(self, model: neural.FlowModel, scene: Scene):
        self.model, self.scene = model, scene

    def __call__(self, q):
        return neural.learned_direct(self.model, q, self.scene)


class LearnedMCProvider(Provider):
    """Expectation field over ``M`` flow samples per query.

    Sampling integrates the flow with ``ode_steps`` RK4 steps (default 10,
    half the training count); on the desk models the samples move by under
    1e-3 rad, well inside the 0.01 rad target jitter used in training.
    """
    name = "learned_mc"

    def __init__(self, model: neural.FlowModel, scene: Scene, M: int = 64, seed: int = 0,
                 ode_steps: int | None = MC_ODE_STEPS):
        self.model, self.scene, self.M, self.ode_steps = model, scene, M, ode_steps
        self.rng = np.random.default_rng(seed)

    def __call__(self, q):
        return neural.monte_carlo_field(self.model, q, self.scene, self.M, self.rng, n_steps=self.ode_steps)

    def batch(self, Q):
        return neural.monte_carlo_field_batch(self.model, Q, self.scene, self.M, self.rng, n_steps=self.ode_steps)


def boundary_samples(robot: RobotModel, scene: Scene, n: int, rng: np.random.Generator,
                     tol: float = 1e-6, max_rounds: int = 50) -> np.ndarray:
    """Scattered points on the collision boundary by bisecting free/colliding pairs.

    Gives the sparse set a single-nearest baseline reads from.
    """
    free, hit = [], []
    for _ in range(max_rounds):
        Q = robot.sample(rng, max(4 * n, 256))
        c = clearance_batch(robot, scene, Q)
        free.append(Q[c > 0])
        hit.append(Q[c <= 0])
        if sum(map(len, free)) >= n and sum(map(len, hit)) >= n:
            break
    free, hit = np.concatenate(free), np.concatenate(hit)
    if len(hit) == 0:
        raise ValueError(f"scene {scene.id!r} has no colliding configurations inside the joint limits")
    A = free[:n]
    B = hit[rng.integers(0, len(hit), len(A))]
    lo, hi = np.zeros(len(A)), np.ones(len(A))
    while True:
        mid = 0.5 * (lo + hi)
        P = A + mid[:, None] * (B - A)
        c = clearance_batch(robot, scene, P)
        done = np.abs(c) <= tol
        if done.all() or (hi - lo).max() < 1e-15:
            return P
        inside = c <= 0
        hi = np.where(inside & ~done, mid, hi)
        lo = np.where(~inside & ~done, mid, lo)


# -- projection -----------------------------------------------------------------

@dataclass
class ProjectionResult:
    success: bool
    steps: int
    final_q: np.ndarray
    wall_time: float
    trace: list = field(default_factory=list)
    failed_steps: int = 0


def field_step(answer: FieldAnswer, threshold: float = NORMALIZE_THRESHOLD):
    """``d * g_hat``, normalizing ``g`` only when its norm exceeds ``threshold``."""
    g = answer.gradient
    n = float(np.linalg.norm(g))
    if n > threshold:
        g = g / n
    return answer.distance * g


def project_to_contact(provider, robot: RobotModel, scene: Scene, q0, max_steps: int = 100,
                       contact_tol: float = 1e-2, max_failed: int = 3) -> ProjectionResult:
    """Iterate ``q <- clamp(q - d(q) g_hat(q))`` until the robot touches ``scene``."""
    t0 = time.perf_counter()
    q = robot.clamp(np.asarray(q0, float))
    trace = [q.copy()]
    failed = consecutive = 0
    steps = 0
    while robot_scene_distance(robot, scene, q) > contact_tol:
        if steps >= max_steps:
            return ProjectionResult(False, steps, q, time.perf_counter() - t0, trace, failed)
        steps += 1
        ans = provider(q)
        if ans.gradient is None or not np.isfinite(ans.distance):
            failed += 1
            consecutive += 1
            trace.append(q.copy())
            if consecutive >= max_failed:
                return ProjectionResult(False, steps, q, time.perf_counter() - t0, trace, failed)
            continue
        consecutive = 0
        q = robot.clamp(q - field_step(ans))
        trace.append(q.copy())
    return ProjectionResult(True, steps, q, time.perf_counter() - t0, trace, failed)


# -- trajectory optimization ----------------------------------------------------------

@dataclass(frozen=True)
class TrajOptConfig:
    margin: float = 0.15
    w_collision: float = 200.0
    w_goal: float = 100.0
    step_size: float = 0.5
    iterations: int = 200
    goal_tol: float = 0.05
    max_update: float = 0.1
    early_stop: bool = True


@dataclass
class TrajectoryResult:
    success: bool
    tracking_error: float
    opt_steps: int
    trajectory: np.ndarray
    collision_free: bool = True
    diverged: bool = False


def trajectory_cost(provider, Q, q_target, cfg: TrajOptConfig):
    """Smoothness + hinge collision penalty + terminal attraction.

    Returns ``(cost, grad, curvature, clear)`` for ``Q[1:]``; ``curvature`` is
    the per-waypoint diagonal of the Gauss-Newton Hessian, used as a Jacobi
    preconditioner, and ``clear`` says no waypoint is inside the margin.
    """
    d, G, ok = provider.batch(Q[1:])
    diff = np.diff(Q, axis=0)
    viol = np.maximum(0.0, cfg.margin - d)
    viol = np.where(np.isfinite(viol), viol, 0.0)
    goal = Q[-1] - q_target
    cost = float(np.sum(diff ** 2) + cfg.w_collision * np.sum(viol ** 2) + cfg.w_goal * goal @ goal)
    grad = np.zeros_like(Q)
    grad[1:] += 2.0 * diff
    grad[:-1] -= 2.0 * diff
    grad[1:] += -2.0 * cfg.w_collision * (viol * ok)[:, None] * G
    grad[-1] += 2.0 * cfg.w_goal * goal
    curv = np.full(len(Q) - 1, 4.0)
    curv[-1] = 2.0 + 2.0 * cfg.w_goal
    curv += 2.0 * cfg.w_collision * ((viol > 0) & ok) * np.sum(G * G, axis=1)
    return cost, grad[1:], curv, not np.any(viol > 0)


def optimize_trajectory(provider, robot: RobotModel, scene: Scene, q_start, q_target, n_waypoints: int = 16,
                        cfg: TrajOptConfig = TrajOptConfig()) -> TrajectoryResult:
    """Preconditioned gradient descent on the waypoints, ``q_0`` pinned to the start.

    The chain starts collapsed at ``q_start`` and is pulled out towards the
    goal by the terminal term. An unsigned distance field has no gradient
    inside obstacles, so a straight-line initialization that crosses one
    could never be repaired; growing from a free start keeps every waypoint
    where the field is informative.

    With ``cfg.early_stop`` the loop ends once the last waypoint is within
    ``goal_tol`` and the provider sees every waypoint outside the margin;
    later iterations would only even out the spacing.
    """
    q_start = robot.check(q_start)
    q_target = np.asarray(q_target, float)
    if clearance_batch(robot, scene, q_start[None])[0] <= 0:
        raise ValueError("start configuration is in collision")
    Q = np.repeat(q_start[None], n_waypoints, axis=0)
    steps = 0
    for steps in range(1, cfg.iterations + 1):
        cost, g, curv, clear = trajectory_cost(provider, Q, q_target, cfg)
        if not np.isfinite(cost) or not np.all(np.isfinite(g)):
            return TrajectoryResult(False, float("inf"), steps, Q, False, True)
        if cfg.early_stop and clear and np.linalg.norm(Q[-1] - q_target) <= cfg.goal_tol:
            steps -= 1  # count applied updates only
            break
        upd = cfg.step_size * g / curv[:, None]
        n = np.linalg.norm(upd, axis=1, keepdims=True)
        upd = np.where(n > cfg.max_update, upd * (cfg.max_update / np.maximum(n, 1e-300)), upd)
        Q[1:] = robot.clamp(Q[1:] - upd)
    err = float(np.linalg.norm(Q[-1] - q_target))
    free = bool(np.all(clearance_batch(robot, scene, Q) > 0))
    return TrajectoryResult(free and err <= cfg.goal_tol, err, steps, Q, free)


# -- benchmark suites ----------------------------------------------------------------

@dataclass(frozen=True)
class ProjectionTrial:
    trial_id: int
    scene: Scene
    q0: np.ndarray


def projection_trials(robot: RobotModel, scenes, n_per_scene: int, seed: int = 0, min_clearance: float = 0.1):
    """Random free starts per scene, each at least ``min_clearance`` from the target."""
    trials = []
    for j, scene in enumerate(scenes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, j]))
        got = 0
        while got < n_per_scene:
            q = robot.sample(rng, 1)[0]
            if robot_scene_distance(robot, scene, q) > min_clearance:
                trials.append(ProjectionTrial(len(trials), scene, q))
                got += 1
    return trials


def run_projection_suite(trials, providers: dict, robot: RobotModel, max_steps: int = 100,
                         contact_tol: float = 1e-2):
    """``providers`` maps a name to a factory ``scene -> Provider``. One row per (provider, trial)."""
    rows = []
    for name, make in providers.items():
        cache = {}
        for tr in trials:
            if tr.scene.id not in cache:
                cache[tr.scene.id] = make(tr.scene)
            res = project_to_contact(cache[tr.scene.id], robot, tr.scene, tr.q0, max_steps, contact_tol)
            rows.append({"provider": name, "trial": tr.trial_id, "scene": tr.scene.id,
                         "success": res.success, "steps": res.steps, "wall_time": res.wall_time,
                         "failed_steps": res.failed_steps})
    return rows


@dataclass(frozen=True)
class TrajectoryInstance:
    instance_id: int
    q_start: np.ndarray
    q_target: np.ndarray


def trajectory_instances(robot: RobotModel, scene: Scene, n: int, seed: int = 0, min_clearance: float = 0.1,
                         require_blocked: bool = True, n_check: int = 64):
    """Free start/goal pairs whose straight joint-space segment collides."""
    rng = np.random.default_rng(seed)
    out = []
    s = np.linspace(0, 1, n_check)[:, None]
    while len(out) < n:
        a, b = robot.sample(rng, 2)
        if min(robot_scene_distance(robot, scene, a), robot_scene_distance(robot, scene, b)) <= min_clearance:
            continue
        if require_blocked and np.all(clearance_batch(robot, scene, a + s * (b - a)) > 0):
            continue
        out.append(TrajectoryInstance(len(out), a, b))
    return out


def run_trajectory_suite(instances, providers: dict, robot: RobotModel, scene: Scene, n_waypoints: int = 16,
                         cfg: TrajOptConfig = TrajOptConfig()):
    rows = []
    for name, make in providers.items():
        provider = make(scene)
        for inst in instances:
            t0 = time.perf_counter()
            res = optimize_trajectory(provider, robot, scene, inst.q_start, inst.q_target, n_waypoints, cfg)
            rows.append({"provider": name, "instance": inst.instance_id, "success": res.success,
                         "tracking_error": res.tracking_error, "collision_free": res.collision_free,
                         "opt_steps": res.opt_steps, "wall_time": time.perf_counter() - t0})
    return rows


def summarize(rows, key: str = "provider") -> dict:
    """Aggregate per-provider success rate and means of numeric columns."""
    out = {}
    for name in dict.fromkeys(r[key] for r in rows):
        sub = [r for r in rows if r[key] == name]
        agg = {"n": len(sub), "success_rate": float(np.mean([r["success"] for r in sub]))}
        for col in ("steps", "tracking_error", "wall_time"):
            if col in sub[0]:
                vals = np.array([r[col] for r in sub], float)
                agg[f"mean_{col}"] = float(np.mean(vals[np.isfinite(vals)])) if np.isfinite(vals).any() else float("nan")
        out[name] = agg
    return out
