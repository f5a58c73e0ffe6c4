"""Adaptive refinement sampling of minimal-distance collision configurations.

Global exploration optimizes random seeds onto the collision boundary and
keeps the near-minimal solutions. Local refinement re-seeds inside an
epsilon-ball around every kept solution and keeps whatever lands at the same
distance again. No oracle grid is touched.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .field import EmptySampleSetError, empirical_distance, empirical_gradient
from .geometry import RobotModel, Scene, clearance_batch

FD_STEP = 1e-6


class DatasetQualityError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_global: int = 16
    n_local: int = 8
    radius: float = 0.1
    max_opt_iters: int = 300
    boundary_tol: float = 1e-6
    equality_tol_rel: float = 0.01
    rng_seed: int = 0
    mu0: float = 1000.0
    mu_growth: float = 100.0
    mu_stages: int = 3
    max_samples: int = 64
    kkt_tol: float = 1e-3
    max_step: float = 0.25

    def __post_init__(self):
        for name in ("n_global", "radius", "max_opt_iters", "boundary_tol", "mu0", "mu_stages", "max_samples"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_local < 0:
            raise ValueError("n_local must be non-negative")
        if not 0.0 < self.equality_tol_rel <= 0.1:
            raise ValueError("equality_tol_rel must lie in (0, 0.1]")

    @property
    def dedup_radius(self) -> float:
        return self.radius / 10.0


@dataclass
class CollisionSampleSet:
    query: np.ndarray
    samples: np.ndarray
    d_min_est: float
    scene_id: str = "scene"
    n_global_found: int = 0

    def __len__(self):
        return len(self.samples)


@dataclass
class TrainingRecord:
    record_id: int
    q: np.ndarray
    scene_id: str
    samples: np.ndarray
    y_d: float
    y_g: np.ndarray | None  # None when the query itself collides

    @property
    def colliding(self) -> bool:
        return self.y_g is None


@dataclass
class Dataset:
    robot: RobotModel
    scenes: dict
    config: SamplerConfig
    records: list = field(default_factory=list)
    dropped: int = 0

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def _clearance_grad(model, scene, Q):
    """Central finite-difference gradient of the clearance, rows of Q independent."""
    n, dof = Q.shape
    offsets = np.concatenate([np.eye(dof), -np.eye(dof)]) * FD_STEP
    probe = (Q[:, None, :] + offsets[None]).reshape(-1, dof)
    c = clearance_batch(model, scene, probe).reshape(n, 2 * dof)
    return (c[:, :dof] - c[:, dof:]) / (2 * FD_STEP)


def _penalty(model, scene, Q, target, mu):
    c = clearance_batch(model, scene, Q)
    return np.sum((Q - target) ** 2, axis=1) + mu * np.maximum(c, 0.0) ** 2, c


def _descend(model, scene, Q, target, mu, iters, max_step=0.25, xtol=1e-12, ftol=1e-14):
    """Backtracking descent on the penalty objective, row by row.

    Steps are preconditioned by the Gauss-Newton metric of the objective,
    ``2 (I + mu a a^T)`` with ``a`` the clearance gradient (rank-one inverse),
    which keeps large ``mu`` stages well conditioned.
    """
    lo, hi = model.lower, model.upper
    f, c = _penalty(model, scene, Q, target, mu)
    active = np.ones(len(Q), bool)
    used = 0
    for _ in range(iters):
        if not active.any():
            break
        used += 1
        idx = np.flatnonzero(active)
        Qa = Q[idx]
        pos = np.maximum(c[idx], 0.0)
        a = _clearance_grad(model, scene, Qa) * (pos > 0)[:, None]
        g = 2.0 * (Qa - target) + (2.0 * mu * pos)[:, None] * a
        ag = np.sum(a * g, axis=1)
        p = 0.5 * (g - (mu * ag / (1.0 + mu * np.sum(a * a, axis=1)))[:, None] * a)
        # trust cap keeps each seed inside its own basin
        pn = np.linalg.norm(p, axis=1)
        p *= np.minimum(1.0, max_step / np.maximum(pn, 1e-300))[:, None]
        step_len = np.ones(len(idx))
        accepted = np.zeros(len(idx), bool)
        newQ = Qa.copy()
        newf = f[idx].copy()
        newc = c[idx].copy()
        for _ in range(50):
            todo = ~accepted
            if not todo.any():
                break
            trial = np.clip(Qa[todo] - step_len[todo, None] * p[todo], lo, hi)
            ft, ct = _penalty(model, scene, trial, target, mu)
            ok = ft <= f[idx][todo] - 1e-4 * np.sum(g[todo] * (Qa[todo] - trial), axis=1)
            sel = np.flatnonzero(todo)
            good = sel[ok]
            newQ[good] = trial[ok]
            newf[good] = ft[ok]
            newc[good] = ct[ok]
            accepted[good] = True
            step_len[sel[~ok]] *= 0.5
        step = np.linalg.norm(newQ - Qa, axis=1)
        old_f = f[idx]
        Q[idx] = newQ
        f[idx] = newf
        c[idx] = newc
        converged = ((step <= xtol * (1.0 + np.linalg.norm(Qa, axis=1)))
                     | (old_f - newf <= ftol * (1.0 + np.abs(newf))))
        active[idx[converged]] = False
    return Q, c, active, used


def _bisect_to_boundary(model, scene, Q, target, c, tol, max_expand=40, max_bisect=80):
    """Move each row onto the zero clearance level along the ray from ``target``."""
    lo, hi = model.lower, model.upper
    n = len(Q)
    out = Q.copy()
    ok = np.zeros(n, bool)
    for i in range(n):
        q = Q[i]
        if abs(c[i]) <= tol:
            out[i], ok[i] = q, True
            continue
        u = q - target
        nu = np.linalg.norm(u)
        if nu == 0.0:
            continue
        u /= nu
        if c[i] > 0:
            # free: push further away from the query into the obstacle
            t_free, t_col, step = 0.0, None, max(c[i], 1e-6)
            for _ in range(max_expand):
                p = np.clip(q + step * u, lo, hi)
                if clearance_batch(model, scene, p[None])[0] <= 0.0:
                    t_col = step
                    break
                t_free = step
                step *= 2.0
                if np.all((p == lo) | (p == hi)):
                    break
            if t_col is None:
                continue
            a, b = t_free, t_col
        else:
            # inside: retreat toward the (free) query
            a, b = -nu, 0.0
        for _ in range(max_bisect):
            m = 0.5 * (a + b)
            cm = clearance_batch(model, scene, np.clip(q + m * u, lo, hi)[None])[0]
            if abs(cm) <= tol:
                a = b = m
                break
            if cm > 0:
                a = m
            else:
                b = m
        p = np.clip(q + b * u, lo, hi)
        cp = clearance_batch(model, scene, p[None])[0]
        if abs(cp) <= tol:
            out[i], ok[i] = p, True
    return out, ok


def optimize_to_boundary_batch(model: RobotModel, scene: Scene, Q_init, q_query, cfg: SamplerConfig):
    """Vectorised boundary optimizer. Returns ``(Q_out, ok)``; failed rows are garbage."""
    target = np.asarray(q_query, dtype=float)
    Q = model.clamp(np.atleast_2d(np.asarray(Q_init, dtype=float))).copy()
    if clearance_batch(model, scene, target[None])[0] <= 0.0:
        return np.repeat(target[None], len(Q), axis=0), np.ones(len(Q), bool)
    budget = cfg.max_opt_iters
    per_stage = max(1, budget // cfg.mu_stages)
    mu = cfg.mu0
    active = np.ones(len(Q), bool)
    for stage in range(cfg.mu_stages):
        iters = per_stage if stage < cfg.mu_stages - 1 else budget - per_stage * (cfg.mu_stages - 1)
        Q, c, active, _ = _descend(model, scene, Q, target, mu, iters, cfg.max_step)
        mu *= cfg.mu_growth
    Q, ok_b = _bisect_to_boundary(model, scene, Q, target, c, cfg.boundary_tol)
    # rows still moving when the budget ran out count only if they are stationary anyway
    ok_conv = ~active | (_kkt_residual(model, scene, Q, target) <= cfg.kkt_tol)
    return Q, ok_conv & ok_b


def _kkt_residual(model, scene, Q, target):
    """Misalignment between the pull toward the query and the boundary normal.

    Joints resting on a limit are dropped from the comparison.
    """
    v = target - Q
    n = _clearance_grad(model, scene, Q)
    free = (Q > model.lower + 1e-9) & (Q < model.upper - 1e-9)
    v = np.where(free, v, 0.0)
    n = np.where(free, n, 0.0)
    nv = np.linalg.norm(v, axis=1)
    nn = np.linalg.norm(n, axis=1)
    r = np.zeros(len(Q))
    ok = (nv > 0) & (nn > 0)
    r[ok] = np.linalg.norm(v[ok] / nv[ok, None] - n[ok] / nn[ok, None], axis=1)
    r[(nv > 0) & (nn == 0)] = np.inf
    return r


def optimize_to_boundary(model: RobotModel, scene: Scene, q_init, q_query, cfg: SamplerConfig):
    """Single-seed boundary optimizer; ``None`` on failure."""
    model.check(q_init)
    Q, ok = optimize_to_boundary_batch(model, scene, np.asarray(q_init, float)[None], q_query, cfg)
    return Q[0] if ok[0] else None


def dedup(points: np.ndarray, radius: float) -> np.ndarray:
    kept = []
    for p in points:
        if all(np.linalg.norm(p - k) > radius for k in kept):
            kept.append(p)
    return np.array(kept).reshape(-1, points.shape[1])


def ball_sample(rng: np.random.Generator, center, radius: float, n: int) -> np.ndarray:
    dof = len(center)
    v = rng.standard_normal((n, dof))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / dof)
    return np.asarray(center) + r * v


def query_rngs(seed: int, index: int = 0):
    """Independent (global, local) generators for one query; global draws are nested in n_global."""
    ss = np.random.SeedSequence([int(seed), int(index)])
    g, l = ss.spawn(2)
    return np.random.default_rng(g), np.random.default_rng(l)


def adaptive_refinement_sample(model: RobotModel, scene: Scene, q, cfg: SamplerConfig,
                               query_index: int = 0) -> CollisionSampleSet:
    q = model.check(q)
    if not scene.obstacles:
        raise EmptySampleSetError("scene has no obstacles")
    if clearance_batch(model, scene, q[None])[0] <= 0.0:
        return CollisionSampleSet(q, q[None].copy(), 0.0, scene.id, 1)
    rng_g, rng_l = query_rngs(cfg.rng_seed, query_index)

    seeds = model.sample(rng_g, cfg.n_global)
    Qg, ok = optimize_to_boundary_batch(model, scene, seeds, q, cfg)
    Qg = Qg[ok]
    if len(Qg) == 0:
        raise EmptySampleSetError(
            f"all {cfg.n_global} global seeds failed for query {q} in scene {scene.id!r}")
    dist = np.linalg.norm(Qg - q, axis=1)
    d_min = float(dist.min())
    bound = d_min * (1.0 + cfg.equality_tol_rel)
    kept = Qg[dist <= bound]
    found = [kept]
    if cfg.n_local > 0:
        inits = np.concatenate([ball_sample(rng_l, k, cfg.radius, cfg.n_local) for k in kept])
        Ql, ok_l = optimize_to_boundary_batch(model, scene, model.clamp(inits), q, cfg)
        Ql = Ql[ok_l]
        found.append(Ql[np.linalg.norm(Ql - q, axis=1) <= bound])
    S = dedup(np.concatenate(found), cfg.dedup_radius)[: cfg.max_samples]
    return CollisionSampleSet(q, S, d_min, scene.id, len(Qg))


def make_record(record_id: int, S: CollisionSampleSet) -> TrainingRecord:
    if S.d_min_est == 0.0:
        return TrainingRecord(record_id, S.query, S.scene_id, S.samples, 0.0, None)
    return TrainingRecord(record_id, S.query, S.scene_id, S.samples,
                          empirical_distance(S.query, S), empirical_gradient(S.query, S))


def build_dataset(model: RobotModel, scenes, n_queries: int, cfg: SamplerConfig,
                  max_drop_fraction: float = 0.5, progress=None) -> Dataset:
    """Uniform random queries per scene, each labelled by adaptive sampling.

    Query ``i`` of scene ``j`` draws from its own stream keyed by
    ``(rng_seed, j, i)``, so results do not depend on evaluation order.
    """
    if n_queries < 1:
        raise ValueError("n_queries must be at least 1")
    scenes = list(scenes)
    ds = Dataset(model, {s.id: s for s in scenes}, cfg)
    attempted = 0
    for j, scene in enumerate(scenes):
        qrng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, j, 1 << 20]))
        Q = model.sample(qrng, n_queries)
        for i, q in enumerate(Q):
            attempted += 1
            try:
                S = adaptive_refinement_sample(model, scene, q, cfg, query_index=j * (1 << 24) + i)
            except EmptySampleSetError:
                ds.dropped += 1
                continue
            ds.records.append(make_record(len(ds.records), S))
            if progress is not None:
                progress(attempted)
    if attempted and ds.dropped / attempted > max_drop_fraction:
        raise DatasetQualityError(f"{ds.dropped} of {attempted} queries produced no samples")
    return ds


# -- persistence -----------------------------------------------------------

_DS_MAGIC = b"CSDSET01"


def dataset_header(ds: Dataset) -> dict:
    from .io import robot_to_dict, scene_to_dict

    return {
        "robot": robot_to_dict(ds.robot),
        "scenes": [scene_to_dict(s) for s in ds.scenes.values()],
        "sampler": asdict(ds.config),
        "seed": ds.config.rng_seed,
        "n_records": len(ds.records),
        "dropped": ds.dropped,
        "scene_of_record": [r.scene_id for r in ds.records],
    }


def save_dataset(ds: Dataset, path) -> None:
    """Magic, JSON header, then little-endian float64 blocks in a fixed order."""
    dof = ds.robot.dof
    header = json.dumps(dataset_header(ds), sort_keys=True).encode()
    n = len(ds.records)
    counts = np.array([len(r.samples) for r in ds.records], dtype="<i8")
    qs = np.array([r.q for r in ds.records], dtype="<f8").reshape(n, dof)
    yd = np.array([r.y_d for r in ds.records], dtype="<f8")
    yg = np.array([r.y_g if r.y_g is not None else np.full(dof, np.nan) for r in ds.records],
                  dtype="<f8").reshape(n, dof)
    samples = (np.concatenate([r.samples for r in ds.records]) if n else np.zeros((0, dof))).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_DS_MAGIC + struct.pack("<Q", len(header)) + header)
        for arr in (counts, qs, yd, yg, samples):
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_dataset(path) -> Dataset:
    from .io import robot_from_dict, scene_from_dict

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _DS_MAGIC:
        raise ValueError(f"{path} is not a dataset file")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16:16 + hlen])
    robot = robot_from_dict(header["robot"])
    scenes = [scene_from_dict(s) for s in header["scenes"]]
    cfg = SamplerConfig(**header["sampler"])
    dof, n = robot.dof, header["n_records"]
    off = 16 + hlen

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f8" if shape != "i" else "<i8", count=count, offset=off)
        off += 8 * count
        return arr

    counts = take(n, "i").astype(int)
    qs = take(n * dof, "f").reshape(n, dof)
    yd = take(n, "f")
    yg = take(n * dof, "f").reshape(n, dof)
    samples = take(int(counts.sum()) * dof, "f").reshape(-1, dof)
    ds = Dataset(robot, {s.id: s for s in scenes}, cfg, dropped=header["dropped"])
    start = 0
    for i in range(n):
        S = samples[start:start + counts[i]].copy()
        start += counts[i]
        g = None if np.isnan(yg[i]).any() else yg[i].copy()
        ds.records.append(TrainingRecord(i, qs[i].copy(), header["scene_of_record"][i], S, float(yd[i]), g))
    return ds


def export_dataset_csv(ds: Dataset, path) -> None:
    import csv

    dof = ds.robot.dof
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "scene_id"] + [f"q{k}" for k in range(dof)] + ["n_samples", "y_d"]
                   + [f"y_g{k}" for k in range(dof)])
        for r in ds.records:
            g = r.y_g if r.y_g is not None else [""] * dof
            w.writerow([r.record_id, r.scene_id] + [repr(float(v)) for v in r.q] + [len(r.samples), repr(r.y_d)]
                       + [repr(float(v)) if v != "" else "" for v in g])
