"""Unified network: conditional continuous normalizing flow + distance head.

Layout::

    features(q, scene) --trunk--> x_enc --head--> d_hat
                                    |
                                    +--> dynamics h(z, t, x_enc) --RK4--> z(1)

The trunk is shared, so the likelihood term shapes the same encoding the
distance head reads. Input gradients needed by the loss (grad d_hat, the
Jacobian trace of h) are propagated as explicit forward tangents inside the
autodiff graph, so a single reverse pass yields parameter gradients of every
loss term.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .field import FieldAnswer, Provenance, empirical_distance, empirical_gradient
from .geometry import Scene, clearance_batch
from .ode import DivergenceError, rk4

LOG_2PI = math.log(2.0 * math.pi)


class TooManyObstaclesError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, msg, record_ids=(), model=None, checkpoint=None):
        super().__init__(msg)
        self.record_ids = tuple(record_ids)
        self.model = model
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class Architecture:
    dof: int
    n_freq: int = 4
    max_obstacles: int = 1
    trunk_width: int = 64
    trunk_depth: int = 4
    dyn_width: int = 64
    dyn_depth: int = 4
    activation: str = "tanh"
    ode_steps: int = 20
    ode_scheme: str = "rk4"

    @property
    def n_features(self) -> int:
        return self.dof * (1 + 2 * self.n_freq) + 4 * self.max_obstacles


@dataclass
class FlowModel:
    arch: Architecture
    params: dict  # name -> ndarray, in declared order

    def copy(self) -> "FlowModel":
        return FlowModel(self.arch, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def param_shapes(arch: Architecture) -> list:
    shapes = []
    width_in = arch.n_features
    for i in range(arch.trunk_depth):
        shapes += [(f"trunk.{i}.W", (width_in, arch.trunk_width)), (f"trunk.{i}.b", (arch.trunk_width,))]
        width_in = arch.trunk_width
    shapes += [("head.W", (arch.trunk_width, 1)), ("head.b", (1,))]
    w = arch.dyn_width
    shapes += [("dyn.0.Wz", (arch.dof, w)), ("dyn.0.Wt", (w,)), ("dyn.0.Wx", (arch.trunk_width, w)),
               ("dyn.0.b", (w,))]
    for i in range(1, arch.dyn_depth):
        out = arch.dof if i == arch.dyn_depth - 1 else w
        shapes += [(f"dyn.{i}.W", (w, out)), (f"dyn.{i}.b", (out,))]
    return shapes


def init_model(arch: Architecture, seed: int = 0, dynamics_out_scale: float = 0.0) -> FlowModel:
    """Scaled-normal weights, zero biases.

    ``dynamics_out_scale=0`` zeroes the last dynamics layer, so a fresh model
    is the identity flow.
    """
    if arch.activation != "tanh" or arch.ode_scheme != "rk4":
        raise ValueError("only tanh activations and the rk4 scheme are implemented")
    rng = np.random.default_rng(seed)
    params = {}
    last = f"dyn.{arch.dyn_depth - 1}.W"
    for name, shape in param_shapes(arch):
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif name == "dyn.0.Wt":
            params[name] = rng.normal(0.0, 1.0, shape)
        else:
            fan_in = arch.trunk_width + arch.dof + 1 if name.startswith("dyn.0.") else shape[0]
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)
        if name == last:
            params[name] = params[name] * dynamics_out_scale
    return FlowModel(arch, params)


# -- features ----------------------------------------------------------------

def scene_features(arch: Architecture, scene: Scene) -> np.ndarray:
    """Obstacle slots ``(cx, cy, r, present)``, zero padded to ``max_obstacles``."""
    k = len(scene.obstacles)
    if k > arch.max_obstacles:
        raise TooManyObstaclesError(f"scene {scene.id!r} has {k} obstacles, model takes {arch.max_obstacles}")
    out = np.zeros((arch.max_obstacles, 4))
    for i, o in enumerate(scene.obstacles):
        out[i] = (o.center[0], o.center[1], o.radius, 1.0)
    return out.ravel()


def _freqs(arch):
    return 2.0 ** np.arange(arch.n_freq)


def input_features(arch: Architecture, Q, scene_feats) -> np.ndarray:
    """``[q, sin(2^k q), cos(2^k q), scene slots]`` per row."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    scene_feats = np.broadcast_to(scene_feats, (len(Q), 4 * arch.max_obstacles))
    f = _freqs(arch)
    arg = (Q[:, None, :] * f[:, None]).reshape(len(Q), -1)
    return np.concatenate([Q, np.sin(arg), np.cos(arg), scene_feats], axis=1)


def feature_jacobian(arch: Architecture, Q) -> np.ndarray:
    """d(features)/dq as tangents, shape (dof, N, n_features)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n, dof = Q.shape
    f = _freqs(arch)
    J = np.zeros((dof, n, arch.n_features))
    arg = Q[:, None, :] * f[:, None]  # (N, F, dof)
    base = dof
    nf = arch.n_freq
    for j in range(dof):
        J[j, :, j] = 1.0
        cols = base + np.arange(nf) * dof + j
        J[j][:, cols] = f * np.cos(arg[:, :, j])
        J[j][:, cols + nf * dof] = -f * np.sin(arg[:, :, j])
    return J


def _features_tensor(arch, Q: ad.Tensor, scene_feats) -> ad.Tensor:
    """Differentiable version of ``input_features`` for reverse-mode input gradients."""
    n = Q.shape[0]
    f = _freqs(arch)
    arg = ad.reshape(ad.reshape(Q, (n, 1, arch.dof)) * f[:, None], (n, arch.n_freq * arch.dof))
    sf = np.broadcast_to(scene_feats, (n, 4 * arch.max_obstacles))
    return ad.concat([Q, ad.sin(arg), ad.cos(arg), sf], axis=1)


# -- network pieces ----------------------------------------------------------

def _P(model, tensors, name):
    return tensors[name] if tensors is not None else model.params[name]


def jet_dense(S, W, b, activation: bool = True):
    """Dense layer on a jet: ``S[0]`` is the value, ``S[1:]`` forward tangents.

    Returns the stacked ``[act(S0 W + b), act'(.) * (Sk W)]``. Fusing the
    value and tangent updates into one tape node keeps the graph small, which
    dominates cost at these layer widths.
    """
    S, W, b = ad.as_tensor(S), ad.as_tensor(W), ad.as_tensor(b)
    U = S.data @ W.data
    a = U[0] + b.data
    if activation:
        h = np.tanh(a)
        s = 1.0 - h * h
        out = np.concatenate([h[None], U[1:] * s], axis=0)
    else:
        out = U.copy()
        out[0] = a

    def bw(G):
        if activation:
            dU = np.empty_like(U)
            dU[1:] = G[1:] * s
            ds = np.einsum("knw,knw->nw", G[1:], U[1:])
            dU[0] = (G[0] - 2.0 * h * ds) * s
        else:
            dU = G
        dS = dU @ W.data.T
        dW = S.data.reshape(-1, S.shape[-1]).T @ dU.reshape(-1, dU.shape[-1])
        return dS, dW, ad.unbroadcast(dU[0], b.shape)

    return ad._make(out, (S, W, b), bw)


def _jet(X, tangents=None):
    """Stack a value (N, F) with its tangents (k, N, F)."""
    X = ad.as_tensor(X)
    S = ad.reshape(X, (1,) + X.shape)
    if tangents is None:
        return S
    return ad.concat([S, tangents], axis=0)


def trunk_jet(model: FlowModel, S, tensors=None):
    for i in range(model.arch.trunk_depth):
        S = jet_dense(S, _P(model, tensors, f"trunk.{i}.W"), _P(model, tensors, f"trunk.{i}.b"))
    return S


def head_jet(model, S, tensors=None):
    """(1+k, N, 1): distance and its tangents."""
    return jet_dense(S, _P(model, tensors, "head.W"), _P(model, tensors, "head.b"), activation=False)


def trunk(model: FlowModel, X, tensors=None):
    """Shared encoder on plain rows; returns x_enc (N, width)."""
    return trunk_jet(model, _jet(X), tensors)[0]


def head(model, x_enc, tensors=None):
    return head_jet(model, _jet(x_enc), tensors)[0]


def _dyn_context(model, x_enc, tensors=None):
    return ad.matmul(x_enc, _P(model, tensors, "dyn.0.Wx")) + _P(model, tensors, "dyn.0.b")


def dynamics(model, z, t, ctx, tensors=None, with_trace=False):
    """h(z, t, x_enc) and optionally the exact trace of dh/dz (one tangent per state dim)."""
    arch = model.arch
    z = ad.as_tensor(z)
    if with_trace:
        eye = np.broadcast_to(np.eye(arch.dof)[:, None, :], (arch.dof, z.shape[0], arch.dof))
        S = _jet(z, eye)
    else:
        S = _jet(z)
    bias = t * ad.as_tensor(_P(model, tensors, "dyn.0.Wt")) + ctx
    S = jet_dense(S, _P(model, tensors, "dyn.0.Wz"), bias)
    for i in range(1, arch.dyn_depth):
        last = i == arch.dyn_depth - 1
        S = jet_dense(S, _P(model, tensors, f"dyn.{i}.W"), _P(model, tensors, f"dyn.{i}.b"), activation=not last)
    if not with_trace:
        return S[0], None
    k = np.arange(arch.dof)
    return S[0], ad.tsum(S[1 + k, :, k], axis=0)


def _encode(model, Q, scene_feats, tensors=None):
    X = input_features(model.arch, Q, scene_feats)
    return trunk(model, ad.Tensor(X), tensors)


# -- public API --------------------------------------------------------------

def _scene_feats(model, scene):
    return scene_features(model.arch, scene) if isinstance(scene, Scene) else np.asarray(scene, float)


def encode_input(model: FlowModel, q, scene) -> np.ndarray:
    with ad.no_grad():
        return _encode(model, q, _scene_feats(model, scene)).data


def _flow_forward(model, ctx, z0, tensors=None, n_steps=None):
    def f(t, y):
        return (dynamics(model, y[0], t, ctx, tensors)[0],)

    return rk4(f, (z0,), 0.0, 1.0, n_steps or model.arch.ode_steps)[0]


def _flow_logprob(model, ctx, x, tensors=None, n_steps=None):
    """Integrate (z, accumulated trace) from t=1 back to t=0; return log p(x) and z(0)."""
    n = x.shape[0]

    def f(t, y):
        h, tr = dynamics(model, y[0], t, ctx, tensors, with_trace=True)
        return h, tr

    z0, acc = rk4(f, (x, ad.Tensor(np.zeros(n))), 1.0, 0.0, n_steps or model.arch.ode_steps)
    # acc = -int_0^1 tr dt, so log p(x) = log N(z0) - int tr = log N(z0) + acc
    log_prior = -0.5 * ad.tsum(z0 * z0, axis=1) - 0.5 * model.arch.dof * LOG_2PI
    return log_prior + acc, z0


def cnf_sample(model: FlowModel, q, scene, z0, n_steps: int | None = None) -> np.ndarray:
    """Push prior draws ``z0`` (dof,) or (M, dof) through the flow conditioned on (q, scene).

    ``n_steps`` overrides the architecture's RK4 step count for this call.
    """
    z0 = np.asarray(z0, dtype=float)
    single = z0.ndim == 1
    Z = np.atleast_2d(z0)
    with ad.no_grad():
        x_enc = _encode(model, np.asarray(q, float)[None], _scene_feats(model, scene))
        ctx = _dyn_context(model, x_enc)
        ctx = ad.Tensor(np.broadcast_to(ctx.data, (len(Z), ctx.shape[1])))
        out = _flow_forward(model, ctx, ad.Tensor(Z), n_steps=n_steps).data
    return out[0] if single else out


def cnf_inverse(model: FlowModel, q, scene, x) -> np.ndarray:
    """Map configurations back to latent space (backward integration)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    with ad.no_grad():
        x_enc = _encode(model, np.asarray(q, float)[None], _scene_feats(model, scene))
        ctx = ad.Tensor(np.broadcast_to(_dyn_context(model, x_enc).data, (len(x), model.arch.dyn_width)))

        def f(t, y):
            return (dynamics(model, y[0], t, ctx)[0],)

        return rk4(f, (ad.Tensor(x),), 1.0, 0.0, model.arch.ode_steps)[0].data


def cnf_logprob(model: FlowModel, q, scene, q_target):
    """log p(q_target | q, scene); vectorised over rows of ``q_target``."""
    x = np.asarray(q_target, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    with ad.no_grad():
        x_enc = _encode(model, np.asarray(q, float)[None], _scene_feats(model, scene))
        ctx = ad.Tensor(np.broadcast_to(_dyn_context(model, x_enc).data, (len(X), model.arch.dyn_width)))
        lp = _flow_logprob(model, ctx, ad.Tensor(X))[0].data
    return float(lp[0]) if single else lp


def dynamics_field(model: FlowModel, q, scene, z, t: float, with_trace: bool = False):
    """Evaluate h(z, t, x_enc) (and its exact trace) for rows of ``z``."""
    Z = np.atleast_2d(np.asarray(z, float))
    with ad.no_grad():
        x_enc = _encode(model, np.asarray(q, float)[None], _scene_feats(model, scene))
        ctx = ad.Tensor(np.broadcast_to(_dyn_context(model, x_enc).data, (len(Z), model.arch.dyn_width)))
        h, tr = dynamics(model, ad.Tensor(Z), t, ctx, with_trace=with_trace)
    return (h.data, tr.data) if with_trace else h.data


def predict_distance(model: FlowModel, q, scene):
    Q = np.asarray(q, float)
    with ad.no_grad():
        d = head(model, _encode(model, np.atleast_2d(Q), _scene_feats(model, scene))).data[:, 0]
    return float(d[0]) if Q.ndim == 1 else d


def predict_gradient(model: FlowModel, q, scene) -> np.ndarray:
    """grad_q d_hat by a reverse pass through head, trunk and positional encoding."""
    Q = np.asarray(q, float)
    Qt = ad.Tensor(np.atleast_2d(Q).copy(), requires_grad=True)
    X = _features_tensor(model.arch, Qt, _scene_feats(model, scene))
    d = head(model, trunk(model, X))
    (g,) = ad.grad(ad.tsum(d), [Qt])
    return g[0] if Q.ndim == 1 else g


def predict_gradient_forward(model: FlowModel, Q, scene) -> np.ndarray:
    """Same quantity via forward tangents (the path used inside the training loss)."""
    Q = np.atleast_2d(np.asarray(Q, float))
    sf = _scene_feats(model, scene)
    with ad.no_grad():
        S = _jet(input_features(model.arch, Q, sf), feature_jacobian(model.arch, Q))
        out = head_jet(model, trunk_jet(model, S))
    return out.data[1:, :, 0].T


def learned_direct(model: FlowModel, q, scene) -> FieldAnswer:
    return FieldAnswer(max(predict_distance(model, q, scene), 0.0), predict_gradient(model, q, scene),
                       Provenance.LEARNED_DIRECT)


def monte_carlo_samples(model: FlowModel, q, scene, M: int, rng: np.random.Generator,
                        n_steps: int | None = None) -> np.ndarray:
    if M < 1:
        raise ValueError("M must be at least 1")
    return cnf_sample(model, q, scene, rng.standard_normal((M, model.arch.dof)), n_steps)


def monte_carlo_field(model: FlowModel, q, scene, M: int, rng: np.random.Generator,
                      coincide_tol: float = 1e-9, n_steps: int | None = None) -> FieldAnswer:
    """Expectation field over ``M`` flow samples; samples landing on ``q`` are skipped."""
    q = np.asarray(q, float)
    S = monte_carlo_samples(model, q, scene, M, rng, n_steps)
    keep = np.linalg.norm(S - q, axis=1) > coincide_tol
    if not keep.any():
        return FieldAnswer(0.0, None, Provenance.LEARNED_MC)
    return FieldAnswer(empirical_distance(q, S), empirical_gradient(q, S[keep]), Provenance.LEARNED_MC)


def monte_carlo_gradient(model: FlowModel, q, scene, M: int, rng: np.random.Generator):
    """Mean unit direction over flow samples, or ``None`` when undefined."""
    return monte_carlo_field(model, q, scene, M, rng).gradient


def monte_carlo_field_batch(model: FlowModel, Q, scene, M: int, rng: np.random.Generator,
                            coincide_tol: float = 1e-9, n_steps: int | None = None):
    """Vectorised expectation field for many queries in one scene. Returns (d, G, defined)."""
    Q = np.atleast_2d(np.asarray(Q, float))
    n, dof = Q.shape
    Z = rng.standard_normal((n, M, dof))
    with ad.no_grad():
        x_enc = _encode(model, Q, _scene_feats(model, scene))
        ctx = np.repeat(_dyn_context(model, x_enc).data, M, axis=0)
        S = _flow_forward(model, ad.Tensor(ctx), ad.Tensor(Z.reshape(n * M, dof)), n_steps=n_steps).data
    S = S.reshape(n, M, dof)
    diff = Q[:, None, :] - S
    r = np.linalg.norm(diff, axis=2)
    keep = r > coincide_tol
    unit = np.where(keep[..., None], diff / np.where(keep, r, 1.0)[..., None], 0.0)
    cnt = keep.sum(axis=1)
    G = unit.sum(axis=1) / np.maximum(cnt, 1)[:, None]
    return r.mean(axis=1), G, cnt > 0


# -- losses ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    lambdas: tuple = (1.0, 1.0, 0.5, 0.1, 0.01)
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_every: int = 2000
    steps: int = 5000
    batch_size: int = 32
    seed: int = 0
    clip_norm: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    nll_samples: int = 4
    target_noise: float = 0.01
    hessian_step: float = 1e-3
    collocation: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        lam = tuple(float(v) for v in self.lambdas)
        if len(lam) != 5 or any(v < 0 for v in lam) or not any(v > 0 for v in lam):
            raise ValueError("lambdas must be five non-negative weights, at least one positive")
        object.__setattr__(self, "lambdas", lam)


@dataclass
class LossReport:
    nll: float
    dist: float
    grad: float
    eik: float
    ten: float
    total: float

    def as_row(self):
        return [self.nll, self.dist, self.grad, self.eik, self.ten, self.total]


LOSS_COLUMNS = ("nll", "dist", "grad", "eik", "ten", "total")


def loss_l_grad(pred_grad, target_grad):
    """1 - cosine between predicted and target gradients (plain arrays; used in tests/eval)."""
    pred_grad, target_grad = np.asarray(pred_grad, float), np.asarray(target_grad, float)
    return 1.0 - float(pred_grad @ target_grad / (np.linalg.norm(pred_grad) * np.linalg.norm(target_grad)))


def loss_l_eik(pred_grad):
    return abs(float(np.linalg.norm(pred_grad)) - 1.0)


@dataclass
class _Batch:
    Q: np.ndarray
    scene_feats: np.ndarray
    y_d: np.ndarray
    y_g: np.ndarray
    grad_mask: np.ndarray  # records supervised by L_grad
    free_mask: np.ndarray  # records whose query is collision-free
    pair_rec: np.ndarray
    pair_x: np.ndarray
    pair_w: np.ndarray
    record_ids: np.ndarray
    reg_Q: np.ndarray  # rows for eikonal / tension terms
    reg_feats: np.ndarray


def _prepare_batch(model, records, scenes_feats, cfg, rng, robot=None, scenes=None):
    B = len(records)
    dof = model.arch.dof
    Q = np.array([r.q for r in records])
    feats = np.array([scenes_feats[r.scene_id] for r in records])
    y_d = np.array([r.y_d for r in records])
    y_g = np.array([r.y_g if r.y_g is not None else np.zeros(dof) for r in records])
    free = np.array([r.y_g is not None for r in records])
    grad_mask = free & (np.linalg.norm(y_g, axis=1) > 1e-9)
    pair_rec, pair_x, pair_w = [], [], []
    for i, r in enumerate(records):
        S = r.samples
        if len(S) > cfg.nll_samples:
            S = S[rng.choice(len(S), cfg.nll_samples, replace=False)]
        if cfg.target_noise > 0:
            S = S + cfg.target_noise * rng.standard_normal(S.shape)
        pair_rec += [i] * len(S)
        pair_x.append(S)
        pair_w += [1.0 / (len(S) * B)] * len(S)
    reg_Q, reg_feats = Q[free], feats[free]
    if cfg.collocation and robot is not None:
        C = robot.sample(rng, B)
        owners = rng.integers(0, B, B)
        cf = feats[owners]
        keep = np.array([clearance_batch(robot, scenes[records[o].scene_id], c[None])[0] > 0
                         for c, o in zip(C, owners)], dtype=bool)
        reg_Q = np.concatenate([reg_Q, C[keep]])
        reg_feats = np.concatenate([reg_feats, cf[keep]])
    return _Batch(Q, feats, y_d, y_g, grad_mask, free, np.array(pair_rec), np.concatenate(pair_x),
                  np.array(pair_w), np.array([r.record_id for r in records]), reg_Q, reg_feats)


def _loss_graph(model, tensors, batch: _Batch, cfg: TrainingConfig):
    arch = model.arch
    dof = arch.dof
    lam = cfg.lambdas
    B = len(batch.Q)
    h = cfg.hessian_step
    R = len(batch.reg_Q)

    # regression rows: batch queries, regulariser rows, and their +-h shifts for the Hessian
    shifts = [batch.reg_Q + s * h * e for e in np.eye(dof) for s in (1.0, -1.0)]
    rows_Q = np.concatenate([batch.Q, batch.reg_Q] + shifts)
    rows_F = np.concatenate([batch.scene_feats, batch.reg_feats] + [batch.reg_feats] * (2 * dof))
    S = _jet(input_features(arch, rows_Q, rows_F), feature_jacobian(arch, rows_Q))
    S_enc = trunk_jet(model, S, tensors)
    out = ad.reshape(head_jet(model, S_enc, tensors), (dof + 1, -1))
    d = out[0]
    G = ad.transpose(out[1:])  # (rows, dof)

    zero = ad.Tensor(0.0)
    l_dist = ad.mean((d[:B] - batch.y_d) ** 2)

    gi = np.flatnonzero(batch.grad_mask)
    if len(gi):
        Gq = G[gi]
        yg = batch.y_g[gi]
        dot = ad.tsum(Gq * yg, axis=1)
        norm_p = ad.sqrt(ad.tsum(Gq * Gq, axis=1) + 1e-12)
        l_grad = ad.mean(1.0 - dot / (norm_p * np.linalg.norm(yg, axis=1)))
    else:
        l_grad = zero

    if R:
        Gr = G[B:B + R]
        l_eik = ad.mean(ad.tabs(ad.sqrt(ad.tsum(Gr * Gr, axis=1) + 1e-12) - 1.0))
        hess_sq = zero
        base = B + R
        for k in range(dof):
            gp = G[base + (2 * k) * R: base + (2 * k + 1) * R]
            gm = G[base + (2 * k + 1) * R: base + (2 * k + 2) * R]
            row = (gp - gm) * (1.0 / (2.0 * h))
            hess_sq = hess_sq + ad.tsum(row * row, axis=1)
        l_ten = ad.mean(hess_sq)
    else:
        l_eik = l_ten = zero

    if lam[0] > 0:
        x_enc_q = S_enc[0, :B]
        ctx = _dyn_context(model, x_enc_q, tensors)[batch.pair_rec]
        lp, _ = _flow_logprob(model, ctx, ad.Tensor(batch.pair_x), tensors)
        l_nll = -ad.tsum(lp * batch.pair_w)
    else:
        l_nll = zero

    total = lam[0] * l_nll + lam[1] * l_dist + lam[2] * l_grad + lam[3] * l_eik + lam[4] * l_ten
    return total, (l_nll, l_dist, l_grad, l_eik, l_ten)


def _report(total, parts) -> LossReport:
    vals = [float(p.data) for p in parts]
    return LossReport(*vals, float(total.data))


def compute_losses(model: FlowModel, records, cfg: TrainingConfig, scenes, rng=None, robot=None,
                   with_grads=False):
    """Evaluate every loss term on a batch of records.

    ``scenes`` maps scene ids to ``Scene``. Collocation rows are drawn from
    ``robot``'s joint box when a robot is given.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    feats = {sid: scene_features(model.arch, s) for sid, s in scenes.items()}
    batch = _prepare_batch(model, records, feats, cfg, rng, robot, scenes)
    tensors = {k: ad.Tensor(v, requires_grad=with_grads) for k, v in model.params.items()}
    if with_grads:
        total, parts = _loss_graph(model, tensors, batch, cfg)
    else:
        with ad.no_grad():
            total, parts = _loss_graph(model, tensors, batch, cfg)
    report = _report(total, parts)
    if not np.isfinite(report.total):
        raise NonFiniteLossError(f"non-finite loss {report}", batch.record_ids)
    if not with_grads:
        return report
    names = list(model.params)
    grads = ad.grad(total, [tensors[k] for k in names])
    return report, dict(zip(names, grads))


# -- training ----------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def learning_rate(cfg: TrainingConfig, step: int) -> float:
    return cfg.lr * cfg.lr_decay ** (step // cfg.decay_every)


@dataclass
class TrainState:
    model: FlowModel
    optimizer: Adam
    step: int = 0
    history: list = field(default_factory=list)


def new_train_state(model: FlowModel, cfg: TrainingConfig) -> TrainState:
    return TrainState(model.copy(), Adam(model.params, cfg.beta1, cfg.beta2, cfg.adam_eps))


def train(model: FlowModel, dataset, cfg: TrainingConfig, state: TrainState | None = None,
          checkpoint_path=None, progress=None):
    """Adam on the weighted loss with step decay and global-norm clipping.

    Returns ``(trained_model, history)``; ``history`` is a list of
    ``LossReport``, one per step. Pass ``state`` to resume.
    """
    records = list(dataset)
    if not records:
        raise ValueError("dataset is empty")
    scenes = dataset.scenes
    robot = dataset.robot
    feats = {sid: scene_features(model.arch, s) for sid, s in scenes.items()}
    if state is None:
        state = new_train_state(model, cfg)
    params = state.model.params
    names = list(params)
    while state.step < cfg.steps:
        step = state.step
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step]))
        pick = rng.choice(len(records), size=min(cfg.batch_size, len(records)), replace=False)
        batch = _prepare_batch(state.model, [records[i] for i in np.sort(pick)], feats, cfg, rng, robot, scenes)
        tensors = {k: ad.Tensor(params[k], requires_grad=True) for k in names}
        try:
            total, parts = _loss_graph(state.model, tensors, batch, cfg)
        except DivergenceError as exc:
            raise NonFiniteLossError(f"flow diverged at step {step}: {exc}", batch.record_ids,
                                     state.model.copy(), checkpoint_path) from exc
        report = _report(total, parts)
        if not np.isfinite(report.total):
            raise NonFiniteLossError(f"non-finite loss at step {step}: {report}", batch.record_ids,
                                     state.model.copy(), checkpoint_path)
        grads = ad.grad(total, [tensors[k] for k in names])
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if cfg.clip_norm and gnorm > cfg.clip_norm:
            grads = [g * (cfg.clip_norm / gnorm) for g in grads]
        state.optimizer.step(params, dict(zip(names, grads)), learning_rate(cfg, step))
        state.history.append(report)
        state.step += 1
        if progress is not None:
            progress(state.step, report)
        if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state.model, checkpoint_path, cfg, state=state)
    return state.model, state.history


def smoothed(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, float)
    if len(v) < window:
        return v.copy()
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"CSFLOWCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: FlowModel, path, cfg: TrainingConfig | None = None, seed: int | None = None,
                    state: TrainState | None = None, extra: dict | None = None) -> None:
    """Header JSON, float64 tensors in declared order, optional optimizer state, sha256 trailer."""
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(model.arch),
        "ode": {"scheme": model.arch.ode_scheme, "steps": model.arch.ode_steps},
        "training": asdict(cfg) if cfg is not None else None,
        "seed": seed if seed is not None else (cfg.seed if cfg is not None else None),
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
        "optimizer_step": state.optimizer.t if state is not None else None,
        "train_step": state.step if state is not None else None,
        "history": [r.as_row() for r in state.history] if state is not None else None,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = bytearray(CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hb)) + hb)
    for v in model.params.values():
        body += np.ascontiguousarray(v, dtype="<f8").tobytes()
    if state is not None:
        for k in model.params:
            body += np.ascontiguousarray(state.optimizer.m[k], dtype="<f8").tobytes()
            body += np.ascontiguousarray(state.optimizer.v[k], dtype="<f8").tobytes()
    body += hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(path, with_state: bool = False):
    """Returns ``model`` or, with ``with_state``, ``(model, header, state_or_None)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise ValueError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    arch = Architecture(**header["arch"])
    off = 20 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(data, "<f8", n, off).reshape(shape).copy()
        off += 8 * n
    model = FlowModel(arch, params)
    if not with_state:
        return model
    state = None
    if header.get("optimizer_step") is not None:
        opt = Adam(params)
        for name, shape in header["params"]:
            n = int(np.prod(shape)) if shape else 1
            opt.m[name] = np.frombuffer(data, "<f8", n, off).reshape(shape).copy()
            off += 8 * n
            opt.v[name] = np.frombuffer(data, "<f8", n, off).reshape(shape).copy()
            off += 8 * n
        opt.t = header["optimizer_step"]
        cfg = header["training"]
        if cfg:
            opt.beta1, opt.beta2, opt.eps = cfg["beta1"], cfg["beta2"], cfg["adam_eps"]
        history = [LossReport(*row) for row in header["history"] or []]
        state = TrainState(model, opt, header["train_step"], history)
    return model, header, state


def training_config_from_header(header) -> TrainingConfig | None:
    cfg = header.get("training")
    if not cfg:
        return None
    cfg = dict(cfg)
    cfg["lambdas"] = tuple(cfg["lambdas"])
    return TrainingConfig(**cfg)


def with_steps(cfg: TrainingConfig, steps: int) -> TrainingConfig:
    return replace(cfg, steps=steps)
