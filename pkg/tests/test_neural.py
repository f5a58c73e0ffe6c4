import math

import numpy as np
import pytest

from cspacedist import fixtures as fx
from cspacedist import neural as nn
from cspacedist.geometry import Scene
from cspacedist.sampling import Dataset, SamplerConfig, TrainingRecord

ROBOT = fx.two_link()
SCENE = fx.disc_scene()
LOG_2PI = math.log(2 * math.pi)
SMALL = nn.Architecture(dof=2, trunk_width=16, trunk_depth=2, dyn_width=16, dyn_depth=3)


def std_normal_logpdf(x):
    x = np.asarray(x, float)
    return -0.5 * float(x @ x) - 0.5 * len(x) * LOG_2PI


def random_model(seed, arch=SMALL, scale=1.0):
    """Every parameter random (biases too), so no identity shortcuts hide errors."""
    m = nn.init_model(arch, seed, dynamics_out_scale=scale)
    rng = np.random.default_rng(seed + 1000)
    for k, v in m.params.items():
        if k.endswith(".b"):
            m.params[k] = rng.normal(0, 0.3, v.shape)
    return m


def record(i, q, samples, scene_id=SCENE.id):
    q = np.asarray(q, float)
    S = np.atleast_2d(np.asarray(samples, float))
    diff = q - S
    yg = np.mean(diff / np.linalg.norm(diff, axis=1)[:, None], axis=0)
    return TrainingRecord(i, q, scene_id, S, float(np.mean(np.linalg.norm(diff, axis=1))), yg)


def toy_dataset(records, scene=SCENE):
    return Dataset(ROBOT, {scene.id: scene}, SamplerConfig(), list(records))


# -- encoding ----------------------------------------------------------------

def test_encoding_passthrough_without_frequencies():
    arch = nn.Architecture(dof=2, n_freq=0, max_obstacles=1)
    assert arch.n_features == 6
    X = nn.input_features(arch, [[0.3, -0.2]], nn.scene_features(arch, SCENE))
    c = SCENE.obstacles[0]
    np.testing.assert_allclose(X[0], [0.3, -0.2, c.center[0], c.center[1], c.radius, 1.0])
    assert nn.encode_input(nn.init_model(arch, 0), [0.3, -0.2], SCENE).shape == (1, arch.trunk_width)


def test_encoding_sin_cos_at_zero():
    arch = nn.Architecture(dof=2, n_freq=3)
    X = nn.input_features(arch, [[0.0, 0.0]], np.zeros(4))[0]
    np.testing.assert_array_equal(X[2:8], np.zeros(6))
    np.testing.assert_array_equal(X[8:14], np.ones(6))


def test_feature_jacobian_matches_finite_differences():
    arch = nn.Architecture(dof=2, n_freq=4)
    q = np.array([[0.4, -1.1]])
    J = nn.feature_jacobian(arch, q)
    h = 1e-6
    for j in range(2):
        e = np.eye(2)[j] * h
        fd = (nn.input_features(arch, q + e, np.zeros(4)) - nn.input_features(arch, q - e, np.zeros(4))) / (2 * h)
        np.testing.assert_allclose(J[j], fd, atol=1e-8)


def test_padded_slots_are_inert_and_order_free():
    arch = nn.Architecture(dof=2, max_obstacles=3)
    m = random_model(0, nn.Architecture(dof=2, max_obstacles=3, trunk_width=16, trunk_depth=2,
                                        dyn_width=16, dyn_depth=3))
    one = Scene.discs([(1.0, 0.5, 0.2)])
    f = nn.scene_features(arch, one).reshape(3, 4)
    assert np.all(f[1:] == 0)
    # swapping two empty padded slots changes nothing
    swapped = f[[0, 2, 1]].ravel()
    q = [0.2, 0.1]
    np.testing.assert_array_equal(nn.encode_input(m, q, f.ravel()), nn.encode_input(m, q, swapped))


def test_too_many_obstacles():
    with pytest.raises(nn.TooManyObstaclesError):
        nn.scene_features(nn.Architecture(dof=2, max_obstacles=1), fx.two_mode_scene())


# -- flow --------------------------------------------------------------------

def test_identity_flow():
    m = nn.init_model(nn.Architecture(dof=2), 3)
    z0 = np.array([[0.3, -1.2], [2.0, 0.5]])
    np.testing.assert_array_equal(nn.cnf_sample(m, [0.1, 0.2], SCENE, z0), z0)
    x = np.array([0.7, -0.4])
    assert nn.cnf_logprob(m, [0.1, 0.2], SCENE, x) == pytest.approx(std_normal_logpdf(x), abs=1e-12)


def test_translation_flow():
    arch = nn.Architecture(dof=2)
    m = nn.init_model(arch, 3)
    c = np.array([0.5, -0.25])
    m.params[f"dyn.{arch.dyn_depth - 1}.b"] = c.copy()
    z0 = np.array([0.3, -1.2])
    np.testing.assert_allclose(nn.cnf_sample(m, [0.1, 0.2], SCENE, z0), z0 + c, atol=1e-12)
    x = np.array([0.7, -0.4])
    assert nn.cnf_logprob(m, [0.1, 0.2], SCENE, x) == pytest.approx(std_normal_logpdf(x - c), abs=1e-6)


def test_forward_backward_round_trip():
    for seed in range(5):
        m = random_model(seed)
        z0 = np.random.default_rng(seed).standard_normal((16, 2))
        q = ROBOT.sample(np.random.default_rng(seed), 1)[0]
        x = nn.cnf_sample(m, q, SCENE, z0)
        assert np.abs(x - z0).max() > 1e-2  # the flow actually moves points
        np.testing.assert_allclose(nn.cnf_inverse(m, q, SCENE, x), z0, atol=1e-3)


def test_exact_trace_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-5
    for seed in range(5):
        m = random_model(seed)
        q = ROBOT.sample(rng, 1)[0]
        z = rng.standard_normal((4, 2))
        t = float(rng.uniform())
        _, tr = nn.dynamics_field(m, q, SCENE, z, t, with_trace=True)
        fd = np.zeros(len(z))
        for k in range(2):
            e = np.eye(2)[k] * h
            fd += (nn.dynamics_field(m, q, SCENE, z + e, t)[:, k] - nn.dynamics_field(m, q, SCENE, z - e, t)[:, k]) / (2 * h)
        rel = np.abs(tr - fd) / np.maximum(np.abs(fd), 1e-3)
        assert rel.max() < 1e-5


def test_density_normalises_for_random_flow():
    m = random_model(4, scale=0.5)
    ax = np.linspace(-7, 7, 141)
    G = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    p = np.exp(nn.cnf_logprob(m, [0.3, -0.5], SCENE, G)).reshape(141, 141)
    mass = np.trapezoid(np.trapezoid(p, ax, axis=1), ax)
    assert mass == pytest.approx(1.0, abs=0.01)


# -- regression head -----------------------------------------------------------

def test_predict_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    h = 1e-4
    for seed in range(20):
        m = random_model(seed, nn.Architecture(dof=2))
        q = ROBOT.sample(rng, 1)[0] * 0.95
        sc = Scene.discs([(*rng.uniform(-1.5, 1.5, 2), rng.uniform(0.1, 0.5))])
        g = nn.predict_gradient(m, q, sc)
        fd = np.array([(nn.predict_distance(m, q + h * e, sc) - nn.predict_distance(m, q - h * e, sc)) / (2 * h)
                       for e in np.eye(2)])
        assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-6) < 1e-4
        np.testing.assert_allclose(nn.predict_gradient_forward(m, q[None], sc)[0], g, rtol=1e-10, atol=1e-12)


def test_untrained_outputs_finite():
    m = nn.init_model(nn.Architecture(dof=2), 0)
    Q = ROBOT.sample(np.random.default_rng(0), 10)
    assert np.all(np.isfinite(nn.predict_distance(m, Q, SCENE)))
    assert np.all(np.isfinite(nn.predict_gradient(m, Q, SCENE)))
    a = nn.learned_direct(m, Q[0], SCENE)
    assert a.distance >= 0 and a.provenance.value == "learned_direct"


def test_monte_carlo_single_sample_and_seed():
    m = random_model(2)
    g = nn.monte_carlo_gradient(m, [0.4, 0.3], SCENE, 1, np.random.default_rng(0))
    assert np.linalg.norm(g) == pytest.approx(1.0)
    a = nn.monte_carlo_gradient(m, [0.4, 0.3], SCENE, 32, np.random.default_rng(5))
    b = nn.monte_carlo_gradient(m, [0.4, 0.3], SCENE, 32, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        nn.monte_carlo_samples(m, [0.4, 0.3], SCENE, 0, np.random.default_rng(0))


def test_monte_carlo_all_coincident_is_undefined():
    # identity flow from a prior that we force onto q: every sample lands on the query
    m = nn.init_model(nn.Architecture(dof=2), 0)

    class Fixed:
        def standard_normal(self, shape):
            return np.broadcast_to([0.4, 0.3], shape).copy()

    a = nn.monte_carlo_field(m, [0.4, 0.3], SCENE, 4, Fixed())
    assert a.gradient is None and a.distance == 0.0


def test_monte_carlo_batch_matches_single():
    m = random_model(1)
    Q = ROBOT.sample(np.random.default_rng(1), 3)
    d, G, ok = nn.monte_carlo_field_batch(m, Q, SCENE, 16, np.random.default_rng(9))
    Z = np.random.default_rng(9).standard_normal((3, 16, 2))
    for i, q in enumerate(Q):
        S = nn.cnf_sample(m, q, SCENE, Z[i])
        diff = q - S
        np.testing.assert_allclose(d[i], np.linalg.norm(diff, axis=1).mean(), rtol=1e-9)
        np.testing.assert_allclose(G[i], (diff / np.linalg.norm(diff, axis=1)[:, None]).mean(0), atol=1e-9)
    assert ok.all()


# -- losses --------------------------------------------------------------------

def test_loss_term_examples():
    assert nn.loss_l_grad([2.0, 0.0], [1.0, 0.0]) == pytest.approx(0.0)
    assert nn.loss_l_grad([0.0, 1.0], [1.0, 0.0]) == pytest.approx(1.0)
    assert nn.loss_l_grad([-1.0, 0.0], [3.0, 0.0]) == pytest.approx(2.0)
    assert nn.loss_l_eik([0.6, 0.8]) == pytest.approx(0.0)
    assert nn.loss_l_eik([0.0, 2.0]) == pytest.approx(1.0)


def test_config_rejects_bad_lambdas():
    with pytest.raises(ValueError):
        nn.TrainingConfig(lambdas=(0, 0, 0, 0, 0))
    with pytest.raises(ValueError):
        nn.TrainingConfig(lambdas=(1, -1, 0, 0, 0))


def _toy_records():
    rng = np.random.default_rng(0)
    recs = []
    for i, q in enumerate(ROBOT.sample(rng, 6)):
        recs.append(record(i, q, q + rng.normal(0, 0.5, (3, 2))))
    return recs


def test_weight_isolation_and_recombination():
    m = random_model(0)
    recs = _toy_records()
    scenes = {SCENE.id: SCENE}
    full = nn.compute_losses(m, recs, nn.TrainingConfig(), scenes, np.random.default_rng(0), ROBOT)
    lam = nn.TrainingConfig().lambdas
    assert full.total == pytest.approx(sum(l * v for l, v in zip(lam, full.as_row()[:5])), abs=1e-6)
    only = nn.compute_losses(m, recs, nn.TrainingConfig(lambdas=(1, 0, 0, 0, 0)), scenes,
                             np.random.default_rng(0), ROBOT)
    assert only.total == only.nll
    assert only.nll == pytest.approx(full.nll, abs=1e-12)


def test_colliding_records_skip_gradient_terms():
    m = random_model(0)
    q = np.array([0.0, 0.0])
    rec = TrainingRecord(0, q, SCENE.id, q[None].copy(), 0.0, None)
    rep = nn.compute_losses(m, [rec], nn.TrainingConfig(collocation=False), {SCENE.id: SCENE},
                            np.random.default_rng(0))
    assert rep.grad == 0.0 and rep.eik == 0.0 and rep.ten == 0.0
    assert rep.dist == pytest.approx(nn.predict_distance(m, q, SCENE) ** 2)
    assert np.isfinite(rep.nll)


def test_loss_parameter_gradients_match_finite_differences():
    m = random_model(3)
    recs = _toy_records()[:3]
    scenes = {SCENE.id: SCENE}
    cfg = nn.TrainingConfig(lambdas=(1.0, 1.0, 0.5, 0.1, 0.01))

    def total(model):
        return nn.compute_losses(model, recs, cfg, scenes, np.random.default_rng(4), ROBOT).total

    _, grads = nn.compute_losses(m, recs, cfg, scenes, np.random.default_rng(4), ROBOT, with_grads=True)
    rng = np.random.default_rng(0)
    h = 1e-6
    for name in ["trunk.0.W", "trunk.1.b", "head.W", "dyn.0.Wz", "dyn.0.Wt", "dyn.0.Wx", "dyn.2.W", "dyn.1.b"]:
        idx = tuple(rng.integers(0, n) for n in m.params[name].shape)
        up, dn = m.copy(), m.copy()
        up.params[name][idx] += h
        dn.params[name][idx] -= h
        fd = (total(up) - total(dn)) / (2 * h)
        assert grads[name][idx] == pytest.approx(fd, rel=1e-4, abs=1e-6), name


def test_non_finite_loss_reports_record():
    m = random_model(0)
    recs = _toy_records()[:2]
    recs[1] = TrainingRecord(41, recs[1].q, SCENE.id, recs[1].samples, float("nan"), recs[1].y_g)
    with pytest.raises(nn.NonFiniteLossError) as err:
        nn.compute_losses(m, recs, nn.TrainingConfig(), {SCENE.id: SCENE}, np.random.default_rng(0), ROBOT)
    assert 41 in list(err.value.record_ids)
    with pytest.raises(nn.NonFiniteLossError) as err:
        nn.train(m, toy_dataset(recs), nn.TrainingConfig(steps=3, batch_size=2))
    assert err.value.model is not None


# -- training ------------------------------------------------------------------

def test_single_record_overfit():
    q = np.array([0.9, 1.4])
    rec = record(0, q, [[0.5, 1.0]])
    cfg = nn.TrainingConfig(lambdas=(0, 1, 0, 0, 0), steps=2000, batch_size=1, collocation=False, decay_every=10**9)
    m, hist = nn.train(nn.init_model(SMALL, 0), toy_dataset([rec]), cfg)
    assert hist[-1].dist < 1e-4


def test_nll_only_training_concentrates_samples():
    q = np.array([0.9, 1.4])
    target = np.array([0.5, 1.0])
    rec = record(0, q, [target])
    cfg = nn.TrainingConfig(lambdas=(1, 0, 0, 0, 0), steps=100, batch_size=1, collocation=False, lr=3e-3)
    z = np.random.default_rng(0).standard_normal((64, 2))
    m = nn.init_model(SMALL, 0)
    state = nn.new_train_state(m, cfg)
    dists = []
    for stop in (0, 100, 200, 300):
        m, _ = nn.train(m, toy_dataset([rec]), nn.with_steps(cfg, stop), state=state)
        dists.append(np.linalg.norm(nn.cnf_sample(m, q, SCENE, z) - target, axis=1).mean())
    assert all(b < a for a, b in zip(dists, dists[1:])), dists


def test_seed_determinism_and_resume(tmp_path):
    ds = toy_dataset(_toy_records())
    cfg = nn.TrainingConfig(steps=6, batch_size=4, seed=3)
    a, ha = nn.train(nn.init_model(SMALL, 1), ds, cfg)
    b, _ = nn.train(nn.init_model(SMALL, 1), ds, cfg)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    # stop at 3, checkpoint, reload, continue: identical to the uninterrupted run
    state = nn.new_train_state(nn.init_model(SMALL, 1), cfg)
    nn.train(state.model, ds, nn.with_steps(cfg, 3), state=state)
    path = tmp_path / "half.ck"
    nn.save_checkpoint(state.model, path, cfg, state=state)
    _, header, st = nn.load_checkpoint(path, with_state=True)
    assert header["train_step"] == 3
    c, hc = nn.train(st.model, ds, nn.training_config_from_header(header), state=st)
    for k in a.params:
        assert a.params[k].tobytes() == c.params[k].tobytes()
    assert [r.as_row() for r in hc] == [r.as_row() for r in ha]


def test_checkpoint_roundtrip_and_corruption(tmp_path):
    m = random_model(5)
    path = tmp_path / "m.ck"
    nn.save_checkpoint(m, path, nn.TrainingConfig(), seed=5)
    back = nn.load_checkpoint(path)
    assert back.arch == m.arch
    assert list(back.params) == list(m.params)
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()
    raw = bytearray(path.read_bytes())
    raw[40] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        nn.load_checkpoint(path)


def test_learning_rate_schedule():
    cfg = nn.TrainingConfig()
    assert nn.learning_rate(cfg, 0) == 1e-3
    assert nn.learning_rate(cfg, 1999) == 1e-3
    assert nn.learning_rate(cfg, 2000) == 5e-4
    assert nn.learning_rate(cfg, 4999) == 2.5e-4
