import numpy as np
import pytest

from cspacedist import fixtures as fx
from cspacedist.field import FieldAnswer
from cspacedist.geometry import Scene, clearance_batch, robot_scene_distance
from cspacedist.oracle import oracle_cdf, oracle_gradient
from cspacedist.planner import (
    BaselineProvider,
    OracleProvider,
    SdfPullbackProvider,
    TrajOptConfig,
    boundary_samples,
    field_step,
    optimize_trajectory,
    project_to_contact,
    projection_trials,
    run_projection_suite,
    summarize,
    trajectory_instances,
)

ROBOT = fx.two_link()


@pytest.fixture(scope="module")
def button():
    scene = fx.button_scene((1.2, 0.9), 0.1, id="b")
    return scene, OracleProvider.build(ROBOT, scene, 256)


def test_field_step_normalisation_threshold():
    big = FieldAnswer(2.0, np.array([0.0, 0.5]), "empirical")
    np.testing.assert_allclose(field_step(big), [0.0, 2.0])
    small = FieldAnswer(2.0, np.array([0.0, 0.05]), "empirical")
    np.testing.assert_allclose(field_step(small), [0.0, 0.1])


def test_contact_at_start_takes_no_steps(button):
    scene, prov = button
    rng = np.random.default_rng(0)
    Q = ROBOT.sample(rng, 4000)
    c = clearance_batch(ROBOT, scene, Q)
    q0 = Q[np.argmin(np.where(c > 0, c, np.inf))]
    assert robot_scene_distance(ROBOT, scene, q0) <= 1e-2
    res = project_to_contact(prov, ROBOT, scene, q0)
    assert res.success and res.steps == 0


def test_oracle_projection_succeeds_and_descends(button):
    scene, prov = button
    grid = prov.grid
    for tr in projection_trials(ROBOT, [scene], 15, seed=2):
        res = project_to_contact(prov, ROBOT, scene, tr.q0)
        assert res.success
        assert robot_scene_distance(ROBOT, scene, res.final_q) <= 1e-2
        d = [oracle_cdf(grid, q).d_min for q in res.trace]
        for a, b in zip(d, d[1:]):
            if a > 0:
                assert b < a + grid.cell_diagonal


def test_undefined_gradients_fail_after_three():
    class Blind:
        def __call__(self, q):
            return FieldAnswer(1.0, None, "oracle")

    scene = fx.button_scene((1.2, 0.9), 0.1)
    res = project_to_contact(Blind(), ROBOT, scene, [-2.0, 0.5])
    assert not res.success and res.steps == 3 and res.failed_steps == 3


def test_step_budget_exhaustion():
    class Still:
        def __call__(self, q):
            return FieldAnswer(0.0, np.array([1.0, 0.0]), "oracle")

    scene = fx.button_scene((1.2, 0.9), 0.1)
    res = project_to_contact(Still(), ROBOT, scene, [-2.0, 0.5], max_steps=7)
    assert not res.success and res.steps == 7


def test_oracle_batch_matches_single(button):
    scene, prov = button
    Q = ROBOT.sample(np.random.default_rng(3), 20)
    d, G, ok = prov.batch(Q)
    for i, q in enumerate(Q):
        a = oracle_cdf(prov.grid, q)
        assert d[i] == pytest.approx(a.d_min, abs=1e-12)
        if ok[i]:
            np.testing.assert_allclose(G[i], oracle_gradient(prov.grid, q), atol=1e-12)


def test_baseline_batch_matches_single():
    scene = fx.disc_scene()
    B = boundary_samples(ROBOT, scene, 32, np.random.default_rng(0))
    assert np.all(np.abs(clearance_batch(ROBOT, scene, B)) <= 1e-6)
    prov = BaselineProvider(B)
    Q = ROBOT.sample(np.random.default_rng(1), 10)
    d, G, ok = prov.batch(Q)
    for i, q in enumerate(Q):
        a = prov(q)
        assert d[i] == a.distance
        np.testing.assert_allclose(G[i], a.gradient)


def test_empty_scene_recovers_straight_line():
    scene = Scene()
    prov = OracleProvider.build(ROBOT, scene, 32)
    a, b = np.array([-1.0, 0.5]), np.array([1.2, -0.8])
    res = optimize_trajectory(prov, ROBOT, scene, a, b, n_waypoints=12,
                             cfg=TrajOptConfig(iterations=600, early_stop=False))
    assert res.success and res.tracking_error < 0.02
    u = (b - a) / np.linalg.norm(b - a)
    off = (res.trajectory - a) - np.outer((res.trajectory - a) @ u, u)
    assert np.abs(off).max() < 1e-9
    steps = np.linalg.norm(np.diff(res.trajectory, axis=0), axis=1)
    assert steps.max() - steps.min() < 0.02


def test_oracle_solves_narrow_gap_instances():
    scene = fx.narrow_gap_scene()
    prov = OracleProvider.build(ROBOT, scene, 256)
    insts = trajectory_instances(ROBOT, scene, 6, seed=1)
    wins = 0
    for inst in insts:
        res = optimize_trajectory(prov, ROBOT, scene, inst.q_start, inst.q_target)
        if res.success:
            assert res.collision_free and res.tracking_error <= 0.05
            assert np.all(clearance_batch(ROBOT, scene, res.trajectory) > 0)
            wins += 1
    assert wins >= 5


def test_early_stop_ends_at_first_feasible_iterate():
    scene = fx.narrow_gap_scene()
    prov = OracleProvider.build(ROBOT, scene, 256)
    cfg = TrajOptConfig()
    for inst in trajectory_instances(ROBOT, scene, 3, seed=2):
        early = optimize_trajectory(prov, ROBOT, scene, inst.q_start, inst.q_target, cfg=cfg)
        full = optimize_trajectory(prov, ROBOT, scene, inst.q_start, inst.q_target,
                                   cfg=TrajOptConfig(early_stop=False))
        assert full.opt_steps == cfg.iterations
        if early.opt_steps < cfg.iterations:
            assert early.tracking_error <= cfg.goal_tol
            d, _, _ = prov.batch(early.trajectory[1:])
            assert np.all(d >= cfg.margin)
            assert early.success


def test_colliding_start_rejected():
    scene = fx.disc_scene()
    with pytest.raises(ValueError):
        optimize_trajectory(SdfPullbackProvider(ROBOT, scene), ROBOT, scene, [0.0, 0.0], [1.0, 1.0])


def test_suite_reproducible_and_summary():
    scenes = fx.engineered_button_scenes(ROBOT, n=2)
    trials = projection_trials(ROBOT, scenes, 5, seed=4)
    again = projection_trials(ROBOT, scenes, 5, seed=4)
    assert all(np.array_equal(a.q0, b.q0) for a, b in zip(trials, again))
    providers = {"sdf_pullback": lambda s: SdfPullbackProvider(ROBOT, s),
                 "baseline_cdf": lambda s: BaselineProvider(boundary_samples(ROBOT, s, 64, np.random.default_rng(0)))}
    r1 = run_projection_suite(trials, providers, ROBOT)
    r2 = run_projection_suite(trials, providers, ROBOT)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]  # noqa: E731
    assert strip(r1) == strip(r2)
    s = summarize(r1)
    for name in providers:
        sub = [r for r in r1 if r["provider"] == name]
        assert s[name]["n"] == 10
        assert s[name]["success_rate"] == pytest.approx(np.mean([r["success"] for r in sub]))
        assert s[name]["mean_steps"] == pytest.approx(np.mean([r["steps"] for r in sub]))
