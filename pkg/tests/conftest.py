"""Session fixtures: the three trained models the acceptance checks share.

Each model follows the desk recipe (2000 queries, 5000 Adam steps) and takes
15 to 35 minutes on one core, mostly dataset generation. Set
``CSPACEDIST_TEST_ARTIFACTS`` to a directory to keep datasets and checkpoints
between sessions; timings are stored next to them so runtime checks still see
the original cost.
"""
import json
import os
import time
from pathlib import Path

import pytest

from cspacedist import fixtures as fx
from cspacedist import neural, sampling

ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def _cache_dir():
    d = os.environ.get("CSPACEDIST_TEST_ARTIFACTS")
    if not d:
        return None
    Path(d).mkdir(parents=True, exist_ok=True)
    return Path(d)


def trained_run(name, scenes, n_queries, tmp_factory):
    """Dataset + trained model for ``scenes``; CPU seconds for both stages."""
    robot = fx.two_link()
    base = _cache_dir() or tmp_factory.mktemp(name)
    ds_path, ck_path, t_path = base / f"{name}.data", base / f"{name}.ck", base / f"{name}.times.json"
    if ds_path.exists() and ck_path.exists() and t_path.exists():
        return {"dataset": sampling.load_dataset(ds_path), "model": neural.load_checkpoint(ck_path),
                **json.loads(t_path.read_text())}
    t0 = time.process_time()
    ds = sampling.build_dataset(robot, scenes, n_queries, sampling.SamplerConfig(rng_seed=0))
    t1 = time.process_time()
    k = max(len(s.obstacles) for s in scenes)
    model = neural.init_model(neural.Architecture(dof=robot.dof, max_obstacles=k), 0)
    model, _ = neural.train(model, ds, neural.TrainingConfig())
    t2 = time.process_time()
    times = {"gen_cpu": t1 - t0, "train_cpu": t2 - t1}
    sampling.save_dataset(ds, ds_path)
    neural.save_checkpoint(model, ck_path, neural.TrainingConfig())
    t_path.write_text(json.dumps(times))
    return {"dataset": ds, "model": model, **times}


@pytest.fixture(scope="session")
def disc_run(tmp_path_factory):
    return trained_run("disc", [fx.disc_scene()], 2000, tmp_path_factory)


@pytest.fixture(scope="session")
def button_run(tmp_path_factory):
    scenes = fx.engineered_button_scenes(fx.two_link())
    return trained_run("buttons", scenes, 2000 // len(scenes), tmp_path_factory)


@pytest.fixture(scope="session")
def gap_run(tmp_path_factory):
    return trained_run("narrow_gap", [fx.narrow_gap_scene()], 2000, tmp_path_factory)
