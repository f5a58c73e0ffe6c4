"""Command line: ``cspacedist <verb> [options]``.

Verbs: oracle-build, gen-data, train, eval-field, bench, export. Every verb
accepts ``--config FILE.json`` whose keys mirror the long options (dashes
become underscores); explicit flags win over the file. ``--threads 1`` (the
default) pins BLAS to one thread, which makes every output reproducible
bit for bit. ``CSPACEDIST_OUT`` only sets the default output directory.

Problems are JSON files (see ``cspacedist.io``) or built-in fixtures named
``fixture:disc``, ``fixture:two_mode``, ``fixture:narrow_gap``,
``fixture:buttons`` and ``fixture:empty``.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, fixtures, neural, oracle, planner, sampling
from .field import cosine
from .io import load_problem

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA, EXIT_NAN = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


# -- shared plumbing -------------------------------------------------------------

def resolve_problem(spec: str):
    if spec.startswith("fixture:"):
        return fixtures.named_problem(spec.split(":", 1)[1])
    if not Path(spec).is_file():
        raise UsageError(f"problem file not found: {spec}")
    return load_problem(spec)


def pick_scenes(scenes, scene_id):
    if scene_id is None:
        return scenes
    hit = [s for s in scenes if s.id == scene_id]
    if not hit:
        raise UsageError(f"scene {scene_id!r} not in problem (have {[s.id for s in scenes]})")
    return hit


def _need_file(path, what):
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _out_path(args, path):
    p = Path(path)
    if not p.is_absolute():
        p = Path(args.out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def run_config(args) -> dict:
    skip = {"func", "config", "out_dir"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def header_lines(args) -> list:
    cfg = run_config(args)
    return [f"# cspacedist {__version__}", f"# command {args.command}",
            f"# config {json.dumps(cfg, sort_keys=True)}", f"# seed {cfg.get('seed')}"]


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, args, columns, rows):
    with open(path, "w", newline="") as fh:
        for line in header_lines(args):
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path):
    """Rows of a CSV written by this tool, skipping ``#`` header lines."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path, args, payload):
    meta = {"version": __version__, "command": args.command, "config": run_config(args),
            "seed": getattr(args, "seed", None)}
    Path(path).write_text(json.dumps({"meta": meta, **payload}, indent=2, sort_keys=True) + "\n")


def _limit_threads(n):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# -- verbs ---------------------------------------------------------------------

def cmd_oracle_build(args):
    robot, scenes = resolve_problem(args.problem)
    out = _out_path(args, args.out)
    reports = {}
    for scene in pick_scenes(scenes, args.scene_id):
        path = out if len(scenes) == 1 or args.scene_id else out.with_name(f"{out.stem}.{scene.id}{out.suffix}")
        grid = oracle.build_collision_grid(robot, scene, args.resolution)
        oracle.save_grid(grid, path)
        reports[scene.id] = {"path": str(path.name), "colliding_fraction": grid.colliding_fraction,
                             "cell_diagonal": grid.cell_diagonal, "resolution": list(grid.resolution)}
    write_json(out.with_suffix(out.suffix + ".report.json"), args, {"grids": reports})
    return EXIT_OK


def sampler_config(args) -> sampling.SamplerConfig:
    return sampling.SamplerConfig(n_global=args.n_global, n_local=args.n_local, radius=args.radius,
                                  equality_tol_rel=args.equality_tol_rel, max_opt_iters=args.max_opt_iters,
                                  rng_seed=args.seed)


def cmd_gen_data(args):
    robot, scenes = resolve_problem(args.problem)
    scenes = pick_scenes(scenes, args.scene_id)
    out = _out_path(args, args.out)
    cfg = sampler_config(args)
    busy = [s for s in scenes if s.obstacles]
    report = {"free_scenes": [s.id for s in scenes if not s.obstacles]}
    if not busy:
        ds = sampling.Dataset(robot, {s.id: s for s in scenes}, cfg)
        report.update(free_scene=True, n_records=0, dropped=0)
    else:
        try:
            ds = sampling.build_dataset(robot, busy, args.n_queries, cfg)
        except sampling.DatasetQualityError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        counts = np.array([len(r.samples) for r in ds.records])
        hist = np.bincount(counts, minlength=cfg.max_samples + 1)
        yd = np.array([r.y_d for r in ds.records])
        report.update(free_scene=False, n_records=len(ds), dropped=ds.dropped,
                      drop_rate=ds.dropped / (len(ds) + ds.dropped),
                      sample_count_histogram={str(k): int(v) for k, v in enumerate(hist) if v},
                      colliding_queries=int(sum(r.colliding for r in ds.records)),
                      y_d={"min": float(yd.min()), "mean": float(yd.mean()), "max": float(yd.max())})
        if args.oracle_check:
            errs = []
            for sid, scene in ds.scenes.items():
                grid = oracle.build_collision_grid(robot, scene, args.oracle_check)
                recs = [r for r in ds.records if r.scene_id == sid and not r.colliding]
                if recs:
                    d_or = oracle.oracle_distance_batch(grid, np.array([r.q for r in recs]))
                    errs.append(np.array([r.y_d for r in recs]) - d_or)
            e = np.concatenate(errs) if errs else np.zeros(0)
            report["oracle_check"] = {"resolution": args.oracle_check, "n": int(e.size),
                                      "mean_error": float(e.mean()) if e.size else 0.0,
                                      "mean_abs_error": float(np.abs(e).mean()) if e.size else 0.0,
                                      "max_abs_error": float(np.abs(e).max()) if e.size else 0.0}
    sampling.save_dataset(ds, out)
    write_json(out.with_suffix(out.suffix + ".report.json"), args, report)
    return EXIT_OK


def training_config(args) -> neural.TrainingConfig:
    return neural.TrainingConfig(lambdas=tuple(args.lambdas), lr=args.lr, lr_decay=args.lr_decay,
                                 decay_every=args.decay_every, steps=args.steps, batch_size=args.batch_size,
                                 seed=args.seed, clip_norm=args.clip_norm, nll_samples=args.nll_samples,
                                 target_noise=args.target_noise, checkpoint_every=args.checkpoint_every)


def cmd_train(args):
    _need_file(args.dataset, "dataset")
    ds = sampling.load_dataset(args.dataset)
    if len(ds) == 0:
        raise UsageError("dataset has no records")
    cfg = training_config(args)
    out = _out_path(args, args.out)
    if args.resume:
        _need_file(args.resume, "checkpoint to resume")
        model, _, state = neural.load_checkpoint(args.resume, with_state=True)
        if state is None:
            raise UsageError(f"{args.resume} carries no optimizer state")
    else:
        k = args.max_obstacles or max(len(s.obstacles) for s in ds.scenes.values())
        arch = neural.Architecture(dof=ds.robot.dof, n_freq=args.n_freq, max_obstacles=max(k, 1),
                                   trunk_width=args.width, dyn_width=args.width, ode_steps=args.ode_steps)
        model, state = neural.init_model(arch, args.seed), None
    if state is None:
        state = neural.new_train_state(model, cfg)
    try:
        model, history = neural.train(model, ds, cfg, state=state,
                                      checkpoint_path=out if cfg.checkpoint_every else None)
    except neural.NonFiniteLossError as exc:
        path = out.with_suffix(out.suffix + ".lastgood")
        if exc.model is not None:
            neural.save_checkpoint(exc.model, path, cfg)
        print(f"error: {exc}; records {list(exc.record_ids)}; last good checkpoint: {path}", file=sys.stderr)
        return EXIT_NAN
    neural.save_checkpoint(model, out, cfg, state=state)
    rows = [dict(step=i + 1, **dict(zip(neural.LOSS_COLUMNS, r.as_row()))) for i, r in enumerate(history)]
    write_csv(_out_path(args, args.history or str(out) + ".loss.csv"), args, ["step", *neural.LOSS_COLUMNS], rows)
    return EXIT_OK


def _evaluation_grid(robot, n):
    axes = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for lo, hi in robot.joint_limits]
    return axes, np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, robot.dof)


def make_provider_factory(name, robot, args, model=None):
    """``scene -> Provider`` for a provider name."""
    if name == "oracle":
        return lambda s: planner.OracleProvider.build(robot, s, args.oracle_res)
    if name == "baseline_cdf":
        return lambda s: planner.BaselineProvider(
            planner.boundary_samples(robot, s, args.baseline_samples, np.random.default_rng(args.seed)))
    if name == "sdf_pullback":
        return lambda s: planner.SdfPullbackProvider(robot, s)
    if name in ("learned_direct", "learned_mc"):
        if model is None:
            raise UsageError(f"provider {name} needs --checkpoint")
        if name == "learned_direct":
            return lambda s: planner.LearnedDirectProvider(model, s)
        return lambda s: planner.LearnedMCProvider(model, s, args.mc_samples, args.seed, args.mc_ode_steps)
    raise UsageError(f"unknown provider {name!r}")


def _load_model(args):
    if not args.checkpoint:
        return None
    _need_file(args.checkpoint, "checkpoint")
    return neural.load_checkpoint(args.checkpoint)


def evaluate_field(robot, scene, providers: dict, res: int, oracle_res: int, model=None, grad_floor=0.5):
    """Metrics of each provider against the oracle on a ``res``-per-axis cell-centre grid."""
    axes, Q = _evaluation_grid(robot, res)
    ref = planner.OracleProvider.build(robot, scene, oracle_res)
    d_ref, g_ref, ok_ref = ref.batch(Q)
    strong = ok_ref & (np.linalg.norm(g_ref, axis=1) > grad_floor)
    rows, fields = [], {}
    for name, make in providers.items():
        prov = make(scene)
        d, G, ok = prov.batch(Q)
        d = np.maximum(d, 0.0)
        use = strong & ok
        cos = np.array([cosine(G[i], g_ref[i]) for i in np.flatnonzero(use)])
        eik = np.abs(np.linalg.norm(G[use], axis=1) - 1.0)
        head_eik = float("nan")
        if model is not None and name.startswith("learned"):
            Gh = neural.predict_gradient(model, Q[strong], scene)
            head_eik = float(np.mean(np.abs(np.linalg.norm(Gh, axis=1) - 1.0)))
        finite = np.isfinite(d) & np.isfinite(d_ref)
        rows.append({"scene": scene.id, "provider": name, "n_points": len(Q), "n_grad_points": int(strong.sum()),
                     "grad_undefined": int((strong & ~ok).sum()),
                     "distance_mae": float(np.mean(np.abs(d[finite] - d_ref[finite]))) if finite.any() else float("nan"),
                     "grad_cos_median": float(np.median(cos)) if cos.size else float("nan"),
                     "grad_cos_mean": float(np.mean(cos)) if cos.size else float("nan"),
                     "eik_mean": float(np.mean(eik)) if eik.size else float("nan"),
                     "head_eik_mean": head_eik})
        shape = tuple(len(a) for a in axes)
        fields[name] = (axes, d.reshape(shape), np.where(ok[:, None], G, np.nan).reshape(shape + (robot.dof,)))
    return rows, fields


EVAL_COLUMNS = ["scene", "provider", "n_points", "n_grad_points", "grad_undefined", "distance_mae",
                "grad_cos_median", "grad_cos_mean", "eik_mean", "head_eik_mean"]


def cmd_eval_field(args):
    robot, scenes = resolve_problem(args.problem)
    model = _load_model(args)
    names = [p.strip() for p in args.providers.split(",") if p.strip()]
    factories = {n: make_provider_factory(n, robot, args, model) for n in names}
    out = _out_path(args, args.out)
    all_rows = []
    for scene in pick_scenes(scenes, args.scene_id):
        rows, fields = evaluate_field(robot, scene, factories, args.grid, args.oracle_res, model)
        all_rows += rows
        if args.plot:
            if robot.dof != 2:
                print(f"notice: plots need a 2-DoF robot (got {robot.dof}); skipped", file=sys.stderr)
            else:
                from .svg import field_svg

                for name, (axes, D, G) in fields.items():
                    svg = field_svg(axes, D, G, title=f"{scene.id} / {name}",
                                    bounds=tuple(tuple(lim) for lim in robot.joint_limits))
                    out.with_name(f"{out.stem}.{scene.id}.{name}.svg").write_text(svg)
    write_csv(out, args, EVAL_COLUMNS, all_rows)
    return EXIT_OK


PROJECTION_COLUMNS = ["provider", "trial", "scene", "success", "steps", "failed_steps"]
TRAJECTORY_COLUMNS = ["provider", "instance", "success", "tracking_error", "collision_free", "opt_steps"]


def check_projection_ordering(summary, margin=0.10):
    """Ordering learned_mc >= baseline_cdf >= sdf_pullback with ``margin`` separation, and fewer steps."""
    out = []
    chain = [n for n in ("learned_mc", "baseline_cdf", "sdf_pullback") if n in summary]
    for a, b in zip(chain, chain[1:]):
        sa, sb = summary[a]["success_rate"], summary[b]["success_rate"]
        out.append((f"success {a} >= {b} + {margin:.2f}", sa >= sb + margin - 1e-12, f"{sa:.3f} vs {sb:.3f}"))
    if "learned_mc" in summary and "baseline_cdf" in summary:
        ma, mb = summary["learned_mc"]["mean_steps"], summary["baseline_cdf"]["mean_steps"]
        out.append(("mean steps learned_mc <= baseline_cdf", ma <= mb, f"{ma:.3f} vs {mb:.3f}"))
    return out


def check_trajectory_ordering(summary):
    out = []
    if "learned_mc" in summary and "baseline_cdf" in summary:
        a, b = summary["learned_mc"], summary["baseline_cdf"]
        out.append(("success learned_mc >= baseline_cdf", a["success_rate"] >= b["success_rate"],
                    f"{a['success_rate']:.3f} vs {b['success_rate']:.3f}"))
        out.append(("tracking error learned_mc <= baseline_cdf",
                    a["mean_tracking_error"] <= b["mean_tracking_error"],
                    f"{a['mean_tracking_error']:.4f} vs {b['mean_tracking_error']:.4f}"))
    return out


def cmd_bench(args):
    model = _load_model(args)
    names = [p.strip() for p in args.providers.split(",") if p.strip()]
    out = _out_path(args, args.out)
    checks = []
    if args.suite == "projection":
        robot, scenes = resolve_problem(args.problem or "fixture:buttons")
        scenes = pick_scenes(scenes, args.scene_id)
        factories = {n: make_provider_factory(n, robot, args, model) for n in names}
        trials = planner.projection_trials(robot, scenes, args.trials_per_scene, args.seed)
        rows = planner.run_projection_suite(trials, factories, robot, args.max_steps, args.contact_tol)
        columns = PROJECTION_COLUMNS
        summary = planner.summarize(rows)
        checks = check_projection_ordering(summary)
    else:
        robot, scenes = resolve_problem(args.problem or "fixture:narrow_gap")
        scene = pick_scenes(scenes, args.scene_id)[0]
        factories = {n: make_provider_factory(n, robot, args, model) for n in names}
        inst = planner.trajectory_instances(robot, scene, args.instances, args.seed)
        cfg = planner.TrajOptConfig(iterations=args.iterations, early_stop=not args.no_early_stop)
        rows = planner.run_trajectory_suite(inst, factories, robot, scene, args.waypoints, cfg)
        columns = TRAJECTORY_COLUMNS
        summary = planner.summarize(rows)
        checks = check_trajectory_ordering(summary)
    if args.timings:
        columns = columns + ["wall_time"]
    else:
        for name in summary:
            summary[name].pop("mean_wall_time", None)
    write_csv(out, args, columns, rows)
    srows = [{"provider": n, **s} for n, s in summary.items()]
    scols = ["provider"] + [k for k in srows[0] if k != "provider"]
    write_csv(out.with_name(out.stem + ".summary.csv"), args, scols, srows)
    status = EXIT_OK
    for label, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {label}  ({detail})")
        if args.assert_ordering and not ok:
            status = EXIT_FAIL
    return status


def cmd_export(args):
    out = _out_path(args, args.out)
    if args.dataset:
        _need_file(args.dataset, "dataset")
        sampling.export_dataset_csv(sampling.load_dataset(args.dataset), out)
    elif args.checkpoint:
        model = _load_model(args)
        payload = {"arch": asdict(model.arch), "params": {k: v.tolist() for k, v in model.params.items()}}
        write_json(out, args, payload)
    elif args.grid:
        _need_file(args.grid, "grid")
        grid = oracle.load_grid(args.grid)
        rows = [{f"q{k}": v for k, v in enumerate(p)} for p in grid.colliding_points]
        write_csv(out, args, [f"q{k}" for k in range(grid.dof)], rows)
    else:
        raise UsageError("export needs one of --dataset, --checkpoint, --grid")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cspacedist", description="Configuration-space distance fields for planar arms.")
    p.add_argument("--version", action="version", version=f"cspacedist {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option defaults")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 gives bitwise reproducibility")
    common.add_argument("--out-dir", default=os.environ.get("CSPACEDIST_OUT", "."))
    common.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def problem_args(sp, default=None):
        sp.add_argument("--problem", default=default, help="problem JSON or fixture:NAME")
        sp.add_argument("--scene-id", default=None)

    sp = sub.add_parser("oracle-build", parents=[common], help="dense collision grid")
    problem_args(sp, "fixture:disc")
    sp.add_argument("--resolution", type=int, default=256)
    sp.add_argument("--out", default="grid.bin")
    sp.set_defaults(func=cmd_oracle_build)

    sp = sub.add_parser("gen-data", parents=[common], help="adaptive refinement sampling dataset")
    problem_args(sp, "fixture:disc")
    sp.add_argument("--n-queries", type=int, default=2000)
    sp.add_argument("--n-global", type=int, default=16)
    sp.add_argument("--n-local", type=int, default=8)
    sp.add_argument("--radius", type=float, default=0.1)
    sp.add_argument("--equality-tol-rel", type=float, default=0.01)
    sp.add_argument("--max-opt-iters", type=int, default=300)
    sp.add_argument("--oracle-check", type=int, default=0, metavar="RES",
                    help="compare labels with a RES-per-axis oracle grid")
    sp.add_argument("--out", default="dataset.bin")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", parents=[common], help="train the flow + distance network")
    sp.add_argument("--dataset", default="dataset.bin")
    sp.add_argument("--out", default="model.ck")
    sp.add_argument("--history", default=None, help="loss CSV (default: <out>.loss.csv)")
    sp.add_argument("--resume", default=None, help="checkpoint with optimizer state to continue")
    sp.add_argument("--steps", type=int, default=5000)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--lr-decay", type=float, default=0.5)
    sp.add_argument("--decay-every", type=int, default=2000)
    sp.add_argument("--clip-norm", type=float, default=10.0)
    sp.add_argument("--lambdas", type=float, nargs=5, default=[1.0, 1.0, 0.5, 0.1, 0.01])
    sp.add_argument("--nll-samples", type=int, default=4)
    sp.add_argument("--target-noise", type=float, default=0.01)
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--n-freq", type=int, default=4)
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--ode-steps", type=int, default=20)
    sp.add_argument("--max-obstacles", type=int, default=0, help="obstacle slots (default: largest scene)")
    sp.set_defaults(func=cmd_train)

    def provider_args(sp, default):
        sp.add_argument("--providers", default=default)
        sp.add_argument("--checkpoint", default=None)
        sp.add_argument("--oracle-res", type=int, default=256)
        sp.add_argument("--baseline-samples", type=int, default=256)
        sp.add_argument("--mc-samples", type=int, default=256)
        sp.add_argument("--mc-ode-steps", type=int, default=planner.MC_ODE_STEPS,
                        help="RK4 steps when sampling the flow")

    sp = sub.add_parser("eval-field", parents=[common], help="field metrics against the oracle, SVG plots")
    problem_args(sp, "fixture:disc")
    provider_args(sp, "oracle,baseline_cdf,sdf_pullback")
    sp.add_argument("--grid", type=int, default=32, help="evaluation points per axis")
    sp.add_argument("--plot", action="store_true")
    sp.add_argument("--out", default="field_metrics.csv")
    sp.set_defaults(func=cmd_eval_field)

    sp = sub.add_parser("bench", parents=[common], help="projection / trajectory benchmarks")
    problem_args(sp)
    provider_args(sp, "oracle,baseline_cdf,sdf_pullback")
    sp.add_argument("--suite", choices=["projection", "trajectory"], default="projection")
    sp.add_argument("--trials-per-scene", type=int, default=25)
    sp.add_argument("--instances", type=int, default=50)
    sp.add_argument("--waypoints", type=int, default=16)
    sp.add_argument("--iterations", type=int, default=planner.TrajOptConfig.iterations)
    sp.add_argument("--no-early-stop", action="store_true", help="always run every trajectory iteration")
    sp.add_argument("--max-steps", type=int, default=100)
    sp.add_argument("--contact-tol", type=float, default=1e-2)
    sp.add_argument("--timings", action="store_true", help="add wall-clock columns (not reproducible)")
    sp.add_argument("--assert-ordering", action="store_true", help="exit 1 unless the ordering checks pass")
    sp.add_argument("--out", default="bench.csv")
    sp.set_defaults(func=cmd_bench, mc_samples=64)

    sp = sub.add_parser("export", parents=[common], help="dataset/grid to CSV, checkpoint to JSON")
    sp.add_argument("--dataset")
    sp.add_argument("--checkpoint")
    sp.add_argument("--grid")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export)
    return p


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        if not Path(args.config).is_file():
            parser.error(f"config file not found: {args.config}")
        cfg = json.loads(Path(args.config).read_text())
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sp._actions}
        unknown = set(cfg) - known
        if unknown:
            parser.error(f"unknown keys in {args.config}: {sorted(unknown)}")
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        with _limit_threads(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
