# cli.py
# Command-line entry point: python -m chronoweft <verb> ...
# Exit codes: 0 ok, 2 validation failure, 3 numerical failure.

import argparse
import logging
import sys
from pathlib import Path

import pandas as pd
import toml

from chronoweft import dynsys, harness, hyperopt, ledger, metrics, settings, storage
from chronoweft import reservoir as rc
from chronoweft import transformer as tf
from chronoweft.errors import ConfigError, NumericalError, ValidationError
from chronoweft.observe import ObservationSpec, apply_observation

logger = logging.getLogger("chronoweft")


def parse_pool(text):
    """
    "a,b,c"                 -> ([a, b, c], every other catalog system)
    "all-minus:x,y"         -> (catalog minus x, y, [x, y])
    """
    names = [s.name for s in dynsys.catalog()]
    if text.startswith("all-minus:"):
        excluded = [dynsys.canonical_name(s) for s in text[len("all-minus:"):].split(",") if s.strip()]
        return [n for n in names if n not in excluded], excluded
    pool = [dynsys.canonical_name(s) for s in text.split(",") if s.strip()]
    if not pool:
        raise ConfigError("empty --pool")
    return pool, [n for n in names if n not in pool]


def _finish(verb, config, config_hash, seed, output, manifest=None, manifest_path=None):
    """Manifest last, then the ledger row"""
    if manifest is not None:
        harness.audit_manifest(manifest)
        manifest.write(manifest_path)
        logger.info("Manifest: %s", manifest_path)
    return ledger.record_run(verb, config, config_hash, seed, output=output)


# ------------------------
# Verbs
# ------------------------
def cmd_gen(args):
    spec = dynsys.get_system(args.system)
    if args.params:
        spec = spec.with_params(args.params)
    n_rows = args.steps // args.subsample
    traj = dynsys.generate(spec, n_rows, seed=args.seed, dt=args.dt, subsample=args.subsample,
                           transient_steps=args.transient)
    storage.write_trajectory(args.out, traj)
    logger.info("Wrote %s: %d x %d (dt_effective=%g)", args.out, traj.length, traj.dim, traj.dt_effective)
    config = vars(args).copy()
    config.pop("func")
    _finish("gen", config, harness.config_hash(config), args.seed, args.out)


def cmd_mask(args):
    traj = storage.read_trajectory(args.inp)
    spec = ObservationSpec(args.sparsity, args.mult_noise, args.add_noise, args.seed)
    sparse = apply_observation(traj, spec)
    storage.write_sparse(args.out, sparse)
    logger.info("Wrote %s: observed fraction %.3f", args.out, sparse.observed_fraction)
    config = vars(args).copy()
    config.pop("func")
    _finish("mask", config, harness.config_hash(config), args.seed, args.out)


def cmd_train(args):
    pool, excluded = parse_pool(args.pool)
    overrides = toml.load(args.config) if args.config else {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    plan = harness.ExperimentPlan(
        name=Path(args.out).stem, train_systems=pool, held_out=excluded, profile=args.profile,
        transformer=overrides, data_length=args.data_length, seed=args.seed,
        output_dir=str(Path(args.out).parent),
    )
    h = harness.config_hash(plan)
    build = harness.build_dataset(plan, Path(args.out).with_suffix("").as_posix() + "_data")
    params, log = harness.train_on_plan(plan, build, checkpoint_path=args.out)
    tf.save_checkpoint(args.out, params)

    losses = pd.DataFrame({"epoch": range(1, len(log.epoch_losses) + 1), "loss": log.epoch_losses})
    losses.insert(0, "config_hash", h)
    loss_path = metrics.write_csv(losses, Path(args.out).with_suffix(".losses.csv"))

    manifest = harness.RunManifest(h, seeds={"master": args.seed, "train": harness.derive_seed(args.seed, "train")},
                                   train_systems=list(build.files), held_out=plan.held_out)
    for name, path in build.files.items():
        manifest.add(f"data.{name}", path)
    manifest.add("checkpoint", args.out)
    manifest.add("losses", loss_path)
    _finish("train", plan.to_dict(), h, args.seed, args.out, manifest, Path(args.out).with_suffix(".manifest.json"))


def cmd_reconstruct(args):
    params = tf.load_checkpoint(args.ckpt)
    sparse = storage.read_sparse(args.inp)
    traj = tf.reconstruct_long(sparse, params)
    storage.write_trajectory(args.out, traj)
    logger.info("Wrote %s: %d x %d", args.out, traj.length, traj.dim)
    config = {"ckpt": args.ckpt, "in": args.inp, "out": args.out}
    _finish("reconstruct", config, harness.config_hash(config), 0, args.out)


def cmd_climate(args):
    paths = [p for p in args.segments.split(",") if p.strip()]
    if len(paths) < 3:
        raise ValidationError(f"climate needs at least three segments, got {len(paths)}")
    if args.ckpt:
        params = tf.load_checkpoint(args.ckpt)
        segments = [tf.reconstruct_long(storage.read_sparse(p), params) for p in paths]
    else:
        segments = [storage.read_trajectory(p) for p in paths]

    cfg = harness.reservoir_config(args.rc_config, seed=harness.derive_seed(args.seed, "reservoir"))
    model = rc.train_on_segments(segments, cfg)
    last = segments[-1]
    tail = min(args.warmup, last.length)
    result = rc.closed_loop_predict(model, last.window(last.length - tail, tail), args.horizon)
    storage.write_trajectory(args.out, result.trajectory)
    if args.model_out:
        rc.save_model(args.model_out, model)
    if result.truncated:
        logger.warning("Prediction left the clip range at step %d", result.diverged_at)
    logger.info("Wrote %s: %d steps", args.out, args.horizon)
    config = vars(args).copy()
    config.pop("func")
    _finish("climate", config, harness.config_hash(config), args.seed, args.out)


def cmd_evaluate(args):
    plan = harness.load_plan(args.config)
    if "sweep" in plan.stages and not args.ckpt:
        raise ConfigError("the sweep stage needs --ckpt")
    params = tf.load_checkpoint(args.ckpt) if args.ckpt else None
    out_dir = plan.out_dir
    h = harness.config_hash(plan)
    manifest = harness.RunManifest(h, seeds={"master": plan.seed}, train_systems=[], held_out=plan.held_out)

    ckpt_manifest = Path(args.ckpt).with_suffix(".manifest.json") if args.ckpt else None
    if ckpt_manifest is not None and ckpt_manifest.exists():
        trained = harness.RunManifest.read(ckpt_manifest)
        manifest.train_systems = trained.train_systems
        uses_target = {"climate", "reservoir_grid"} & set(plan.stages)
        evaluated = set(plan.held_out) | ({plan.climate_target} if uses_target else set())
        harness.audit_manifest(harness.RunManifest(h, train_systems=trained.train_systems, held_out=sorted(evaluated)))

    if "sweep" in plan.stages:
        harness.run_reconstruction_sweep(plan, params, out_dir)
        manifest.add("sweep", out_dir / "sweep.csv")
        manifest.add("sweep_summary", out_dir / "sweep_summary.csv")
    if "climate" in plan.stages:
        harness.run_climate_pipeline(plan, params, out_dir=out_dir)
        manifest.add("climate", out_dir / "climate.csv")
        manifest.add("climate_prediction", out_dir / "climate_prediction.cwtj")
    if "reservoir_grid" in plan.stages:
        harness.run_reservoir_grid(plan, params, out_dir=out_dir)
        manifest.add("reservoir_grid", out_dir / "reservoir_grid.csv")
    if "data_length" in plan.stages:
        harness.run_data_length_sweep(plan, out_dir)
        manifest.add("data_length", out_dir / "data_length.csv")
    if "transformer_hyper" in plan.stages:
        harness.run_transformer_hyper_sweep(plan, out_dir)
        manifest.add("transformer_hyper", out_dir / "transformer_hyper.csv")
    if args.ckpt:
        manifest.add("checkpoint", args.ckpt)
    _finish("evaluate", plan.to_dict(), h, plan.seed, out_dir, manifest, out_dir / "manifest.json")


def cmd_search(args):
    plan = harness.load_plan(args.config) if args.config else harness.ExperimentPlan(seed=args.seed)
    if args.target == "transformer":
        space, objective = hyperopt.transformer_space(), harness.transformer_objective(plan)
    else:
        params = tf.load_checkpoint(args.ckpt) if args.ckpt else None
        space, objective = hyperopt.reservoir_space(), harness.reservoir_objective(plan, params)
    if args.space:
        space = hyperopt.SearchSpace.from_mapping(toml.load(args.space))

    result = hyperopt.random_search(space, args.trials, objective, seed=args.seed, workers=args.workers)
    h = harness.config_hash({**plan.to_dict(), "search": args.target, "trials": args.trials, "search_seed": args.seed})
    frame = pd.DataFrame([r.to_row() for r in result.history])
    frame.insert(0, "config_hash", h)
    frame["best_so_far"] = hyperopt.best_prefix(result.history)
    out_dir = plan.out_dir / f"search_{args.target}"
    metrics.write_csv(frame, out_dir / "search.csv")
    (out_dir / "best.toml").write_text(toml.dumps(result.best.config))
    logger.info("Best objective %.6g: %s", result.best.objective, result.best.config)

    manifest = harness.RunManifest(h, seeds={"master": args.seed}, train_systems=plan.train_systems,
                                   held_out=plan.held_out)
    manifest.add("search", out_dir / "search.csv")
    manifest.add("best", out_dir / "best.toml")
    run_id = _finish("search", {"target": args.target, "trials": args.trials, "plan": plan.to_dict()}, h,
                     args.seed, out_dir, manifest, out_dir / "manifest.json")
    ledger.record_trials(run_id, result.history)


def cmd_rotate(args):
    plan = harness.load_plan(args.config)
    out_dir = plan.out_dir / "rotation"
    harness.rotate_leave_out(plan, out_dir)
    h = harness.config_hash(plan)
    manifest = harness.RunManifest(h, seeds={"master": plan.seed}, train_systems=[], held_out=[])
    manifest.add("rotation", out_dir / "rotation.csv")
    _finish("rotate", plan.to_dict(), h, plan.seed, out_dir, manifest, out_dir / "manifest.json")


# ------------------------
# Parser
# ------------------------
def build_parser():
    parser = argparse.ArgumentParser(prog="chronoweft", description="Sparse chaotic trajectory reconstruction")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for DEBUG")
    parser.add_argument("-q", "--quiet", action="store_true", help="Only warnings and errors")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen", help="Simulate and normalize one catalog system")
    p.add_argument("--system", required=True, help="Catalog name (e.g. lorenz, sprott_5)")
    p.add_argument("--steps", type=int, required=True, help="Integration steps kept after the transient")
    p.add_argument("--dt", type=float, default=settings.DT)
    p.add_argument("--subsample", type=int, default=settings.SUBSAMPLE)
    p.add_argument("--transient", type=int, default=settings.TRANSIENT_STEPS)
    p.add_argument("--params", default=None, help="Alternate parameter set (e.g. listed)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("mask", help="Sparse noisy observation of a trajectory")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--sparsity", type=float, required=True, help="Fraction of entries removed")
    p.add_argument("--mult-noise", type=float, default=0.0)
    p.add_argument("--add-noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="Train the reconstruction transformer")
    p.add_argument("--pool", default="all-minus:" + ",".join(dynsys.TARGETS))
    p.add_argument("--profile", choices=sorted(tf.PROFILES), default="desk")
    p.add_argument("--config", default=None, help="TOML with transformer config overrides")
    p.add_argument("--data-length", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="Reconstruct a sparse series with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("climate", help="Reservoir closed-loop prediction from segments")
    p.add_argument("--segments", required=True, help="Comma-separated trajectory files (sparse files with --ckpt)")
    p.add_argument("--ckpt", default=None, help="Reconstruct sparse segments with this transformer first")
    p.add_argument("--rc-config", default="default", help="Preset name or TOML file")
    p.add_argument("--horizon", type=int, default=settings.LONG_HORIZON)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--model-out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_climate)

    p = sub.add_parser("evaluate", help="Run a plan's stages (sweep, climate, data_length, transformer_hyper, reservoir_grid)")
    p.add_argument("--config", required=True, help="Plan TOML or preset: " + ", ".join(harness.SWEEP_PRESETS))
    p.add_argument("--ckpt", default=None, help="Transformer checkpoint; required by the sweep stage")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("search", help="Random hyperparameter search")
    p.add_argument("--target", choices=["transformer", "reservoir"], required=True)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--space", default=None, help="TOML search space replacing the default")
    p.add_argument("--ckpt", default=None, help="Reservoir search on reconstructed segments")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("rotate", help="Leave-out rotation over the whole catalog")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_rotate)
    return parser


DEFAULT_TRIALS = {"transformer": 60, "reservoir": 200}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose else logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if getattr(args, "trials", 0) is None:
        args.trials = DEFAULT_TRIALS[args.target]

    try:
        args.func(args)
    except ValidationError as e:
        logger.error("%s", e)
        return e.exit_code
    except NumericalError as e:
        logger.error("%s", e)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
