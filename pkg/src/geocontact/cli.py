"""Command-line entry point: ``geocontact <subcommand>`` (or ``python -m geocontact``).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .config import TrainConfig
from .data import (DataError, DatasetManifest, SyntheticFamily, load_tasks, load_trajectory,
                   write_synthetic_dataset)
from .dynamics import ForceResponse, NumericalInstabilityError
from .evaluation import (evaluate_tasks, fit_ratio, fit_ratio_derivative, predict,
                         simulate_truth)
from .geometry import (MeshFormatError, PointCloud, center_cloud, eliminate_samples, load_cloud,
                       load_mesh, preprocess_mesh, save_cloud)
from .gradcheck import CHECKS, run_suite
from .training import (CheckpointError, encoder_checksum, load_checkpoint, make_checkpoint,
                       save_checkpoint, train_head, train_vae, write_history)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("geocontact")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse prints usage and raises instead of calling sys.exit(2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", type=Path, default=d(None), help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=d(None), help="overrides the config seed")
    parser.add_argument("--out", type=Path, default=d(Path(".")), help="output directory")
    parser.add_argument("--threads", type=int, default=d(None),
                        help="BLAS thread limit; 1 gives bitwise-reproducible runs")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geocontact",
                     description="Geometry-conditioned contact models for robotic assembly.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("sample-mesh", help="sample an OBJ mesh into a centered point cloud")
    p.add_argument("mesh", type=Path)
    p.add_argument("--points", type=int, default=None, help="cloud size (config n_points)")
    p.add_argument("--output", type=Path, default=None, help="cloud path, .csv or .bin")

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset and its manifest")
    p.add_argument("--family", choices=("pin", "connector"), default="pin")
    p.add_argument("--train", type=float, nargs="+", default=[4, 5, 6, 10, 12, 14])
    p.add_argument("--val", type=float, nargs="*", default=[9])
    p.add_argument("--test", type=float, nargs="*", default=[8])
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.01, help="noise sigma / peak force")

    p = sub.add_parser("train-vae", help="stage 1: train the point-cloud VAE")
    p.add_argument("manifest", type=Path)

    p = sub.add_parser("train-head", help="stage 2: train the local-model head")
    p.add_argument("manifest", type=Path)
    p.add_argument("--vae", type=Path, required=True, help="stage-1 checkpoint")

    p = sub.add_parser("infer", help="predict the force response for one part")
    p.add_argument("--checkpoint", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--cloud", type=Path)
    src.add_argument("--mesh", type=Path)
    p.add_argument("--trajectory", type=Path, required=True, help="CSV t,p_z,F_z")
    p.add_argument("--preprocessed", action="store_true",
                   help="trajectory is already on the training grid")

    p = sub.add_parser("evaluate", help="score a manifest split")
    p.add_argument("manifest", type=Path)
    p.add_argument("--split", default="test", help="train, val, test or all")
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--checkpoint", type=Path)
    what.add_argument("--ground-truth", action="store_true",
                      help="simulate the stored true local models instead of a network")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--ops", nargs="+", choices=sorted(CHECKS), default=None)

    for name, sp in sub.choices.items():
        _global_flags(sp, suppress=True)
    return parser


# ---------------------------------------------------------------- helpers

def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    return cfg


def _load_split(manifest_path, cfg: TrainConfig, split: str | None):
    manifest = DatasetManifest.load(manifest_path)
    d = cfg.data
    return load_tasks(manifest, split, n_points=cfg.model.n_points, T=d.T,
                      tail_fraction=d.tail_fraction, oversample=d.oversample, seed=cfg.seed)


def _cloud_for_inference(args, cfg: TrainConfig) -> PointCloud:
    n = cfg.model.n_points
    if args.mesh is not None:
        return preprocess_mesh(load_mesh(args.mesh), n, cfg.data.oversample, cfg.seed,
                               cfg.data.alpha)
    cloud = load_cloud(args.cloud)
    if cloud.n < n:
        raise DataError(f"{args.cloud}: {cloud.n} points, the model needs {n}")
    if cloud.n > n:
        cloud = eliminate_samples(cloud, n, alpha=cfg.data.alpha)
    return center_cloud(cloud)


# ---------------------------------------------------------------- subcommands

def cmd_sample_mesh(args, cfg, out: Path) -> int:
    n = args.points or cfg.model.n_points
    cloud = preprocess_mesh(load_mesh(args.mesh), n, cfg.data.oversample, cfg.seed, cfg.data.alpha)
    path = args.output or out / (args.mesh.stem + ".csv")
    save_cloud(cloud, path)
    print(f"wrote {cloud.n} points to {path} (bbox diagonal {cloud.bbox_diagonal():.4g} m)")
    return EXIT_OK


def cmd_gen_synthetic(args, cfg, out: Path) -> int:
    family = SyntheticFamily(kind=args.family, repeats=args.repeats, noise_fraction=args.noise)
    splits = {"train": args.train, "val": args.val, "test": args.test}
    d = cfg.data
    manifest = write_synthetic_dataset(out, family, {k: v for k, v in splits.items() if v},
                                       cfg.seed, cfg.model.n_points, d.T, d.tail_fraction,
                                       d.oversample)
    print(f"wrote {len(manifest.entries)} tasks to {out / 'manifest.yaml'}")
    return EXIT_OK


def cmd_train_vae(args, cfg, out: Path) -> int:
    tasks = _load_split(args.manifest, cfg, "train")
    val = _load_split(args.manifest, cfg, "val")
    run = train_vae(tasks, cfg, val, progress=_progress("stage 1"))
    write_history(out / "vae_history.csv", run.history)
    ckpt = make_checkpoint(cfg, run.vae, optimizers={"vae": run.optimizer},
                           history={"vae": run.history})
    save_checkpoint(ckpt, out / "vae.ckpt")
    print(f"stage 1 done: final train loss {run.history[-1]['train_loss']:.6g}; "
          f"wrote {out / 'vae.ckpt'}")
    return EXIT_OK


def cmd_train_head(args, cfg, out: Path) -> int:
    prev = load_checkpoint(args.vae)
    if not prev.has("vae"):
        raise DataError(f"{args.vae}: checkpoint holds no VAE")
    # architecture comes from the stage-1 run; stage-2 settings from this invocation
    cfg.model = prev.config.model
    vae = prev.vae()
    tasks = _load_split(args.manifest, cfg, "train")
    val = _load_split(args.manifest, cfg, "val")
    before = encoder_checksum(vae)
    run = train_head(tasks, vae, cfg, val, progress=_progress("stage 2"))
    if encoder_checksum(vae) != before:
        raise ArithmeticError("encoder tensors changed during stage 2")
    write_history(out / "head_history.csv", run.history)
    history = dict(prev.meta.get("history", {}), head=run.history)
    ckpt = make_checkpoint(cfg, vae, run.head, {"head": run.optimizer}, history)
    save_checkpoint(ckpt, out / "model.ckpt")
    print(f"stage 2 done: final train loss {run.history[-1]['train_loss']:.6g}; "
          f"encoder checksum {before[:12]} unchanged; wrote {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_infer(args, cfg, out: Path) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if not (ckpt.has("vae") and ckpt.has("head")):
        raise DataError(f"{args.checkpoint}: inference needs a stage-2 checkpoint")
    cfg = ckpt.config
    cloud = _cloud_for_inference(args, cfg)
    traj = load_trajectory(args.trajectory, args.preprocessed, cfg.data.T, cfg.data.tail_fraction)
    pred = predict(ckpt.vae(), ckpt.head(), cloud.points[None], traj.u[None], traj.dt,
                   traj.s_max, cfg.model.parameter_floor)[0]
    ForceResponse(pred.F_hat, traj.dt).to_csv(out / "force.csv", traj)
    pred.models.to_csv(out / "local_models.csv")
    print(f"wrote {len(pred.F_hat)} rows to {out / 'force.csv'} and "
          f"{pred.models.n_models} local models to {out / 'local_models.csv'}")
    if traj.F_meas is not None and np.ptp(traj.F_meas) > 0:
        print(f"FIT(F) {fit_ratio(traj.F_meas, pred.F_hat):.2f} %, "
              f"FIT(dF) {fit_ratio_derivative(traj.F_meas, pred.F_hat, traj.dt):.2f} %")
    return EXIT_OK


def cmd_evaluate(args, cfg, out: Path) -> int:
    split = None if args.split == "all" else args.split
    if args.ground_truth:
        tasks = _load_split(args.manifest, cfg, split)
        report = evaluate_tasks(tasks, parameter_floor=cfg.model.parameter_floor,
                                ground_truth=True)
        curves = {t.id: (t, simulate_truth(t, cfg.model.parameter_floor)) for t in tasks}
    else:
        ckpt = load_checkpoint(args.checkpoint)
        cfg = ckpt.config
        tasks = _load_split(args.manifest, cfg, split)
        vae, head = ckpt.vae(), ckpt.head()
        report = evaluate_tasks(tasks, vae, head, cfg.model.parameter_floor)
        curves = {}
        for t in tasks:
            curves[t.id] = (t, predict(vae, head, t.cloud.points[None], t.u[None], t.dt,
                                       t.s_max, cfg.model.parameter_floor)[0].F_hat)
    if not tasks:
        raise DataError(f"{args.manifest}: split {args.split!r} is empty")
    report.to_csv(out / "report.csv")
    (out / "report.txt").write_text(report.summary() + "\n", encoding="utf-8")
    curve_dir = out / "curves"
    curve_dir.mkdir(exist_ok=True)
    for tid, (task, F_hat) in curves.items():
        _write_curve(curve_dir / f"{tid}.csv", task, F_hat)
    print(report.summary())
    return EXIT_OK


def _write_curve(path, task, F_hat) -> None:
    F = task.reference_force()
    t = np.arange(len(F)) * task.dt
    np.savetxt(path, np.column_stack([t, F, F_hat]), delimiter=",", header="t,F,F_hat",
               comments="", fmt="%.17g")


def cmd_gradcheck(args, cfg, out: Path) -> int:
    results = run_suite(args.seeds, args.ops, base_seed=cfg.seed)
    failed = 0
    for name in dict.fromkeys(r.op for r in results):
        rows = [r for r in results if r.op == name]
        worst = max(r.error for r in rows)
        ok = all(r.passed for r in rows)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:<24} worst {worst:.2e} (tol {rows[0].tol:.0e}, "
              f"{len(rows)} seeds)")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def _progress(label):
    def show(row):
        log.info("%s epoch %d: %s", label, row["epoch"],
                 ", ".join(f"{k} {v:.6g}" for k, v in row.items() if k != "epoch"))
    return show


COMMANDS = {
    "sample-mesh": cmd_sample_mesh,
    "gen-synthetic": cmd_gen_synthetic,
    "train-vae": cmd_train_vae,
    "train-head": cmd_train_head,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        cfg = _config(args)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg, out)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MeshFormatError, CheckpointError, OSError, ValueError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalInstabilityError, ad.NonFiniteError, ArithmeticError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
