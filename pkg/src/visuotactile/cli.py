"""Command line: gen-data, train, matrix, fill, report.

Every command writes ``config.json`` into its output directory. Passing that
file back with ``--config`` replays the run; explicit flags override values
from the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import control, plotting
from .dataset import collect, load_dataset, save_dataset
from .errors import ConfigError, ControlAbort, NumericError, RangeError, SplitError, VisuoTactileError
from .model import TASKS, VARIANTS, FusionModel
from .numkit import LrSchedule
from .simworld import SceneConfig
from .trainkit import TrainConfig, eval_ml_error, train, variant_matrix, write_csv

OUT_ENV = "VISUOTACTILE_OUT"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("visuotactile")

# Built-in defaults per command. Resolution order: these, then --config, then flags.
DEFAULTS = {
    "gen-data": {"trials": 110, "seed": 0, "k": 3, "scene": None},
    "train": {
        "data": None,
        "variant": "fused",
        "task": "multitask",
        "epochs": 100,
        "seed": 0,
        "batch_size": 32,
        "lr": 0.001,
        "milestones": [40, 70],
        "gamma": 0.1,
        "ce_weight": 1.0,
        "mse_weight": 100.0,
        "holdout_fold": None,
    },
    "matrix": {
        "data": None,
        "epochs": 100,
        "seed": 0,
        "k": 3,
        "batch_size": 32,
        "lr": 0.001,
        "milestones": [40, 70],
        "gamma": 0.1,
        "ce_weight": 1.0,
        "mse_weight": 100.0,
        "variants": list(VARIANTS),
        "tasks": list(TASKS),
        "workers": 1,
    },
    "fill": {"model": None, "target_ml": 140.0, "n": 50, "seed": 0, "estimator": "model", "scene": None},
    "report": {"inputs": []},
}


class UsageError(VisuoTactileError):
    pass


def default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        loaded.pop("command", None)
        loaded.pop("out", None)
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def echo_config(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=1, sort_keys=True) + "\n")


def _train_config(cfg: dict, variant: str = "fused", task: str = "multitask") -> TrainConfig:
    from .model import LossWeights

    try:
        return TrainConfig(
            batch_size=cfg["batch_size"],
            epochs=cfg["epochs"],
            schedule=LrSchedule(cfg["lr"], tuple(cfg["milestones"]), cfg["gamma"]),
            weights=LossWeights(cfg["ce_weight"], cfg["mse_weight"]),
            variant=variant,
            task=task,
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_data(path):
    if path is None:
        raise UsageError("--data is required")
    try:
        return load_dataset(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load dataset {path}: {exc}") from exc


class DataError(VisuoTactileError):
    pass


def _scene_config(path) -> SceneConfig:
    if path is None:
        return SceneConfig()
    try:
        return SceneConfig.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read scene config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict, out: Path) -> int:
    if cfg["trials"] < 1:
        raise UsageError("--trials must be >= 1")
    scene = _scene_config(cfg["scene"])
    data = collect(scene, n_trials=cfg["trials"], seed=cfg["seed"])
    manifest = save_dataset(data, out, k=cfg["k"], fold_seed=cfg["seed"])
    echo_config(out, "gen-data", cfg)
    print(f"{len(data)} examples from {data.n_trials} trials -> {out}")
    print(f"fingerprint {manifest['fingerprint']}")
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    if cfg["variant"] not in VARIANTS or cfg["task"] not in TASKS:
        raise UsageError(f"variant must be one of {VARIANTS} and task one of {TASKS}")
    data, manifest = _load_data(cfg["data"])
    tc = _train_config(cfg, cfg["variant"], cfg["task"])
    test = None
    if cfg["holdout_fold"] is not None:
        assignment = manifest["folds"]["assignment"]
        if assignment is None:
            raise DataError(f"{cfg['data']} has too few trials for a fold assignment")
        folds = np.asarray(assignment)
        if not 0 <= cfg["holdout_fold"] <= folds.max():
            raise UsageError(f"--holdout-fold must be in [0, {folds.max()}]")
        test = data.subset(np.flatnonzero(folds == cfg["holdout_fold"]))
        data = data.subset(np.flatnonzero(folds != cfg["holdout_fold"]))
    result = train(tc, data)
    echo_config(out, "train", cfg)
    result.model.save(out / "model.ckpt", seed=tc.seed, epoch=tc.epochs, extra={"train_config": tc.to_dict()})
    write_csv(out / "loss.csv", [{"epoch": i, "loss": f"{v:.6f}"} for i, v in enumerate(result.loss_curve)])
    final = result.loss_curve[-1] if result.loss_curve else float("nan")
    print(f"{tc.variant}/{tc.task}: {tc.epochs} epochs on {len(data)} examples, final loss {final:.5f}")
    if test is not None:
        err = eval_ml_error(result.model, test)
        (out / "holdout.csv").write_text(f"fold,n,error_ml\n{cfg['holdout_fold']},{len(test)},{err:.6f}\n")
        print(f"held-out fold {cfg['holdout_fold']}: {err:.3f} ml mean absolute error")
    print(f"checkpoint -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_matrix(cfg: dict, out: Path) -> int:
    bad = [v for v in cfg["variants"] if v not in VARIANTS] + [t for t in cfg["tasks"] if t not in TASKS]
    if bad:
        raise UsageError(f"unknown variant/task names: {bad}")
    data, _ = _load_data(cfg["data"])
    report = variant_matrix(
        data, _train_config(cfg), k=cfg["k"], variants=cfg["variants"], tasks=cfg["tasks"], workers=cfg["workers"]
    )
    echo_config(out, "matrix", cfg)
    report.write(out)
    print(report.format_table())
    print(f"report -> {out / 'report.csv'}")
    return EXIT_OK


def cmd_fill(cfg: dict, out: Path) -> int:
    if cfg["n"] < 1:
        raise UsageError("--n must be >= 1")
    if cfg["estimator"] == "oracle":
        estimator = control.oracle_estimator
        scene = _scene_config(cfg["scene"])
    else:
        if cfg["model"] is None:
            raise UsageError("--model is required unless --estimator oracle")
        try:
            model = FusionModel.load(cfg["model"])
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot load checkpoint {cfg['model']}: {exc}") from exc
        estimator = control.model_estimator(model)
        if cfg["scene"] is not None:
            scene = _scene_config(cfg["scene"])
        else:
            scene = SceneConfig.from_dict(model.scene_config) if model.scene_config else SceneConfig()
    target = float(cfg["target_ml"])
    if not 10.0 <= target <= scene.capacity_ml:
        raise UsageError(f"--target-ml must lie in [10, {scene.capacity_ml:g}]")
    results, tasks = control.batch_eval(estimator, [target], n=cfg["n"], seed=cfg["seed"], config=scene, keep_tasks=True)
    res, runs = results[0], tasks[0]
    echo_config(out, "fill", cfg)
    traces = out / "traces"
    traces.mkdir(parents=True, exist_ok=True)
    for i, task in enumerate(runs):
        write_csv(traces / f"run_{i:03d}.csv", task.trace_rows())
    write_csv(
        out / "runs.csv",
        [
            {"run": i, "v_expected_ml": f"{t.v_expected:.6f}", "v_final_ml": f"{t.v_final_gt:.6f}", "error_ml": f"{t.error:.6f}"}
            for i, t in enumerate(runs)
        ],
    )
    counts, edges = res.histogram()
    write_csv(
        out / "histogram.csv",
        [{"lo_ml": f"{edges[i]:.6f}", "hi_ml": f"{edges[i + 1]:.6f}", "count": int(c)} for i, c in enumerate(counts)],
    )
    summary = {
        "v_expected_ml": f"{target:.6f}",
        "n": len(runs),
        "mean_error_ml": f"{res.mean_error:.6f}",
        "max_error_ml": f"{max(res.errors):.6f}",
    }
    write_csv(out / "summary.csv", [summary])
    print(f"target {target:g} ml, {len(runs)} runs: mean error {res.mean_error:.3f} ml, max {max(res.errors):.3f} ml")
    print(f"traces -> {traces}")
    return EXIT_OK


def cmd_report(cfg: dict, out: Path) -> int:
    """Render figures for matrix and fill output directories, next to their CSVs."""
    if not cfg["inputs"]:
        raise UsageError("give at least one matrix or fill output directory")
    made = []
    for d in map(Path, cfg["inputs"]):
        if (d / "table.csv").exists():
            rows = plotting.read_csv(d / "table.csv")
            made.append(plotting.matrix_figure(rows, d / "matrix.png"))
            for r in rows:
                print(f"{r['task']:16s} {r['variant']:8s} {float(r['mean_ml']):8.3f} ± {float(r['stderr_ml']):.3f} ml")
        elif (d / "runs.csv").exists():
            runs = plotting.read_csv(d / "runs.csv")
            errors = [float(r["error_ml"]) for r in runs]
            made.append(plotting.error_histogram_figure(errors, d / "error_hist.png"))
            first = d / "traces" / "run_000.csv"
            if first.exists():
                made.append(plotting.fill_trace_figure(plotting.read_csv(first), float(runs[0]["v_expected_ml"]), d / "fill_trace.png"))
            print(f"{d}: {len(errors)} runs, mean error {np.mean(errors):.3f} ml")
        else:
            raise DataError(f"{d} holds neither a matrix report (table.csv) nor fill runs (runs.csv)")
    for p in made:
        print(f"figure -> {p}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "matrix": cmd_matrix,
    "fill": cmd_fill,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visuotactile", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON file with this command's settings; flags override it")
        if out:
            p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
        p.add_argument("--seed", type=int)

    def training(p):
        p.add_argument("--data", help="dataset directory from gen-data")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--milestones", type=int, nargs="+")
        p.add_argument("--gamma", type=float)
        p.add_argument("--ce-weight", type=float)
        p.add_argument("--mse-weight", type=float)

    p = sub.add_parser("gen-data", help="simulate grasp trials and write a dataset directory")
    common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--k", type=int, help="number of trial-grouped folds stored in the manifest")
    p.add_argument("--scene", help="scene config JSON")

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    common(p)
    training(p)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--holdout-fold", type=int, help="leave this fold of the manifest out and report its error")

    p = sub.add_parser("matrix", help="k-fold cross-validation of every variant/task cell")
    common(p)
    training(p)
    p.add_argument("--k", type=int)
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.add_argument("--tasks", nargs="+", choices=TASKS)
    p.add_argument("--workers", type=int, help="parallel training processes (default 1)")

    p = sub.add_parser("fill", help="closed-loop fill runs with a trained model")
    common(p)
    p.add_argument("--model", help="checkpoint from train")
    p.add_argument("--target-ml", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--estimator", choices=("model", "oracle"))
    p.add_argument("--scene", help="scene config JSON (default: the one stored in the checkpoint)")

    p = sub.add_parser("report", help="render figures for matrix/fill output directories")
    p.add_argument("--config")
    p.add_argument("inputs", nargs="*", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    command = args.command
    if command == "report" and not args.inputs:
        args.inputs = None
    try:
        cfg = resolve(command, args)
        out = getattr(args, "out", None) or default_out(command)
        return COMMANDS[command](cfg, Path(out))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SplitError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, RangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, ControlAbort, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
