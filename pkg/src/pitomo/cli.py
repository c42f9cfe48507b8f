"""Command-line pipeline driver.

Subcommands cover the full workflow: build a contribution matrix from a
chords file, generate phantom datasets, assess their quality, train a
surrogate, evaluate it, and forward-project stored predictions.

Global flags come before the subcommand: --config, --out, --seed,
--threads.  Exit codes: 0 success, 2 config or validation error, 3 I/O
error, 4 numeric failure.  Outputs carry no timestamps, so reruns with an
identical config are byte-identical.
"""

from __future__ import annotations

import csv
import functools
import json
import os
import sys

import click
import numpy as np

from .datastore import assess_quality, read_cmatrix, read_dataset, split, write_dataset
from .datastore import content_hash, write_cmatrix
from .errors import (
    ConfigError,
    DegenerateSample,
    EmptyChordSet,
    FormatError,
    InvalidBounds,
    InvalidChord,
    InvalidCount,
    InvalidRatios,
    InvalidRule,
    InvalidSpec,
    MissingPI,
    NonFiniteLoss,
    ShapeMismatch,
    SpatialUnderflow,
    SpecMismatch,
    StoreIOError,
)
from .geometry import build_cmatrix, build_grid, forward_project, load_chords_json
from .network import ModelSpec, build_model, load_checkpoint
from .phantom import NoiseSpec, PhantomRule, generate_dataset
from .trainer import TrainConfig, evaluate, train

CONFIG_ERRORS = (
    ConfigError,
    InvalidBounds,
    InvalidChord,
    InvalidCount,
    InvalidRatios,
    InvalidRule,
    InvalidSpec,
    EmptyChordSet,
    MissingPI,
    ShapeMismatch,
    SpatialUnderflow,
    SpecMismatch,
)

IO_ERRORS = (StoreIOError, FormatError)
NUMERIC_ERRORS = (NonFiniteLoss, DegenerateSample)


def _fail(code: int, message: str) -> None:
    click.echo(message, err=True)
    sys.exit(code)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CONFIG_ERRORS as exc:
            _fail(2, f"config error: {exc}")
        except IO_ERRORS as exc:
            _fail(3, f"i/o error: {exc}")
        except NUMERIC_ERRORS as exc:
            _fail(4, f"numeric failure: {exc}")

    return wrapper


def _load_config(ctx) -> dict:
    path = ctx.obj.get("config")
    if not path:
        raise ConfigError("missing --config PATH")
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _check_keys(cfg: dict, required: tuple, optional: tuple, what: str) -> None:
    missing = [k for k in required if k not in cfg]
    if missing:
        raise ConfigError(f"{what} config missing keys: {missing}")
    extra = sorted(set(cfg) - set(required) - set(optional))
    if extra:
        raise ConfigError(f"{what} config has unknown keys: {extra}")


def _out_path(ctx, what: str) -> str:
    out = ctx.obj.get("out")
    if not out:
        raise ConfigError(f"{what} requires --out")
    return out


def _existing_file(path, role: str) -> str:
    if not isinstance(path, str) or not path:
        raise ConfigError(f"{role} must be a file path, got {path!r}")
    if not os.path.exists(path):
        raise ConfigError(f"{role} not found: {path}")
    return path


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


@click.group()
@click.option("--config", type=str, default=None, help="Path to the subcommand's JSON config.")
@click.option("--out", type=str, default=None, help="Output directory or file.")
@click.option("--seed", type=int, default=None, help="Override the config's primary seed.")
@click.option("--threads", type=int, default=1, show_default=True, help="Worker threads.")
@click.pass_context
def main(ctx, config, out, seed, threads):
    """Tomographic surrogate pipeline: geometry, phantoms, training, evaluation."""
    ctx.obj = {"config": config, "out": out, "seed": seed, "threads": threads}


@main.command("gen-cmatrix")
@click.pass_context
@guarded
def gen_cmatrix(ctx):
    """Build a contribution matrix from a grid and a chords file."""
    cfg = _load_config(ctx)
    _check_keys(cfg, required=("grid", "chords"), optional=("subrays",), what="gen-cmatrix")
    grid_cfg = cfg["grid"]
    if not isinstance(grid_cfg, dict):
        raise ConfigError("grid must be an object with bounds and cell counts")
    _check_keys(
        grid_cfg,
        required=("r_min", "r_max", "z_min", "z_max", "numr", "numz"),
        optional=(),
        what="grid",
    )
    chords_path = _existing_file(cfg["chords"], "chords file")
    subrays = int(cfg.get("subrays", 5))
    out = _out_path(ctx, "gen-cmatrix")

    grid = build_grid(
        float(grid_cfg["r_min"]), float(grid_cfg["r_max"]),
        float(grid_cfg["z_min"]), float(grid_cfg["z_max"]),
        numr=int(grid_cfg["numr"]), numz=int(grid_cfg["numz"]),
    )
    chords = load_chords_json(chords_path)
    cmatrix = build_cmatrix(grid, chords, subrays=subrays, threads=ctx.obj["threads"])
    write_cmatrix(cmatrix, out, source=os.path.basename(chords_path))

    sums = cmatrix.row_sums()
    click.echo(
        f"contribution matrix {cmatrix.weights.shape} written to {out}\n"
        f"row sums: min {sums.min():.6g}  mean {sums.mean():.6g}  max {sums.max():.6g}"
    )
    zeros = cmatrix.zero_rows()
    if zeros:
        click.echo(f"warning: {len(zeros)} chords miss the grid entirely: {zeros}", err=True)


@main.command("gen-phantom")
@click.pass_context
@guarded
def gen_phantom(ctx):
    """Generate a phantom dataset against an existing contribution matrix."""
    cfg = _load_config(ctx)
    _check_keys(
        cfg,
        required=("cmatrix", "count"),
        optional=("base_seed", "rule", "noise"),
        what="gen-phantom",
    )
    count = cfg["count"]
    if int(count) != count or count < 1:
        raise ConfigError(f"count must be a positive integer, got {count}")
    base_seed = int(cfg.get("base_seed", 0))
    if ctx.obj["seed"] is not None:
        base_seed = ctx.obj["seed"]
    rule = PhantomRule.from_dict(cfg["rule"]) if "rule" in cfg else PhantomRule()
    noise = NoiseSpec.from_dict(cfg["noise"]) if "noise" in cfg else NoiseSpec("none", 0.0)
    out = _out_path(ctx, "gen-phantom")

    cmatrix = read_cmatrix(cfg["cmatrix"])
    dataset = generate_dataset(
        cmatrix.grid, cmatrix, rule, noise,
        count=int(count), base_seed=base_seed, threads=ctx.obj["threads"],
    )
    write_dataset(dataset, out)
    report = assess_quality(dataset, cmatrix)
    click.echo(
        f"{dataset.inputs.shape[0]} samples written to {out}\n"
        f"mean relative back-projection error: {report.eps_bar:.3e}\n"
        f"content hash: {content_hash(dataset)}"
    )


@main.command("assess")
@click.pass_context
@guarded
def assess(ctx):
    """Check measurement/label consistency of a stored dataset."""
    cfg = _load_config(ctx)
    _check_keys(cfg, required=("dataset", "cmatrix"), optional=("per_sample",), what="assess")
    per_sample = bool(cfg.get("per_sample", False))

    dataset = read_dataset(cfg["dataset"])
    cmatrix = read_cmatrix(cfg["cmatrix"])
    if dataset.manifest.grid != cmatrix.grid.to_dict():
        raise ConfigError("cmatrix grid does not match the dataset's grid")
    report = assess_quality(dataset, cmatrix)
    payload = report.to_dict(per_sample=per_sample)
    out = ctx.obj.get("out")
    if out:
        _write_json(out, payload)
        click.echo(f"report written to {out}")
    else:
        click.echo(json.dumps(payload, indent=2, sort_keys=True))
    click.echo(
        f"eps_bar {report.eps_bar:.3e}; worst sample {report.worst_index} "
        f"({report.per_sample_eps[report.worst_index]:.3e})",
        err=True,
    )


DEFAULT_SPLIT = {"ratios": (0.8, 0.1, 0.1), "seed": 0}


def _split_config(cfg: dict) -> dict:
    sc = cfg.get("split", DEFAULT_SPLIT)
    if not isinstance(sc, dict):
        raise ConfigError("split must be an object")
    _check_keys(sc, required=(), optional=("ratios", "seed", "part"), what="split")
    ratios = tuple(float(r) for r in sc.get("ratios", DEFAULT_SPLIT["ratios"]))
    if len(ratios) != 3:
        raise ConfigError(f"split ratios must have 3 entries, got {len(ratios)}")
    return {"ratios": ratios, "seed": int(sc.get("seed", 0)), "part": sc.get("part", "test")}


@main.command("train")
@click.option("--resume", is_flag=True, help="Continue from the run directory's last state.")
@click.pass_context
@guarded
def train_cmd(ctx, resume):
    """Train one model variant; writes checkpoints and history to --out."""
    cfg = _load_config(ctx)
    _check_keys(
        cfg,
        required=("dataset", "cmatrix", "model", "train"),
        optional=("seed", "split"),
        what="train",
    )
    model_cfg = cfg["model"]
    if not isinstance(model_cfg, dict):
        raise ConfigError("model must be an object")
    _check_keys(
        model_cfg,
        required=("backbone", "use_pi", "final_activation"),
        optional=(),
        what="model",
    )
    seed = int(cfg.get("seed", 0))
    if ctx.obj["seed"] is not None:
        seed = ctx.obj["seed"]
    split_cfg = _split_config(cfg)
    run_dir = _out_path(ctx, "train")
    train_cfg = TrainConfig.from_dict({**cfg["train"], "seed": seed})

    cmatrix = read_cmatrix(cfg["cmatrix"])
    dataset = read_dataset(cfg["dataset"])
    spec = ModelSpec(
        backbone=str(model_cfg["backbone"]),
        use_pi=bool(model_cfg["use_pi"]),
        final_activation=str(model_cfg["final_activation"]),
        n=cmatrix.n,
        numz=cmatrix.numz,
        numr=cmatrix.numr,
    )
    train_set, valid_set, _ = split(dataset, split_cfg["ratios"], split_cfg["seed"])
    model = build_model(spec, seed=seed)
    model, history = train(
        model, train_set, valid_set, cmatrix, train_cfg,
        run_dir=run_dir, resume=resume,
    )
    os.makedirs(run_dir, exist_ok=True)
    _write_json(os.path.join(run_dir, "config.json"), {**cfg, "seed": seed})
    click.echo(
        f"{spec.variant_name}: {history.stop_reason} after {len(history.epochs)} epochs; "
        f"best epoch {history.best_epoch} (valid loss {history.best_valid:.6g})\n"
        f"checkpoints and history in {run_dir}"
    )


def _select_part(dataset, split_cfg):
    parts = dict(zip(("train", "valid", "test"), split(dataset, split_cfg["ratios"],
                                                       split_cfg["seed"])))
    part = split_cfg["part"]
    if part not in parts:
        raise ConfigError(f"split part must be train, valid or test, got {part!r}")
    return parts[part], part


@main.command("eval")
@click.option("--samples", type=int, default=0, show_default=True,
              help="Dump per-sample error arrays for the first N samples.")
@click.pass_context
@guarded
def eval_cmd(ctx, samples):
    """Evaluate checkpoints on a dataset; writes report.json and tables.csv."""
    cfg = _load_config(ctx)
    _check_keys(
        cfg,
        required=("dataset", "cmatrix"),
        optional=("checkpoint", "checkpoints", "split", "dataset_name"),
        what="eval",
    )
    if ("checkpoint" in cfg) == ("checkpoints" in cfg):
        raise ConfigError("eval config needs exactly one of: checkpoint, checkpoints")
    paths = cfg.get("checkpoints", [cfg.get("checkpoint")])
    if not isinstance(paths, list) or not paths:
        raise ConfigError("checkpoints must be a non-empty list of paths")
    if samples < 0:
        raise ConfigError(f"--samples must be >= 0, got {samples}")
    out = _out_path(ctx, "eval")

    dataset = read_dataset(cfg["dataset"])
    cmatrix = read_cmatrix(cfg["cmatrix"])
    if "split" in cfg:
        subset, part = _select_part(dataset, _split_config(cfg))
    else:
        subset, part = dataset, "all"
    name = cfg.get("dataset_name", f"{subset.manifest.source}/{part}")
    indices = tuple(range(min(samples, subset.inputs.shape[0])))

    rows = []
    dumps = {}
    for path in paths:
        model = load_checkpoint(path)
        report = evaluate(model, subset, cmatrix, sample_indices=indices, dataset_name=name)
        rows.append(report.row())
        if indices:
            dumps[report.model] = report.to_dict()["samples"]

    os.makedirs(out, exist_ok=True)
    payload = {"rows": rows}
    if dumps:
        payload["samples"] = dumps
    _write_json(os.path.join(out, "report.json"), payload)
    with open(os.path.join(out, "tables.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["dataset", "model", "E1", "E2"])
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        click.echo(
            f"{row['dataset']:<24} {row['model']:<14} "
            f"E1 {row['E1']:.4e}  E2 {row['E2']:.4e}"
        )
    click.echo(f"report.json and tables.csv written to {out}")


@main.command("backproject")
@click.pass_context
@guarded
def backproject(ctx):
    """Forward-project a stored prediction file through a contribution matrix."""
    cfg = _load_config(ctx)
    _check_keys(cfg, required=("cmatrix", "predictions"), optional=(), what="backproject")
    pred_path = _existing_file(cfg["predictions"], "predictions file")
    out = _out_path(ctx, "backproject")

    cmatrix = read_cmatrix(cfg["cmatrix"])
    try:
        preds = np.load(pred_path)
    except (ValueError, OSError) as exc:
        raise FormatError(f"cannot read predictions from {pred_path}: {exc}") from exc
    projections = forward_project(cmatrix, preds)
    with open(out, "wb") as fh:
        np.save(fh, projections)
    click.echo(
        f"projected {np.atleast_2d(projections).shape[0]} predictions "
        f"through {cmatrix.n} chords into {out}"
    )


if __name__ == "__main__":
    main()
