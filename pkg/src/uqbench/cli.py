import sys
import time
from datetime import datetime
from functools import wraps
from pathlib import Path

import click
import numpy as np
from loguru import logger
from pydantic import ValidationError

from .config import RunConfig, load_run_config, settings
from .datasets import DatasetError, load_named, subsample_per_class
from .harness import (
    CsvWriteError,
    TrialError,
    format_value,
    run_regression_toy,
    run_sweep,
    trial_seed,
    two_moons_grid,
    two_moons_sweep_data,
    write_csv,
    write_manifest,
    write_table,
)
from .methods.registry import fit_method, method_spec
from .nn.gradcheck import TOLERANCE, run_suite
from .nn.layers import NNError
from .schemas import (
    Aggregator,
    Method,
    MethodConfig,
    RegressionCurve,
    RegressionMethod,
    SweepData,
    SweepPlan,
    TrainConfig,
)

SWEEP_EPOCHS = 100
TOY_EPOCHS = {"two-moons": 100, "regression": 1000}
RUNTIME_ERRORS = (DatasetError, TrialError, CsvWriteError, NNError, OSError)


def configure_logging(debug: bool) -> None:
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if debug else "INFO")


def run_options(f):
    """Options shared by the run subcommands; they land in a RunConfig."""
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Flat key=value config file"),
        click.option("--preset", help="Named preset (desk)"),
        click.option("--dataset", help="two_moons, fashion_mnist, mnist or cifar10"),
        click.option("--ood-dataset", help="OOD dataset (defaults: mnist for fashion_mnist, svhn for cifar10)"),
        click.option("--data-dir", help="Directory holding <dataset>/ files"),
        click.option("--method", help="Comma-separated methods"),
        click.option("--aggregator", help="Comma-separated gradient aggregators"),
        click.option("--spc", help="Comma-separated samples-per-class values"),
        click.option("--trials", help="Trials per SPC value"),
        click.option("--epochs", help="Training epochs"),
        click.option("--batch-size", help="Mini-batch size"),
        click.option("--min-steps", help="Train small sets for at least this many optimizer steps"),
        click.option("--mc-samples", help="Forward passes for MC methods"),
        click.option("--ensemble-size", help="Deep ensemble members"),
        click.option("--seed", help="Base seed"),
        click.option("--out-dir", help="Output directory"),
        click.option("--grid-resolution", help="Grid points per axis (toy)"),
        click.option("--workers", help="Threads for trial fan-out"),
        click.option("--snapshot-dir", help="Write UQW1 weight snapshots here"),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def build_config(config_path: Path | None, **flags) -> RunConfig:
    try:
        return load_run_config(config_path, **flags)
    except ValidationError as e:
        raise click.UsageError(str(e)) from e


def fails_cleanly(f):
    """Report runtime failures in red, remove partial outputs and exit 1."""

    @wraps(f)
    def wrapper(*args, **kwargs):
        written: list[Path] = []
        try:
            return f(*args, written=written, **kwargs)
        except RUNTIME_ERRORS as e:
            for path in written:
                path.unlink(missing_ok=True)
            click.secho(f"Error: {e}", fg="red", err=True)
            sys.exit(1)

    return wrapper


def method_configs(cfg: RunConfig) -> list[MethodConfig]:
    configs = []
    for method in cfg.method:
        aggregators = cfg.aggregator if method is Method.gradient else [Aggregator.l1]
        for aggregator in aggregators:
            configs.append(
                MethodConfig(
                    method=method,
                    mc_samples=cfg.mc_samples,
                    drop_prob=cfg.drop_prob,
                    ensemble_size=cfg.ensemble_size,
                    gd={"aggregator": aggregator},
                )
            )
    return configs


def sweep_filename(cfg: RunConfig, method_cfg: MethodConfig) -> str:
    kind = "maxprob" if method_cfg.method is Method.gradient else "entropy"
    arch = "mlp" if cfg.dataset == "two_moons" else "miniVGG"
    suffix = f"-{method_cfg.gd.aggregator.value}" if method_cfg.method is Method.gradient else ""
    return f"{kind}-vs-SPC-{cfg.dataset}-results-{arch}-{method_cfg.method.value}{suffix}-combined.csv"


def load_sweep_data(cfg: RunConfig) -> tuple[SweepData, str]:
    if cfg.dataset == "two_moons":
        return two_moons_sweep_data(cfg.spc[-1], cfg.seed), "mlp"
    data = SweepData(
        train=load_named(cfg.dataset, "train", cfg.data_dir),
        test=load_named(cfg.dataset, "test", cfg.data_dir),
        ood=load_named(cfg.resolved_ood, "test", cfg.data_dir),
    )
    return data, "cnn"


def finish_manifest(cfg: RunConfig, started: datetime, extra: dict[str, str]) -> Path:
    # provenance goes in comment lines so the manifest reloads as a config file
    comments = [f"started_at={started.isoformat()}", f"wall_time_seconds={time.time() - started.timestamp():.3f}"]
    comments += [f"{key}={value}" for key, value in extra.items()]
    return write_manifest(cfg.out_dir / "manifest.txt", cfg.manifest_values(), comments)


@click.group()
@click.option("--debug", is_flag=True, help="Enable debug output")
def cli(debug: bool):
    """uqbench - uncertainty quantification benchmarks at desk scale."""
    configure_logging(debug or settings.debug)


@cli.command()
@run_options
@fails_cleanly
def sweep(config_path: Path | None, written: list[Path], **flags):
    """Run SPC sweeps and write one CSV per method (and aggregator)."""
    cfg = build_config(config_path, **flags)
    started = datetime.now()
    data, architecture = load_sweep_data(cfg)
    n_classes = data.train.n_classes
    plan = SweepPlan(spc_values=cfg.spc, trials=cfg.trials, base_seed=cfg.seed)
    train_cfg = TrainConfig(
        epochs=cfg.epochs if cfg.epochs is not None else SWEEP_EPOCHS,
        batch_size=cfg.batch_size,
        min_steps=cfg.min_steps,
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
    )

    for method_cfg in method_configs(cfg):
        spec = method_spec(method_cfg, architecture, data.train.features.shape[1:], n_classes)
        rows = run_sweep(method_cfg, spec, data, plan, train_cfg, cfg.workers, cfg.n_bins, cfg.snapshot_dir)
        path = cfg.out_dir / sweep_filename(cfg, method_cfg)
        written.append(path)
        write_csv(rows, path)
        click.secho(f"Wrote {path}", fg="green")

    seeds = [f"{spc}:{t}:{trial_seed(cfg.seed, spc, t)}" for spc in cfg.spc for t in range(cfg.trials)]
    written.append(cfg.out_dir / "manifest.txt")
    finish_manifest(cfg, started, {"trial_seeds": ",".join(seeds)})


@cli.command()
@click.option("--seed", default=0, help="Seed for the random check inputs")
@click.option("--inject-error", is_flag=True, hidden=True)
def gradcheck(seed: int, inject_error: bool):
    """Compare analytic and finite-difference gradients of every layer and loss."""
    errors = run_suite(seed, perturb=0.5 if inject_error else 0.0)
    worst = 0.0
    for name, error in errors.items():
        ok = error < TOLERANCE
        status = click.style("OK", fg="green") if ok else click.style("FAIL", fg="red")
        click.echo(f"  {name}: {error:.3e} {status}")
        worst = max(worst, error)
    if worst >= TOLERANCE:
        click.secho(f"Gradient check failed (worst {worst:.3e} >= {TOLERANCE:g})", fg="red")
        sys.exit(1)
    click.secho(f"All gradients match (worst {worst:.3e})", fg="green")


@cli.command()
@run_options
@click.option("--mode", type=click.Choice(["two-moons", "regression"]), help="Toy problem")
@click.option("--n-samples", help="Comma-separated regression sample counts")
@click.option("--regression-method", help="Comma-separated regression methods")
@fails_cleanly
def toy(config_path: Path | None, written: list[Path], **flags):
    """Dump Two Moons confidence grids or regression curves for plotting."""
    cfg = build_config(config_path, **flags)
    started = datetime.now()
    epochs = cfg.epochs if cfg.epochs is not None else TOY_EPOCHS[cfg.mode]
    train_cfg = TrainConfig(
        epochs=epochs,
        batch_size=cfg.batch_size,
        min_steps=cfg.min_steps,
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
    )

    if cfg.mode == "regression":
        for method in cfg.regression_method:
            for n in cfg.n_samples:
                curve = run_regression_toy(method, n, train_cfg, regression_method_config(cfg), grid_resolution=cfg.grid_resolution)
                path = cfg.out_dir / f"regression-{method.value}-n{n}.csv"
                written.append(path)
                write_table(path, ["x", "mean", "sigma_aleatoric", "sigma_epistemic"], regression_rows(curve))
                click.secho(f"Wrote {path}", fg="green")
    else:
        data = two_moons_sweep_data(cfg.spc[-1], cfg.seed)
        for method_cfg in method_configs(cfg):
            spec = method_spec(method_cfg, "mlp", (2,), 2)
            for spc in cfg.spc:
                seed = trial_seed(cfg.seed, spc, 0)
                train_sub = subsample_per_class(data.train, spc, seed)
                predictor = fit_method(method_cfg, spec, train_sub, train_cfg.model_copy(update={"seed": seed}))
                points, confidence = two_moons_grid(predictor, cfg.grid_resolution, np.random.default_rng(seed))
                suffix = f"-{method_cfg.gd.aggregator.value}" if method_cfg.method is Method.gradient else ""
                path = cfg.out_dir / f"two-moons-{method_cfg.method.value}{suffix}-spc{spc}.csv"
                written.append(path)
                rows = ([format_value(x), format_value(y), format_value(c)] for (x, y), c in zip(points, confidence))
                write_table(path, ["x", "y", "confidence"], rows)
                click.secho(f"Wrote {path}", fg="green")

    written.append(cfg.out_dir / "manifest.txt")
    finish_manifest(cfg, started, {})


def regression_method_config(cfg: RunConfig) -> MethodConfig:
    return MethodConfig(
        method=Method.baseline, mc_samples=cfg.mc_samples, drop_prob=cfg.drop_prob, ensemble_size=cfg.ensemble_size
    )


def regression_rows(curve: RegressionCurve):
    no_sigma = curve.method is RegressionMethod.baseline_mse
    for i, x in enumerate(curve.x):
        aleatoric = "" if curve.aleatoric_var is None else format_value(float(np.sqrt(curve.aleatoric_var[i])))
        epistemic = "" if no_sigma else format_value(curve.epistemic_std[i])
        yield [format_value(x), format_value(curve.mean[i]), aleatoric, epistemic]


if __name__ == "__main__":
    cli()
