"""Experiment driver: SPC sweeps, the regression toy and their file outputs."""

import os
import tempfile
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from dotenv import dotenv_values, set_key
from loguru import logger

from .datasets import make_toy_regression, make_two_moons, subsample_per_class, toy_regression_grid, two_moons_ood
from .methods.gradient import gradient_to_confidence
from .methods.registry import Predictor, fit_method
from .metrics import DEFAULT_BINS, confidence_scores, entropy_scores, ood_suite, prediction_ece
from .nn.model import Network, build, regression_spec
from .nn.train import train
from .nn.weights import save_weights
from .schemas import (
    LabeledDataset,
    LayerKind,
    LayerSpec,
    LossKind,
    Method,
    MethodConfig,
    ModelSpec,
    Mode,
    PredictionSet,
    RegressionCurve,
    RegressionMethod,
    SweepData,
    SweepPlan,
    SweepRow,
    Tensor,
    TrainConfig,
    TrialResult,
)

METRIC_FIELDS = list(TrialResult.model_fields)
CSV_COLUMNS = ["spc"] + [f"{stat}_{name}" for name in METRIC_FIELDS for stat in ("mean", "std")]
TWO_MOONS_BOX = ((-2.0, 3.0), (-1.5, 2.0))


class TrialError(Exception):
    def __init__(self, method: Method, spc: int, trial: int | None, cause: Exception):
        self.method = method
        self.spc = spc
        self.trial = trial
        super().__init__(f"{method.short} trial {trial} at SPC={spc} failed: {cause}")


class CsvWriteError(Exception):
    pass


def trial_seed(base_seed: int, spc: int, trial: int) -> int:
    """Seed of one (SPC, trial) cell; independent of which other cells exist."""
    return int(np.random.SeedSequence(base_seed, spawn_key=(spc, trial)).generate_state(1)[0])


def _child_seeds(seed: int, n: int) -> list[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def evaluate_trial(
    pred_train: PredictionSet,
    pred_test: PredictionSet,
    pred_ood: PredictionSet,
    train_labels: np.ndarray,
    test_labels: np.ndarray,
    method: Method,
    n_bins: int = DEFAULT_BINS,
) -> TrialResult:
    if method is Method.gradient:
        # one confidence scale for the ECEs and mean max-prob; AUC pairs renormalise on their own
        scores = [p.raw_score for p in (pred_train, pred_test, pred_ood)]
        confidences = gradient_to_confidence(*scores)
        pred_train, pred_test, pred_ood = (
            p.model_copy(update={"confidence": c}) for p, c in zip((pred_train, pred_test, pred_ood), confidences)
        )
    suite = ood_suite(pred_train, pred_test, pred_ood, method)
    test_entropy = entropy_scores(pred_test)

    def nan_if_none(value: float | None) -> float:
        return float("nan") if value is None else value

    return TrialResult(
        acc=float(np.mean(np.argmax(pred_test.probs, axis=1) == test_labels)),
        mean_entropy=float("nan") if test_entropy is None else float(np.mean(test_entropy)),
        mean_maxprob=float(np.mean(confidence_scores(pred_test))),
        train_ece=prediction_ece(pred_train, train_labels, n_bins).ece,
        ece=prediction_ece(pred_test, test_labels, n_bins).ece,
        ood_auc_entropy=nan_if_none(suite.test_vs_ood_entropy),
        ood_auc_maxprob=suite.test_vs_ood_maxprob,
        tr_test_auc_entropy=nan_if_none(suite.train_vs_test_entropy),
        tr_test_auc_maxprob=suite.train_vs_test_maxprob,
        tr_ood_auc_entropy=nan_if_none(suite.train_vs_ood_entropy),
        tr_ood_auc_maxprob=suite.train_vs_ood_maxprob,
    )


def run_trial(
    method_cfg: MethodConfig,
    spec: ModelSpec,
    train_full: LabeledDataset,
    test_id: LabeledDataset,
    test_ood: LabeledDataset,
    spc: int,
    trial_seed: int,
    train_cfg: TrainConfig | None = None,
    n_bins: int = DEFAULT_BINS,
    trial: int | None = None,
    snapshot_dir: Path | None = None,
) -> TrialResult:
    """
    Sub-sample, train and evaluate one (method, SPC, trial) cell.

    Every failure below is re-raised as a TrialError carrying the cell.
    """
    train_cfg = train_cfg or TrainConfig()
    try:
        subsample_seed, train_seed, predict_seed = _child_seeds(trial_seed, 3)
        train_sub = subsample_per_class(train_full, spc, subsample_seed)
        predictor = fit_method(method_cfg, spec, train_sub, train_cfg.model_copy(update={"seed": train_seed}))
        if snapshot_dir is not None:
            _snapshot(predictor, snapshot_dir, spc, trial)

        rng_train, rng_test, rng_ood = np.random.default_rng(predict_seed).spawn(3)
        result = evaluate_trial(
            predictor.predict(train_sub.features, rng_train),
            predictor.predict(test_id.features, rng_test),
            predictor.predict(test_ood.features, rng_ood),
            train_sub.labels,
            test_id.labels,
            method_cfg.method,
            n_bins,
        )
    except Exception as e:
        raise TrialError(method_cfg.method, spc, trial, e) from e
    logger.debug("{} SPC={} trial={} acc={:.4f} ece={:.4f}", method_cfg.method.short, spc, trial, result.acc, result.ece)
    return result


def _snapshot(predictor: Predictor, directory: Path, spc: int, trial: int | None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for member, model in enumerate(predictor.models):
        name = f"{predictor.method.value}-spc{spc}-trial{trial if trial is not None else 0}-m{member}.uqw"
        save_weights(model, directory / name)


def aggregate_trials(spc: int, results: Sequence[TrialResult]) -> SweepRow:
    """Mean and population standard deviation of each metric over the trials."""
    values = np.array([[getattr(r, f) for f in METRIC_FIELDS] for r in results])
    mean = dict(zip(METRIC_FIELDS, values.mean(axis=0).tolist()))
    std = dict(zip(METRIC_FIELDS, values.std(axis=0).tolist()))
    return SweepRow(spc=spc, mean=TrialResult(**mean), std=TrialResult(**std))


def run_sweep(
    method_cfg: MethodConfig,
    spec: ModelSpec,
    data: SweepData,
    plan: SweepPlan,
    train_cfg: TrainConfig | None = None,
    workers: int = 1,
    n_bins: int = DEFAULT_BINS,
    snapshot_dir: Path | None = None,
) -> list[SweepRow]:
    """One row per SPC value, ascending. Trials may run on ``workers`` threads; results reduce in index order."""
    rows = []
    for spc in plan.spc_values:
        logger.info("{} SPC={} ({} trials)", method_cfg.method.short, spc, plan.trials)

        def one(trial: int) -> TrialResult:
            return run_trial(
                method_cfg,
                spec,
                data.train,
                data.test,
                data.ood,
                spc,
                trial_seed(plan.base_seed, spc, trial),
                train_cfg,
                n_bins,
                trial=trial,
                snapshot_dir=snapshot_dir,
            )

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one, range(plan.trials)))
        else:
            results = [one(trial) for trial in range(plan.trials)]
        rows.append(aggregate_trials(spc, results))
    return rows


def two_moons_sweep_data(max_spc: int, seed: int = 0) -> SweepData:
    """Training pool of max(max_spc, 1000) per class, 500 test points per class and 1000 OOD points."""
    train_seed, test_seed, ood_seed = _child_seeds(seed, 3)
    return SweepData(
        train=make_two_moons(max(max_spc, 1000), seed=train_seed),
        test=make_two_moons(500, seed=test_seed),
        ood=two_moons_ood(1000, seed=ood_seed),
    )


# Output files
def atomic_write_text(path: Path, text: str) -> Path:
    """Write via a temporary file in the target directory and rename it into place."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile("w", dir=path.parent, prefix=f".{path.name}.", delete=False) as f:
            f.write(text)
        os.replace(f.name, path)
    except OSError as e:
        raise CsvWriteError(f"cannot write {path}: {e}") from e
    return path


def format_value(value: float) -> str:
    return f"{value:.17g}"


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> Path:
    lines = [";".join(header)] + [";".join(row) for row in rows]
    return atomic_write_text(path, "\n".join(lines) + "\n")


def write_csv(rows: Sequence[SweepRow], path: Path) -> Path:
    """Semicolon-separated sweep table: spc, then mean_/std_ pairs in TrialResult field order."""
    if not rows:
        raise CsvWriteError("no sweep rows to write")
    lines = []
    for row in rows:
        cells = [str(row.spc)]
        for name in METRIC_FIELDS:
            cells += [format_value(getattr(row.mean, name)), format_value(getattr(row.std, name))]
        lines.append(cells)
    path = write_table(path, CSV_COLUMNS, lines)
    logger.info("wrote {} rows to {}", len(rows), path)
    return path


def read_csv(path: Path) -> list[SweepRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split(";") != CSV_COLUMNS:
        raise CsvWriteError(f"{path} is not a sweep table")
    rows = []
    for line in lines[1:]:
        cells = line.split(";")
        values = dict(zip(CSV_COLUMNS[1:], map(float, cells[1:])))
        rows.append(
            SweepRow(
                spc=int(cells[0]),
                mean=TrialResult.model_construct(**{f: values[f"mean_{f}"] for f in METRIC_FIELDS}),
                std=TrialResult.model_construct(**{f: values[f"std_{f}"] for f in METRIC_FIELDS}),
            )
        )
    return rows


def write_manifest(path: Path, values: dict[str, str], comments: Sequence[str] = ()) -> Path:
    """key=value run manifest, readable back as a config file; ``comments`` go first as # lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile("w", dir=path.parent, prefix=f".{path.name}.", delete=False) as f:
        f.writelines(f"# {line}\n" for line in comments)
        tmp = f.name
    for key, value in values.items():
        set_key(tmp, key, value, quote_mode="never")
    os.replace(tmp, path)
    return path


def read_manifest(path: Path) -> dict[str, str | None]:
    return dotenv_values(path)


# Toy problems
def two_moons_grid(predictor: Predictor, resolution: int, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """Grid points over the Two Moons box and the predictor's max-prob confidence at each."""
    (x0, x1), (y0, y1) = TWO_MOONS_BOX
    xx, yy = np.meshgrid(np.linspace(x0, x1, resolution), np.linspace(y0, y1, resolution))
    points = np.column_stack([xx.ravel(), yy.ravel()])
    return points, confidence_scores(predictor.predict(points, rng))


def _regression_model(method: RegressionMethod, drop_prob: float) -> tuple[ModelSpec, LossKind]:
    stochastic = dict(stochastic_eval=True)
    match method:
        case RegressionMethod.baseline_mse:
            return regression_spec(), LossKind.mse
        case RegressionMethod.ensemble_nll:
            return regression_spec(variance_head=[LayerSpec(kind=LayerKind.dense, units=1)]), LossKind.gaussian_nll
        case RegressionMethod.flipout:
            return regression_spec([LayerSpec(kind=LayerKind.flipout_dense, units=1, **stochastic)]), LossKind.mse
        case RegressionMethod.flipout_nll:
            flipout = [LayerSpec(kind=LayerKind.flipout_dense, units=1, **stochastic)]
            return regression_spec(flipout, variance_head=flipout), LossKind.gaussian_nll
        case RegressionMethod.dropout:
            head = [
                LayerSpec(kind=LayerKind.dropout, drop_prob=drop_prob, **stochastic),
                LayerSpec(kind=LayerKind.dense, units=1),
            ]
            return regression_spec(head), LossKind.mse
        case RegressionMethod.dropconnect:
            head = [LayerSpec(kind=LayerKind.dropconnect, units=1, drop_prob=drop_prob, **stochastic)]
            return regression_spec(head), LossKind.mse
    raise ValueError(f"unknown regression method {method}")


def _sample_heads(
    models: list[Network], grid: Tensor, n_samples: int, rng: np.random.Generator, ensemble: bool = False
) -> tuple[Tensor, Tensor | None]:
    """Stack mean (and variance) head outputs over ensemble members, or over MC passes of the single model."""
    if ensemble:
        outputs = [model.forward_heads(grid, Mode.eval) for model in models]
    else:
        outputs = [models[0].forward_heads(grid, Mode.eval, child) for child in rng.spawn(n_samples)]
    means = np.stack([mean[:, 0] for mean, _ in outputs])
    if outputs[0][1] is None:
        return means, None
    return means, np.stack([var[:, 0] for _, var in outputs])


def run_regression_toy(
    method: RegressionMethod,
    n_samples: int,
    cfg: TrainConfig | None = None,
    method_cfg: MethodConfig | None = None,
    grid_resolution: int = 200,
) -> RegressionCurve:
    """
    Fit the sin-regression toy and evaluate it on the [-7, 7] grid.

    Epistemic std is the spread of the mean head over ensemble members or MC
    passes; aleatoric variance is the averaged variance head output when the
    method has one.
    """
    cfg = cfg or TrainConfig(epochs=1000)
    method_cfg = method_cfg or MethodConfig(method=Method.baseline)
    spec, loss = _regression_model(method, method_cfg.drop_prob)
    data = make_toy_regression(n_samples, seed=cfg.seed)
    cfg = cfg.model_copy(update={"loss": loss})
    logger.info("regression toy: {} with {} samples", method.value, n_samples)

    if method is RegressionMethod.ensemble_nll:
        seeds = _child_seeds(cfg.seed, method_cfg.ensemble_size)
        models = [train(build(spec, s), data, cfg.model_copy(update={"seed": s})) for s in seeds]
    else:
        models = [train(build(spec, cfg.seed), data, cfg)]

    grid = toy_regression_grid(grid_resolution)
    deterministic = method is RegressionMethod.baseline_mse
    n_passes = 1 if deterministic else method_cfg.mc_samples
    ensemble = method is RegressionMethod.ensemble_nll
    means, variances = _sample_heads(models, grid, n_passes, np.random.default_rng(cfg.seed), ensemble)
    return RegressionCurve(
        method=method,
        n_samples=n_samples,
        x=grid[:, 0],
        mean=means.mean(axis=0),
        aleatoric_var=None if variances is None else variances.mean(axis=0),
        epistemic_std=np.zeros(len(grid)) if deterministic else means.std(axis=0),
    )
