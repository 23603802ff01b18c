"""Error metrics, steady-state filtering, and the channel-set ablation harness."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, SchemaError, ShapeError
from .lstm import LstmModel, TrainConfig, predict_dataset, train
from .signals import (
    SignalMatrix,
    add_temperature_decomposition,
    prepare_dataset,
    resolve_channel_set,
)

Array = np.ndarray


def _paired(y, y_hat) -> tuple[Array, Array]:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ShapeError(f"metrics: series shapes differ: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise SchemaError("metrics: empty series")
    return y, y_hat


def mae(y, y_hat) -> float:
    """Mean absolute error."""
    y, y_hat = _paired(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def rmse(y, y_hat) -> float:
    """Root mean squared error."""
    y, y_hat = _paired(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


@dataclass(frozen=True)
class SteadyStateResult:
    """Suffix of an error series after it settles below the threshold."""

    mask: Array
    start_index: int | None    # None when the series never settles
    mae: float | None
    rmse: float | None

    @property
    def converged(self) -> bool:
        return self.start_index is not None


def steady_state_filter(errors, threshold: float = 0.05) -> SteadyStateResult:
    """Select the suffix after which |error| stays strictly below threshold.

    A series that never re-enters the band ends in the no-convergence
    state (all-false mask, metrics None) rather than an exception.
    """
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise SchemaError("steady_state_filter: empty series")
    bad = np.abs(errors) >= threshold
    if not bad.any():
        start = 0
    else:
        last_bad = int(np.nonzero(bad)[0][-1])
        start = last_bad + 1
        if start >= errors.size:
            mask = np.zeros(errors.size, dtype=bool)
            return SteadyStateResult(mask=mask, start_index=None, mae=None, rmse=None)
    mask = np.zeros(errors.size, dtype=bool)
    mask[start:] = True
    tail = errors[start:]
    return SteadyStateResult(mask=mask, start_index=start,
                             mae=float(np.mean(np.abs(tail))),
                             rmse=float(np.sqrt(np.mean(tail * tail))))


@dataclass(frozen=True)
class MetricReport:
    mae: float
    rmse: float
    count: int
    steady_mae: float | None
    steady_rmse: float | None
    steady_start: int | None
    errors: Array = field(repr=False)

    def __post_init__(self):
        assert self.rmse >= self.mae >= 0.0, "power-mean inequality violated"

    def to_json(self) -> dict:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "count": self.count,
            "steady_mae": self.steady_mae,
            "steady_rmse": self.steady_rmse,
            "steady_start": self.steady_start,
        }


def evaluate_predictions(y_true, y_pred, steady_threshold: float = 0.05) -> MetricReport:
    y, y_hat = _paired(y_true, y_pred)
    errors = y_hat - y
    steady = steady_state_filter(errors, threshold=steady_threshold)
    return MetricReport(mae=mae(y, y_hat), rmse=rmse(y, y_hat), count=int(y.size),
                        steady_mae=steady.mae, steady_rmse=steady.rmse,
                        steady_start=steady.start_index, errors=errors)


# ---------------------------------------------------------------------------
# ablation harness


@dataclass(frozen=True)
class AblationConfig:
    hidden_size: int = 16
    train_fraction: float = 0.8
    stride: int = 1
    decompose_tau_s: float = 3600.0
    steady_threshold: float = 0.05
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass(frozen=True)
class AblationResult:
    tag: str
    report: MetricReport
    improvement_vs_baseline: float


def _needs_decomposition(tags) -> bool:
    for tag in tags:
        cs = resolve_channel_set(tag)
        if "T_HF" in cs.members or "T_LF" in cs.members:
            return True
    return False


def run_channel_set(matrix: SignalMatrix, channel_set, config: AblationConfig
                    ):
    """Window, split, train, and evaluate a single channel combination.

    Returns (report, trained model, train split, test split).
    """
    cs = resolve_channel_set(channel_set)
    if ("T_HF" in cs.members or "T_LF" in cs.members) and "T_HF" not in matrix.channels:
        matrix = add_temperature_decomposition(matrix, tau_s=config.decompose_tau_s)
    train_set, test_set = prepare_dataset(
        matrix, cs, config.train.window_length,
        train_fraction=config.train_fraction, stride=config.stride,
    )
    rng = np.random.default_rng(config.train.seed)
    model = LstmModel.init(rng, cs.members, hidden=config.hidden_size)
    result = train(model, train_set, config.train)
    preds = predict_dataset(result.model, test_set)
    report = evaluate_predictions(test_set.targets, preds,
                                  steady_threshold=config.steady_threshold)
    return report, result, train_set, test_set


def run_ablation(matrix: SignalMatrix, channel_sets, config: AblationConfig
                 ) -> list[AblationResult]:
    """Train and evaluate every channel combination on the same data.

    Every set trains with the same fixed seed so that ranking differences
    isolate the channel effect. Improvements are relative to the VI set
    when present, otherwise to the first requested set. Results come back
    sorted by test MAE.
    """
    tags = [resolve_channel_set(t).tag for t in channel_sets]
    if len(set(tags)) != len(tags):
        dupes = sorted({t for t in tags if tags.count(t) > 1})
        raise ConfigError(f"run_ablation: duplicated channel-set tags {dupes}")
    if not tags:
        raise ConfigError("run_ablation: no channel sets given")
    if _needs_decomposition(tags) and "T_HF" not in matrix.channels:
        matrix = add_temperature_decomposition(matrix, tau_s=config.decompose_tau_s)

    reports: dict[str, MetricReport] = {}
    for tag in tags:
        report, _, _, _ = run_channel_set(matrix, tag, config)
        reports[tag] = report

    baseline_tag = "VI" if "VI" in tags else tags[0]
    base_mae = reports[baseline_tag].mae
    results = [
        AblationResult(tag=tag, report=rep,
                       improvement_vs_baseline=(base_mae - rep.mae) / base_mae)
        for tag, rep in reports.items()
    ]
    results.sort(key=lambda r: r.report.mae)
    return results


def write_ablation_report(results: list[AblationResult], path: str | Path,
                          baseline_tag: str | None = None,
                          config_sha256: str | None = None) -> None:
    payload = {
        "baseline": baseline_tag,
        "results": [
            {"tag": r.tag, "improvement_vs_baseline": r.improvement_vs_baseline,
             **r.report.to_json()}
            for r in results
        ],
        "config_sha256": config_sha256,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def write_error_csv(report: MetricReport, path: str | Path,
                    config_sha256: str | None = None) -> None:
    """Per-step error trajectory for external plotting."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if config_sha256:
            fh.write(f"# config_sha256={config_sha256}\n")
        fh.write("index,error\n")
        for j, e in enumerate(report.errors):
            fh.write(f"{j},{float(e)!r}\n")
