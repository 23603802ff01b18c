"""Command-line entry point for reproducible estimation runs.

Subcommands: synth, train, evaluate, sensitivity, decompose, ablate.
Exit codes: 0 success, 1 user/configuration error, 2 runtime or numeric
failure. Every output file embeds a sha256 of the resolved configuration
so artifacts can be traced back to the run that produced them.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import evaluation, lstm, sensitivity, signals, synthcell
from .errors import (
    ChannelSetError,
    ConfigError,
    NonFiniteError,
    ProtocolError,
    SchemaError,
    ShapeError,
    SocsenseError,
)

logger = logging.getLogger("socsense")


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    """Validated JSON run configuration (unknown keys rejected)."""

    dataset: str
    channels: str | list = "VI"
    window_length: int = 50
    stride: int = 1
    hidden_size: int = 16
    intervals: int = 10
    decompose_tau_s: float = 3600.0
    train_fraction: float = 0.8
    max_epochs: int = 6000
    patience: int | None = None
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int | None = 64
    clip_norm: float = 5.0
    val_fraction: float = 0.1
    steady_threshold: float = 0.05
    seed: int = 0
    out: str = "runs/out"

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known - {"channel_sets"})
        if unknown:
            raise ConfigError(f"config {path}: unknown keys {unknown}")
        if "dataset" not in raw:
            raise ConfigError(f"config {path}: missing required key 'dataset'")
        extra = {k: raw.pop(k) for k in list(raw) if k == "channel_sets"}
        cfg = cls(**raw)
        object.__setattr__(cfg, "_channel_sets", extra.get("channel_sets"))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.window_length < 1:
            raise ConfigError("window_length must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.intervals < 1:
            raise ConfigError("intervals must be >= 1")
        if self.hidden_size < 1:
            raise ConfigError("hidden_size must be >= 1")

    @property
    def channel_sets(self) -> list | None:
        return getattr(self, "_channel_sets", None)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        if self.channel_sets is not None:
            out["channel_sets"] = self.channel_sets
        return out

    def train_config(self) -> lstm.TrainConfig:
        return lstm.TrainConfig(
            max_epochs=self.max_epochs, patience=self.patience,
            learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
            epsilon=self.epsilon, batch_size=self.batch_size, clip_norm=self.clip_norm,
            window_length=self.window_length, val_fraction=self.val_fraction,
            seed=self.seed,
        )

    def ablation_config(self) -> evaluation.AblationConfig:
        return evaluation.AblationConfig(
            hidden_size=self.hidden_size, train_fraction=self.train_fraction,
            stride=self.stride, decompose_tau_s=self.decompose_tau_s,
            steady_threshold=self.steady_threshold, train=self.train_config(),
        )


def _maybe_decompose(matrix: signals.SignalMatrix, wanted, tau_s: float
                     ) -> signals.SignalMatrix:
    """Derive T_HF/T_LF when they are the only missing channels and T exists."""
    missing = [c for c in wanted if c not in matrix.channels]
    if missing and set(missing) <= {"T_HF", "T_LF"} and "T" in matrix.channels:
        return signals.add_temperature_decomposition(matrix, tau_s=tau_s)
    return matrix


def _load_matrix_for(config: RunConfig, channel_set) -> signals.SignalMatrix:
    matrix, _ = signals.load_dataset(config.dataset)
    cs = signals.resolve_channel_set(channel_set)
    return _maybe_decompose(matrix, cs.members, config.decompose_tau_s)


# --- subcommands -----------------------------------------------------------


def cmd_synth(args) -> int:
    manifest = synthcell.generate_suite(args.scenario, args.out,
                                        cycles=args.cycles, seed=args.seed)
    for p in manifest["_paths"]:
        print(p)
    return 0


def cmd_train(args) -> int:
    config = RunConfig.from_file(args.config, {"seed": args.seed, "out": args.out})
    digest = _config_hash(config.to_dict())
    matrix = _load_matrix_for(config, config.channels)
    cs = signals.resolve_channel_set(config.channels)
    train_set, test_set = signals.prepare_dataset(
        matrix, cs, config.window_length,
        train_fraction=config.train_fraction, stride=config.stride,
    )
    rng = np.random.default_rng(config.seed)
    model = lstm.LstmModel.init(rng, cs.members, hidden=config.hidden_size)
    result = lstm.train(model, train_set, config.train_config())

    train_preds = lstm.predict_dataset(result.model, train_set)
    test_preds = lstm.predict_dataset(result.model, test_set)
    train_report = evaluation.evaluate_predictions(train_set.targets, train_preds,
                                                   config.steady_threshold)
    test_report = evaluation.evaluate_predictions(test_set.targets, test_preds,
                                                  config.steady_threshold)

    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lstm.save_checkpoint(result.model, out_dir / "checkpoint.json",
                         stats=train_set.stats, window_length=config.window_length,
                         config_sha256=digest,
                         meta={"channel_set": cs.tag, "epochs_run": result.epochs_run,
                               "best_epoch": result.best_epoch})
    with (out_dir / "loss_history.csv").open("w", encoding="utf-8") as fh:
        fh.write(f"# config_sha256={digest}\n")
        fh.write("epoch,train_loss,val_loss\n")
        for e, tl in enumerate(result.train_loss):
            vl = result.val_loss[e] if result.val_loss else ""
            fh.write(f"{e},{tl!r},{vl!r}\n" if vl != "" else f"{e},{tl!r},\n")
    metrics = {
        "channel_set": cs.tag,
        "train": train_report.to_json(),
        "test": test_report.to_json(),
        "epochs_run": result.epochs_run,
        "config_sha256": digest,
    }
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n",
                                          encoding="utf-8")
    print(f"trained {cs.tag}: test MAE {test_report.mae:.6f}, "
          f"RMSE {test_report.rmse:.6f} ({result.epochs_run} epochs)")
    return 0


def _windows_for_checkpoint(model, stats, window_length, matrix, split, train_fraction):
    dataset = signals.make_windows(matrix, model.channels, window_length)
    windows = stats.apply(dataset.windows)
    n_train, _ = signals.train_test_counts(len(dataset), train_fraction)
    if split == "train":
        sl = slice(0, n_train)
    elif split == "test":
        sl = slice(n_train, None)
    else:
        sl = slice(None)
    return windows[sl], dataset.targets[sl]


def cmd_evaluate(args) -> int:
    model, stats, meta = lstm.load_checkpoint(args.checkpoint)
    if stats is None or meta.get("window_length") is None:
        raise ConfigError(f"checkpoint {args.checkpoint} lacks normalization/window metadata")
    matrix, _ = signals.load_dataset(args.dataset)
    matrix = _maybe_decompose(matrix, model.channels, args.tau)
    windows, targets = _windows_for_checkpoint(model, stats, meta["window_length"],
                                               matrix, args.split, args.train_fraction)
    preds = np.concatenate([
        lstm.forward_batch(model, windows[s:s + 4096])
        for s in range(0, len(windows), 4096)
    ])
    report = evaluation.evaluate_predictions(targets, preds, args.steady_threshold)
    payload = report.to_json()
    payload["split"] = args.split
    payload["config_sha256"] = meta.get("config_sha256")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    if args.steady:
        print(f"MAE {report.mae:.6f} RMSE {report.rmse:.6f} "
              f"steady-MAE {report.steady_mae} steady-RMSE {report.steady_rmse}")
    else:
        print(f"MAE {report.mae:.6f} RMSE {report.rmse:.6f} over {report.count} samples")
    return 0


def cmd_sensitivity(args) -> int:
    model, stats, meta = lstm.load_checkpoint(args.checkpoint)
    if stats is None or meta.get("window_length") is None:
        raise ConfigError(f"checkpoint {args.checkpoint} lacks normalization/window metadata")
    matrix, _ = signals.load_dataset(args.dataset)
    matrix = _maybe_decompose(matrix, model.channels, args.tau)
    missing = [c for c in model.channels if c not in matrix.channels]
    if missing:
        raise ChannelSetError(
            f"checkpoint needs channels {list(model.channels)} but dataset provides "
            f"{list(matrix.channels)} (missing {missing})"
        )
    window_length = int(meta["window_length"])
    dataset = signals.make_windows(matrix, model.channels, window_length)
    n_train, _ = signals.train_test_counts(len(dataset), args.train_fraction)
    train_rows = int(dataset.end_rows[n_train - 1]) + 1
    partitions = sensitivity.build_partitions(matrix, model.channels, train_rows,
                                              n_intervals=args.intervals)
    prof = sensitivity.profile(model, matrix, partitions, window_length, stats)
    summary = sensitivity.summarize(prof)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = meta.get("config_sha256")
    sensitivity.write_profile_csv(prof, out_dir / "profile.csv", config_sha256=digest)
    sensitivity.write_summary_json(summary, out_dir / "summary.json", config_sha256=digest)
    print(f"profile: {prof.n_steps} steps x {len(prof.channels)} channels; "
          f"ranking {' > '.join(summary.ranking)}")
    return 0


def cmd_decompose(args) -> int:
    matrix, _ = signals.load_dataset(args.dataset)
    out = signals.add_temperature_decomposition(matrix, tau_s=args.tau)
    digest = _config_hash({"dataset": str(args.dataset), "tau_s": args.tau})
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    signals.write_csv(out, out_path, header_comment=f"config_sha256={digest}")
    print(out_path)
    return 0


def cmd_ablate(args) -> int:
    config = RunConfig.from_file(args.config, {"seed": args.seed, "out": args.out})
    tags = config.channel_sets or ([config.channels] if isinstance(config.channels, str)
                                   else list(config.channels))
    digest = _config_hash(config.to_dict())
    matrix, _ = signals.load_dataset(config.dataset)
    results = evaluation.run_ablation(matrix, tags, config.ablation_config())
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = [signals.resolve_channel_set(t).tag for t in tags]
    baseline = "VI" if "VI" in resolved else resolved[0]
    evaluation.write_ablation_report(results, out_dir / "ablation.json",
                                     baseline_tag=baseline, config_sha256=digest)
    for r in results:
        evaluation.write_error_csv(r.report, out_dir / f"errors_{r.tag}.csv",
                                   config_sha256=digest)
        print(f"{r.tag}: MAE {r.report.mae:.6f} RMSE {r.report.rmse:.6f} "
              f"improvement {r.improvement_vs_baseline:+.1%}")
    return 0


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="socsense",
                                     description="Multi-sensor battery SOC estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset scenario")
    p.add_argument("scenario", choices=sorted(synthcell.SCENARIOS))
    p.add_argument("--out", required=True)
    p.add_argument("--cycles", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--steady", action="store_true",
                   help="also print steady-state (settled) metrics")
    p.add_argument("--steady-threshold", type=float, default=0.05)
    p.add_argument("--tau", type=float, default=3600.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sensitivity", help="export phi profile and summary")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--intervals", type=int, default=10)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--tau", type=float, default=3600.0)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("decompose", help="append temperature HF/LF channels")
    p.add_argument("--dataset", required=True)
    p.add_argument("--tau", type=float, default=3600.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("ablate", help="compare channel sets on one dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


USER_ERRORS = (ConfigError, SchemaError, ChannelSetError, ProtocolError,
               FileNotFoundError)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, ShapeError, SocsenseError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
