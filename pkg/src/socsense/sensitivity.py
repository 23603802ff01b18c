"""Time-varying channel sensitivity via counterfactual substitution.

For a trained model f over windows of length S, the sensitivity of
channel l at step k is the probability-weighted absolute output change
when that channel is held constant — over the whole window — at each of
H interval means learned from the training data:

    phi_l(k) = sum_h P_{l,h} * | f(window_k) - f(window_k with channel l = mean_{l,h}) |

Intervals are equal-width over the training range of the raw signal;
P_{l,h} is the empirical occupancy of interval h. Substitution happens in
the model's normalized input space by mapping each interval mean through
the stored normalization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ChannelSetError, SchemaError, ShapeError
from .lstm import LstmModel, forward_batch
from .signals import ChannelStats, SignalMatrix

Array = np.ndarray


@dataclass(frozen=True)
class IntervalPartition:
    """Equal-width value intervals with per-interval means and occupancy."""

    channel: str
    bounds: Array        # (H+1,) ascending
    means: Array         # (H,)
    probabilities: Array  # (H,) summing to 1

    def __post_init__(self):
        object.__setattr__(self, "bounds", np.asarray(self.bounds, dtype=float))
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "probabilities", np.asarray(self.probabilities, dtype=float))
        h = len(self.means)
        if self.bounds.shape != (h + 1,) or self.probabilities.shape != (h,):
            raise ShapeError(f"IntervalPartition '{self.channel}': inconsistent sizes")
        if np.any(np.diff(self.bounds) <= 0):
            raise SchemaError(f"IntervalPartition '{self.channel}': bounds not ascending")
        if np.any(self.probabilities < 0):
            raise SchemaError(f"IntervalPartition '{self.channel}': negative probability")
        if abs(float(self.probabilities.sum()) - 1.0) > 1e-12:
            raise SchemaError(
                f"IntervalPartition '{self.channel}': probabilities sum to "
                f"{self.probabilities.sum()!r}"
            )
        inside = (self.means >= self.bounds[:-1] - 1e-12) & (self.means <= self.bounds[1:] + 1e-12)
        if not np.all(inside):
            raise SchemaError(f"IntervalPartition '{self.channel}': mean outside its interval")

    @property
    def n_intervals(self) -> int:
        return len(self.means)


def build_partition(values: Array, n_intervals: int, channel: str = "") -> IntervalPartition:
    """Fit an equal-width partition over the observed range of a series.

    Empty intervals get probability 0 and their midpoint as the mean. A
    constant series degenerates to a unit-width range centred on the value,
    putting all mass in the middle interval.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise SchemaError(f"build_partition '{channel}': empty series")
    if n_intervals < 1:
        raise ValueError("build_partition: n_intervals must be >= 1")
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    bounds = np.linspace(lo, hi, n_intervals + 1)
    width = (hi - lo) / n_intervals
    idx = np.floor((values - lo) / width).astype(int)
    idx = np.clip(idx, 0, n_intervals - 1)  # the max value belongs to the last interval
    counts = np.bincount(idx, minlength=n_intervals).astype(float)
    sums = np.bincount(idx, weights=values, minlength=n_intervals)
    midpoints = 0.5 * (bounds[:-1] + bounds[1:])
    means = np.where(counts > 0, sums / np.maximum(counts, 1.0), midpoints)
    probabilities = counts / counts.sum()
    return IntervalPartition(channel=channel, bounds=bounds, means=means,
                             probabilities=probabilities)


def build_partitions(matrix: SignalMatrix, channels, train_rows: int,
                     n_intervals: int | dict[str, int] = 10) -> dict[str, IntervalPartition]:
    """Partitions for several channels from the raw training rows."""
    if train_rows < 1 or train_rows > matrix.n_steps:
        raise ValueError(f"build_partitions: train_rows={train_rows} out of range")
    out = {}
    for c in channels:
        h = n_intervals[c] if isinstance(n_intervals, dict) else n_intervals
        out[c] = build_partition(matrix.channel_values(c)[:train_rows], h, channel=c)
    return out


def _normalized_means(partition: IntervalPartition, stats: ChannelStats) -> Array:
    return np.asarray([stats.apply_channel(partition.channel, m) for m in partition.means])


def sensitivity_at(model: LstmModel, window: Array,
                   partitions: dict[str, IntervalPartition], channel: str,
                   stats: ChannelStats) -> float:
    """Sensitivity of one channel for a single raw window (steps x channels)."""
    window = np.asarray(window, dtype=float)
    if window.ndim != 2 or window.shape[1] != len(model.channels):
        raise ShapeError(
            f"sensitivity_at: window {window.shape} vs {len(model.channels)} model channels"
        )
    if channel not in partitions:
        raise ChannelSetError(f"sensitivity_at: no partition for channel '{channel}'")
    if channel not in model.channels:
        raise ChannelSetError(
            f"sensitivity_at: channel '{channel}' not among model channels "
            f"{list(model.channels)}"
        )
    part = partitions[channel]
    col = model.channels.index(channel)
    base = stats.apply(window)
    norm_means = _normalized_means(part, stats)
    active = np.nonzero(part.probabilities > 0)[0]
    batch = np.repeat(base[None, :, :], 1 + len(active), axis=0)
    for row, h in enumerate(active, start=1):
        batch[row, :, col] = norm_means[h]
    preds = forward_batch(model, batch)
    deltas = np.abs(preds[0] - preds[1:])
    return float(np.sum(part.probabilities[active] * deltas))


def phi_for_windows(model: LstmModel, windows: Array,
                    partitions: dict[str, IntervalPartition],
                    stats: ChannelStats) -> Array:
    """phi for every model channel over already-normalized windows.

    Returns an (L, M) array; column j holds the sensitivities for window j.
    """
    windows = np.asarray(windows, dtype=float)
    for c in model.channels:
        if c not in partitions:
            raise ChannelSetError(f"phi_for_windows: no partition for channel '{c}'")
    phi = np.zeros((len(model.channels), windows.shape[0]))
    with threadpool_limits(limits=1, user_api="blas"):
        preds0 = forward_batch(model, windows)
        for col, channel in enumerate(model.channels):
            part = partitions[channel]
            norm_means = _normalized_means(part, stats)
            acc = np.zeros(windows.shape[0])
            for h in np.nonzero(part.probabilities > 0)[0]:
                counter = windows.copy()
                counter[:, :, col] = norm_means[h]
                acc += part.probabilities[h] * np.abs(preds0 - forward_batch(model, counter))
            phi[col] = acc
    return phi


@dataclass
class SensitivityProfile:
    """phi values for every channel over the evaluated window ends."""

    channels: tuple[str, ...]
    values: Array              # (L, K_eval), all >= 0
    end_rows: Array            # (K_eval,) source row of each window end
    timestamps: Array          # (K_eval,)
    window_length: int
    phase: list[str] | None = None
    partitions: dict[str, IntervalPartition] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != len(self.channels):
            raise ShapeError("SensitivityProfile: values rows != channels")
        if np.any(self.values < 0):
            raise SchemaError("SensitivityProfile: negative sensitivity")

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]


def profile(model: LstmModel, matrix: SignalMatrix,
            partitions: dict[str, IntervalPartition], window_length: int,
            stats: ChannelStats, chunk: int = 512) -> SensitivityProfile:
    """Evaluate phi for every model channel at every window end in the matrix."""
    if matrix.n_steps < window_length:
        raise SchemaError(
            f"profile: matrix has {matrix.n_steps} rows < window_length {window_length}"
        )
    missing = [c for c in model.channels if c not in matrix.channels]
    if missing:
        raise ChannelSetError(f"profile: matrix lacks model channels {missing}")
    for c in model.channels:
        if c not in partitions:
            raise ChannelSetError(f"profile: no partition for channel '{c}'")

    idx = [matrix.channel_index(c) for c in model.channels]
    raw = matrix.values[:, idx]
    view = np.lib.stride_tricks.sliding_window_view(raw, window_length, axis=0)
    k_eval = view.shape[0]
    ends = np.arange(window_length - 1, matrix.n_steps, dtype=int)

    phi = np.zeros((len(model.channels), k_eval))
    with threadpool_limits(limits=1, user_api="blas"):
        for start in range(0, k_eval, chunk):
            stop = min(start + chunk, k_eval)
            base = stats.apply(np.ascontiguousarray(view[start:stop].transpose(0, 2, 1)))
            preds0 = forward_batch(model, base)
            for col, channel in enumerate(model.channels):
                part = partitions[channel]
                norm_means = _normalized_means(part, stats)
                acc = np.zeros(stop - start)
                for h in np.nonzero(part.probabilities > 0)[0]:
                    counter = base.copy()
                    counter[:, :, col] = norm_means[h]
                    preds_h = forward_batch(model, counter)
                    acc += part.probabilities[h] * np.abs(preds0 - preds_h)
                phi[col, start:stop] = acc

    phase = [matrix.phase[int(e)] for e in ends] if matrix.phase is not None else None
    return SensitivityProfile(channels=model.channels, values=phi, end_rows=ends,
                              timestamps=matrix.timestamps[ends],
                              window_length=window_length, phase=phase,
                              partitions=partitions)


@dataclass
class SensitivitySummary:
    """Distribution statistics of phi per channel, ranked by mean."""

    channels: tuple[str, ...]
    stats: dict[str, dict[str, float]]
    ranking: tuple[str, ...]


def summarize(profile: SensitivityProfile) -> SensitivitySummary:
    if profile.n_steps == 0:
        raise SchemaError("summarize: empty profile")
    stats: dict[str, dict[str, float]] = {}
    for row, channel in enumerate(profile.channels):
        series = profile.values[row]
        q25, q50, q75 = np.percentile(series, [25.0, 50.0, 75.0])
        stats[channel] = {
            "mean": float(series.mean()),
            "median": float(q50),
            "q25": float(q25),
            "q75": float(q75),
            "min": float(series.min()),
            "max": float(series.max()),
        }
    ranking = tuple(sorted(profile.channels, key=lambda c: -stats[c]["mean"]))
    return SensitivitySummary(channels=profile.channels, stats=stats, ranking=ranking)


def write_profile_csv(profile: SensitivityProfile, path: str | Path,
                      config_sha256: str | None = None) -> None:
    path = Path(path)
    cols = ["k", "time_s", "phase"] + [f"phi_{c}" for c in profile.channels]
    with path.open("w", encoding="utf-8", newline="") as fh:
        if config_sha256:
            fh.write(f"# config_sha256={config_sha256}\n")
        fh.write(",".join(cols) + "\n")
        for j in range(profile.n_steps):
            parts = [str(int(profile.end_rows[j])), repr(float(profile.timestamps[j])),
                     profile.phase[j] if profile.phase is not None else ""]
            parts += [repr(float(profile.values[row, j])) for row in range(len(profile.channels))]
            fh.write(",".join(parts) + "\n")


def write_summary_json(summary: SensitivitySummary, path: str | Path,
                       config_sha256: str | None = None) -> None:
    payload = {
        "channels": list(summary.channels),
        "statistics": summary.stats,
        "ranking": list(summary.ranking),
        "config_sha256": config_sha256,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def perturbation_deviation(model: LstmModel, windows: Array, sigma: float,
                           seed: int = 0) -> dict[str, float]:
    """Mean absolute prediction change when Gaussian noise is injected into
    one (normalized) channel at a time; used to validate the phi ranking."""
    windows = np.asarray(windows, dtype=float)
    clean = forward_batch(model, windows)
    out: dict[str, float] = {}
    for col, channel in enumerate(model.channels):
        rng = np.random.default_rng([seed, col])
        noisy = windows.copy()
        noisy[:, :, col] += rng.normal(0.0, sigma, size=windows.shape[:2])
        out[channel] = float(np.mean(np.abs(forward_batch(model, noisy) - clean)))
    return out
