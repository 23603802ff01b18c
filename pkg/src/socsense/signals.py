"""Sensor data ingestion, temperature decomposition, windowing, splits.

Channels are identified by short ids (I, V, E, T, T_HF, T_LF, Phi,
Lambda, Psi, Eta, F, T_in, P). CSV files bind columns by header name,
never by position; `time_s`, `soc`, `phase` and `cycle_index` are
reserved non-channel columns.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ChannelSetError, SchemaError, ShapeError

logger = logging.getLogger(__name__)

Array = np.ndarray

# canonical channel order used whenever channels are written or sorted
CHANNEL_ORDER: tuple[str, ...] = (
    "I", "V", "E", "T", "T_HF", "T_LF", "Phi", "Lambda", "Psi", "Eta", "F", "T_in", "P",
)

# CSV header name <-> channel id
CSV_COLUMNS: dict[str, str] = {
    "current_a": "I",
    "voltage_v": "V",
    "expansion_um": "E",
    "temp_surface_c": "T",
    "temp_hf_c": "T_HF",
    "temp_lf_c": "T_LF",
    "intensity_au": "Phi",
    "wavelength_nm": "Lambda",
    "cathode_v": "Psi",
    "anode_v": "Eta",
    "force_n": "F",
    "temp_internal_c": "T_in",
    "pressure_kpa": "P",
}
CHANNEL_TO_CSV = {v: k for k, v in CSV_COLUMNS.items()}

TIME_COLUMN = "time_s"
SOC_COLUMN = "soc"
PHASE_COLUMN = "phase"
CYCLE_COLUMN = "cycle_index"
RESERVED_COLUMNS = (TIME_COLUMN, SOC_COLUMN, PHASE_COLUMN, CYCLE_COLUMN)


def _canonical_channel_sort(channels) -> list[str]:
    return sorted(channels, key=CHANNEL_ORDER.index)


@dataclass
class SignalMatrix:
    """Aligned multi-channel time series on a uniform grid."""

    timestamps: Array              # (K,) seconds, strictly increasing
    channels: tuple[str, ...]      # ordered channel ids, length L
    values: Array                  # (K, L)
    soc: Array | None = None       # (K,) ground-truth labels in [0, 1]
    phase: list[str] | None = None
    cycle: Array | None = None     # (K,) int cycle index

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.channels = tuple(self.channels)
        if self.values.ndim != 2 or self.values.shape != (len(self.timestamps), len(self.channels)):
            raise ShapeError(
                f"SignalMatrix: values {self.values.shape} vs "
                f"{len(self.timestamps)} timestamps x {len(self.channels)} channels"
            )
        if len(self.timestamps) and np.any(np.diff(self.timestamps) <= 0):
            raise SchemaError("SignalMatrix: timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise SchemaError("SignalMatrix: non-finite channel values")
        unknown = [c for c in self.channels if c not in CHANNEL_ORDER]
        if unknown:
            raise SchemaError(f"SignalMatrix: unknown channel ids {unknown}")
        if self.soc is not None:
            self.soc = np.asarray(self.soc, dtype=float)
            if self.soc.shape != (len(self.timestamps),):
                raise ShapeError("SignalMatrix: soc length mismatch")
            if not np.all(np.isfinite(self.soc)):
                raise SchemaError("SignalMatrix: non-finite soc labels")
            if np.any(self.soc < -1e-9) or np.any(self.soc > 1.0 + 1e-9):
                raise SchemaError("SignalMatrix: soc labels must lie in [0, 1]")
        if self.cycle is not None:
            self.cycle = np.asarray(self.cycle, dtype=int)

    @property
    def n_steps(self) -> int:
        return len(self.timestamps)

    def channel_index(self, channel: str) -> int:
        try:
            return self.channels.index(channel)
        except ValueError:
            raise ChannelSetError(
                f"channel '{channel}' not present; available: {list(self.channels)}"
            ) from None

    def channel_values(self, channel: str) -> Array:
        return self.values[:, self.channel_index(channel)]

    def select(self, channels) -> "SignalMatrix":
        idx = [self.channel_index(c) for c in channels]
        return replace(self, channels=tuple(channels), values=self.values[:, idx].copy())

    def with_channel(self, channel: str, series: Array) -> "SignalMatrix":
        if channel in self.channels:
            raise ChannelSetError(f"channel '{channel}' already present")
        series = np.asarray(series, dtype=float)
        if series.shape != (self.n_steps,):
            raise ShapeError(f"with_channel: series has shape {series.shape}")
        order = _canonical_channel_sort(self.channels + (channel,))
        merged = {c: self.channel_values(c) for c in self.channels}
        merged[channel] = series
        values = np.column_stack([merged[c] for c in order])
        return replace(self, channels=tuple(order), values=values)


def decompose_temperature(series: Array, tau_s: float, dt: float = 1.0
                          ) -> tuple[Array, Array]:
    """Split a temperature series into low/high frequency parts.

    The low-frequency part is a first-order exponential moving average
    with alpha = dt / (tau_s + dt), initialized at the first sample; the
    high-frequency part is the pointwise remainder, so the sum always
    reconstructs the input exactly.
    """
    series = np.asarray(series, dtype=float)
    if series.size == 0:
        raise SchemaError("decompose_temperature: empty series")
    if tau_s <= 0:
        raise ValueError("decompose_temperature: tau_s must be positive")
    alpha = dt / (tau_s + dt)
    low = ema(series, alpha)
    return low, series - low


def ema(series: Array, alpha: float) -> Array:
    """Exponential moving average, initialized at the first sample."""
    series = np.asarray(series, dtype=float)
    out = np.empty_like(series)
    acc = series[0]
    out[0] = acc
    for k in range(1, len(series)):
        acc += alpha * (series[k] - acc)  # drift-free form: constant inputs stay exact
        out[k] = acc
    return out


def add_temperature_decomposition(matrix: SignalMatrix, tau_s: float = 3600.0) -> SignalMatrix:
    """Append T_HF / T_LF channels derived from the surface temperature."""
    if "T_HF" in matrix.channels and "T_LF" in matrix.channels:
        return matrix
    t = matrix.channel_values("T")
    dt = float(matrix.timestamps[1] - matrix.timestamps[0]) if matrix.n_steps > 1 else 1.0
    low, high = decompose_temperature(t, tau_s, dt=dt)
    out = matrix
    if "T_LF" not in out.channels:
        out = out.with_channel("T_LF", low)
    if "T_HF" not in out.channels:
        out = out.with_channel("T_HF", high)
    return out


# ---------------------------------------------------------------------------
# channel sets


@dataclass(frozen=True)
class ChannelSet:
    tag: str
    members: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.members)) != len(self.members):
            raise ChannelSetError(f"channel set '{self.tag}' repeats a channel")
        unknown = [c for c in self.members if c not in CHANNEL_ORDER]
        if unknown:
            raise ChannelSetError(f"channel set '{self.tag}': unknown channels {unknown}")


_T_COMPOSITE = ("T", "T_HF", "T_LF")

CHANNEL_SETS: dict[str, tuple[str, ...]] = {
    "VI": ("V", "I"),
    "ET": ("E",) + _T_COMPOSITE,
    "VIT": ("V", "I") + _T_COMPOSITE,
    "VIE": ("V", "I", "E"),
    "VIET": ("V", "I", "E") + _T_COMPOSITE,
    "PhiLambda": ("Phi", "Lambda"),
    "VIPhi": ("V", "I", "Phi"),
    "VILambda": ("V", "I", "Lambda"),
    "VIPhiLambda": ("V", "I", "Phi", "Lambda"),
    "VIF": ("V", "I", "F"),
    "VIEta": ("V", "I", "Eta"),
    "VIEtaF": ("V", "I", "Eta", "F"),
    "VIPsi": ("V", "I", "Psi"),
    "VITin": ("V", "I", "T_in"),
    "VIP": ("V", "I", "P"),
}

_TAG_ALIASES = {
    "VIΦλ": "VIPhiLambda",
    "Φλ": "PhiLambda",
    "VIηF": "VIEtaF",
    "VIη": "VIEta",
    "VIΦ": "VIPhi",
    "VIλ": "VILambda",
}


def resolve_channel_set(tag_or_members) -> ChannelSet:
    """Look up a named channel combination, or build one from explicit ids."""
    if isinstance(tag_or_members, ChannelSet):
        return tag_or_members
    if isinstance(tag_or_members, str):
        tag = _TAG_ALIASES.get(tag_or_members, tag_or_members)
        if tag not in CHANNEL_SETS:
            raise ChannelSetError(
                f"unknown channel set '{tag_or_members}'; known tags: "
                f"{sorted(CHANNEL_SETS)}"
            )
        return ChannelSet(tag=tag, members=CHANNEL_SETS[tag])
    members = tuple(tag_or_members)
    return ChannelSet(tag="+".join(members), members=members)


# ---------------------------------------------------------------------------
# CSV / manifest ingestion


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    header: list[str] | None = None
    rows: list[list[str]] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        for line_no, record in enumerate(csv.reader(fh), start=1):
            if not record or (record[0].startswith("#")):
                continue
            if header is None:
                header = [c.strip() for c in record]
                continue
            if len(record) != len(header):
                raise SchemaError(f"{path}: row {line_no} has {len(record)} fields, "
                                  f"header has {len(header)}")
            rows.append(record)
    if header is None:
        raise SchemaError(f"{path}: no header row")
    return header, rows


def load_csv(path: str | Path, schema: dict[str, str] | None = None,
             resample_dt: float = 1.0, max_gap_s: float = 30.0,
             fill: str = "interpolate") -> SignalMatrix:
    """Parse a sensor CSV onto a uniform grid.

    Columns bind by header name through `schema` (csv name -> channel id,
    defaulting to the canonical map). Source gaps up to max_gap_s are
    linearly interpolated when fill="interpolate" (logged, never silent)
    and rejected when fill="error"; larger gaps always fail.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"dataset file not found: {path}")
    schema = dict(schema or CSV_COLUMNS)
    header, rows = _read_rows(path)
    if TIME_COLUMN not in header:
        raise SchemaError(f"{path}: missing required column '{TIME_COLUMN}'")
    for col in header:
        if col not in schema and col not in RESERVED_COLUMNS:
            raise SchemaError(f"{path}: unknown column '{col}'")
    if not rows:
        raise SchemaError(f"{path}: no data rows")

    col_idx = {name: i for i, name in enumerate(header)}

    def column_floats(name: str) -> Array:
        i = col_idx[name]
        out = np.empty(len(rows))
        for r, record in enumerate(rows):
            try:
                out[r] = float(record[i])
            except ValueError:
                raise SchemaError(
                    f"{path}: column '{name}' row {r + 1}: cannot parse {record[i]!r}"
                ) from None
        if not np.all(np.isfinite(out)):
            raise SchemaError(f"{path}: column '{name}' contains non-finite values")
        return out

    t = column_floats(TIME_COLUMN)
    if np.any(np.diff(t) <= 0):
        raise SchemaError(f"{path}: timestamps not strictly increasing")
    gaps = np.diff(t)
    big = float(gaps.max()) if len(gaps) else 0.0
    if big > max_gap_s:
        raise SchemaError(f"{path}: gap of {big:.3f}s exceeds max_gap_s={max_gap_s}")
    n_gaps = int(np.sum(gaps > resample_dt * 1.5))
    if n_gaps and fill == "error":
        raise SchemaError(f"{path}: {n_gaps} sampling gaps above {resample_dt * 1.5:.2f}s "
                          f"and fill='error'")

    channels_present = _canonical_channel_sort(
        schema[c] for c in header if c in schema
    )
    raw = {schema[c]: column_floats(c) for c in header if c in schema}
    soc = column_floats(SOC_COLUMN) if SOC_COLUMN in header else None

    # uniform grid covering the recorded span
    n_out = int(np.floor((t[-1] - t[0]) / resample_dt)) + 1
    grid = t[0] + resample_dt * np.arange(n_out)
    if n_gaps:
        logger.info("%s: interpolating across %d gaps during resampling", path.name, n_gaps)

    values = np.column_stack([np.interp(grid, t, raw[c]) for c in channels_present]) \
        if channels_present else np.empty((n_out, 0))
    soc_grid = np.interp(grid, t, soc) if soc is not None else None
    if soc_grid is not None:
        soc_grid = np.clip(soc_grid, 0.0, 1.0)

    phase = None
    cycle = None
    src_idx = np.clip(np.searchsorted(t, grid, side="right") - 1, 0, len(rows) - 1)
    if PHASE_COLUMN in header:
        i = col_idx[PHASE_COLUMN]
        src_phase = [record[i] for record in rows]
        phase = [src_phase[j] for j in src_idx]
    if CYCLE_COLUMN in header:
        cyc = column_floats(CYCLE_COLUMN)
        cycle = cyc[src_idx].astype(int)

    logger.info("%s: %d source rows -> %d samples at %.3g Hz",
                path.name, len(rows), n_out, 1.0 / resample_dt)
    return SignalMatrix(timestamps=grid, channels=tuple(channels_present),
                        values=values, soc=soc_grid, phase=phase, cycle=cycle)


def write_csv(matrix: SignalMatrix, path: str | Path,
              header_comment: str | None = None) -> None:
    """Write a SignalMatrix in the canonical CSV schema."""
    path = Path(path)
    cols = [TIME_COLUMN] + [CHANNEL_TO_CSV[c] for c in matrix.channels]
    if matrix.soc is not None:
        cols.append(SOC_COLUMN)
    if matrix.phase is not None:
        cols.append(PHASE_COLUMN)
    if matrix.cycle is not None:
        cols.append(CYCLE_COLUMN)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write(",".join(cols) + "\n")
        for k in range(matrix.n_steps):
            parts = [repr(float(matrix.timestamps[k]))]
            parts += [repr(float(v)) for v in matrix.values[k]]
            if matrix.soc is not None:
                parts.append(repr(float(matrix.soc[k])))
            if matrix.phase is not None:
                parts.append(matrix.phase[k])
            if matrix.cycle is not None:
                parts.append(str(int(matrix.cycle[k])))
            fh.write(",".join(parts) + "\n")


def load_manifest(path: str | Path, **load_kwargs) -> tuple[SignalMatrix, dict]:
    """Read a dataset manifest and concatenate its files chronologically."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    files = manifest.get("files")
    if not files:
        raise SchemaError(f"{path}: manifest lists no files")
    matrices = [load_csv(path.parent / f, **load_kwargs) for f in files]
    if len(matrices) == 1:
        return matrices[0], manifest
    base = matrices[0]
    for other in matrices[1:]:
        if other.channels != base.channels:
            raise SchemaError(f"{path}: files disagree on channels")
        if other.timestamps[0] <= base.timestamps[-1]:
            raise SchemaError(f"{path}: files overlap in time")
        base = SignalMatrix(
            timestamps=np.concatenate([base.timestamps, other.timestamps]),
            channels=base.channels,
            values=np.vstack([base.values, other.values]),
            soc=None if base.soc is None else np.concatenate([base.soc, other.soc]),
            phase=None if base.phase is None else base.phase + other.phase,
            cycle=None if base.cycle is None else np.concatenate([base.cycle, other.cycle]),
        )
    return base, manifest


def load_dataset(path: str | Path, **load_kwargs) -> tuple[SignalMatrix, dict]:
    """Accept either a manifest JSON or a bare CSV path."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return load_manifest(path, **load_kwargs)
    return load_csv(path, **load_kwargs), {}


# ---------------------------------------------------------------------------
# windowed datasets


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel min-max maps fit on the training range, reused at inference."""

    channels: tuple[str, ...]
    mins: Array
    maxs: Array
    degenerate: tuple[bool, ...]

    @classmethod
    def fit(cls, values: Array, channels) -> "ChannelStats":
        flat = values.reshape(-1, values.shape[-1])
        mins = flat.min(axis=0)
        maxs = flat.max(axis=0)
        degenerate = tuple(bool(mx == mn) for mn, mx in zip(mins, maxs))
        return cls(channels=tuple(channels), mins=mins, maxs=maxs, degenerate=degenerate)

    def apply(self, raw: Array) -> Array:
        """Map raw values (..., L) to [-1, 1]; degenerate channels go to 0."""
        out = np.empty_like(np.asarray(raw, dtype=float))
        for j in range(len(self.channels)):
            if self.degenerate[j]:
                out[..., j] = 0.0
            else:
                span = self.maxs[j] - self.mins[j]
                out[..., j] = -1.0 + 2.0 * (raw[..., j] - self.mins[j]) / span
        return out

    def apply_channel(self, channel: str, x):
        j = self.channels.index(channel)
        if self.degenerate[j]:
            return np.zeros_like(np.asarray(x, dtype=float)) if np.ndim(x) else 0.0
        span = self.maxs[j] - self.mins[j]
        return -1.0 + 2.0 * (np.asarray(x, dtype=float) - self.mins[j]) / span

    def to_json(self) -> dict:
        return {
            "channels": list(self.channels),
            "min": self.mins.tolist(),
            "max": self.maxs.tolist(),
            "degenerate": list(self.degenerate),
        }

    @classmethod
    def from_json(cls, raw: dict) -> "ChannelStats":
        return cls(channels=tuple(raw["channels"]),
                   mins=np.asarray(raw["min"], dtype=float),
                   maxs=np.asarray(raw["max"], dtype=float),
                   degenerate=tuple(bool(x) for x in raw["degenerate"]))


@dataclass
class WindowedDataset:
    """Sliding windows plus their SOC targets (one target per window end)."""

    windows: Array                 # (M, S, L)
    targets: Array                 # (M,)
    channels: tuple[str, ...]
    end_rows: Array                # (M,) source row index of each window's last step
    stats: ChannelStats | None = None

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        self.end_rows = np.asarray(self.end_rows, dtype=int)
        if self.windows.ndim != 3:
            raise ShapeError(f"WindowedDataset: windows must be 3-D, got {self.windows.shape}")
        m = self.windows.shape[0]
        if self.targets.shape != (m,) or self.end_rows.shape != (m,):
            raise ShapeError("WindowedDataset: targets/end_rows length mismatch")
        if m and (self.targets.min() < -1e-9 or self.targets.max() > 1.0 + 1e-9):
            raise SchemaError("WindowedDataset: targets must lie in [0, 1]")

    def __len__(self) -> int:
        return self.windows.shape[0]

    @property
    def window_length(self) -> int:
        return self.windows.shape[1]

    def subset(self, index) -> "WindowedDataset":
        return WindowedDataset(windows=self.windows[index], targets=self.targets[index],
                               channels=self.channels, end_rows=self.end_rows[index],
                               stats=self.stats)


def make_windows(matrix: SignalMatrix, channel_set, window_length: int,
                 stride: int = 1) -> WindowedDataset:
    """Materialize sliding windows of the requested channels.

    With stride 1 there is one window per end step k in [S, K], giving
    K - S + 1 samples; the target is the SOC label at the window's last
    row. stride > 1 keeps every stride-th window (same first window).
    """
    cs = resolve_channel_set(channel_set)
    if matrix.soc is None:
        raise SchemaError("make_windows: matrix has no soc labels")
    if window_length < 1:
        raise ValueError("make_windows: window_length must be >= 1")
    if stride < 1:
        raise ValueError("make_windows: stride must be >= 1")
    k_steps = matrix.n_steps
    if k_steps < window_length:
        raise SchemaError(
            f"make_windows: {k_steps} samples but window_length={window_length}"
        )
    idx = [matrix.channel_index(c) for c in cs.members]
    selected = matrix.values[:, idx]
    view = np.lib.stride_tricks.sliding_window_view(selected, window_length, axis=0)
    # view: (K-S+1, L, S) -> (M, S, L)
    windows = np.ascontiguousarray(view[::stride].transpose(0, 2, 1))
    ends = np.arange(window_length - 1, k_steps, dtype=int)[::stride]
    targets = matrix.soc[ends]
    return WindowedDataset(windows=windows, targets=targets,
                           channels=cs.members, end_rows=ends)


def normalize(dataset: WindowedDataset, train_count: int) -> WindowedDataset:
    """Min-max scale every channel to [-1, 1] using only the first
    train_count windows to fit the statistics; values outside the training
    range extrapolate linearly beyond the interval (never clamped)."""
    if train_count < 1 or train_count > len(dataset):
        raise ValueError(f"normalize: train_count={train_count} out of range")
    stats = ChannelStats.fit(dataset.windows[:train_count], dataset.channels)
    return WindowedDataset(windows=stats.apply(dataset.windows), targets=dataset.targets,
                           channels=dataset.channels, end_rows=dataset.end_rows,
                           stats=stats)


def train_test_counts(n: int, train_fraction: float = 0.8) -> tuple[int, int]:
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    return n_train, n - n_train


def split_train_test(dataset: WindowedDataset, train_fraction: float = 0.8
                     ) -> tuple[WindowedDataset, WindowedDataset]:
    """Chronological split: first ~80% of windows train, the rest test."""
    n = len(dataset)
    if n < 5:
        raise SchemaError(f"split_train_test: need at least 5 samples, got {n}")
    n_train, _ = train_test_counts(n, train_fraction)
    return dataset.subset(slice(0, n_train)), dataset.subset(slice(n_train, n))


def prepare_dataset(matrix: SignalMatrix, channel_set, window_length: int,
                    train_fraction: float = 0.8, stride: int = 1
                    ) -> tuple[WindowedDataset, WindowedDataset]:
    """Windows -> normalization (training stats only) -> chronological split."""
    windows = make_windows(matrix, channel_set, window_length, stride=stride)
    if len(windows) < 5:
        raise SchemaError(f"prepare_dataset: only {len(windows)} windows")
    n_train, _ = train_test_counts(len(windows), train_fraction)
    normalized = normalize(windows, n_train)
    return normalized.subset(slice(0, n_train)), normalized.subset(slice(n_train, None))
