import math

import numpy as np
import pytest

from socsense.errors import ChannelSetError, SchemaError
from socsense.lstm import GATES, LstmLayerParams, LstmModel
from socsense.sensitivity import (
    IntervalPartition,
    build_partition,
    build_partitions,
    perturbation_deviation,
    profile,
    sensitivity_at,
    summarize,
)
from socsense.signals import ChannelStats, SignalMatrix


# --- independent scalar re-implementation (oracle) --------------------------
# Pure-python LSTM forward plus an explicit enumeration of the weighted
# counterfactual sum. Shares no code with the library implementation.

def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def _scalar_layer(layer, xs):
    hidden = layer.hidden
    h = [0.0] * hidden
    c = [0.0] * hidden
    outs = []
    for x in xs:
        pre = {}
        for gate in GATES:
            pre[gate] = [
                sum(layer.w_x[gate][r][j] * x[j] for j in range(len(x)))
                + sum(layer.w_h[gate][r][j] * h[j] for j in range(hidden))
                + layer.b[gate][r]
                for r in range(hidden)
            ]
        i = [_sig(v) for v in pre["i"]]
        f = [_sig(v) for v in pre["f"]]
        o = [_sig(v) for v in pre["o"]]
        g = [math.tanh(v) for v in pre["c"]]
        c = [f[r] * c[r] + i[r] * g[r] for r in range(hidden)]
        h = [o[r] * math.tanh(c[r]) for r in range(hidden)]
        outs.append(h)
    return outs


def scalar_forward(model, window):
    h1 = _scalar_layer(model.layer1, [list(row) for row in window])
    h2 = _scalar_layer(model.layer2, h1)
    last = h2[-1]
    return sum(last[j] * model.w_out[j] for j in range(len(last))) + model.b_out


def scalar_normalize(window, stats):
    out = [list(row) for row in window]
    for j in range(len(stats.channels)):
        lo, hi = stats.mins[j], stats.maxs[j]
        for row in out:
            if stats.degenerate[j]:
                row[j] = 0.0
            else:
                row[j] = -1.0 + 2.0 * (row[j] - lo) / (hi - lo)
    return out


def scalar_phi(model, raw_window, partition, channel_index, stats):
    base = scalar_normalize(raw_window, stats)
    f0 = scalar_forward(model, base)
    total = 0.0
    for h in range(partition.n_intervals):
        lo, hi = stats.mins[channel_index], stats.maxs[channel_index]
        if stats.degenerate[channel_index]:
            mean_norm = 0.0
        else:
            mean_norm = -1.0 + 2.0 * (partition.means[h] - lo) / (hi - lo)
        counter = [list(row) for row in base]
        for row in counter:
            row[channel_index] = mean_norm
        total += partition.probabilities[h] * abs(f0 - scalar_forward(model, counter))
    return total


# --- fixtures ---------------------------------------------------------------

def tiny_model(rng, channels, hidden=2):
    return LstmModel.init(rng, channels, hidden=hidden)


def fit_stats(values, channels):
    return ChannelStats.fit(values, channels)


# --- tests -------------------------------------------------------------------

class TestBuildPartition:
    def test_h10_probabilities_sum_to_one(self):
        rng = np.random.default_rng(0)
        current = rng.normal(0.0, 5.0, size=2000)
        part = build_partition(current, 10, channel="I")
        assert part.n_intervals == 10
        assert abs(part.probabilities.sum() - 1.0) <= 1e-12

    def test_constant_series_single_interval(self):
        part = build_partition(np.full(50, 3.7), 4, channel="V")
        assert np.count_nonzero(part.probabilities) == 1
        assert part.probabilities.max() == 1.0
        assert np.all(np.diff(part.bounds) > 0)

    def test_uniform_grid_exact(self):
        values = np.arange(100, dtype=float)
        part = build_partition(values, 10)
        np.testing.assert_allclose(part.probabilities, np.full(10, 0.1), atol=0)
        np.testing.assert_allclose(part.means, 4.5 + 10.0 * np.arange(10), atol=1e-12)

    def test_empty_interval_handling(self):
        values = np.array([0.0, 0.1, 0.2, 10.0])  # middle intervals empty
        part = build_partition(values, 5)
        assert abs(part.probabilities.sum() - 1.0) <= 1e-12
        empty = part.probabilities == 0.0
        midpoints = 0.5 * (part.bounds[:-1] + part.bounds[1:])
        np.testing.assert_allclose(part.means[empty], midpoints[empty], atol=0)

    def test_empty_series(self):
        with pytest.raises(SchemaError):
            build_partition(np.array([]), 4)

    def test_means_inside_intervals(self):
        rng = np.random.default_rng(1)
        for h in (1, 3, 7):
            part = build_partition(rng.normal(size=500), h)
            assert np.all(part.means >= part.bounds[:-1] - 1e-12)
            assert np.all(part.means <= part.bounds[1:] + 1e-12)


class TestSensitivityAt:
    def test_constant_channel_zero_phi(self):
        rng = np.random.default_rng(2)
        model = tiny_model(rng, ("V", "I"), hidden=3)
        window = np.column_stack([np.full(4, 3.7), rng.normal(size=4)])
        train = np.column_stack([np.full(50, 3.7), rng.normal(size=50)])
        stats = fit_stats(train, ("V", "I"))
        part = build_partition(train[:, 0], 1, channel="V")
        phi = sensitivity_at(model, window, {"V": part}, "V", stats)
        assert phi == 0.0

    def test_ignored_channel_zero_phi(self):
        rng = np.random.default_rng(3)
        model = tiny_model(rng, ("V", "I"), hidden=3)
        for gate in GATES:  # silence channel I (column 1) in layer 1
            model.layer1.w_x[gate][:, 1] = 0.0
        train = rng.normal(size=(60, 2))
        stats = fit_stats(train, ("V", "I"))
        parts = {"I": build_partition(train[:, 1], 5, channel="I")}
        for _ in range(5):
            window = rng.normal(size=(4, 2))
            assert sensitivity_at(model, window, parts, "I", stats) == 0.0

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(4)
        for trial in range(6):
            channels = ("V", "I", "E")[: int(rng.integers(1, 4))]
            hidden = int(rng.integers(1, 3))
            steps = int(rng.integers(1, 4))
            n_int = int(rng.integers(1, 4))
            model = tiny_model(rng, channels, hidden=hidden)
            train = rng.normal(size=(40, len(channels)))
            stats = fit_stats(train, channels)
            parts = {c: build_partition(train[:, j], n_int, channel=c)
                     for j, c in enumerate(channels)}
            window = rng.normal(size=(steps, len(channels)))
            for j, c in enumerate(channels):
                lib = sensitivity_at(model, window, parts, c, stats)
                ora = scalar_phi(model, window, parts[c], j, stats)
                assert lib == pytest.approx(ora, abs=1e-10)

    def test_missing_partition(self):
        rng = np.random.default_rng(5)
        model = tiny_model(rng, ("V", "I"))
        stats = fit_stats(rng.normal(size=(10, 2)), ("V", "I"))
        with pytest.raises(ChannelSetError, match="partition"):
            sensitivity_at(model, rng.normal(size=(3, 2)), {}, "V", stats)


def _matrix_with(channels, values, soc=None, phase=None):
    k = values.shape[0]
    return SignalMatrix(timestamps=np.arange(k, dtype=float), channels=channels,
                        values=values, soc=soc, phase=phase)


class TestProfile:
    def test_shape_contract(self):
        rng = np.random.default_rng(6)
        channels = ("V", "I")
        model = tiny_model(rng, channels, hidden=2)
        k, s = 30, 5
        matrix = _matrix_with(channels, rng.normal(size=(k, 2)))
        stats = fit_stats(matrix.values[:20], channels)
        parts = build_partitions(matrix, channels, train_rows=20, n_intervals=3)
        prof = profile(model, matrix, parts, s, stats)
        assert prof.values.shape == (2, k - s + 1)
        assert np.all(prof.values >= 0.0)
        assert prof.end_rows[0] == s - 1 and prof.end_rows[-1] == k - 1

    def test_identical_channels_symmetric_model(self):
        rng = np.random.default_rng(7)
        channels = ("V", "I")
        model = tiny_model(rng, channels, hidden=3)
        for gate in GATES:  # shared weights on both input columns
            model.layer1.w_x[gate][:, 1] = model.layer1.w_x[gate][:, 0]
        series = rng.normal(size=40)
        matrix = _matrix_with(channels, np.column_stack([series, series]))
        stats = fit_stats(matrix.values[:30], channels)
        parts = build_partitions(matrix, channels, train_rows=30, n_intervals=4)
        prof = profile(model, matrix, parts, 4, stats)
        np.testing.assert_allclose(prof.values[0], prof.values[1], atol=1e-12)

    def test_zero_model_zero_profile(self):
        channels = ("V", "I")
        rng = np.random.default_rng(8)
        model = LstmModel(
            layer1=LstmLayerParams(w_x={g: np.zeros((2, 2)) for g in GATES},
                                   w_h={g: np.zeros((2, 2)) for g in GATES},
                                   b={g: np.zeros(2) for g in GATES}),
            layer2=LstmLayerParams(w_x={g: np.zeros((2, 2)) for g in GATES},
                                   w_h={g: np.zeros((2, 2)) for g in GATES},
                                   b={g: np.zeros(2) for g in GATES}),
            w_out=np.zeros(2), b_out=0.5, channels=channels)
        matrix = _matrix_with(channels, rng.normal(size=(20, 2)))
        stats = fit_stats(matrix.values, channels)
        parts = build_partitions(matrix, channels, train_rows=20, n_intervals=3)
        prof = profile(model, matrix, parts, 3, stats)
        np.testing.assert_array_equal(prof.values, np.zeros_like(prof.values))

    def test_phase_annotations(self):
        rng = np.random.default_rng(9)
        channels = ("V",)
        model = tiny_model(rng, channels, hidden=2)
        k = 12
        phases = ["cc"] * 6 + ["cv"] * 6
        matrix = _matrix_with(channels, rng.normal(size=(k, 1)), phase=phases)
        stats = fit_stats(matrix.values, channels)
        parts = build_partitions(matrix, channels, train_rows=k, n_intervals=2)
        prof = profile(model, matrix, parts, 3, stats)
        assert prof.phase == phases[2:]

    def test_matrix_missing_channel(self):
        rng = np.random.default_rng(10)
        model = tiny_model(rng, ("V", "I"))
        matrix = _matrix_with(("V",), rng.normal(size=(10, 1)))
        stats = fit_stats(rng.normal(size=(10, 2)), ("V", "I"))
        with pytest.raises(ChannelSetError, match="I"):
            profile(model, matrix, {}, 3, stats)


class TestSummarize:
    def _profile_from_values(self, values, channels):
        from socsense.sensitivity import SensitivityProfile
        k = values.shape[1]
        return SensitivityProfile(channels=channels, values=values,
                                  end_rows=np.arange(k), timestamps=np.arange(k, dtype=float),
                                  window_length=3)

    def test_single_step_collapse(self):
        prof = self._profile_from_values(np.array([[0.4]]), ("V",))
        summary = summarize(prof)
        s = summary.stats["V"]
        assert s["mean"] == s["median"] == s["min"] == s["max"] == 0.4

    def test_dominance_ranking(self):
        prof = self._profile_from_values(
            np.vstack([np.zeros(5), np.ones(5)]), ("V", "I"))
        summary = summarize(prof)
        assert summary.ranking == ("I", "V")

    def test_quartile_convention(self):
        values = np.arange(1.0, 101.0)[None, :]
        prof = self._profile_from_values(values, ("V",))
        s = summarize(prof).stats["V"]
        assert s["q25"] == pytest.approx(25.75)
        assert s["median"] == pytest.approx(50.5)
        assert s["q75"] == pytest.approx(75.25)


class TestPerturbation:
    def test_silenced_channel_has_zero_deviation(self):
        rng = np.random.default_rng(11)
        model = tiny_model(rng, ("V", "I"), hidden=3)
        for gate in GATES:
            model.layer1.w_x[gate][:, 1] = 0.0
        windows = rng.normal(size=(8, 5, 2))
        dev = perturbation_deviation(model, windows, sigma=0.1, seed=0)
        assert dev["I"] == 0.0
        assert dev["V"] > 0.0

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        model = tiny_model(rng, ("V", "I"), hidden=2)
        windows = rng.normal(size=(6, 4, 2))
        a = perturbation_deviation(model, windows, sigma=0.05, seed=3)
        b = perturbation_deviation(model, windows, sigma=0.05, seed=3)
        assert a == b
