import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from socsense.errors import ConfigError, SchemaError, ShapeError
from socsense.evaluation import (
    AblationConfig,
    MetricReport,
    evaluate_predictions,
    mae,
    rmse,
    run_ablation,
    steady_state_filter,
    write_ablation_report,
    write_error_csv,
)
from socsense.lstm import TrainConfig
from socsense.synthcell import get_scenario, simulate


class TestMae:
    def test_identical(self):
        assert mae([0.1, 0.2], [0.1, 0.2]) == 0.0

    def test_hand_computed(self):
        assert mae([0.0, 0.5], [0.1, 0.3]) == pytest.approx(0.15, abs=1e-15)

    def test_empty(self):
        with pytest.raises(SchemaError):
            mae([], [])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            mae([1.0], [1.0, 2.0])


class TestRmse:
    def test_identical(self):
        assert rmse([0.3, 0.4], [0.3, 0.4]) == 0.0

    def test_closed_form(self):
        assert rmse([0.0, 0.0], [0.1, 0.2]) == pytest.approx(np.sqrt(0.025), abs=1e-15)

    def test_single_sample_collapse(self):
        assert rmse([0.5], [0.8]) == pytest.approx(mae([0.5], [0.8]), abs=1e-15)
        assert rmse([0.5], [0.8]) == pytest.approx(0.3, abs=1e-12)


class TestMetricProperties:
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 200))
    @settings(max_examples=60, deadline=None)
    def test_rmse_dominates_mae(self, seed, n):
        rng = np.random.default_rng(seed)
        y = rng.normal(size=n)
        y_hat = rng.normal(size=n)
        assert rmse(y, y_hat) >= mae(y, y_hat) >= 0.0

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_symmetry_under_swap(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.normal(size=17)
        y_hat = rng.normal(size=17)
        assert mae(y, y_hat) == mae(y_hat, y)
        assert rmse(y, y_hat) == rmse(y_hat, y)

    def test_zero_iff_identical(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=50)
        assert mae(y, y.copy()) == 0.0 and rmse(y, y.copy()) == 0.0
        bumped = y.copy()
        bumped[13] += 1e-9
        assert mae(y, bumped) > 0.0 and rmse(y, bumped) > 0.0


class TestSteadyState:
    def test_all_within_threshold_full_mask(self):
        res = steady_state_filter([0.01, -0.02, 0.03])
        assert res.converged and res.start_index == 0
        assert res.mask.all()

    def test_first_crossing_scan(self):
        res = steady_state_filter([0.2, 0.04, 0.03])
        assert res.start_index == 1
        np.testing.assert_array_equal(res.mask, [False, True, True])
        assert res.mae == pytest.approx(0.035)

    def test_never_converges(self):
        errors = [0.2, 0.01, 0.3, 0.01, 0.4, 0.06]
        res = steady_state_filter(errors)
        assert not res.converged
        assert res.start_index is None and res.mae is None and res.rmse is None
        assert not res.mask.any()

    def test_exact_threshold_counts_as_bad(self):
        res = steady_state_filter([0.05, 0.01])
        assert res.start_index == 1

    def test_empty(self):
        with pytest.raises(SchemaError):
            steady_state_filter([])

    def test_filtered_mae_below_unfiltered_on_transients(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            n = int(rng.integers(50, 300))
            transient = 0.5 * np.exp(-np.arange(n) / rng.uniform(3, 25))
            noise = rng.normal(0, 0.01, n)
            errors = transient + noise
            res = steady_state_filter(errors, threshold=0.05)
            if res.converged and res.start_index > 0:
                assert res.mae <= mae(errors, np.zeros(n)) + 1e-15


class TestMetricReport:
    def test_report_fields(self):
        y = np.array([0.5, 0.5, 0.5, 0.5])
        y_hat = np.array([0.8, 0.52, 0.51, 0.49])
        rep = evaluate_predictions(y, y_hat)
        assert rep.count == 4
        assert rep.rmse >= rep.mae
        assert rep.steady_start == 1
        assert rep.steady_mae == pytest.approx(np.mean([0.02, 0.01, 0.01]))

    def test_inequality_enforced(self):
        with pytest.raises(AssertionError):
            MetricReport(mae=0.5, rmse=0.1, count=3, steady_mae=None,
                         steady_rmse=None, steady_start=None, errors=np.zeros(3))

    def test_error_csv(self, tmp_path):
        rep = evaluate_predictions([0.0, 0.1], [0.05, 0.1])
        write_error_csv(rep, tmp_path / "e.csv", config_sha256="aa")
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "# config_sha256=aa"
        assert lines[1] == "index,error"
        assert len(lines) == 4


def _small_matrix(cycles=2, seed=21):
    scenario = get_scenario("expansion-cell", seed=seed)
    return simulate(scenario.config, scenario.protocol, cycles=cycles)


def _fast_config(seed=5):
    return AblationConfig(
        hidden_size=6, train_fraction=0.8, stride=120, decompose_tau_s=600.0,
        train=TrainConfig(max_epochs=8, learning_rate=0.01, batch_size=32,
                          window_length=20, val_fraction=0.0, seed=seed),
    )


class TestAblation:
    def test_duplicate_tags_rejected(self):
        m = _small_matrix()
        with pytest.raises(ConfigError, match="duplicated"):
            run_ablation(m, ["VI", "VI"], _fast_config())

    def test_single_set_zero_improvement(self):
        m = _small_matrix()
        results = run_ablation(m, ["VI"], _fast_config())
        assert len(results) == 1
        assert results[0].improvement_vs_baseline == 0.0

    def test_structure_sorting_and_determinism(self, tmp_path):
        m = _small_matrix()
        config = _fast_config()
        results = run_ablation(m, ["VI", "VIE"], config)
        assert [r.report.mae for r in results] == sorted(r.report.mae for r in results)
        tags = {r.tag for r in results}
        assert tags == {"VI", "VIE"}
        base = next(r for r in results if r.tag == "VI")
        other = next(r for r in results if r.tag == "VIE")
        expected = (base.report.mae - other.report.mae) / base.report.mae
        assert other.improvement_vs_baseline == pytest.approx(expected, rel=1e-12)
        # bit-identical on rerun
        again = run_ablation(m, ["VI", "VIE"], config)
        for r1, r2 in zip(results, again):
            assert r1.tag == r2.tag
            assert r1.report.mae == r2.report.mae
            assert r1.report.rmse == r2.report.rmse
        write_ablation_report(results, tmp_path / "report.json", baseline_tag="VI",
                              config_sha256="bb")
        text = (tmp_path / "report.json").read_text()
        assert '"baseline": "VI"' in text

    def test_t_composite_auto_decomposition(self):
        m = _small_matrix()
        assert "T_HF" not in m.channels
        results = run_ablation(m, ["VIT"], _fast_config())
        assert results[0].tag == "VIT"
