import json
from pathlib import Path

import numpy as np
import pytest

from socsense.cli import main
from socsense.lstm import GATES, LstmLayerParams, LstmModel, save_checkpoint
from socsense.signals import ChannelStats, load_csv


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "expansion-cell", "--out", str(out),
                 "--cycles", "2", "--seed", "3"]) == 0
    return out


def _train_config(dataset_dir, out_dir, **overrides):
    config = {
        "dataset": str(dataset_dir / "expansion-cell_manifest.json"),
        "channels": "VIE",
        "window_length": 20,
        "stride": 150,
        "hidden_size": 6,
        "max_epochs": 8,
        "learning_rate": 0.01,
        "batch_size": 32,
        "val_fraction": 0.0,
        "train_fraction": 0.8,
        "seed": 11,
        "out": str(out_dir),
    }
    config.update(overrides)
    return config


def _write_config(path, config):
    path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return str(path)


class TestSynth:
    def test_writes_csv_and_manifest(self, dataset_dir):
        assert (dataset_dir / "expansion-cell.csv").exists()
        assert (dataset_dir / "expansion-cell_manifest.json").exists()

    def test_rerun_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["synth", "optical-cell", "--out", str(out),
                         "--cycles", "1", "--seed", "7"]) == 0
        assert (a / "optical-cell.csv").read_bytes() == (b / "optical-cell.csv").read_bytes()

    def test_invalid_scenario_usage_error(self, tmp_path, capsys):
        code = main(["synth", "mystery-cell", "--out", str(tmp_path)])
        assert code == 1
        assert "usage" in capsys.readouterr().err.lower()


class TestTrain:
    def test_train_outputs(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "run"
        cfg = _write_config(tmp_path / "cfg.json", _train_config(dataset_dir, out))
        assert main(["train", "--config", cfg]) == 0
        assert (out / "checkpoint.json").exists()
        assert (out / "loss_history.csv").exists()
        assert (out / "metrics.json").exists()
        metrics = json.loads((out / "metrics.json").read_text())
        assert "test" in metrics and metrics["test"]["mae"] >= 0.0
        assert metrics["config_sha256"]
        ckpt = json.loads((out / "checkpoint.json").read_text())
        assert ckpt["config_sha256"] == metrics["config_sha256"]
        assert "MAE" in capsys.readouterr().out

    def test_unknown_config_key_rejected(self, dataset_dir, tmp_path, capsys):
        cfg = _train_config(dataset_dir, tmp_path / "x")
        cfg["bogus_knob"] = 3
        path = _write_config(tmp_path / "bad.json", cfg)
        assert main(["train", "--config", path]) == 1
        assert "bogus_knob" in capsys.readouterr().err

    def test_missing_dataset_fails_fast(self, tmp_path, capsys):
        out = tmp_path / "never"
        cfg = _write_config(tmp_path / "cfg.json", {
            "dataset": str(tmp_path / "missing.csv"), "out": str(out),
        })
        assert main(["train", "--config", cfg]) == 1
        assert not out.exists()  # no partial outputs

    def test_channel_ablation_pair_distinct(self, dataset_dir, tmp_path):
        outs = {}
        for tag in ("VI", "VIE"):
            out = tmp_path / tag
            cfg = _write_config(tmp_path / f"{tag}.json",
                                _train_config(dataset_dir, out, channels=tag))
            assert main(["train", "--config", cfg]) == 0
            outs[tag] = json.loads((out / "checkpoint.json").read_text())
        assert outs["VI"]["channels"] == ["V", "I"]
        assert outs["VIE"]["channels"] == ["V", "I", "E"]


class TestDeterminism:
    def test_checkpoint_bytes_identical(self, dataset_dir, tmp_path):
        files = {}
        for name in ("r1", "r2"):
            out = tmp_path / name
            cfg = _write_config(tmp_path / f"{name}.json",
                                _train_config(dataset_dir, out))
            assert main(["train", "--config", cfg]) == 0
            # out path differs between runs; compare content minus the hash-bearing line
            ckpt = json.loads((out / "checkpoint.json").read_text())
            ckpt.pop("config_sha256")
            files[name] = json.dumps(ckpt, sort_keys=True)
        assert files["r1"] == files["r2"]


@pytest.fixture(scope="module")
def trained_run(dataset_dir, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    out = tmp / "run"
    cfg_path = tmp / "cfg.json"
    cfg_path.write_text(json.dumps(_train_config(dataset_dir, out)), encoding="utf-8")
    assert main(["train", "--config", str(cfg_path)]) == 0
    return out


class TestEvaluate:
    def test_train_split_close_to_recorded(self, dataset_dir, trained_run, capsys):
        metrics = json.loads((trained_run / "metrics.json").read_text())
        code = main(["evaluate", "--checkpoint", str(trained_run / "checkpoint.json"),
                     "--dataset", str(dataset_dir / "expansion-cell_manifest.json"),
                     "--split", "train"])
        assert code == 0
        printed = capsys.readouterr().out
        value = float(printed.split("MAE")[1].split()[0])
        assert value <= metrics["train"]["mae"] * 1.5 + 1e-12

    def test_steady_flag(self, dataset_dir, trained_run, capsys):
        code = main(["evaluate", "--checkpoint", str(trained_run / "checkpoint.json"),
                     "--dataset", str(dataset_dir / "expansion-cell_manifest.json"),
                     "--steady"])
        assert code == 0
        assert "steady" in capsys.readouterr().out

    def test_report_written(self, dataset_dir, trained_run, tmp_path):
        out = tmp_path / "eval.json"
        code = main(["evaluate", "--checkpoint", str(trained_run / "checkpoint.json"),
                     "--dataset", str(dataset_dir / "expansion-cell_manifest.json"),
                     "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["rmse"] >= payload["mae"]


class TestSensitivityCmd:
    def test_profile_and_summary(self, dataset_dir, trained_run, tmp_path):
        out = tmp_path / "sens"
        code = main(["sensitivity", "--checkpoint", str(trained_run / "checkpoint.json"),
                     "--dataset", str(dataset_dir / "expansion-cell_manifest.json"),
                     "--out", str(out), "--intervals", "4"])
        assert code == 0
        lines = (out / "profile.csv").read_text().splitlines()
        header = lines[1] if lines[0].startswith("#") else lines[0]
        assert header.split(",")[:3] == ["k", "time_s", "phase"]
        assert "phi_V" in header and "phi_I" in header and "phi_E" in header
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["ranking"]) == {"V", "I", "E"}

    def test_summary_ranks_match_recomputed_means(self, dataset_dir, trained_run, tmp_path):
        out = tmp_path / "sens2"
        assert main(["sensitivity", "--checkpoint", str(trained_run / "checkpoint.json"),
                     "--dataset", str(dataset_dir / "expansion-cell_manifest.json"),
                     "--out", str(out), "--intervals", "4"]) == 0
        lines = [l for l in (out / "profile.csv").read_text().splitlines()
                 if not l.startswith("#")]
        header = lines[0].split(",")
        cols = {name: idx for idx, name in enumerate(header)}
        sums = {c: 0.0 for c in ("V", "I", "E")}
        for row in lines[1:]:
            parts = row.split(",")
            for c in sums:
                sums[c] += float(parts[cols[f"phi_{c}"]])
        recomputed = sorted(sums, key=lambda c: -sums[c])
        summary = json.loads((out / "summary.json").read_text())
        assert summary["ranking"] == recomputed

    def test_zero_model_zero_profile(self, dataset_dir, tmp_path):
        channels = ("V", "I", "E")
        hidden = 3
        zero = LstmModel(
            layer1=LstmLayerParams(w_x={g: np.zeros((hidden, 3)) for g in GATES},
                                   w_h={g: np.zeros((hidden, hidden)) for g in GATES},
                                   b={g: np.zeros(hidden) for g in GATES}),
            layer2=LstmLayerParams(w_x={g: np.zeros((hidden, hidden)) for g in GATES},
                                   w_h={g: np.zeros((hidden, hidden)) for g in GATES},
                                   b={g: np.zeros(hidden) for g in GATES}),
            w_out=np.zeros(hidden), b_out=0.5, channels=channels)
        matrix = load_csv(dataset_dir / "expansion-cell.csv")
        idx = [matrix.channel_index(c) for c in channels]
        stats = ChannelStats.fit(matrix.values[:, idx], channels)
        ckpt = tmp_path / "zero.json"
        save_checkpoint(zero, ckpt, stats=stats, window_length=10)
        out = tmp_path / "prof"
        assert main(["sensitivity", "--checkpoint", str(ckpt),
                     "--dataset", str(dataset_dir / "expansion-cell.csv"),
                     "--out", str(out), "--intervals", "3"]) == 0
        lines = [l for l in (out / "profile.csv").read_text().splitlines()
                 if not l.startswith("#")][1:]
        for row in lines[::97]:
            assert all(float(v) == 0.0 for v in row.split(",")[3:])

    def test_channel_mismatch_listed(self, trained_run, tmp_path, capsys):
        missing = tmp_path / "only_vi.csv"
        missing.write_text("time_s,voltage_v,current_a,soc\n" +
                           "\n".join(f"{t},3.7,1.0,0.5" for t in range(30)) + "\n",
                           encoding="utf-8")
        code = main(["sensitivity", "--checkpoint", str(trained_run / "checkpoint.json"),
                     "--dataset", str(missing), "--out", str(tmp_path / "x")])
        assert code == 1
        err = capsys.readouterr().err
        assert "E" in err and "missing" in err


class TestDecompose:
    def test_adds_channels(self, dataset_dir, tmp_path):
        out = tmp_path / "decomposed.csv"
        assert main(["decompose", "--dataset", str(dataset_dir / "expansion-cell.csv"),
                     "--tau", "600", "--out", str(out)]) == 0
        m = load_csv(out)
        assert "T_HF" in m.channels and "T_LF" in m.channels
        recon = m.channel_values("T_HF") + m.channel_values("T_LF")
        np.testing.assert_allclose(recon, m.channel_values("T"), atol=1e-9)


class TestAblate:
    def test_two_sets_report(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "ablation"
        cfg = _write_config(tmp_path / "ab.json", {
            **_train_config(dataset_dir, out),
            "channel_sets": ["VI", "VIE"],
        })
        assert main(["ablate", "--config", cfg]) == 0
        report = json.loads((out / "ablation.json").read_text())
        assert report["baseline"] == "VI"
        assert {r["tag"] for r in report["results"]} == {"VI", "VIE"}
        assert (out / "errors_VI.csv").exists() and (out / "errors_VIE.csv").exists()
        assert "improvement" in capsys.readouterr().out
