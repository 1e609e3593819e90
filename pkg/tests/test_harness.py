import json
from dataclasses import replace

import numpy as np
import pytest

from fbtta import nn
from fbtta.engine import AdaptConfig, FeedbackSchedule
from fbtta.harness import (ExperimentConfig, PretrainError, PretrainSettings,
                           ablation_grid, calibration_report, config_from_dict,
                           config_to_dict, pretrain, run_experiment,
                           run_single_seed)
from fbtta.streams import make_shift_stream
from fbtta.seeding import derive_seed


@pytest.fixture()
def base_config(small_stream_spec, pretrained_small):
    path, _ = pretrained_small
    return ExperimentConfig(stream=small_stream_spec, method="dual",
                            checkpoint=str(path), seeds=(0,),
                            adapt=AdaptConfig(lr=1e-3))


class TestPretrain:
    def test_same_seed_byte_identical_checkpoint(self, small_stream_spec, tmp_path):
        settings = PretrainSettings(n_train=512, n_holdout=128, epochs=4,
                                    hidden=(16,), target_accuracy=0.5)
        p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
        pretrain(small_stream_spec, settings, seed=7, out_path=p1)
        pretrain(small_stream_spec, settings, seed=7, out_path=p2)
        m1, m2 = nn.load_model(p1), nn.load_model(p2)
        assert nn.model_bytes(m1) == nn.model_bytes(m2)

    def test_accuracy_gate_failure_is_loud(self, small_stream_spec):
        settings = PretrainSettings(n_train=256, n_holdout=128, epochs=1,
                                    hidden=(4,), target_accuracy=0.999)
        with pytest.raises(PretrainError, match="holdout accuracy"):
            pretrain(small_stream_spec, settings, seed=0)

    def test_checkpoint_reload_identical_predictions(self, pretrained_small,
                                                     small_stream_spec):
        path, _ = pretrained_small
        model = nn.load_model(path)
        again = nn.load_model(path)
        x = np.random.default_rng(0).normal(size=(8, small_stream_spec.feature_dim))
        np.testing.assert_array_equal(
            nn.forward(model, x, nn.ForwardMode.deterministic()),
            nn.forward(again, x, nn.ForwardMode.deterministic()))

    def test_default_gate_is_90_percent(self, pretrained_default):
        _, accuracy = pretrained_default
        assert accuracy >= 0.90


class TestRunExperiment:
    def test_source_method_equals_plain_evaluation(self, base_config):
        config = replace_method(base_config, "source")
        rows = run_single_seed(config, 0, nn.load_model(config.checkpoint))
        stream = make_shift_stream(config.stream, derive_seed(0, "stream"))
        model = nn.load_model(config.checkpoint)
        correct = total = 0
        for batch, row in zip(stream, rows):
            pred = nn.forward(model, batch.features,
                              nn.ForwardMode.deterministic()).argmax(axis=1)
            correct += int((pred == batch.hidden_labels).sum())
            total += batch.size
            assert row.pre_acc == pytest.approx(
                float((pred == batch.hidden_labels).mean()))
        assert rows[-1].cum_acc == pytest.approx(correct / total)

    def test_zeroed_dual_matches_bn_stats_rows_exactly(self, base_config):
        zeroed = replace_method(base_config, "dual")
        zeroed.adapt = replace(zeroed.adapt, k=0, alpha=0.0, beta=0.0)
        bn = replace_method(base_config, "bn_stats")
        rows_zeroed = run_single_seed(zeroed, 0, nn.load_model(zeroed.checkpoint))
        rows_bn = run_single_seed(bn, 0, nn.load_model(bn.checkpoint))
        for a, b in zip(rows_zeroed, rows_bn):
            assert replace(a, method="x") == replace(b, method="x")

    def test_skip_schedule_row_counts(self, base_config):
        config = replace_method(base_config, "dual")
        config.schedule = FeedbackSchedule(skip_period=4)
        rows = run_single_seed(config, 0, nn.load_model(config.checkpoint))
        n_batches = len(rows)
        assert sum(1 for r in rows if r.n_queried > 0) == -(-n_batches // 4)

    def test_run_directory_contents_and_determinism(self, base_config, tmp_path):
        summary1 = run_experiment(base_config, tmp_path / "run1")
        summary2 = run_experiment(base_config, tmp_path / "run2")
        for name in ("metrics.csv", "summary.json", "resolved_config.json"):
            assert (tmp_path / "run1" / name).exists()
        assert (tmp_path / "run1" / "metrics.csv").read_bytes() == \
            (tmp_path / "run2" / "metrics.csv").read_bytes()
        assert summary1 == summary2

    def test_rerun_from_resolved_config_reproduces(self, base_config, tmp_path):
        run_experiment(base_config, tmp_path / "orig")
        with open(tmp_path / "orig" / "resolved_config.json") as fh:
            reloaded = config_from_dict(json.load(fh))
        run_experiment(reloaded, tmp_path / "replay")
        assert (tmp_path / "orig" / "metrics.csv").read_bytes() == \
            (tmp_path / "replay" / "metrics.csv").read_bytes()

    def test_cumulative_accuracy_replayable_from_rows(self, base_config, tmp_path):
        run_experiment(base_config, tmp_path / "run")
        lines = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()
        header = lines[0].split(",")
        idx = {name: i for i, name in enumerate(header)}
        correct = total = 0
        for line in lines[1:]:
            parts = line.split(",")
            n = int(parts[idx["n_samples"]])
            pre = float(parts[idx["pre_acc"]])
            correct += round(pre * n)
            total += n
            assert float(parts[idx["cum_acc"]]) == pytest.approx(correct / total)

    def test_failures_recorded_not_raised(self, base_config, tmp_path):
        config = replace_method(base_config, "dual")
        config.seeds = (0, 1)
        config.stream = replace(config.stream, batch_size=1,
                                ordering="single_sample")
        summary = run_experiment(config, tmp_path / "run")
        assert len(summary["failures"]) == 2
        assert summary["per_seed"] == {}


class TestAblationGrid:
    def test_single_value_grid_matches_run(self, base_config, tmp_path):
        grid = ablation_grid(base_config, "k", [3], tmp_path / "grid")
        solo = run_experiment(base_config, tmp_path / "solo")
        assert grid["cells"]["3"] == solo
        assert (tmp_path / "grid" / "k=3" / "metrics.csv").read_bytes() == \
            (tmp_path / "solo" / "metrics.csv").read_bytes()

    def test_grid_rerun_deterministic(self, base_config, tmp_path):
        g1 = ablation_grid(base_config, "beta", [0.5, 1.0], tmp_path / "g1")
        g2 = ablation_grid(base_config, "beta", [0.5, 1.0], tmp_path / "g2")
        assert g1 == g2

    def test_error_rate_axis_reaches_oracle(self, base_config, tmp_path):
        grid = ablation_grid(base_config, "error_rate", [0.0, 1.0],
                             tmp_path / "grid")
        # A fully inverted oracle must not outperform the truthful one.
        assert grid["cells"]["1.0"]["mean_cumulative_accuracy"] <= \
            grid["cells"]["0.0"]["mean_cumulative_accuracy"] + 0.02

    def test_unknown_axis_rejected(self, base_config, tmp_path):
        with pytest.raises(ValueError, match="unknown ablation axis"):
            ablation_grid(base_config, "dropout", [0.1], tmp_path / "grid")


class TestConfigRoundTrip:
    def test_dict_round_trip(self, base_config):
        data = config_to_dict(base_config)
        rebuilt = config_from_dict(data)
        assert config_to_dict(rebuilt) == data

    def test_json_round_trip(self, base_config):
        data = json.loads(json.dumps(config_to_dict(base_config)))
        rebuilt = config_from_dict(data)
        assert config_to_dict(rebuilt) == config_to_dict(base_config)


class TestCalibrationReport:
    def test_report_shape_and_bounds(self, base_config):
        model = nn.load_model(base_config.checkpoint)
        stream = make_shift_stream(base_config.stream, derive_seed(0, "stream"))
        report = calibration_report(model, stream, n_passes=4, seed=0)
        assert set(report["per_segment"]) == {"0", "1"}
        for seg in report["per_segment"].values():
            assert 0.0 <= seg["mc_ece"] <= 1.0
            assert 0.0 <= seg["det_ece"] <= 1.0
        assert report["mean_mc_ece"] == pytest.approx(
            np.mean([s["mc_ece"] for s in report["per_segment"].values()]))


def replace_method(config: ExperimentConfig, method: str) -> ExperimentConfig:
    clone = config_from_dict(config_to_dict(config))
    clone.method = method
    return clone
