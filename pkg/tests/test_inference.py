"""Autoregressive prediction loop and the benchmark harness."""

import numpy as np
import pytest

from stmoe.inference import (
    BenchReport,
    NumericFailure,
    PredictionRequest,
    SweepSpec,
    bench_inference,
    predict,
    scaling_summary,
)
from stmoe.model import ModelConfig, STTransformer, analytic_param_count
from stmoe.rng import Rng


def small_model(seed=0, **kw):
    base = dict(
        input_window=6,
        num_joints=2,
        joint_dim=3,
        embed_dim=4,
        num_layers=1,
        hidden_dim=8,
        dropout_rate=0.0,
        dtype="f64",
    )
    base.update(kw)
    return STTransformer(ModelConfig(**base), Rng(seed))


class TestPredict:
    def test_horizon_one_equals_single_forward(self):
        model = small_model(0)
        seed_window = Rng(1).normal(scale=0.3, size=(6, 2, 3))
        out = predict(model, PredictionRequest(seed_window=seed_window, horizon=1))
        assert len(out) == 1
        single = model.forward(seed_window).prediction.data
        np.testing.assert_array_equal(out.frames, single)

    def test_constant_output_model_repeats(self):
        # zero projections force a constant prediction; the loop then emits it
        # at every horizon step
        model = small_model(2)
        model.project2_weight.data[:] = 0.0
        model.project1.bias.data[:] = 0.0
        model.project2_bias.data[:] = 0.7
        out = predict(model, PredictionRequest(Rng(3).normal(size=(6, 2, 3)), horizon=5))
        np.testing.assert_array_equal(out.frames, np.full((5, 2, 3), 0.7))

    def test_window_evolution(self):
        # window at step k must equal seed[k:] ++ predictions[:k]
        model = small_model(4)
        seed_window = Rng(5).normal(scale=0.3, size=(6, 2, 3))
        observed = []
        out = predict(
            model,
            PredictionRequest(seed_window=seed_window, horizon=4),
            on_window=lambda step, window: observed.append((step, window)),
        )
        preds = out.frames
        for step, window in observed:
            expected = np.concatenate([seed_window[step:], preds[:step]], axis=0)
            np.testing.assert_array_equal(window, expected.astype(window.dtype))

    def test_deterministic(self):
        model = small_model(6)
        seed_window = Rng(7).normal(scale=0.3, size=(6, 2, 3))
        a = predict(model, PredictionRequest(seed_window, horizon=8)).frames
        b = predict(model, PredictionRequest(seed_window, horizon=8)).frames
        assert np.array_equal(a, b)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_reports_step_index(self):
        model = small_model(8)
        model.embed.weight.data[:] = np.nan
        with pytest.raises(NumericFailure, match="step 0"):
            predict(model, PredictionRequest(Rng(9).normal(size=(6, 2, 3)), horizon=3))

    def test_bad_horizon_and_window(self):
        model = small_model(10)
        with pytest.raises(ValueError):
            PredictionRequest(np.zeros((6, 2, 3)), horizon=0)
        with pytest.raises(ValueError):
            predict(model, PredictionRequest(np.zeros((5, 2, 3)), horizon=1))


def quick_spec(**kw):
    base = dict(
        dense_hidden=(8, 16),
        moe_experts=(2, 4),
        moe_expert_hidden=16,
        input_window=6,
        num_joints=2,
        embed_dim=4,
        num_layers=1,
        reps=2,
        warmup=0,
        num_windows=1,
        horizon=2,
        seed=0,
    )
    base.update(kw)
    return SweepSpec(**base)


class TestBench:
    def test_report_rows_and_param_counts(self):
        spec = quick_spec()
        report = bench_inference(spec)
        assert [r.kind for r in report.rows] == ["dense", "dense", "soft_moe", "soft_moe"]
        for row in report.rows:
            if row.kind == "dense":
                cfg = spec.base_config(ffn_kind="dense", hidden_dim=row.param)
            else:
                cfg = spec.base_config(
                    ffn_kind="soft_moe",
                    num_experts=row.param,
                    slots_per_expert=1,
                    expert_hidden_dim=spec.moe_expert_hidden,
                )
            assert row.total_params == analytic_param_count(cfg)
            assert row.seconds > 0
            assert row.preds_per_sec == pytest.approx(
                spec.num_windows * spec.horizon / row.seconds
            )

    def test_csv_and_metadata(self, tmp_path):
        report = bench_inference(quick_spec())
        csv_path, meta_path = tmp_path / "bench.csv", tmp_path / "bench_meta.json"
        report.write_csv(csv_path)
        report.write_metadata(meta_path)
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "kind,param,total_params,seconds,preds_per_sec"
        assert len(lines) == 5
        assert "thread_mode" in meta_path.read_text()

    def test_scaling_summary_ratios(self):
        report = BenchReport(
            rows=[
                type("R", (), {"kind": "dense", "param": 64, "total_params": 100, "seconds": 1.0})(),
                type("R", (), {"kind": "dense", "param": 2048, "total_params": 900, "seconds": 3.0})(),
                type("R", (), {"kind": "soft_moe", "param": 2, "total_params": 200, "seconds": 1.5})(),
                type("R", (), {"kind": "soft_moe", "param": 32, "total_params": 3200, "seconds": 2.0})(),
            ],
            metadata={},
        )
        summary = scaling_summary(report)
        assert summary["dense_time_ratio"] == pytest.approx(3.0)
        assert summary["soft_moe_time_ratio"] == pytest.approx(2.0 / 1.5)
        assert summary["soft_moe_param_ratio"] == pytest.approx(16.0)

    def test_repetition_stability(self):
        # medians of repeated runs of one default-size config agree within 20%
        spec = SweepSpec(dense_hidden=(256,), moe_experts=(), reps=5, warmup=2, num_windows=4)
        medians = [bench_inference(spec).rows[0].seconds for _ in range(3)]
        assert max(medians) / min(medians) < 1.2, medians
