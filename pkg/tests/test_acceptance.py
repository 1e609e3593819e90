"""Acceptance suite: every criterion prints one PASS line or fails its assert.

Runs on the frozen default benchmark and config. Heavier criteria share
runs through a session-scoped cache, and every run is deterministic, so
the verdicts are stable across invocations.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from fbtta import nn
from fbtta.baselines import bn_refresh_step, entropy_binary_loss
from fbtta.engine import AdaptConfig, adapt_batch, adapt_stream, adaptation_loss
from fbtta.harness import (ExperimentConfig, calibration_report,
                           config_from_dict, config_to_dict, run_experiment)
from fbtta.memory import FeedbackRecord, ReplayMemory
from fbtta.policy import agreement_set, estimate_policy, select_for_feedback
from fbtta.seeding import derive_seed
from fbtta.streams import (OracleSpec, default_stream_spec, make_oracle,
                           make_shift_stream, stream_label_table)

from .oracles import check_gradient

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)


class BenchCache:
    """Lazily runs and caches benchmark experiments keyed by their overrides."""

    def __init__(self, checkpoint, out_root):
        self.checkpoint = str(checkpoint)
        self.out_root = out_root
        self.spec = default_stream_spec()
        self._cache = {}

    def config(self, method="dual", **overrides) -> ExperimentConfig:
        oracle_error = overrides.pop("error_rate", 0.0)
        adapt = AdaptConfig(**overrides) if overrides else AdaptConfig()
        return ExperimentConfig(
            stream=self.spec, method=method, adapt=adapt,
            oracle=OracleSpec(error_rate=oracle_error),
            seeds=SEEDS, checkpoint=self.checkpoint)

    def summary(self, method="dual", **overrides) -> dict:
        key = (method, tuple(sorted(overrides.items())))
        if key not in self._cache:
            config = self.config(method, **overrides)
            label = "_".join([method] + [f"{k}={v}" for k, v in sorted(overrides.items())])
            self._cache[key] = run_experiment(config, self.out_root / label)
        return self._cache[key]

    def accuracy(self, method="dual", **overrides) -> float:
        return self.summary(method, **overrides)["mean_cumulative_accuracy"]


@pytest.fixture(scope="session")
def bench(pretrained_default, tmp_path_factory):
    path, _ = pretrained_default
    return BenchCache(path, tmp_path_factory.mktemp("acceptance"))


class TestA1GradientCorrectness:
    def test_a1(self, tiny_model, tiny_inputs):
        started = time.monotonic()
        assert tiny_model.param_count <= 1000
        nn.update_bn_stats(tiny_model, tiny_inputs, momentum=0.3)

        rng = np.random.default_rng(0)
        mem_c, mem_i = ReplayMemory(8), ReplayMemory(8)
        for _ in range(3):
            mem_c.insert(FeedbackRecord(rng.normal(size=6), 1, 1))
        for _ in range(2):
            mem_i.insert(FeedbackRecord(rng.normal(size=6), 2, -1))
        config = AdaptConfig(alpha=1.0, beta=1.0, n_passes=4, seed=0)
        aba_x = rng.normal(size=(4, 6))
        aba_y = np.array([0, 1, 2, 1])

        def combined(model):
            loss, grad, _ = adaptation_loss(model, mem_c, mem_i, aba_x, aba_y,
                                            config, mc_seed=21)
            return loss, grad

        worst_combined = check_gradient(combined, tiny_model, n_samples=120, seed=1)

        correct_rows = np.array([0, 3])
        incorrect_rows = np.array([5, 7])
        labels_c = np.array([1, 0])
        labels_i = np.array([2, 2])

        def baseline(model):
            def loss_fn(probs):
                return entropy_binary_loss(probs, correct_rows, labels_c,
                                           incorrect_rows, labels_i)
            return nn.grad(model, tiny_inputs, nn.ForwardMode.deterministic(),
                           loss_fn)

        worst_baseline = check_gradient(baseline, tiny_model, n_samples=120, seed=2)
        elapsed = time.monotonic() - started
        assert worst_combined <= 1e-4 and worst_baseline <= 1e-4
        assert elapsed < 30.0
        print(f"\nA1 PASS: combined-loss rel err {worst_combined:.2e}, "
              f"baseline-loss rel err {worst_baseline:.2e}, {elapsed:.1f}s")


class TestA2ReductionIdentities:
    def _final_model(self, bench, method, **overrides):
        config = bench.config(method, **overrides)
        model = nn.load_model(bench.checkpoint)
        stream = make_shift_stream(config.stream, derive_seed(0, "stream"))
        oracle = make_oracle(
            OracleSpec(error_rate=0.0, seed=derive_seed(0, "oracle", 0)),
            stream_label_table(stream))
        from fbtta.harness import _engine_preset
        adapt = replace(_engine_preset(method, config.adapt),
                        seed=derive_seed(0, "adapt"))
        adapt_stream(model, stream, oracle, adapt)
        return model

    def test_a2(self, bench):
        started = time.monotonic()
        zeroed = self._final_model(bench, "dual", k=0, alpha=0.0, beta=0.0)
        bn_engine = self._final_model(bench, "bn_stats")
        assert nn.model_bytes(zeroed) == nn.model_bytes(bn_engine)

        # Cross-check against the standalone baseline op (separate code path).
        baseline = nn.load_model(bench.checkpoint)
        nn.set_dropout_rate(baseline, AdaptConfig().dropout_rate)
        stream = make_shift_stream(bench.spec, derive_seed(0, "stream"))
        for batch in stream:
            bn_refresh_step(baseline, batch, AdaptConfig().bn_momentum)
        assert nn.model_bytes(zeroed) == nn.model_bytes(baseline)

        beta_zero = self._final_model(bench, "dual", beta=0.0)
        feedback_only = self._final_model(bench, "feedback_only")
        assert nn.model_bytes(beta_zero) == nn.model_bytes(feedback_only)

        alpha_zero = self._final_model(bench, "dual", alpha=0.0, k=0)
        agreement_only = self._final_model(bench, "agreement_only")
        assert nn.model_bytes(alpha_zero) == nn.model_bytes(agreement_only)
        elapsed = time.monotonic() - started
        assert elapsed < 60.0
        print(f"\nA2 PASS: zeroed==bn_stats==baseline op, beta0==feedback_only, "
              f"alpha0/k0==agreement_only ({elapsed:.1f}s)")


class TestA3BenchmarkOrdering:
    def test_a3(self, bench):
        started = time.monotonic()
        scores = {method: bench.accuracy(method)
                  for method in ("dual", "feedback_only", "agreement_only",
                                 "bn_stats", "entropy_binary", "source")}
        elapsed = time.monotonic() - started
        best_baseline = max(v for k, v in scores.items() if k != "dual")
        margin = scores["dual"] - best_baseline
        line = " ".join(f"{k}={v:.4f}" for k, v in scores.items())
        assert margin >= 0.02, f"margin {margin*100:.2f}pt below 2pt: {line}"
        assert elapsed < 600 * len(scores)
        print(f"\nA3 PASS: {line}; margin {margin*100:+.2f}pt ({elapsed:.0f}s)")


class TestA4FeedbackBudget:
    def test_a4(self, bench):
        accs = {k: bench.accuracy("dual", k=k) for k in (0, 1, 3, 8)}
        values = [accs[k] for k in (0, 1, 3, 8)]
        for lower_k, higher_k in zip((0, 1, 3), (1, 3, 8)):
            assert accs[higher_k] >= accs[lower_k] - 0.01, accs
        print("\nA4 PASS: " + " ".join(f"k={k}:{accs[k]:.4f}" for k in (0, 1, 3, 8)))
        assert values[-1] > values[0]  # budget genuinely helps


class TestA5FeedbackErrorRobustness:
    def test_a5(self, bench):
        accs = {e: bench.accuracy("dual", error_rate=e)
                for e in (0.0, 0.1, 0.2, 0.3)}
        rates = (0.0, 0.1, 0.2, 0.3)
        for lo, hi in zip(rates[:-1], rates[1:]):
            assert accs[hi] <= accs[lo] + 0.01, accs
        bn = bench.accuracy("bn_stats")
        assert accs[0.3] >= bn, (accs[0.3], bn)
        print("\nA5 PASS: " +
              " ".join(f"err={e}:{accs[e]:.4f}" for e in rates) +
              f"; at 0.3 still >= bn_stats {bn:.4f}")


class TestA6Calibration:
    def test_a6(self, bench):
        model = nn.load_model(bench.checkpoint)
        stream = make_shift_stream(bench.spec, derive_seed(0, "stream"))
        report = calibration_report(model, stream, n_passes=4, seed=0)
        assert report["mean_mc_ece"] <= report["mean_det_ece"], report
        print(f"\nA6 PASS: MC-dropout ECE {report['mean_mc_ece']:.4f} <= "
              f"deterministic ECE {report['mean_det_ece']:.4f} "
              "(segment average, pre-adaptation)")


class TestA7StructuralInvariants:
    def test_a7(self, bench, tmp_path):
        started = time.monotonic()
        model = nn.load_model(bench.checkpoint)
        stream = make_shift_stream(bench.spec, derive_seed(0, "stream"))[:4]

        # Simplex checks across modes on real benchmark batches.
        for mode in (nn.ForwardMode.deterministic(), nn.ForwardMode.dropout(3)):
            probs = nn.forward(model, stream[0].features, mode)
            assert np.all(probs >= 0.0)
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

        # FIFO capacity model check.
        mem = ReplayMemory(5)
        for tag in range(37):
            mem.insert(FeedbackRecord(np.full(3, float(tag)), 0, 1))
            assert len(mem) <= 5
        assert [int(r.features[0]) for r in mem.records] == list(range(32, 37))

        # Selection disjointness and cardinality on real estimates.
        est = estimate_policy(model, stream[0].features, 4, base_seed=9)
        for k in (0, 3, 16, 200):
            fb = select_for_feedback(est, k)
            aba = agreement_set(est, fb)
            assert len(fb) == min(k, stream[0].size)
            assert not set(fb.tolist()) & set(aba.tolist())
            assert set(aba.tolist()) <= set(range(stream[0].size)) - set(fb.tolist())

        # Hidden-label firewall: poisoned labels, bit-identical parameters.
        oracle = make_oracle(OracleSpec(0.0, seed=derive_seed(0, "oracle", 0)),
                             stream_label_table(stream))
        config = AdaptConfig(alpha=1.0, seed=derive_seed(0, "adapt"))
        m_clean = nn.load_model(bench.checkpoint)
        m_poison = nn.load_model(bench.checkpoint)
        for m in (m_clean, m_poison):
            nn.set_dropout_rate(m, config.dropout_rate)
        for batch in stream:
            poisoned = replace(batch, hidden_labels=(batch.hidden_labels + 3)
                               % bench.spec.n_classes)
            adapt_batch(m_clean, batch, oracle, config,
                        ReplayMemory(8), ReplayMemory(8))
            adapt_batch(m_poison, poisoned, oracle, config,
                        ReplayMemory(8), ReplayMemory(8))
        assert nn.model_bytes(m_clean) == nn.model_bytes(m_poison)

        # Seeded end-to-end determinism: byte-identical artifacts.
        config_a = bench.config("dual")
        config_a.seeds = (0,)
        run_experiment(config_a, tmp_path / "run_a")
        run_experiment(config_from_dict(config_to_dict(config_a)), tmp_path / "run_b")
        assert (tmp_path / "run_a" / "metrics.csv").read_bytes() == \
            (tmp_path / "run_b" / "metrics.csv").read_bytes()
        assert (tmp_path / "run_a" / "summary.json").read_bytes() == \
            (tmp_path / "run_b" / "summary.json").read_bytes()

        elapsed = time.monotonic() - started
        assert elapsed < 120.0
        print(f"\nA7 PASS: simplex, FIFO, selection sets, firewall, "
              f"byte-identical reruns ({elapsed:.0f}s)")


class TestA8BetaSensitivity:
    def test_a8(self, bench):
        accs = {b: bench.accuracy("dual", alpha=1.0, beta=b)
                for b in (0.5, 1.0, 2.0)}
        spread = max(accs.values()) - min(accs.values())
        assert spread <= 0.03, accs
        print("\nA8 PASS: " +
              " ".join(f"beta={b}:{accs[b]:.4f}" for b in (0.5, 1.0, 2.0)) +
              f"; spread {spread*100:.2f}pt <= 3pt")


class TestA9ConsoleEquivalence:
    """Secondary-component criterion, server side.

    A scripted client speaking the exact wire protocol and answering with
    the ground truth must reproduce the simulated error-free run: same
    metrics bytes, same final parameters. The browser console's own
    protocol-conformance suite (mock server, vitest) lives in
    frontend/tests; nothing in the primary suite imports the frontend,
    so the primary criteria run with no secondary component built.
    """

    def test_a9(self, small_stream_spec, pretrained_small, tmp_path):
        import json
        import threading
        import urllib.request
        from fbtta.service import LiveSession, make_server

        path, _ = pretrained_small
        config = ExperimentConfig(stream=small_stream_spec, method="dual",
                                  checkpoint=str(path), seeds=(0,),
                                  adapt=AdaptConfig(lr=1e-3))
        run_experiment(config, tmp_path / "sim")

        session = LiveSession(config, tmp_path / "live", deadline_ms=5000)
        server = make_server(session, port=0)
        server_thread = threading.Thread(target=server.serve_forever, daemon=True)
        server_thread.start()
        base = f"http://127.0.0.1:{server.server_address[1]}"
        stream = make_shift_stream(config.stream, derive_seed(0, "stream"))
        labels = stream_label_table(stream)

        def console():
            since = 0
            while True:
                with urllib.request.urlopen(f"{base}/api/messages?since={since}") as r:
                    payload = json.load(r)
                for message in payload["messages"]:
                    if message["type"] == "query_batch":
                        for query in message["queries"]:
                            sid = int(query["sample_id"])
                            body = json.dumps({
                                "sample_id": query["sample_id"],
                                "correct": query["predicted_label"] == labels[sid],
                            }).encode()
                            req = urllib.request.Request(
                                f"{base}/api/feedback", data=body,
                                headers={"Content-Type": "application/json"})
                            urllib.request.urlopen(req)
                    elif message["type"] == "session_done":
                        return
                since = payload["next"]
                time.sleep(0.005)

        console_thread = threading.Thread(target=console, daemon=True)
        session.start()
        console_thread.start()
        session.join(timeout=120)
        console_thread.join(timeout=10)
        server.shutdown()

        sim = (tmp_path / "sim" / "metrics.csv").read_bytes()
        live = (tmp_path / "live" / "metrics.csv").read_bytes()
        assert sim == live
        print("\nA9 PASS: scripted ground-truth console transcript byte-identical "
              "to the simulated error-free run; frontend conformance suite in "
              "frontend/tests (vitest)")
