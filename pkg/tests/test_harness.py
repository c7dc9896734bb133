import json
import math

import numpy as np
import pytest

from camel import aet
from camel.aet import ActionKind
from camel.config import RunConfig, StreamConfig, dump_config, parse_config
from camel.harness import Runner, accuracy, evaluate, predict, read_metrics, run, summarize
from camel.model import StreamSpec, StreamSystem
from camel.streams import Sea


def small(ablation="full", **kw):
    base = dict(window_size=20, d_h=4, d_f=4, hidden=6, init_epochs=5, window_epochs=3, max_windows=6,
                seed=3, ablation=ablation)
    base.update(kw)
    streams = [StreamConfig("sea", {"n_samples": 1000, "noise": 0.1, "drift": [3]}),
               StreamConfig("random_tree", {"n_features": 4}),
               StreamConfig("rbf", {"n_features": 5, "speed": 0.0})]
    return RunConfig(streams=streams, **base)


def test_predict_ties_go_to_lowest_class():
    np.testing.assert_array_equal(predict(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])), [0, 1])


def test_accuracy_examples():
    assert accuracy(np.eye(3), [0, 1, 2]) == 1.0
    assert accuracy(np.zeros((4, 2)), [0, 1, 0, 1]) == 0.5


def test_accuracy_matches_counting_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(200, 4))
    labels = rng.integers(0, 4, size=200)
    preds = logits.argmax(axis=1)
    confusion = np.zeros((4, 4), dtype=int)
    for p, y in zip(preds, labels):
        confusion[y, p] += 1
    assert accuracy(logits, labels) == np.trace(confusion) / 200


def test_evaluate_per_stream():
    systems = [StreamSystem(StreamSpec(i, 3, 2), 4, 4, 2, seed=i, hidden=4) for i in range(2)]
    window = [Sea(seed=i).window(0, 20) for i in range(2)]
    accs = evaluate(systems, window)
    assert len(accs) == 2 and all(0.0 <= a <= 1.0 for a in accs)


def test_zero_windows(tmp_path):
    result = run(small(max_windows=0), tmp_path)
    assert result.summary.windows == 0 and result.log == []
    assert (tmp_path / "metrics.jsonl").read_text() == ""
    assert json.loads((tmp_path / "summary.json").read_text())["windows"] == 0


def test_exhausted_stream_finalizes():
    result = run(small(max_windows=None, window_size=100))
    # the SEA stream holds 1000 instances: windows 1..9 after W_0
    assert result.summary.windows == 9


def test_log_and_summary_consistency(tmp_path):
    result = run(small(), tmp_path)
    records = read_metrics(tmp_path / "metrics.jsonl")
    assert [r.t for r in records] == list(range(1, 7))
    cfg = parse_config((tmp_path / "config.ini").read_text())
    recomputed = summarize(records, 3, result.summary.wall_clock_s, cfg, result.summary.final_experts)
    assert recomputed == result.summary
    saved = json.loads((tmp_path / "summary.json").read_text())
    assert saved["per_stream_accuracy"] == result.summary.per_stream_accuracy
    for r in records:
        for s in r.streams:
            assert 0.0 <= s.accuracy <= 1.0
            assert math.isclose(sum(s.routing), 1.0, abs_tol=1e-9)
            assert len(s.routing) == s.experts + 1


def test_identical_runs_write_identical_logs(tmp_path):
    run(small(), tmp_path / "a")
    run(small(), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_rerun_from_echoed_config_reproduces(tmp_path):
    run(small(), tmp_path / "a")
    cfg = parse_config((tmp_path / "a" / "config.ini").read_text())
    run(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_prequential_accuracy_precedes_training():
    cfg = small(max_windows=2)
    runner = Runner(cfg)
    runner.initialize(runner.get_window(0))
    w1 = runner.get_window(1)
    expected = evaluate(runner.systems, w1, runner.use_assist)
    metrics = runner.step(1, w1)
    assert [s.accuracy for s in metrics.streams] == expected


@pytest.mark.parametrize("ablation", ["base", "base-i"])
def test_ablations_without_tuner_never_change_structure(ablation):
    cfg = small(ablation, tau_mmd=1e-6, max_windows=8)
    runner = Runner(cfg)
    runner.initialize(runner.get_window(0))
    for t in range(1, 9):
        # force the degradation gate open: only the disabled tuner can keep the pool fixed
        for tuner in runner.tuners:
            tuner.perf_history.clear()
            tuner.perf_history.extend([1.0] * tuner.lookback)
        m = runner.step(t, runner.get_window(t))
        assert all(s.action == "none" and s.experts == 1 for s in m.streams)
        assert all(s.routing[0] == 0.0 for s in m.streams)


def test_full_adds_under_forced_drift_and_degradation():
    cfg = small("full", tau_mmd=1e-6, max_windows=4)
    runner = Runner(cfg)
    runner.initialize(runner.get_window(0))
    for tuner in runner.tuners:
        tuner.perf_history.extend([1.0] * tuner.lookback)
    m = runner.step(1, runner.get_window(1))
    assert all(s.action == "add" and s.experts == 2 and s.drift for s in m.streams)
    assert all(runner.systems[i].pool[0].frozen for i in range(3))


def test_base_reinitializes_every_window():
    cfg = small("base", max_windows=2)
    runner = Runner(cfg)
    runner.initialize(runner.get_window(0))
    first = [p.value.copy() for p in runner.systems[0].parameters()]
    runner.step(1, runner.get_window(1))
    ids = [id(p) for p in runner.systems[0].parameters()]
    runner.step(2, runner.get_window(2))
    assert ids != [id(p) for p in runner.systems[0].parameters()]
    assert any(not np.array_equal(a, p.value) for a, p in zip(first, runner.systems[0].parameters()))


def test_ablations_share_initial_weights():
    a, b = Runner(small("base-i")), Runner(small("full"))
    for s, r in zip(a.systems, b.systems):
        for p, q in zip(s.parameters(), r.parameters()):
            np.testing.assert_array_equal(p.value, q.value)


def test_utilization_tracks_routing_means():
    cfg = small(max_windows=1)
    runner = Runner(cfg)
    runner.initialize(runner.get_window(0))
    before = [s.pool[0].utilization for s in runner.systems]
    m = runner.step(1, runner.get_window(1))
    for s, b, sm in zip(runner.systems, before, m.streams):
        assert s.pool[0].utilization == pytest.approx((b + sm.routing[1]) / 2)


def test_config_dump_is_written(tmp_path):
    cfg = small()
    run(cfg, tmp_path)
    assert (tmp_path / "config.ini").read_text() == dump_config(cfg)
