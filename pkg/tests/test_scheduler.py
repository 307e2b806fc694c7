import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedvisor.config import TaskConfig
from fedvisor.detection import ArchConfig
from fedvisor.explorer import ClientResourceReport
from fedvisor.scheduler import (
    MB,
    QuorumNotMet,
    ScheduleDecision,
    normalize_quality,
    schedule_round,
    score_clients,
    simulate_upload_time,
)
from fedvisor.server import score_schedule
from fedvisor.sim import make_dataset, simulate


def rep(cid, q, cpu, mem=0.0, bw=10.0):
    return ClientResourceReport(cid, cpu, mem, bw, q)


def test_score_arithmetic():
    scores = score_clients([rep("a", 0.8, 0.5), rep("b", 0.2, 0.0, 0.1)])
    assert scores["a"] == pytest.approx(0.3) and scores["b"] == pytest.approx(0.1)


def test_degenerate_weights():
    reps = [rep("a", 0.9, 0.9), rep("b", 0.1, 0.1), rep("c", 0.5, 0.5)]
    by_quality = score_clients(reps, 1.0, 0.0)
    assert max(by_quality, key=by_quality.get) == "a"
    by_load = score_clients(reps, 0.0, 1.0)
    assert max(by_load, key=by_load.get) == "b"
    with pytest.raises(ValueError):
        score_clients(reps, -1.0, 1.0)


def test_schedule_examples():
    assert schedule_round({c: 0.0 for c in "abcd"}, 4).selected == list("abcd")
    assert schedule_round({"a": 0.3, "b": 0.1}, 1).selected == ["a"]
    assert schedule_round({"b": 0.5, "a": 0.5, "c": 0.5}, 1).selected == ["a"]
    with pytest.raises(QuorumNotMet):
        schedule_round({"a": 1.0}, 1, min_quorum=2)
    with pytest.raises(ValueError):
        schedule_round({"a": 1.0}, 0)


score_maps = st.dictionaries(st.text("abcdefgh", min_size=1, max_size=3), st.floats(-10, 10), min_size=1, max_size=8)


@given(score_maps, st.integers(1, 10), st.floats(0.01, 100))
def test_schedule_cap_and_scale_invariance(scores, cap, c):
    d = schedule_round(scores, cap)
    assert len(d.selected) == min(cap, len(scores))
    assert set(d.selected) | set(d.skipped) == set(scores)
    scaled = schedule_round({k: c * v for k, v in scores.items()}, cap)
    if len(set(scores.values())) == len(scores):
        assert scaled.selected == d.selected
    best_skipped = max((scores[k] for k in d.skipped), default=-np.inf)
    assert all(scores[k] >= best_skipped for k in d.selected)


def test_decision_json_roundtrip():
    import json

    d = schedule_round({"a": 0.3, "b": 0.1}, 1, round=4)
    assert ScheduleDecision(**json.loads(d.to_json())) == d


def test_normalize_quality():
    assert normalize_quality({"a": -2.0, "b": -1.0, "c": -1.5}) == {"a": 0.0, "b": 1.0, "c": 0.5}
    assert normalize_quality({"a": -3.0, "b": -3.0}) == {"a": 1.0, "b": 1.0}
    assert normalize_quality({}) == {}


def test_upload_time_examples():
    assert simulate_upload_time(100 * MB, 10) == pytest.approx(10.0)
    assert simulate_upload_time(0, 10, 2.5) == 2.5
    assert simulate_upload_time(230 * MB, 15, 5.0) == pytest.approx(20.333, abs=1e-3)
    with pytest.raises(ValueError):
        simulate_upload_time(1, 0)


@given(st.floats(0, 1e10), st.floats(1, 1e6), st.floats(0.01, 1e3), st.floats(0.01, 1e3), st.floats(0, 10))
def test_upload_time_monotone(n, extra, bw, dbw, overhead):
    t = simulate_upload_time(n, bw, overhead)
    assert simulate_upload_time(n + extra, bw, overhead) > t
    assert simulate_upload_time(n + 1, bw + dbw, overhead) < simulate_upload_time(n + 1, bw, overhead)


ARCH = ArchConfig(input_side=12, hidden_sizes=(4,), S=2, B=1, C=2)


def _random_scheduler(seed):
    rng = np.random.default_rng(seed)

    def schedule(round, reports, config):
        ids = sorted(r.client_id for r in reports)
        pick = sorted(rng.choice(ids, size=min(config.clients_per_round, len(ids)), replace=False).tolist())
        return ScheduleDecision(round, pick, {})

    return schedule


def _mean_selected_load(report, traces):
    loads = []
    for line, m in zip(report.schedule_log, report.rounds):
        for cid in m.selected:
            cpu, mem, _ = traces[cid][(m.round - 1) % len(traces[cid])]
            loads.append(max(cpu, mem))
    return float(np.mean(loads))


def test_load_balancing_beats_random_selection():
    score_loads, random_loads = [], []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        shards, _ = make_dataset(12, 6, seed)
        # each client holds a steady load level with small per-round jitter
        traces = {
            s.client_id: [(float(np.clip(level + rng.normal(0, 0.05), 0, 1)), 0.1, 10.0) for _ in range(3)]
            for s, level in zip(shards, rng.uniform(0, 1, len(shards)))
        }
        cfg = TaskConfig(task_id="lb", arch=ARCH, rounds=3, local_epochs=1, clients_per_round=2, seed=seed)
        a = simulate(cfg, shards, traces=traces)
        b = simulate(cfg, shards, traces=traces, scheduler=_random_scheduler(seed))
        assert a.ok and b.ok
        for r in a.rounds + b.rounds:
            assert len(r.selected) <= 2 and len(r.participants) >= cfg.quorum
        score_loads.append(_mean_selected_load(a, traces))
        random_loads.append(_mean_selected_load(b, traces))
    assert np.mean(score_loads) <= np.mean(random_loads)


def test_score_schedule_uses_config_cap():
    cfg = TaskConfig(clients_per_round=1)
    d = score_schedule(1, [rep("a", -2.0, 0.9), rep("b", -1.0, 0.1)], cfg)
    assert d.selected == ["b"]
