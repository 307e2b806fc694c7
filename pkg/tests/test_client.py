from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_params
from fedvisor.annotation import encode_grid_target
from fedvisor.client import ExhaustedRetries, FLClient, SimClock, TransportError, local_train, upload_with_retry
from fedvisor.compression import ALL, abs_sum, layer_contribution, select_top_n, top_n_indices
from fedvisor.config import TaskConfig
from fedvisor.detection import ArchConfig, ModelParams, init_model, loss_gradient, sgd_step
from fedvisor.explorer import LiveProbe, TraceProbe, report_resources
from fedvisor.protocol import (
    AggregationDone,
    DispatchModel,
    Error,
    ResourceReport,
    StartLocalTraining,
    TaskConfigMsg,
    UploadUpdate,
    encode_message,
)
from fedvisor.server import federated_average, merge_partial_updates
from fedvisor.sim import make_dataset

ARCH = ArchConfig(input_side=12, hidden_sizes=(8, 6), S=2, B=1, C=2)
seeds = st.integers(0, 2**32 - 1)


@pytest.fixture(scope="module")
def shard():
    shards, _ = make_dataset(20, 1, 4)
    return shards[0]


def test_zero_lr_keeps_params(shard):
    start = init_model(1, ARCH)
    params, m = local_train(start, shard, 3, 0.0, ARCH)
    assert params == start and m["steps"] == 3


def test_one_full_batch_epoch_is_one_sgd_step(shard):
    start = init_model(2, ARCH)
    batch = [(s.image, encode_grid_target(s.boxes, ARCH)) for s in shard.samples]
    expected = sgd_step(start, loss_gradient(start, batch, ARCH), 0.3)
    params, _ = local_train(start, shard, 1, 0.3, ARCH)
    assert params == expected


@pytest.mark.parametrize("seed", range(10))
def test_small_lr_descends(seed):
    shards, _ = make_dataset(20, 1, seed)
    _, m = local_train(init_model(seed, ARCH), shards[0], 3, 1e-3, ARCH)
    assert m["final_loss"] <= m["initial_loss"]


def test_local_train_deterministic(shard):
    a, _ = local_train(init_model(5, ARCH), shard, 2, 0.5, ARCH, batch_size=4)
    b, _ = local_train(init_model(5, ARCH), shard, 2, 0.5, ARCH, batch_size=4)
    assert a == b


def test_layer_contribution_examples():
    z = init_model(0, ARCH)
    assert layer_contribution(z, z) == [0.0, 0.0, 0.0]
    one = lambda v: ModelParams([(np.full((1, 1), v), np.zeros(1)), (np.ones((1, 1)), np.zeros(1))])
    assert layer_contribution(one(10.0), one(-7.5)) == [2.5, 0.0]


@given(seeds)
def test_layer_contribution_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    prev, curr = random_params(rng, ARCH), random_params(rng, ARCH)
    expected = []
    for (Wp, bp), (Wc, bc) in zip(prev.layers, curr.layers):
        # exact rational accumulation, one scalar at a time
        sp = sum((Fraction(abs(float(x))) for x in [*Wp.ravel(), *bp]), Fraction(0))
        sc = sum((Fraction(abs(float(x))) for x in [*Wc.ravel(), *bc]), Fraction(0))
        expected.append(float(abs(sc - sp)))
    assert np.allclose(layer_contribution(prev, curr), expected, rtol=0, atol=1e-12)


def test_top_n_examples():
    assert top_n_indices([0.5, 2.0, 1.0], 2) == [1, 2]
    assert top_n_indices([1.0, 1.0, 0.0], 1) == [0]
    assert top_n_indices([0.1, 0.2, 0.3], ALL) == [0, 1, 2]
    assert top_n_indices([0.1, 0.2, 0.3], 3) == [0, 1, 2]
    with pytest.raises(ValueError):
        top_n_indices([1.0], 0)


@given(st.lists(st.sampled_from([0.0, 0.5, 1.0, 2.0, 3.5]), min_size=1, max_size=8))
def test_top_n_nested(v):
    sets = [set(top_n_indices(v, n)) for n in range(1, len(v) + 1)]
    for a, b in zip(sets, sets[1:]):
        assert a < b
    assert all(len(s) == n for n, s in enumerate(sets, start=1))


@given(seeds)
def test_upload_size_monotone_in_n(seed):
    rng = np.random.default_rng(seed)
    curr = random_params(rng, ARCH)
    v = list(rng.uniform(size=3))
    size = lambda n: len(encode_message(UploadUpdate("t", "c", 1, select_top_n(curr, v, n, "c", 1))))
    sizes = [size(n) for n in (1, 2, 3)]
    assert sizes[0] <= sizes[1] < sizes[2] == size(ALL)


@given(seeds, st.integers(1, 4))
def test_select_all_then_merge_is_fedavg(seed, k):
    rng = np.random.default_rng(seed)
    models = [random_params(rng, ARCH) for _ in range(k)]
    ups = [select_top_n(m, layer_contribution(models[0], m), 3, f"c{i}", 1) for i, m in enumerate(models)]
    merged = merge_partial_updates(random_params(rng, ARCH), ups)
    assert np.max(np.abs(merged.flat() - federated_average(models).flat())) <= 1e-12


def test_abs_sum_counts_bias():
    assert abs_sum(np.array([[-1.0, 2.0]]), np.array([-3.0])) == 6.0


def test_trace_probe_echo_and_order():
    probe = TraceProbe([(0.3, 0.4, 12.0)])
    r = report_resources(probe, "c")
    assert (r.cpu_load, r.mem_load, r.bandwidth) == (0.3, 0.4, 12.0)
    trace = [(0.1, 0.2, 1.0), (0.3, 0.1, 2.0), (0.9, 0.0, 3.0)]
    probe = TraceProbe(trace)
    got = [report_resources(probe, "c") for _ in trace]
    assert [(r.cpu_load, r.mem_load, r.bandwidth) for r in got] == trace


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 100))
def test_reports_clamp_loads(cpu, mem, bw):
    r = report_resources(TraceProbe([(cpu, mem, bw)]), "c")
    assert 0 <= r.cpu_load <= 1 and 0 <= r.mem_load <= 1


def test_live_probe_in_range():
    r = report_resources(LiveProbe(), "c")
    assert 0 <= r.cpu_load <= 1 and 0 <= r.mem_load <= 1 and r.bandwidth > 0


def _scripted(script):
    calls = []

    def send(msg):
        calls.append(msg)
        if script and script.pop(0):
            raise TransportError("down")

    return send, calls


def test_retry_succeeds_after_two_failures():
    send, calls = _scripted([True, True, False])
    clock = SimClock()
    ack = upload_with_retry(send, UploadUpdate("t", "c", 4), 3, clock)
    assert ack.attempts == 3 and len(calls) == 3
    assert clock.now == pytest.approx(0.5 + 1.0)


def test_retry_limit_zero():
    send, _ = _scripted([True])
    with pytest.raises(ExhaustedRetries) as err:
        upload_with_retry(send, UploadUpdate("t", "c", 4), 0, SimClock())
    assert err.value.attempts == 1


@given(st.lists(st.booleans(), max_size=12), st.integers(0, 6))
def test_retry_attempts_bounded(script, limit):
    send, calls = _scripted(list(script))
    try:
        ack = upload_with_retry(send, UploadUpdate("t", "c", 1), limit, SimClock())
        assert ack.attempts == len(calls)
    except ExhaustedRetries:
        assert len(calls) == limit + 1
    assert len(calls) <= limit + 1


def test_client_message_flow(shard):
    cfg = TaskConfig(task_id="t", arch=ARCH, rounds=2, local_epochs=1, compression_n=1)
    c = FLClient("c0", shard, TraceProbe([(0.2, 0.1, 5.0)]), "t")
    assert c.join_message().n_samples == len(shard.samples)
    (rep,) = c.handle(TaskConfigMsg("t", "server", cfg.to_dict()))
    assert isinstance(rep, ResourceReport) and rep.report.bandwidth == 5.0
    assert c.handle(DispatchModel("t", "server", 1, init_model(0, ARCH))) == []
    (up,) = c.handle(StartLocalTraining("t", "server", 1))
    assert isinstance(up, UploadUpdate) and len(up.update.included) == 1
    assert up.update.final_loss == up.metrics["final_loss"]
    (rep2,) = c.handle(AggregationDone("t", "server", 1, 1))
    assert rep2.report.last_round_quality == -up.metrics["final_loss"]
    assert c.handle(AggregationDone("t", "server", 2, 2)) == [] and c.done


def test_client_rejects_out_of_order_and_foreign_task(shard):
    c = FLClient("c0", shard, task_id="t")
    (err,) = c.handle(DispatchModel("t", "server", 1, init_model(0, ARCH)))
    assert isinstance(err, Error) and err.code == 409
    (err,) = c.handle(StartLocalTraining("other", "server", 1))
    assert isinstance(err, Error)
    c.handle(Error("t", "server", 500, "bye"))
    assert c.done
