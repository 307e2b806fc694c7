"""Acceptance criteria 1-9.  Each test records one PASS/FAIL line, printed in the terminal summary.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""

import json
import re
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import random_batch, random_params, record_criterion
from test_cli import free_port, gen, write_config
from test_detection import central_difference
from test_protocol import CLIENTS, fuzz_decoder, upload
from fedvisor.annotation import (
    BoxAnnotation,
    PartitionMode,
    SceneSpec,
    parse_annotation_file,
    serialize_annotations,
    write_shard,
)
from fedvisor.cli import main
from fedvisor.compression import ALL
from fedvisor.config import TaskConfig
from fedvisor.detection import ArchConfig, ModelParams, loss_gradient
from fedvisor.evaluate import evaluate
from fedvisor.protocol import (
    AggregationResult,
    ClientDropped,
    DeadlineExpired,
    DispatchComplete,
    IllegalTransition,
    RoundState,
    advance_round,
)
from fedvisor.scheduler import MB, simulate_upload_time
from fedvisor.server import federated_average
from fedvisor.sim import make_dataset, simulate, train_alone
from fedvisor.store import ModelStore

SEEDS = range(5)
EXPERIMENT_ARCH = ArchConfig(input_side=12, hidden_sizes=(32, 32), S=4, B=1, C=2)
SCENE = SceneSpec(side=12, C=2, max_objects=1)


def experiment_config(seed: int, **kw) -> TaskConfig:
    base = dict(task_id=f"acc{seed}", arch=EXPERIMENT_ARCH, rounds=20, local_epochs=2, lr=0.5, batch_size=5, seed=seed)
    base.update(kw)
    return TaskConfig(**base)


# 1 ---------------------------------------------------------------------------


def test_criterion_1_gradient_fidelity():
    arch = ArchConfig(input_side=3, hidden_sizes=(4,), S=2, B=1, C=2)
    start = time.perf_counter()
    worst = 0.0
    for k in range(50):
        rng = np.random.default_rng(1000 + k)
        params = random_params(rng, arch, 0.5)
        batch = random_batch(rng, arch, int(rng.integers(1, 4)))
        a = loss_gradient(params, batch, arch).flat()
        n = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in central_difference(params, batch, arch, 1e-5)])
        rel = np.abs(a - n) / np.maximum(1e-8, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30
    record_criterion(1, "gradient fidelity", ok, f"max rel err {worst:.2e} over 50 instances in {elapsed:.1f}s")
    assert ok


# 2 ---------------------------------------------------------------------------


def _scalar_mean(models):
    out = []
    for j in range(len(models[0])):
        W0, b0 = models[0].layers[j]
        W, b = np.empty_like(W0), np.empty_like(b0)
        for idx in np.ndindex(W0.shape):
            W[idx] = sum(float(m.layers[j][0][idx]) for m in models) / len(models)
        for idx in np.ndindex(b0.shape):
            b[idx] = sum(float(m.layers[j][1][idx]) for m in models) / len(models)
        out.append((W, b))
    return out


def _max_diff(a, b):
    return max(max(np.abs(W1 - W2).max(), np.abs(b1 - b2).max()) for (W1, b1), (W2, b2) in zip(a, b))


def test_criterion_2_fedavg_oracle():
    arch = ArchConfig(input_side=4, hidden_sizes=(6, 5), S=2, B=1, C=2)
    worst_oracle = worst_perm = worst_scale = 0.0
    for n in (1, 2, 3, 5):
        for trial in range(10):
            rng = np.random.default_rng(100 * n + trial)
            models = [random_params(rng, arch) for _ in range(n)]
            avg = federated_average(models)
            worst_oracle = max(worst_oracle, _max_diff(avg.layers, _scalar_mean(models)))
            perm = federated_average([models[i] for i in rng.permutation(n)])
            worst_perm = max(worst_perm, _max_diff(perm.layers, avg.layers))
            c = float(rng.uniform(0.1, 10))
            scaled = federated_average([ModelParams([(c * W, c * b) for W, b in m.layers]) for m in models])
            worst_scale = max(worst_scale, _max_diff(scaled.layers, [(c * W, c * b) for W, b in avg.layers]))
    ok = max(worst_oracle, worst_perm, worst_scale) <= 1e-12
    record_criterion(
        2, "FedAvg oracle", ok,
        f"oracle {worst_oracle:.1e}, permutation {worst_perm:.1e}, scaling {worst_scale:.1e} (tol 1e-12)",
    )
    assert ok


# 3 ---------------------------------------------------------------------------


def test_criterion_3_compression_equivalence():
    shards, val = make_dataset(200, 4, 0, SCENE, n_validation=50)
    L = len(EXPERIMENT_ARCH.hidden_sizes) + 1
    runs = {n: simulate(experiment_config(0, rounds=10, compression_n=n), shards, val) for n in (ALL, L, 1)}
    assert all(r.ok for r in runs.values())
    same = runs[L].final_digest == runs[ALL].final_digest
    ratios = [c.uplink_bytes / u.uplink_bytes for c, u in zip(runs[1].rounds, runs[ALL].rounds)]
    ok = same and L >= 3 and max(ratios) < 0.6
    record_criterion(
        3, "compression equivalence", ok,
        f"n=L digest match {same}; n=1 uplink ratio max {max(ratios):.3f} mean {np.mean(ratios):.3f} ({L} layers)",
    )
    assert ok


# 4 ---------------------------------------------------------------------------


def test_criterion_4_end_to_end_convergence(tmp_path, capsys):
    start = time.perf_counter()
    passes, details = 0, []
    for seed in SEEDS:
        shards, val = make_dataset(200, 4, seed, SCENE, n_validation=100)
        cfg = experiment_config(seed)
        store = ModelStore(tmp_path / "store")
        report = simulate(cfg, shards, val, store)
        cfg.save(tmp_path / f"cfg{seed}.json")
        write_shard(tmp_path / f"val{seed}", val)
        capsys.readouterr()
        assert main(["eval", "--task-id", cfg.task_id, "--shard", str(tmp_path / f"val{seed}"),
                     "--store", str(tmp_path / "store"), "--config", str(tmp_path / f"cfg{seed}.json")]) == 0
        mean_iou = float(re.search(r"mean_iou=([0-9.]+)", capsys.readouterr().out).group(1))
        ratio = report.rounds[-1].global_loss / report.rounds[0].global_loss
        good = report.ok and ratio < 0.5 and mean_iou >= 0.5
        passes += good
        details.append(f"s{seed}: ratio {ratio:.3f} iou {mean_iou:.3f}")
    elapsed = time.perf_counter() - start
    ok = passes >= 4 and elapsed < 300
    record_criterion(4, "end-to-end convergence", ok, f"{passes}/5 seeds pass in {elapsed:.0f}s; " + ", ".join(details))
    assert ok


# 5 ---------------------------------------------------------------------------


def test_criterion_5_federation_benefit():
    passes, details = 0, []
    for seed in SEEDS:
        shards, val = make_dataset(200, 4, seed, SCENE, PartitionMode("skew", 1.0, drop_class=True), n_validation=100)
        cfg = experiment_config(seed)
        fed = evaluate(simulate(cfg, shards, val).final_model, val).class_accuracy
        alone = max(evaluate(train_alone(cfg, s), val).class_accuracy for s in shards)
        passes += fed > alone
        details.append(f"s{seed}: fed {fed:.2f} vs best alone {alone:.2f}")
    ok = passes >= 4
    record_criterion(5, "federation benefit", ok, f"{passes}/5 seeds pass; " + ", ".join(details))
    assert ok


# 6 ---------------------------------------------------------------------------


def test_criterion_6_upload_time_anchor():
    anchor = simulate_upload_time(230 * MB, 15, 5.0)
    rng = np.random.default_rng(6)
    monotone = True
    for _ in range(10_000):
        n, bw, oh = rng.uniform(0, 1e9), rng.uniform(0.1, 100), rng.uniform(0, 10)
        t = simulate_upload_time(n, bw, oh)
        monotone &= simulate_upload_time(n + rng.uniform(1, 1e6), bw, oh) > t
        monotone &= simulate_upload_time(n + 1, bw * rng.uniform(1.01, 3), oh) < simulate_upload_time(n + 1, bw, oh)
    ok = anchor >= 20 and bool(monotone)
    record_criterion(6, "upload-time anchor", ok, f"230 MB @ 15 MB/s + 5 s = {anchor:.2f}s; sweep monotone {bool(monotone)}")
    assert ok


# 7 ---------------------------------------------------------------------------


def _random_events(rng, n):
    out = []
    for _ in range(n):
        k = rng.integers(5)
        if k == 0:
            out.append(DispatchComplete())
        elif k == 1:
            out.append(DeadlineExpired())
        elif k == 2:
            out.append(upload(str(rng.choice(CLIENTS + ["zz"])), int(rng.choice([1, 1, 1, 2]))))
        elif k == 3:
            out.append(ClientDropped(str(rng.choice(CLIENTS + ["zz"]))))
        else:
            out.append(AggregationResult(int(rng.integers(1, 9))))
    return out


def test_criterion_7_protocol_robustness():
    decoded, rejected = fuzz_decoder(100_000, seed=7)
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(5_000):
        n_expected, quorum = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        state = RoundState(1, frozenset(CLIENTS[:n_expected]), 10.0, quorum=quorum)
        for ev in _random_events(rng, int(rng.integers(1, 30))):
            before = state
            try:
                state = advance_round(state, ev)
            except IllegalTransition:
                violations += state is not before
                continue
            violations += state.phase < before.phase
            violations += not set(state.received_updates) <= state.expected_clients
    ok = decoded + rejected == 100_000 and violations == 0
    record_criterion(
        7, "protocol robustness", ok,
        f"10^5 fuzz frames: 0 crashes ({rejected} rejected, {decoded} decoded); 5000 event sequences, {violations} violations",
    )
    assert ok


# 8 ---------------------------------------------------------------------------


def test_criterion_8_annotation_roundtrip():
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(1000):
        boxes = []
        for _ in range(int(rng.integers(0, 12))):
            x, y = (round(int(v) / 1e6, 6) for v in rng.integers(0, 10**6 + 1, 2))
            w, h = (round(int(v) / 1e6, 6) for v in rng.integers(1, 10**6 + 1, 2))
            boxes.append(BoxAnnotation(int(rng.integers(0, 80)), x, y, w, h))
        mismatches += parse_annotation_file(serialize_annotations(boxes)) != boxes
    literal = parse_annotation_file("0 0.5 0.5 0.25 0.25") == [BoxAnnotation(0, 0.5, 0.5, 0.25, 0.25)]
    ok = mismatches == 0 and literal
    record_criterion(8, "annotation round-trip", ok, f"{mismatches}/1000 mismatches; literal example parses {literal}")
    assert ok


# 9 ---------------------------------------------------------------------------


def test_criterion_9_sim_network_equivalence(tmp_path):
    start = time.perf_counter()
    port = free_port()
    gen(tmp_path / "d", 2, 40, 11, "--server-addr", f"127.0.0.1:{port}")
    cfg = write_config(tmp_path / "task.json", rounds=3, server_url=f"tcp://127.0.0.1:{port}")
    assert main(["train-sim", "--config", str(cfg), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "sim")]) == 0
    sim_digest = json.loads((tmp_path / "sim" / "metrics.json").read_text())["final_digest"]

    run = lambda *a: subprocess.Popen([sys.executable, "-m", "fedvisor", *a], stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    server = run("serve", "--config", str(cfg), "--out", str(tmp_path / "net"), "--wait-clients", "2",
                 "--validation", str(tmp_path / "d" / "validation"))
    clients = [run("client", "--config", str(tmp_path / "d" / "clients" / f"client_{k}.json"), "--task-id", "cli") for k in range(2)]
    codes = []
    for p in [server, *clients]:
        try:
            p.communicate(timeout=60)
        except subprocess.TimeoutExpired:
            p.kill()
            p.communicate()
        codes.append(p.returncode)
    net_doc = json.loads((tmp_path / "net" / "metrics.json").read_text()) if (tmp_path / "net" / "metrics.json").exists() else {}
    net_digest = net_doc.get("final_digest")
    elapsed = time.perf_counter() - start
    sim_csv = (tmp_path / "sim" / "metrics.csv").read_text().splitlines()
    net_csv = (tmp_path / "net" / "metrics.csv").read_text().splitlines() if net_doc else []
    # digests per round must agree too; uplink byte counts are transport independent as well
    per_round = [r.split(",")[-1] for r in sim_csv[1:]] == [r.split(",")[-1] for r in net_csv[1:]]
    ok = codes == [0, 0, 0] and sim_digest == net_digest and per_round and elapsed < 60
    record_criterion(
        9, "sim/network equivalence", ok,
        f"sim {sim_digest[:12]} vs net {str(net_digest)[:12]}, per-round digests match {per_round}, exit codes {codes}, {elapsed:.1f}s",
    )
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
