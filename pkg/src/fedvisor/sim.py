"""In-process federated runs on a simulated clock."""

from __future__ import annotations

from typing import Mapping, Sequence

from .annotation import ClientShard, PartitionMode, SceneSpec, generate_scene, partition_dataset
from .client import FLClient, local_train
from .config import TaskConfig
from .detection import init_model
from .explorer import DEFAULT_TRACE, TraceProbe
from .server import TaskReport, run_task
from .store import ModelStore
from .transport import InProcessTransport


def make_dataset(
    n_samples: int,
    n_clients: int,
    seed: int,
    spec: SceneSpec = SceneSpec(),
    mode: PartitionMode = PartitionMode(),
    n_validation: int | None = None,
) -> tuple[list[ClientShard], ClientShard]:
    """Synthetic client shards plus a disjoint server validation shard.

    Scene seeds are derived from ``seed`` so datasets for different seeds
    never share images.
    """
    n_val = n_validation if n_validation is not None else max(1, n_samples // 5)
    base = seed * 1_000_003
    train = [generate_scene(base + k, spec, f"s{seed}_{k:05d}") for k in range(n_samples)]
    val = [generate_scene(base + n_samples + k, spec, f"v{seed}_{k:05d}") for k in range(n_val)]
    shards = partition_dataset(train, n_clients, mode, seed=seed, C=spec.C)
    return shards, ClientShard("validation", val, shards[0].class_set)


def simulate(
    config: TaskConfig,
    shards: Sequence[ClientShard],
    validation: ClientShard | None = None,
    store: ModelStore | None = None,
    traces: Mapping[str, Sequence] | None = None,
    scheduler=None,
    **transport_kw,
) -> TaskReport:
    traces = traces or {}
    clients = [
        FLClient(s.client_id, s, TraceProbe(traces.get(s.client_id, DEFAULT_TRACE)), config.task_id)
        for s in shards
    ]
    transport = InProcessTransport(
        clients, overhead_s=config.upload_overhead_s, reconnect_limit=config.reconnect_limit, **transport_kw
    )
    try:
        return run_task(config, transport, scheduler, validation, store, min_clients=len(clients))
    finally:
        transport.close()


def train_alone(config: TaskConfig, shard: ClientShard):
    """One client trained on its own shard for the same number of local epochs as a federated run."""
    start = init_model(config.seed, config.arch)
    params, _ = local_train(
        start, shard, config.rounds * config.local_epochs, config.lr, config.arch, config.batch_size
    )
    return params
