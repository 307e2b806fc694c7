"""FL_SERVER: federated averaging, partial-update merging and the task loop."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .annotation import ClientShard, encode_grid_target
from .compression import CompressedUpdate
from .config import TaskConfig
from .detection import ModelParams, batch_loss, check_congruent, init_model, params_to_bytes
from .protocol import (
    AggregationDone,
    AggregationResult,
    ClientDropped,
    DeadlineExpired,
    DispatchComplete,
    DispatchModel,
    Error,
    IllegalTransition,
    JoinTask,
    Phase,
    ResourceReport,
    RoundState,
    StartLocalTraining,
    TaskConfigMsg,
    UploadReceived,
    UploadUpdate,
    advance_round,
)
from .scheduler import (
    QuorumNotMet,
    ScheduleDecision,
    normalize_quality,
    schedule_round,
    score_clients,
    simulate_upload_time,
)
from .store import ModelStore
from .transport import Disconnected, Incoming

log = logging.getLogger(__name__)

SERVER_ID = "server"


def _mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    total = np.zeros_like(arrays[0], dtype=np.float64)
    for a in arrays:
        total = total + a
    return total / len(arrays)


def federated_average(updates: Sequence[ModelParams]) -> ModelParams:
    """Unweighted elementwise mean of every layer over ``updates``."""
    if not updates:
        raise ValueError("no updates to average")
    for u in updates[1:]:
        check_congruent(updates[0], u)
    layers = []
    for j in range(len(updates[0])):
        layers.append(
            (_mean([u.layers[j][0] for u in updates]), _mean([u.layers[j][1] for u in updates]))
        )
    return ModelParams(layers, updates[0].arch)


def merge_partial_updates(global_prev: ModelParams, updates: Sequence[CompressedUpdate]) -> ModelParams:
    """Per layer: mean over the clients that uploaded it, else keep ``global_prev``'s."""
    L = len(global_prev)
    contributions: list[list[tuple[np.ndarray, np.ndarray]]] = [[] for _ in range(L)]
    for u in updates:
        for j, (W, b) in u.included.items():
            if not 0 <= j < L:
                raise IndexError(f"{u.client_id}: layer index {j} out of range [0, {L})")
            W0, b0 = global_prev.layers[j]
            if W.shape != W0.shape or b.shape != b0.shape:
                raise ValueError(f"{u.client_id}: layer {j} shape {W.shape} != {W0.shape}")
            contributions[j].append((W, b))
    layers = []
    for j, got in enumerate(contributions):
        if got:
            layers.append((_mean([W for W, _ in got]), _mean([b for _, b in got])))
        else:
            W0, b0 = global_prev.layers[j]
            layers.append((W0.copy(), b0.copy()))
    return ModelParams(layers, global_prev.arch)


def params_digest(params: ModelParams) -> str:
    return hashlib.sha256(params_to_bytes(params)).hexdigest()


@dataclass
class RoundMetrics:
    round: int
    global_loss: float
    client_losses: dict[str, float]
    selected: list[str]
    participants: list[str]
    stragglers: list[str]
    uplink_bytes: int
    simulated_upload_s: float
    version: int | None
    digest: str
    failed: bool = False


@dataclass
class TaskReport:
    task_id: str
    status: str
    rounds: list[RoundMetrics] = field(default_factory=list)
    initial_loss: float | None = None
    final_version: int | None = None
    final_digest: str | None = None
    error: str | None = None
    schedule_log: list[str] = field(default_factory=list)
    final_model: ModelParams | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "completed"

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("final_model", "rounds")}
        d["rounds"] = [asdict(m) for m in self.rounds]
        return d


def score_schedule(round: int, reports: Sequence, config: TaskConfig) -> ScheduleDecision:
    """Default policy: normalised quality minus load, top ``clients_per_round``."""
    quality = normalize_quality({rep.client_id: rep.last_round_quality for rep in reports})
    scored = [replace(rep, last_round_quality=quality[rep.client_id]) for rep in reports]
    scores = score_clients(scored, config.alpha, config.beta)
    return schedule_round(scores, config.clients_per_round or max(1, len(scores)), config.quorum, round=round)


class TaskFailed(Exception):
    pass


class TaskRunner:
    """One task's control loop.  Owns the RoundState and all server-side state."""

    def __init__(
        self,
        config: TaskConfig,
        transport,
        validation: ClientShard | None = None,
        store: ModelStore | None = None,
        scheduler=None,
        min_clients: int | None = None,
        join_timeout: float = 30.0,
    ):
        self.config = config
        self.transport = transport
        self.scheduler = scheduler or score_schedule
        self.store = store
        self.min_clients = max(config.quorum, min_clients or 0)
        self.join_timeout = join_timeout
        self.joined: set[str] = set()
        self.reports: dict[str, object] = {}
        self.fresh: set[str] = set()
        self.validation = (
            [(s.image, encode_grid_target(s.boxes, config.arch)) for s in validation.samples]
            if validation is not None and validation.samples
            else []
        )
        self.report = TaskReport(config.task_id, "running")

    def _msg(self, cls, **kw):
        return cls(task_id=self.config.task_id, sender_id=SERVER_ID, **kw)

    def _on_control(self, ev) -> None:
        """Handle joins, reports and disconnects outside of upload collection."""
        if isinstance(ev, Disconnected):
            self.joined.discard(ev.client_id)
            self.fresh.discard(ev.client_id)
            return
        msg = ev.msg
        if msg.task_id != self.config.task_id:
            self.transport.send(ev.client_id, self._msg(Error, code=404, text=f"unknown task {msg.task_id!r}"))
            return
        if isinstance(msg, JoinTask):
            self.joined.add(ev.client_id)
            self.fresh.discard(ev.client_id)
            self.transport.send(ev.client_id, self._msg(TaskConfigMsg, config=self.config.to_dict()))
        elif isinstance(msg, ResourceReport):
            self.reports[ev.client_id] = msg.report
            self.fresh.add(ev.client_id)
        elif isinstance(msg, Error):
            log.error("%s reported error %d: %s", ev.client_id, msg.code, msg.text)
        else:
            log.warning("ignoring %s from %s", type(msg).__name__, ev.client_id)

    def _await(self, predicate, timeout: float) -> bool:
        until = self.transport.now() + timeout
        while not predicate():
            ev = self.transport.recv(until)
            if ev is None:
                if self.transport.now() >= until:
                    return predicate()
                continue
            self._on_control(ev)
        return True

    def _evaluate(self, params: ModelParams) -> float:
        return batch_loss(params, self.validation, self.config.arch) if self.validation else float("nan")

    def _broadcast(self, msg) -> None:
        for cid in sorted(self.joined):
            self.transport.send(cid, msg)

    def shutdown_clients(self, reason: str) -> None:
        self._broadcast(self._msg(Error, code=503, text=reason))

    def run(self) -> TaskReport:
        cfg = self.config
        model = init_model(cfg.seed, cfg.arch)
        self.report.initial_loss = self._evaluate(model)
        try:
            ok = self._await(
                lambda: len(self.joined) >= self.min_clients and self.fresh >= self.joined,
                self.join_timeout,
            )
            if not ok:
                raise TaskFailed(f"only {len(self.joined)} of {self.min_clients} clients joined")
            for r in range(1, cfg.rounds + 1):
                model = self._run_round(r, model)
            self._broadcast(self._msg(AggregationDone, round=cfg.rounds, model_version=self.report.final_version or 0))
            self.report.status = "completed"
        except (TaskFailed, QuorumNotMet) as e:
            self.report.status = "failed"
            self.report.error = str(e)
            self._broadcast(self._msg(Error, code=500, text=f"task failed: {e}"))
        return self.report

    def _run_round(self, r: int, model: ModelParams) -> ModelParams:
        cfg = self.config
        self._await(lambda: self.fresh >= self.joined, cfg.deadline_s)
        available = sorted(self.joined & set(self.reports))
        decision = self.scheduler(r, [self.reports[c] for c in available], cfg)
        if len(decision.selected) < cfg.quorum:
            raise QuorumNotMet(f"round {r}: {len(decision.selected)} selected, quorum {cfg.quorum}")
        self.report.schedule_log.append(decision.to_json())
        self.fresh.clear()

        state = RoundState(
            round=r,
            expected_clients=frozenset(decision.selected),
            deadline=self.transport.now() + cfg.deadline_s,
            quorum=cfg.quorum,
        )
        dispatch = self._msg(DispatchModel, round=r, params=model)
        for cid in decision.selected:
            self.transport.send(cid, dispatch)
            self.transport.send(cid, self._msg(StartLocalTraining, round=r))
        state = advance_round(state, DispatchComplete())

        upload_bytes: dict[str, int] = {}
        client_losses: dict[str, float] = {}
        while state.phase < Phase.AGGREGATING:
            ev = self.transport.recv(state.deadline)
            if ev is None:
                if self.transport.now() >= state.deadline:
                    state = advance_round(state, DeadlineExpired())
                continue
            if isinstance(ev, Incoming) and isinstance(ev.msg, UploadUpdate):
                upd = ev.msg.update
                try:
                    if upd.client_id != ev.client_id or ev.msg.round != r:
                        raise IllegalTransition("upload identity/round mismatch")
                    merge_partial_updates(model, [upd])
                    state = advance_round(state, UploadReceived(ev.client_id, upd))
                except (IllegalTransition, ValueError, IndexError) as e:
                    log.warning("rejected upload from %s: %s", ev.client_id, e)
                    continue
                upload_bytes[ev.client_id] = ev.nbytes
                client_losses[ev.client_id] = float(upd.final_loss)
                continue
            if isinstance(ev, Disconnected) and ev.client_id in state.expected_clients:
                state = advance_round(state, ClientDropped(ev.client_id))
            self._on_control(ev)

        if state.failed:
            self.report.rounds.append(
                RoundMetrics(r, float("nan"), client_losses, decision.selected, [], sorted(state.stragglers),
                             sum(upload_bytes.values()), 0.0, None, "", failed=True)
            )
            raise TaskFailed(
                f"round {r}: {len(state.received_updates)} updates, quorum {cfg.quorum}"
            )

        participants = sorted(state.received_updates)
        model = merge_partial_updates(model, [state.received_updates[c] for c in participants])
        version = None
        if self.store is not None:
            rec = self.store.store_model(cfg.task_id, r, model)
            version = rec.version
        state = advance_round(state, AggregationResult(version))
        digest = params_digest(model)
        upload_s = max(
            (
                simulate_upload_time(upload_bytes[c], self.reports[c].bandwidth, cfg.upload_overhead_s)
                for c in participants
            ),
            default=0.0,
        )
        self.report.rounds.append(
            RoundMetrics(
                round=r,
                global_loss=self._evaluate(model),
                client_losses={c: client_losses[c] for c in participants},
                selected=list(decision.selected),
                participants=participants,
                stragglers=sorted(state.stragglers),
                uplink_bytes=sum(upload_bytes.values()),
                simulated_upload_s=upload_s,
                version=version,
                digest=digest,
            )
        )
        self.report.final_version = version
        self.report.final_digest = digest
        self.report.final_model = model
        if r < cfg.rounds:
            self._broadcast(self._msg(AggregationDone, round=r, model_version=version or 0))
        return model


def run_task(
    config: TaskConfig,
    transport,
    scheduler=None,
    validation: ClientShard | None = None,
    store: ModelStore | None = None,
    **kw,
) -> TaskReport:
    """Run every round of ``config`` over ``transport``; never raises on task failure."""
    return TaskRunner(config, transport, validation, store, scheduler, **kw).run()


class TaskManager:
    """Runs several tasks concurrently, one control loop per task."""

    def __init__(self, store: ModelStore | None = None, max_tasks: int = 4):
        self.store = store
        self._pool = ThreadPoolExecutor(max_workers=max_tasks)
        self.tasks: dict[str, Future] = {}

    def submit(self, config: TaskConfig, transport, validation: ClientShard | None = None, **kw) -> Future:
        if config.task_id in self.tasks and not self.tasks[config.task_id].done():
            raise ValueError(f"task {config.task_id!r} is already running")
        fut = self._pool.submit(run_task, config, transport, None, validation, self.store, **kw)
        self.tasks[config.task_id] = fut
        return fut

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)
