"""FL_CLIENT: local training, compressed uploads and retrying delivery."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

from .annotation import ClientShard, encode_grid_target
from .compression import layer_contribution, select_top_n
from .config import TaskConfig
from .detection import ArchConfig, ModelParams, batch_loss, loss_gradient, sgd_step
from .explorer import TraceProbe, report_resources, DEFAULT_TRACE
from .protocol import (
    AggregationDone,
    DispatchModel,
    Error,
    JoinTask,
    Message,
    ResourceReport,
    StartLocalTraining,
    TaskConfigMsg,
    UploadUpdate,
)

log = logging.getLogger(__name__)


class TransportError(Exception):
    pass


class ExhaustedRetries(Exception):
    def __init__(self, attempts: int, last_error: BaseException | None):
        super().__init__(f"upload failed after {attempts} attempts: {last_error!r}")
        self.attempts = attempts
        self.last_error = last_error


def local_train(
    start: ModelParams,
    shard: ClientShard,
    epochs: int,
    lr: float,
    arch: ArchConfig,
    batch_size: int | None = None,
) -> tuple[ModelParams, dict]:
    """Plain mini-batch gradient descent over the shard in stored order."""
    if not shard.samples:
        raise ValueError(f"shard {shard.client_id} is empty")
    data = [(s.image, encode_grid_target(s.boxes, arch)) for s in shard.samples]
    bs = batch_size or len(data)
    params = start.copy() if start.arch is not None else ModelParams(start.copy().layers, arch)
    initial = batch_loss(params, data, arch)
    steps = 0
    for _ in range(epochs):
        for k in range(0, len(data), bs):
            params = sgd_step(params, loss_gradient(params, data[k : k + bs], arch), lr)
            steps += 1
    final = batch_loss(params, data, arch) if steps else initial
    return params, {"initial_loss": initial, "final_loss": final, "steps": steps, "samples": len(data)}


@dataclass
class UploadAck:
    round: int
    attempts: int
    received: bool = True


class SimClock:
    def __init__(self, now: float = 0.0):
        self.now = now

    def sleep(self, seconds: float) -> None:
        self.now += seconds


class RealClock:
    @property
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


def upload_with_retry(
    send: Callable[[UploadUpdate], object],
    update: UploadUpdate,
    reconnect_limit: int,
    clock=None,
    base_backoff: float = 0.5,
) -> UploadAck:
    """Call ``send`` up to ``1 + reconnect_limit`` times, doubling the wait between tries."""
    if reconnect_limit < 0:
        raise ValueError("reconnect_limit must be >= 0")
    clock = clock or SimClock()
    last: BaseException | None = None
    delay = base_backoff
    for attempt in range(1, reconnect_limit + 2):
        try:
            send(update)
            return UploadAck(getattr(update, "round", -1), attempt)
        except (TransportError, OSError) as e:
            last = e
            log.warning("send attempt %d of %s failed: %s", attempt, type(update).__name__, e)
            if attempt <= reconnect_limit:
                clock.sleep(delay)
                delay *= 2
    raise ExhaustedRetries(reconnect_limit + 1, last)


class FLClient:
    """Protocol-level client state machine shared by simulated and networked runs.

    ``handle`` maps one incoming server message to the reply messages.
    """

    def __init__(
        self,
        client_id: str,
        shard: ClientShard | Callable[[], ClientShard],
        probe=None,
        task_id: str = "task",
    ):
        self.client_id = client_id
        self._shard_source = shard
        self.probe = probe or TraceProbe(DEFAULT_TRACE)
        self.task_id = task_id
        self.config: TaskConfig | None = None
        self.global_model: ModelParams | None = None
        self.last_local: ModelParams | None = None
        self.last_final_loss: float | None = None
        self.last_report = None
        self.done = False

    @property
    def shard(self) -> ClientShard:
        src = self._shard_source
        return src() if callable(src) else src

    def _msg(self, cls, **kw) -> Message:
        return cls(task_id=self.task_id, sender_id=self.client_id, **kw)

    def join_message(self) -> JoinTask:
        return self._msg(JoinTask, n_samples=len(self.shard.samples))

    def resource_report(self) -> ResourceReport:
        quality = -self.last_final_loss if self.last_final_loss is not None else 0.0
        self.last_report = report_resources(self.probe, self.client_id, quality)
        return self._msg(ResourceReport, report=self.last_report)

    def handle(self, msg: Message) -> list[Message]:
        if msg.task_id != self.task_id:
            return [self._msg(Error, code=400, text=f"wrong task {msg.task_id!r}")]
        if isinstance(msg, TaskConfigMsg):
            self.config = TaskConfig.from_dict(msg.config)
            return [self.resource_report()]
        if isinstance(msg, DispatchModel):
            if self.config is None:
                return [self._msg(Error, code=409, text="model dispatched before task config")]
            self.global_model = ModelParams(msg.params.layers, self.config.arch)
            return []
        if isinstance(msg, StartLocalTraining):
            return [self.train_round(msg.round)]
        if isinstance(msg, AggregationDone):
            if self.config is not None and msg.round >= self.config.rounds:
                self.done = True
                return []
            return [self.resource_report()]
        if isinstance(msg, Error):
            log.error("server error %d: %s", msg.code, msg.text)
            self.done = True
            return []
        return [self._msg(Error, code=400, text=f"unexpected {type(msg).__name__}")]

    def train_round(self, round: int) -> UploadUpdate:
        cfg = self.config
        if cfg is None or self.global_model is None:
            raise RuntimeError("training requested before config and model arrived")
        start = self.global_model
        trained, metrics = local_train(start, self.shard, cfg.local_epochs, cfg.lr, cfg.arch, cfg.batch_size)
        prev = self.last_local if self.last_local is not None else start
        v = layer_contribution(prev, trained)
        update = select_top_n(
            trained,
            v,
            cfg.compression_n,
            client_id=self.client_id,
            round=round,
            sample_count=metrics["samples"],
            final_loss=metrics["final_loss"],
        )
        self.last_local = trained
        self.last_final_loss = metrics["final_loss"]
        return self._msg(UploadUpdate, round=round, update=update, metrics=metrics)
