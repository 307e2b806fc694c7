"""Task and client configuration, loaded from / saved to JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .compression import ALL
from .detection import ArchConfig


@dataclass(frozen=True)
class TaskConfig:
    task_id: str = "task"
    arch: ArchConfig = field(default_factory=ArchConfig)
    rounds: int = 20
    local_epochs: int = 2
    lr: float = 0.5
    clients_per_round: int | None = None  # None = every joined client
    compression_n: int | str = ALL
    deadline_s: float = 60.0
    quorum: int = 1
    server_url: str = "tcp://127.0.0.1:7878"
    reconnect_limit: int = 3
    seed: int = 0
    batch_size: int | None = None  # None = full batch
    alpha: float = 1.0
    beta: float = 1.0
    upload_overhead_s: float = 0.0

    def __post_init__(self):
        if isinstance(self.arch, dict):
            object.__setattr__(self, "arch", ArchConfig.from_dict(self.arch))
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.quorum < 1:
            raise ValueError("quorum must be >= 1")
        if self.clients_per_round is not None and self.clients_per_round < 1:
            raise ValueError("clients_per_round must be >= 1")
        n_layers = len(self.arch.hidden_sizes) + 1
        if self.compression_n != ALL and not (
            isinstance(self.compression_n, int) and 1 <= self.compression_n <= n_layers
        ):
            raise ValueError(f"compression_n must be ALL or in [1, {n_layers}], got {self.compression_n!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.reconnect_limit < 0:
            raise ValueError("reconnect_limit must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown task config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: Path | str) -> "TaskConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def server_address(self) -> tuple[str, int]:
        return parse_address(self.server_url)


@dataclass(frozen=True)
class ClientConfig:
    client_id: str
    server_addr: str = "127.0.0.1:7878"
    shard_dir: str = ""
    reconnect_limit: int = 3
    trace: list | None = None

    @classmethod
    def load(cls, path: Path | str) -> "ClientConfig":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown client config fields: {sorted(unknown)}")
        return cls(**d)

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")


def parse_address(addr: str) -> tuple[str, int]:
    if "://" in addr:
        addr = addr.split("://", 1)[1]
    host, _, port = addr.rstrip("/").rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}, expected host:port")
    return host, int(port)
