"""Client-side resource monitoring (the Explorer role)."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import psutil


@dataclass(frozen=True)
class ClientResourceReport:
    client_id: str
    cpu_load: float
    mem_load: float
    bandwidth: float  # MB/s
    last_round_quality: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.cpu_load <= 1.0 and 0.0 <= self.mem_load <= 1.0):
            raise ValueError(f"loads must lie in [0, 1], got {self.cpu_load}, {self.mem_load}")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")

    @property
    def max_load(self) -> float:
        return max(self.cpu_load, self.mem_load)


def _clamp(v: float) -> float:
    return min(1.0, max(0.0, float(v)))


class TraceProbe:
    """Replays scripted ``(cpu, mem, bandwidth_MBps)`` entries, cycling at the end."""

    def __init__(self, trace: Sequence[Sequence[float]]):
        if not trace:
            raise ValueError("empty resource trace")
        self.trace = [tuple(float(x) for x in t) for t in trace]
        self._pos = 0

    def sample(self) -> tuple[float, float, float]:
        entry = self.trace[self._pos % len(self.trace)]
        self._pos += 1
        return entry


class LiveProbe:
    """Samples this process's CPU share and the host's memory pressure."""

    def __init__(self, bandwidth: float = 10.0):
        self.bandwidth = bandwidth
        self._proc = psutil.Process(os.getpid())
        self._proc.cpu_percent(None)

    def sample(self) -> tuple[float, float, float]:
        cpu = self._proc.cpu_percent(None) / (100.0 * (psutil.cpu_count() or 1))
        mem = psutil.virtual_memory().percent / 100.0
        return cpu, mem, self.bandwidth


DEFAULT_TRACE = ((0.0, 0.0, 10.0),)


def report_resources(probe, client_id: str, last_round_quality: float = 0.0) -> ClientResourceReport:
    cpu, mem, bandwidth = probe.sample()
    return ClientResourceReport(
        client_id=client_id,
        cpu_load=_clamp(cpu),
        mem_load=_clamp(mem),
        bandwidth=bandwidth if bandwidth > 0 else 1e-6,
        last_round_quality=float(last_round_quality),
    )
