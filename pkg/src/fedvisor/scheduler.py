"""Task Scheduler: per-round client selection and the upload-time model."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from .explorer import ClientResourceReport

MB = 2**20


class QuorumNotMet(Exception):
    pass


@dataclass
class ScheduleDecision:
    round: int
    selected: list[str]
    scores: dict[str, float]
    skipped: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def score_clients(
    reports: Sequence[ClientResourceReport], alpha: float = 1.0, beta: float = 1.0
) -> dict[str, float]:
    """``alpha * quality - beta * max(cpu_load, mem_load)`` per client."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    return {r.client_id: alpha * r.last_round_quality - beta * r.max_load for r in reports}


def schedule_round(
    scores: Mapping[str, float], cap: int, min_quorum: int = 1, round: int = 0
) -> ScheduleDecision:
    """Pick the ``cap`` best-scoring clients; equal scores favour the lower id."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if len(scores) < min_quorum:
        raise QuorumNotMet(f"{len(scores)} clients available, quorum is {min_quorum}")
    ranked = sorted(scores, key=lambda cid: (-scores[cid], cid))
    selected = sorted(ranked[:cap])
    skipped = {cid: f"rank {k + 1} beyond cap {cap}" for k, cid in enumerate(ranked) if k >= cap}
    return ScheduleDecision(round, selected, dict(scores), skipped)


def normalize_quality(raw: Mapping[str, float]) -> dict[str, float]:
    """Min-max scale raw quality signals (negated local losses) into [0, 1].

    With no spread every client gets 1.0.
    """
    if not raw:
        return {}
    lo, hi = min(raw.values()), max(raw.values())
    if hi - lo <= 0:
        return {cid: 1.0 for cid in raw}
    return {cid: (v - lo) / (hi - lo) for cid, v in raw.items()}


def simulate_upload_time(n_bytes: float, bandwidth_MBps: float, fixed_overhead_s: float = 0.0) -> float:
    if bandwidth_MBps <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth_MBps}")
    return n_bytes / (bandwidth_MBps * MB) + fixed_overhead_s
