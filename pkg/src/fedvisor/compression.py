"""Layer-contribution scoring and top-n layer selection for pruned uploads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detection import ModelParams, check_congruent

ALL = "ALL"


@dataclass(eq=False)
class CompressedUpdate:
    client_id: str
    round: int
    included: dict[int, tuple[np.ndarray, np.ndarray]]
    contributions: list[float]
    sample_count: int = 0
    final_loss: float = 0.0

    @property
    def n_layers(self) -> int:
        return len(self.contributions)

    def payload_bytes(self) -> int:
        return sum(8 * (W.size + b.size) for W, b in self.included.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, CompressedUpdate):
            return False
        if (
            self.client_id != other.client_id
            or self.round != other.round
            or self.sample_count != other.sample_count
            or not _same_float(self.final_loss, other.final_loss)
            or len(self.contributions) != len(other.contributions)
            or not all(_same_float(a, b) for a, b in zip(self.contributions, other.contributions))
            or sorted(self.included) != sorted(other.included)
        ):
            return False
        return all(
            self.included[j][0].shape == other.included[j][0].shape
            and np.array_equal(self.included[j][0], other.included[j][0])
            and np.array_equal(self.included[j][1], other.included[j][1])
            for j in self.included
        )


def _same_float(a: float, b: float) -> bool:
    return a == b or (a != a and b != b)


def abs_sum(W: np.ndarray, b: np.ndarray) -> float:
    # fsum is correctly rounded, so v(j) does not depend on summation order
    return math.fsum(np.abs(np.concatenate([W.ravel(), b])).tolist())


def layer_contribution(prev: ModelParams, curr: ModelParams) -> list[float]:
    """Per-layer absolute change of the sum of absolute parameter values.

    Biases count as part of their layer.
    """
    check_congruent(prev, curr)
    return [
        abs(abs_sum(Wc, bc) - abs_sum(Wp, bp))
        for (Wp, bp), (Wc, bc) in zip(prev.layers, curr.layers)
    ]


def top_n_indices(v: list[float], n: int | str) -> list[int]:
    """Indices of the ``n`` largest scores; ties go to the lower index."""
    L = len(v)
    if n == ALL:
        return list(range(L))
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    ranked = sorted(range(L), key=lambda j: (-v[j], j))
    return sorted(ranked[: min(n, L)])


def select_top_n(
    curr: ModelParams,
    v: list[float],
    n: int | str,
    client_id: str = "",
    round: int = 0,
    sample_count: int = 0,
    final_loss: float = 0.0,
) -> CompressedUpdate:
    if len(v) != len(curr):
        raise ValueError(f"{len(v)} contributions for {len(curr)} layers")
    keep = top_n_indices(v, n)
    return CompressedUpdate(
        client_id=client_id,
        round=round,
        included={j: (curr.layers[j][0].copy(), curr.layers[j][1].copy()) for j in keep},
        contributions=[float(x) for x in v],
        sample_count=sample_count,
        final_loss=final_loss,
    )
