import numpy as np
import pytest
from hypothesis import settings

from fedvisor.annotation import BoxAnnotation, encode_grid_target
from fedvisor.detection import ArchConfig, ModelParams

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

TINY = ArchConfig(input_side=4, hidden_sizes=(6,), S=2, B=1, C=2)


@pytest.fixture
def tiny_arch():
    return TINY


def random_params(rng: np.random.Generator, arch: ArchConfig, scale: float = 1.0) -> ModelParams:
    sizes = arch.layer_sizes
    return ModelParams(
        [(rng.normal(0, scale, (o, i)), rng.normal(0, scale, o)) for i, o in zip(sizes[:-1], sizes[1:])],
        arch,
    )


def random_boxes(rng: np.random.Generator, C: int, k: int) -> list[BoxAnnotation]:
    out = []
    for _ in range(k):
        w, h = rng.uniform(0.05, 0.6, 2)
        x = rng.uniform(w / 2, 1 - w / 2)
        y = rng.uniform(h / 2, 1 - h / 2)
        out.append(BoxAnnotation(int(rng.integers(C)), float(x), float(y), float(w), float(h)))
    return out


def random_batch(rng: np.random.Generator, arch: ArchConfig, n: int):
    side = arch.input_side
    return [
        (rng.uniform(0, 1, (side, side)), encode_grid_target(random_boxes(rng, arch.C, int(rng.integers(0, 3))), arch))
        for _ in range(n)
    ]


ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (name, bool(passed), detail)
    print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}")
