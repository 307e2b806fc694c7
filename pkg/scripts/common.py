"""Shared experiment settings (the configuration used by the acceptance suite)."""

import csv
from pathlib import Path

from fedvisor.annotation import SceneSpec
from fedvisor.config import TaskConfig
from fedvisor.detection import ArchConfig

ARCH = ArchConfig(input_side=12, hidden_sizes=(32, 32), S=4, B=1, C=2)
SCENE = SceneSpec(side=12, C=2, max_objects=1)
N_SAMPLES, N_CLIENTS, N_VALIDATION = 200, 4, 100


def config(seed: int, **kw) -> TaskConfig:
    base = dict(task_id=f"exp{seed}", arch=ARCH, rounds=20, local_epochs=2, lr=0.5, batch_size=5, seed=seed)
    base.update(kw)
    return TaskConfig(**base)


def write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {path}")
