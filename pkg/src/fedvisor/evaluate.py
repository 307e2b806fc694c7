"""Decode grid predictions into boxes and score them against ground truth."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotation import ClientShard, cell_of, decode_box
from .detection import ArchConfig, ModelParams, forward, iou

EVAL_COLUMNS = ("sample_id", "n_true", "n_pred", "mean_iou", "class_correct", "pred_boxes")


@dataclass
class PredictedBox:
    label: int
    x: float
    y: float
    w: float
    h: float
    confidence: float

    @property
    def box(self):
        return (self.x, self.y, self.w, self.h)


@dataclass
class SampleResult:
    sample_id: str
    n_true: int
    predictions: list[PredictedBox]
    ious: list[float]
    class_correct: list[bool]


@dataclass
class EvalReport:
    samples: list[SampleResult]

    @property
    def mean_iou(self) -> float:
        vals = [v for s in self.samples for v in s.ious]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def class_accuracy(self) -> float:
        vals = [v for s in self.samples for v in s.class_correct]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def n_predicted(self) -> int:
        return sum(len(s.predictions) for s in self.samples)

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(EVAL_COLUMNS)
            for s in self.samples:
                boxes = ";".join(
                    f"{p.label}:{p.x:.6f}:{p.y:.6f}:{p.w:.6f}:{p.h:.6f}:{p.confidence:.6f}" for p in s.predictions
                )
                w.writerow([
                    s.sample_id,
                    s.n_true,
                    len(s.predictions),
                    f"{np.mean(s.ious) if s.ious else 0.0:.6f}",
                    sum(s.class_correct),
                    boxes,
                ])


def decode_predictions(params: ModelParams, image: np.ndarray, threshold: float = 0.5) -> list[PredictedBox]:
    """One box per cell whose best slot confidence exceeds ``threshold``; class by argmax."""
    arch = params.arch
    pred = forward(params, image)
    boxes, probs = pred.boxes(arch.B), pred.classes(arch.B)
    out = []
    for i in range(arch.S * arch.S):
        j = int(np.argmax(boxes[i, :, 4]))
        conf = float(boxes[i, j, 4])
        if conf > threshold:
            x, y, w, h = decode_box(i, boxes[i, j], arch.S)
            out.append(PredictedBox(int(np.argmax(probs[i])), x, y, w, h, conf))
    return out


def evaluate(params: ModelParams, shard: ClientShard, arch: ArchConfig | None = None, threshold: float = 0.5) -> EvalReport:
    """Per ground-truth box: best IOU over predicted boxes (0 when none).

    Class accuracy is scored per ground-truth box as the argmax class of the
    grid cell holding its centre.
    """
    if arch is not None:
        params = ModelParams(params.layers, arch)
    arch = params.arch
    results = []
    for s in shard.samples:
        preds = decode_predictions(params, s.image, threshold)
        probs = forward(params, s.image).classes(arch.B)
        ious, correct = [], []
        for b in s.boxes:
            ious.append(max((iou(b.box, p.box) for p in preds), default=0.0))
            col, row = cell_of(b.x, b.y, arch.S)
            correct.append(int(np.argmax(probs[row * arch.S + col])) == b.label)
        results.append(SampleResult(s.sample_id, len(s.boxes), preds, ious, correct))
    return EvalReport(results)
