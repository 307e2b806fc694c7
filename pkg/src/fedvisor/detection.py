"""Dense grid-cell detector, its squared-error detection loss and gradients.

The network maps a flattened square grayscale image through tanh hidden
layers to an ``S*S*(B*5 + C)`` output block.  Every output channel is passed
through a sigmoid.  Per cell the channel layout is::

    [x, y, w, h, conf] * B  +  [p(c) for c in range(C)]

``x``/``y`` are offsets of the box centre inside its cell, ``w``/``h`` are
image-normalised extents.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "ArchConfig",
    "ModelParams",
    "GridPrediction",
    "GridTarget",
    "LossBreakdown",
    "init_model",
    "forward",
    "iou",
    "encode_confidence",
    "yolo_loss",
    "loss_gradient",
    "batch_loss",
    "sgd_step",
    "params_to_bytes",
    "params_from_bytes",
]


@dataclass(frozen=True)
class ArchConfig:
    input_side: int = 12
    hidden_sizes: tuple[int, ...] = (32, 32)
    S: int = 4
    B: int = 1
    C: int = 2
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_side < 1:
            raise ValueError(f"input_side must be >= 1, got {self.input_side}")
        if self.S < 1 or self.B < 1 or self.C < 1:
            raise ValueError(f"S, B, C must be >= 1, got S={self.S} B={self.B} C={self.C}")
        if self.lambda_coord < 0 or self.lambda_noobj < 0:
            raise ValueError("lambda_coord and lambda_noobj must be non-negative")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError(f"hidden sizes must be positive, got {self.hidden_sizes}")

    @property
    def cell_channels(self) -> int:
        return self.B * 5 + self.C

    @property
    def output_size(self) -> int:
        return self.S * self.S * self.cell_channels

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_side * self.input_side, *self.hidden_sizes, self.output_size]

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "hidden_sizes": list(self.hidden_sizes),
            "S": self.S,
            "B": self.B,
            "C": self.C,
            "lambda_coord": self.lambda_coord,
            "lambda_noobj": self.lambda_noobj,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**{**d, "hidden_sizes": tuple(d.get("hidden_sizes", (32, 32)))})


@dataclass(eq=False)
class ModelParams:
    """Ordered ``(weight[out, in], bias[out])`` pairs."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    arch: ArchConfig | None = None

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ValueError(f"need at least 2 layers, got {len(self.layers)}")
        for j, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {j}: weight {W.shape} and bias {b.shape} disagree")
            if j and W.shape[1] != self.layers[j - 1][0].shape[0]:
                raise ValueError(f"layer {j} input {W.shape[1]} does not chain from layer {j - 1}")
        if self.arch is not None and not self.matches(self.arch):
            raise ValueError("layer shapes do not match arch")

    def __len__(self) -> int:
        return len(self.layers)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams) or len(self) != len(other):
            return False
        return all(
            W.shape == W2.shape and np.array_equal(W, W2) and np.array_equal(b, b2)
            for (W, b), (W2, b2) in zip(self.layers, other.layers)
        )

    @property
    def shapes(self) -> list[tuple[tuple[int, int], int]]:
        return [(W.shape, b.shape[0]) for W, b in self.layers]

    def copy(self) -> "ModelParams":
        return ModelParams([(W.copy(), b.copy()) for W, b in self.layers], self.arch)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def is_finite(self) -> bool:
        return all(np.isfinite(W).all() and np.isfinite(b).all() for W, b in self.layers)

    def matches(self, arch: ArchConfig) -> bool:
        sizes = arch.layer_sizes
        return [(W.shape[1], W.shape[0]) for W, _ in self.layers] == list(zip(sizes[:-1], sizes[1:]))


def check_congruent(a: ModelParams, b: ModelParams) -> None:
    if a.shapes != b.shapes:
        raise ValueError(f"shape mismatch: {a.shapes} vs {b.shapes}")


@dataclass
class GridPrediction:
    """Sigmoid outputs reshaped to ``(S*S, B*5 + C)``."""

    values: np.ndarray

    def boxes(self, B: int) -> np.ndarray:
        return self.values[:, : B * 5].reshape(-1, B, 5)

    def classes(self, B: int) -> np.ndarray:
        return self.values[:, B * 5 :]


@dataclass
class GridTarget:
    obj: np.ndarray  # (S*S,)
    resp: np.ndarray  # (S*S, B)
    box: np.ndarray  # (S*S, B, 4)
    conf: np.ndarray  # (S*S,)
    cls: np.ndarray  # (S*S, C)
    collisions: int = 0

    @classmethod
    def empty(cls, arch: ArchConfig) -> "GridTarget":
        n = arch.S * arch.S
        return cls(
            obj=np.zeros(n),
            resp=np.zeros((n, arch.B)),
            box=np.zeros((n, arch.B, 4)),
            conf=np.zeros(n),
            cls=np.zeros((n, arch.C)),
        )

    def as_prediction(self, arch: ArchConfig) -> GridPrediction:
        """The prediction that scores zero loss against this target."""
        n, B = self.obj.shape[0], arch.B
        boxes = np.zeros((n, B, 5))
        boxes[..., :4] = self.box
        boxes[..., 4] = self.conf[:, None]
        return GridPrediction(np.concatenate([boxes.reshape(n, B * 5), self.cls], axis=1))


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    coord: float
    conf: float

    @property
    def total(self) -> float:
        return self.cls + self.coord + self.conf


def init_model(seed: int, arch: ArchConfig) -> ModelParams:
    if not arch.hidden_sizes:
        raise ValueError("at least one hidden layer is required")
    rng = np.random.default_rng(seed)
    sizes = arch.layer_sizes
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return ModelParams(layers, arch)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activations(params: ModelParams, x: np.ndarray) -> list[np.ndarray]:
    """Forward pass over a ``(batch, in)`` array, returning every layer's output."""
    acts = [x]
    last = len(params.layers) - 1
    for j, (W, b) in enumerate(params.layers):
        z = acts[-1] @ W.T + b
        acts.append(_sigmoid(z) if j == last else np.tanh(z))
    return acts


def _flatten_images(params: ModelParams, images: Sequence[np.ndarray]) -> np.ndarray:
    n_in = params.layers[0][0].shape[1]
    x = np.stack([np.asarray(im, dtype=np.float64) for im in images]).reshape(len(images), -1)
    if x.shape[1] != n_in:
        raise ValueError(f"image has {x.shape[1]} pixels, model expects {n_in}")
    return x


def forward(params: ModelParams, image: np.ndarray) -> GridPrediction:
    arch = params.arch
    if arch is None:
        raise ValueError("params carry no arch")
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (arch.input_side, arch.input_side):
        raise ValueError(f"image shape {image.shape} != ({arch.input_side}, {arch.input_side})")
    out = _activations(params, image.reshape(1, -1))[-1][0]
    return GridPrediction(out.reshape(arch.S * arch.S, arch.cell_channels))


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """Intersection over union of two centre-format ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    if min(aw, ah, bw, bh) < 0:
        raise ValueError("box width/height must be non-negative")
    ix = max(0.0, min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2))
    iy = max(0.0, min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def encode_confidence(has_obj: int, iou_value: float) -> float:
    return float(has_obj) * iou_value


def _loss_terms(values: np.ndarray, target: GridTarget, arch: ArchConfig):
    """Loss terms and d(loss)/d(output) for one ``(S*S, ch)`` prediction block."""
    B = arch.B
    boxes = values[:, : B * 5].reshape(-1, B, 5)
    probs = values[:, B * 5 :]

    d_cls = target.obj[:, None] * (probs - target.cls)
    cls_term = float(np.sum(target.obj[:, None] * (target.cls - probs) ** 2))

    resp = target.resp
    d_coord = arch.lambda_coord * resp[..., None] * (boxes[..., :4] - target.box)
    coord_term = float(arch.lambda_coord * np.sum(resp[..., None] * (target.box - boxes[..., :4]) ** 2))

    conf_err = target.conf[:, None] - boxes[..., 4]
    conf_w = resp + arch.lambda_noobj * (1.0 - resp)
    conf_term = float(np.sum(conf_w * conf_err**2))
    d_conf = -conf_w * conf_err

    grad = np.zeros_like(values)
    g_boxes = np.concatenate([d_coord, d_conf[..., None]], axis=-1)
    grad[:, : B * 5] = 2.0 * g_boxes.reshape(-1, B * 5)
    grad[:, B * 5 :] = 2.0 * d_cls
    return LossBreakdown(cls_term, coord_term, conf_term), grad


def _check_shapes(pred: GridPrediction, target: GridTarget, arch: ArchConfig) -> None:
    n = arch.S * arch.S
    if pred.values.shape != (n, arch.cell_channels):
        raise ValueError(f"prediction shape {pred.values.shape} != {(n, arch.cell_channels)}")
    if (
        target.obj.shape != (n,)
        or target.resp.shape != (n, arch.B)
        or target.box.shape != (n, arch.B, 4)
        or target.conf.shape != (n,)
        or target.cls.shape != (n, arch.C)
    ):
        raise ValueError("target shape does not match arch")


def yolo_loss(pred: GridPrediction, target: GridTarget, arch: ArchConfig) -> LossBreakdown:
    """Class, coordinate and confidence squared-error terms for one image."""
    _check_shapes(pred, target, arch)
    return _loss_terms(pred.values, target, arch)[0]


def batch_loss(
    params: ModelParams, batch: Sequence[tuple[np.ndarray, GridTarget]], arch: ArchConfig
) -> float:
    """Mean total loss over ``batch``."""
    if not batch:
        raise ValueError("empty batch")
    out = _activations(params, _flatten_images(params, [im for im, _ in batch]))[-1]
    vals = out.reshape(len(batch), arch.S * arch.S, arch.cell_channels)
    return float(np.mean([_loss_terms(v, t, arch)[0].total for v, (_, t) in zip(vals, batch)]))


def loss_gradient(
    params: ModelParams, batch: Sequence[tuple[np.ndarray, GridTarget]], arch: ArchConfig
) -> ModelParams:
    """Analytic gradient of the mean total loss over ``batch``.

    Returned as a ``ModelParams`` congruent with ``params``.
    """
    if not batch:
        raise ValueError("empty batch")
    if not params.matches(arch):
        raise ValueError("params do not match arch")
    n = len(batch)
    acts = _activations(params, _flatten_images(params, [im for im, _ in batch]))
    out = acts[-1].reshape(n, arch.S * arch.S, arch.cell_channels)
    d_out = np.empty_like(out)
    for k, (_, target) in enumerate(batch):
        _check_shapes(GridPrediction(out[k]), target, arch)
        d_out[k] = _loss_terms(out[k], target, arch)[1]
    y = acts[-1]
    delta = d_out.reshape(n, -1) * y * (1.0 - y) / n

    grads = [None] * len(params.layers)
    for j in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[j]
        grads[j] = (delta.T @ acts[j], delta.sum(axis=0))
        if j:
            delta = (delta @ W) * (1.0 - acts[j] ** 2)
    return ModelParams(grads, params.arch)


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    check_congruent(params, grads)
    return ModelParams(
        [(W - lr * gW, b - lr * gb) for (W, b), (gW, gb) in zip(params.layers, grads.layers)],
        params.arch,
    )


# Binary layout: u32 layer count, then per layer u32 out, u32 in,
# out*in float64 weights (row-major), out float64 biases.  Little-endian.

def params_to_bytes(params: ModelParams) -> bytes:
    parts = [struct.pack("<I", len(params.layers))]
    for W, b in params.layers:
        parts.append(struct.pack("<II", *W.shape))
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def params_from_bytes(data: bytes, arch: ArchConfig | None = None) -> ModelParams:
    view = memoryview(data)
    if len(view) < 4:
        raise ValueError("truncated parameter blob")
    (count,) = struct.unpack_from("<I", view, 0)
    off = 4
    layers = []
    for _ in range(count):
        if off + 8 > len(view):
            raise ValueError("truncated parameter blob")
        rows, cols = struct.unpack_from("<II", view, off)
        off += 8
        nbytes = 8 * (rows * cols + rows)
        if off + nbytes > len(view):
            raise ValueError("truncated parameter blob")
        W = np.frombuffer(view, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
        b = np.frombuffer(view, dtype="<f8", count=rows, offset=off + 8 * rows * cols)
        layers.append((W.astype(np.float64), b.astype(np.float64)))
        off += nbytes
    if off != len(view):
        raise ValueError("trailing bytes after parameter blob")
    return ModelParams(layers, arch)
