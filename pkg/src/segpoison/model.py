"""A small per-pixel segmentation model with dilated-neighborhood features.

Each pixel is described by the 3x3 neighborhoods sampled at offsets ``r * k`` for every dilation
rate ``r`` (clamp-to-edge), optionally followed by its own RGB. A one-hidden-layer ReLU perceptron
maps the description to class logits and is trained with plain mini-batch SGD on softmax
cross-entropy.

With ``pooling="box"`` each sampled location contributes the mean color of the ``r x r`` box
around it instead of a single pixel, so the large rates summarize whole image regions.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import DatasetManifest, DatasetError

MODEL_FORMAT = "segpoison-model"
MODEL_VERSION = 1
INPUT_SHIFT = 0.5

_OFFSETS = np.array([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)], dtype=np.int64)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    dilation_rates: tuple[int, ...] = (1, 2, 4, 8)
    include_center_rgb: bool = True
    pooling: str = "point"  # "point", "box" or "max"

    def __post_init__(self) -> None:
        rates = tuple(int(r) for r in self.dilation_rates)
        object.__setattr__(self, "dilation_rates", rates)
        if not rates or rates[0] < 1 or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"dilation rates must be positive and strictly increasing, got {rates}")
        if self.pooling not in ("point", "box", "max"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    @property
    def length(self) -> int:
        return 3 * (9 * len(self.dilation_rates) + int(self.include_center_rgb))

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        d = dict(d)
        if "dilation_rates" in d:
            d["dilation_rates"] = tuple(d["dilation_rates"])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 256
    learning_rate: float = 0.1
    hidden: int = 64
    pixels_per_image: int = 512
    seed: int = 0
    padding: str = "clamp"

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.hidden < 1 or self.pixels_per_image < 1:
            raise ValueError("epochs must be >= 0 and batch_size, hidden, pixels_per_image positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.padding != "clamp":
            raise ValueError("only clamp-to-edge padding is supported")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class SegModel:
    spec: FeatureSpec
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.W2.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "SegModel":
        return SegModel(self.spec, self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    def equals(self, other: "SegModel") -> bool:
        return self.spec == other.spec and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.params(), other.params())
        )


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        return self.epoch_losses[-1] if self.epoch_losses else None


# ---------------------------------------------------------------------------
# features


def _box_means(img: np.ndarray, r: int) -> np.ndarray:
    """Mean over the r x r box starting r//2 rows/cols before each pixel, edge-padded."""
    if r == 1:
        return img
    lo, hi = r // 2, r - r // 2 - 1
    padded = np.pad(img, ((lo, hi), (lo, hi), (0, 0)), mode="edge")
    integral = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1, 3), dtype=np.float64)
    integral[1:, 1:] = padded.cumsum(0).cumsum(1)
    sums = integral[r:, r:] - integral[:-r, r:] - integral[r:, :-r] + integral[:-r, :-r]
    return sums / (r * r)


def _box_max(img: np.ndarray, r: int) -> np.ndarray:
    """Per-channel max over the same r x r box as ``_box_means``."""
    if r == 1:
        return img
    return ndimage.maximum_filter(img, size=(r, r, 1), mode="nearest")


def feature_pyramid(image: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    """Per-rate sampling planes, shape (R, H, W, 3), values scaled to [0, 1]."""
    img = np.asarray(image, dtype=np.float64) / 255.0
    if spec.pooling == "point":
        return img[None]
    if spec.pooling == "max":
        return np.stack([_box_max(img, r) for r in spec.dilation_rates])
    return np.stack([_box_means(img, r) for r in spec.dilation_rates])


def _gather(planes: np.ndarray, img_idx: np.ndarray, rows: np.ndarray, cols: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    """Features for pixels ``(rows, cols)`` of images ``img_idx`` in a (N, R', H, W, 3) stack."""
    H, W = planes.shape[2:4]
    rates = np.asarray(spec.dilation_rates, dtype=np.int64)
    n_r = len(rates)
    dr = (rates[:, None] * _OFFSETS[None, :, 0]).ravel()
    dc = (rates[:, None] * _OFFSETS[None, :, 1]).ravel()
    plane = np.repeat(np.arange(n_r), 9) if planes.shape[1] > 1 else np.zeros(9 * n_r, dtype=np.int64)
    rr = np.clip(rows[:, None] + dr[None], 0, H - 1)
    cc = np.clip(cols[:, None] + dc[None], 0, W - 1)
    # flat row indices into a (N*R'*H*W, 3) view are much cheaper than 4-axis fancy indexing
    flat = planes.reshape(-1, 3)
    base = img_idx[:, None] * planes.shape[1] + plane[None]
    idx = (base * H + rr) * W + cc
    n_cols = idx.shape[1] + int(spec.include_center_rgb)
    feats = np.empty((len(rows), n_cols, 3), dtype=planes.dtype)
    np.take(flat, idx, axis=0, out=feats[:, : idx.shape[1]])
    if spec.include_center_rgb:
        feats[:, -1] = flat[((img_idx * planes.shape[1]) * H + rows) * W + cols]
    return feats.reshape(len(rows), -1)


def extract_features(image: np.ndarray, row: int, col: int, spec: FeatureSpec) -> np.ndarray:
    H, W = np.shape(image)[:2]
    if not (0 <= row < H and 0 <= col < W):
        raise IndexError(f"pixel ({row}, {col}) outside {H}x{W} image")
    planes = feature_pyramid(image, spec)[None]
    zero = np.zeros(1, dtype=np.int64)
    return _gather(planes, zero, np.array([row]), np.array([col]), spec)[0]


def image_features(image: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    """Features for every pixel in row-major order, shape (H*W, D)."""
    H, W = np.shape(image)[:2]
    planes = feature_pyramid(image, spec)[None]
    rows, cols = np.divmod(np.arange(H * W), W)
    return _gather(planes, np.zeros(H * W, dtype=np.int64), rows, cols, spec)


# ---------------------------------------------------------------------------
# network


def init_model(spec: FeatureSpec, num_classes: int, hidden: int, seed: int) -> SegModel:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x5E6,)))
    d = spec.length

    def glorot(fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    W1 = glorot(d, hidden)
    W2 = glorot(hidden, num_classes)
    return SegModel(spec, W1, np.zeros(hidden), W2, np.zeros(num_classes))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: SegModel, X: np.ndarray) -> np.ndarray:
    hidden = np.maximum((X - INPUT_SHIFT) @ model.W1 + model.b1, 0.0)
    return softmax(hidden @ model.W2 + model.b2)


def loss_and_grads(model: SegModel, X: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean softmax cross-entropy over the batch and its gradients w.r.t. (W1, b1, W2, b2)."""
    n = len(y)
    Xs = X - INPUT_SHIFT
    z1 = Xs @ model.W1 + model.b1
    a1 = np.maximum(z1, 0.0)
    logits = a1 @ model.W2 + model.b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(n), y]))

    d_logits = np.exp(shifted - log_norm[:, None])
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    dW2 = a1.T @ d_logits
    db2 = d_logits.sum(axis=0)
    dz1 = (d_logits @ model.W2.T) * (z1 > 0)
    dW1 = Xs.T @ dz1
    db1 = dz1.sum(axis=0)
    return loss, [dW1, db1, dW2, db2]


def _stack_planes(manifest: DatasetManifest, spec: FeatureSpec) -> tuple[np.ndarray, np.ndarray]:
    shapes = {s.shape for s in manifest.samples}
    if len(shapes) != 1:
        raise DatasetError(f"training needs equally sized images, got {sorted(shapes)}")
    planes = np.stack([feature_pyramid(s.image, spec) for s in manifest.samples]).astype(np.float32)
    masks = np.stack([s.mask for s in manifest.samples])
    return planes, masks


def _sgd(model: SegModel, manifest: DatasetManifest, config: TrainConfig, stream: int) -> TrainReport:
    if len(manifest) == 0:
        raise TrainingError("cannot train on an empty dataset")
    if int(max(s.mask.max() for s in manifest.samples)) >= model.num_classes:
        raise TrainingError("dataset has more classes than the model")
    planes, masks = _stack_planes(manifest, model.spec)
    N, H, W = masks.shape
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(stream,)))
    report = TrainReport()
    params = model.params()
    k = config.pixels_per_image
    for epoch in range(config.epochs):
        img_idx = np.repeat(np.arange(N), k)
        pos = rng.integers(0, H * W, size=N * k)
        order = rng.permutation(N * k)
        img_idx, pos = img_idx[order], pos[order]
        rows, cols = np.divmod(pos, W)
        X = _gather(planes, img_idx, rows, cols, model.spec).astype(np.float64)
        y = masks[img_idx, rows, cols].astype(np.int64)
        total = 0.0
        for b, start in enumerate(range(0, len(y), config.batch_size)):
            sl = slice(start, start + config.batch_size)
            loss, grads = loss_and_grads(model, X[sl], y[sl])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            for p, g in zip(params, grads):
                p -= config.learning_rate * g
            total += loss * len(y[sl])
        report.epoch_losses.append(total / len(y))
    return report


def train(manifest: DatasetManifest, config: TrainConfig, spec: FeatureSpec) -> tuple[SegModel, TrainReport]:
    model = init_model(spec, len(manifest.classes), config.hidden, config.seed)
    report = _sgd(model, manifest, config, stream=1)
    return model, report


def fine_tune(model: SegModel, clean: DatasetManifest, config: TrainConfig) -> tuple[SegModel, TrainReport]:
    """Continue SGD from ``model``'s parameters on ``clean``; ``model`` itself is left untouched."""
    tuned = model.copy()
    report = _sgd(tuned, clean, config, stream=2)
    return tuned, report


def predict_probs(model: SegModel, image: np.ndarray) -> np.ndarray:
    H, W = np.shape(image)[:2]
    return forward(model, image_features(image, model.spec)).reshape(H, W, model.num_classes)


def predict_mask(model: SegModel, image: np.ndarray) -> np.ndarray:
    # np.argmax keeps the first maximum, so ties resolve to the lowest class id
    return predict_probs(model, image).argmax(axis=-1).astype(np.uint8)


# ---------------------------------------------------------------------------
# persistence
#
# JSON document: {"format": "segpoison-model", "version": 1, "spec": {...}, "num_classes": C,
# "hidden": H, "params": {"W1": [D*H floats, row-major], "b1": [H], "W2": [H*C], "b2": [C]}}


def model_to_json(model: SegModel) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "spec": {**asdict(model.spec), "dilation_rates": list(model.spec.dilation_rates)},
        "num_classes": model.num_classes,
        "hidden": model.hidden,
        "params": {name: p.ravel().tolist() for name, p in zip(("W1", "b1", "W2", "b2"), model.params())},
    }
    return json.dumps(doc, separators=(",", ":")) + "\n"


def model_from_json(text: str) -> SegModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed model file: {exc}") from exc
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError("not a segpoison model file")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')!r}")
    try:
        spec = FeatureSpec.from_dict(doc["spec"])
        C, H, D = int(doc["num_classes"]), int(doc["hidden"]), spec.length
        p = doc["params"]
        return SegModel(
            spec,
            np.array(p["W1"], dtype=np.float64).reshape(D, H),
            np.array(p["b1"], dtype=np.float64).reshape(H),
            np.array(p["W2"], dtype=np.float64).reshape(H, C),
            np.array(p["b2"], dtype=np.float64).reshape(C),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed model file: {exc}") from exc


def save_model(model: SegModel, path: str | Path) -> None:
    Path(path).write_text(model_to_json(model))


def load_model(path: str | Path) -> SegModel:
    return model_from_json(Path(path).read_text())
