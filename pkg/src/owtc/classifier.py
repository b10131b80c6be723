"""Packet classifiers (MLP and 1-D CNN) with confidence scores and feature maps."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .errors import DimensionError, ValidationError
from .packets import VECTOR_LENGTH, LabeledDataset

FEATURE_WIDTH = 128
# momentum SGD diverges on the 1D-CNN's 23040-wide dense input at the MLP's rate
DEFAULT_LEARNING_RATE = {"mlp": 0.01, "cnn1d": 0.002}


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: str = "mlp"
    input_length: int = VECTOR_LENGTH
    conv_stages: tuple = ((9, 16), (9, 16))  # (width, kernels) per stage, cnn1d only
    dense_widths: Optional[tuple] = None  # hidden widths; the M-wide head is appended

    def __post_init__(self):
        if self.kind in ("cnn2d", "cnn3d", "2d", "3d"):
            raise ValidationError(f"{self.kind} classifiers are out of scope; use mlp or cnn1d")
        if self.kind not in ("mlp", "cnn1d"):
            raise ValidationError(f"unknown architecture {self.kind!r}")

    @property
    def hidden(self) -> tuple:
        if self.dense_widths is not None:
            return tuple(self.dense_widths)
        return (768, FEATURE_WIDTH) if self.kind == "mlp" else (FEATURE_WIDTH,)


def build(spec: ArchitectureSpec, class_count: int, seed: int) -> nn.NeuralModel:
    """Fresh model with the layer stack of ``spec`` and a softmax head over ``class_count`` classes.

    The feature tap is the last hidden dense layer (128 wide for the stock
    architectures).
    """
    if class_count < 2:
        raise ValidationError("a classifier needs at least two classes")
    rng = np.random.default_rng(seed)
    layers = []
    if spec.kind == "cnn1d":
        shape = (spec.input_length, 1)
        for width, kernels in spec.conv_stages:
            layers += [nn.init_conv1d(rng, width, shape[1], kernels), nn.Layer("relu")]
            shape = (shape[0] - width + 1, kernels)
        layers.append(nn.Layer("flatten"))
        n_in = shape[0] * shape[1]
        input_shape = (spec.input_length, 1)
    else:
        n_in = spec.input_length
        input_shape = (spec.input_length,)
    tap = None
    for width in spec.hidden:
        tap = len(layers)
        layers += [nn.init_dense(rng, n_in, width), nn.Layer("relu")]
        n_in = width
    layers += [nn.init_dense(rng, n_in, class_count), nn.Layer("softmax")]
    meta = {"arch": spec.kind, "conv_stages": [list(s) for s in spec.conv_stages] if spec.kind == "cnn1d" else [],
            "hidden": list(spec.hidden)}
    return nn.NeuralModel(layers, input_shape, class_count, tap, meta)


def spec_of(model: nn.NeuralModel) -> ArchitectureSpec:
    meta = model.metadata
    spec = ArchitectureSpec(
        kind=meta.get("arch", "mlp"),
        input_length=int(np.prod(model.input_shape)),
        conv_stages=tuple(tuple(s) for s in meta.get("conv_stages", [])) or ((9, 16), (9, 16)),
    )
    if "hidden" in meta and tuple(meta["hidden"]) != spec.hidden:
        spec = replace(spec, dense_widths=tuple(meta["hidden"]))
    return spec


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, validation) index split."""
    order = np.random.default_rng([seed, 0xA1]).permutation(n)
    n_val = int(round(n * fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def accuracy(model: nn.NeuralModel, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    probs, _ = nn.forward(model, dataset.vectors())
    return float(np.mean(probs.argmax(axis=1) == dataset.labels))


def train_classifier(
    spec: ArchitectureSpec,
    dataset: LabeledDataset,
    cfg: nn.TrainConfig,
    validation_fraction: float = 0.1,
    on_epoch_end: Optional[Callable[[int, nn.NeuralModel], None]] = None,
) -> nn.NeuralModel:
    """Train from scratch; the held-out accuracy lands in ``metadata['validation_accuracy']``."""
    m = dataset.check_dense()
    if m < 2:
        raise ValidationError("a classifier needs at least two classes")
    model = build(spec, m, cfg.seed)
    train_idx, val_idx = split_validation(len(dataset), validation_fraction, cfg.seed)
    if len(val_idx) == 0:
        train_idx = np.arange(len(dataset))
    tr = dataset.subset(train_idx)
    model = nn.train(model, tr.vectors(), tr.labels, cfg, on_epoch_end)
    if len(val_idx):
        model.metadata["validation_accuracy"] = accuracy(model, dataset.subset(val_idx))
    model.metadata["class_names"] = {str(k): v for k, v in sorted(dataset.class_names.items())}
    return model


@dataclass
class ConfidenceRecord:
    probabilities: np.ndarray
    top_score: float
    predicted_label: int
    feature_map: np.ndarray = field(repr=False)


def classify(model: nn.NeuralModel, vector: np.ndarray) -> ConfidenceRecord:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.size != int(np.prod(model.input_shape)):
        raise DimensionError(f"packet vector has {vector.size} values, model expects {model.input_shape}")
    probs, feats = nn.forward(model, np.asarray(vector, dtype=np.float64).reshape(model.input_shape))
    label = int(np.argmax(probs))
    return ConfidenceRecord(probs, float(probs[label]), label, feats)


def classify_batch(model: nn.NeuralModel, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched ``(probabilities, feature_maps)``; rows follow the input order."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(vectors) == 0:
        return np.zeros((0, model.class_count)), np.zeros((0, model.feature_width))
    return nn.forward(model, vectors.reshape(len(vectors), -1))


def score_set(model: nn.NeuralModel, vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Top softmax score of each packet, in order."""
    probs, _ = classify_batch(model, np.asarray(vectors, dtype=np.float64))
    return probs.max(axis=1) if len(probs) else np.zeros(0)
