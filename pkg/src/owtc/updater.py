"""Dataset merging and classifier update by transfer learning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import nn
from .classifier import ArchitectureSpec, train_classifier
from .errors import DimensionError, ValidationError
from .packets import LabeledDataset

log = logging.getLogger(__name__)

FINE_TUNE_LR_SCALE = 0.1


@dataclass
class UpdatePlan:
    known_classes: int
    total_classes: int
    cfg: nn.TrainConfig
    label_map: dict = field(default_factory=dict)  # discovered cluster id -> global class id
    balance: bool = True

    def __post_init__(self):
        if self.total_classes < self.known_classes:
            raise ValidationError("an update cannot remove classes")
        if sorted(self.label_map.values()) != list(range(self.known_classes, self.total_classes)):
            raise ValidationError("new class ids must fill the range right after the known classes")

    @property
    def new_classes(self) -> int:
        return self.total_classes - self.known_classes


def make_plan(known_classes: int, discovered: int, base_cfg: nn.TrainConfig, lr_scale: float = FINE_TUNE_LR_SCALE,
              epochs: Optional[int] = None, balance: bool = True) -> UpdatePlan:
    cfg = replace(base_cfg, learning_rate=base_cfg.learning_rate * lr_scale,
                  epochs=base_cfg.epochs if epochs is None else epochs)
    return UpdatePlan(known_classes, known_classes + discovered, cfg, {k: known_classes + k for k in range(discovered)}, balance)


def balanced_indices(labels, seed: int) -> np.ndarray:
    """Resample every class to the mean class size, keeping the total roughly unchanged.

    Classes above the mean are subsampled without replacement; smaller ones
    keep all their packets and are topped up with replacement.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    target = int(round(counts.mean()))
    rng = np.random.default_rng([seed, 0xBA1])
    picks = []
    for c, n in zip(classes, counts):
        idx = np.flatnonzero(labels == c)
        if n >= target:
            picks.append(np.sort(rng.choice(idx, target, replace=False)))
        else:
            picks.append(np.concatenate([idx, rng.choice(idx, target - n, replace=True)]))
    return np.concatenate(picks)


def merge_dataset(known_set: LabeledDataset, discovered: LabeledDataset, cluster_labels) -> LabeledDataset:
    """Append discovered packets to the training set with cluster ids shifted past the existing classes."""
    cluster_labels = np.asarray(cluster_labels, dtype=np.int64)
    if len(discovered) == 0:
        log.warning("no discovered packets; the dataset is unchanged")
        return known_set.subset(np.arange(len(known_set)))
    if len(cluster_labels) != len(discovered):
        raise DimensionError("one cluster label per discovered packet is required")
    k = int(cluster_labels.max()) + 1
    if cluster_labels.min() < 0 or set(np.unique(cluster_labels).tolist()) != set(range(k)):
        raise ValidationError("cluster labels must be contiguous 0..K-1")
    known_classes = known_set.check_dense()
    names = dict(known_set.class_names)
    names.update({known_classes + c: f"discovered-{c}" for c in range(k)})
    new = LabeledDataset(discovered.payload, known_classes + cluster_labels, discovered.lengths)
    merged = LabeledDataset.concat([known_set, new])
    merged.class_names = names
    return merged


def resize_output(model: nn.NeuralModel, class_count: int, seed: int) -> nn.NeuralModel:
    """Copy ``model`` with its final dense layer widened to ``class_count`` outputs.

    Existing output units keep their weights and bias; new units get fresh
    Glorot-uniform weights and zero bias.
    """
    known_classes = model.class_count
    if class_count < known_classes:
        raise DimensionError(f"cannot shrink the output layer from {known_classes} to {class_count}")
    out = model.copy()
    last = out.layers[out.final_dense]
    n_in = last.weights.shape[0]
    extra = class_count - known_classes
    if extra:
        rng = np.random.default_rng([seed, 0x7E5])
        fresh = nn.as_float32_exact(nn.glorot_uniform(rng, (n_in, extra), n_in, class_count))
        out.layers[out.final_dense] = nn.Layer(
            "dense", np.concatenate([last.weights, fresh], axis=1), np.concatenate([last.bias, np.zeros(extra)])
        )
    out.class_count = class_count
    out.__post_init__()
    return out


def transfer_update(
    model: nn.NeuralModel,
    dataset: LabeledDataset,
    plan: UpdatePlan,
    on_epoch_end: Optional[Callable[[int, nn.NeuralModel], None]] = None,
) -> nn.NeuralModel:
    """Migrate every weight of ``model``, widen its head, and fine-tune on the merged dataset.

    With ``plan.balance`` the fine-tuning set is class-balanced by resampling.
    """
    if model.class_count != plan.known_classes:
        raise DimensionError(f"model has {model.class_count} classes, plan expects {plan.known_classes}")
    labels = dataset.labels
    if len(labels) == 0:
        raise ValidationError("cannot update on an empty dataset")
    if labels.min() < 0 or labels.max() >= plan.total_classes:
        raise ValidationError(f"labels must lie in [0, {plan.total_classes})")
    resized = resize_output(model, plan.total_classes, plan.cfg.seed)
    vectors = dataset.vectors()
    if plan.balance:
        # new classes usually outnumber the old ones several times over
        keep = balanced_indices(labels, plan.cfg.seed)
        vectors, labels = vectors[keep], labels[keep]
    updated = nn.train(resized, vectors, labels, plan.cfg, on_epoch_end)
    names = dict(model.metadata.get("class_names", {}))
    names.update({str(k): v for k, v in dataset.class_names.items()})
    updated.metadata["class_names"] = dict(sorted(names.items(), key=lambda kv: int(kv[0])))
    updated.metadata["updated_from_classes"] = plan.known_classes
    updated.metadata.pop("validation_accuracy", None)
    return updated


def retrain_from_scratch(spec: ArchitectureSpec, dataset: LabeledDataset, cfg: nn.TrainConfig,
                         on_epoch_end: Optional[Callable[[int, nn.NeuralModel], None]] = None) -> nn.NeuralModel:
    """Baseline: a fresh model of the same architecture trained on the merged dataset."""
    return train_classifier(spec, dataset, cfg, validation_fraction=0.0, on_epoch_end=on_epoch_end)
