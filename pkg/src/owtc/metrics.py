"""Evaluation: pair-counting cluster metrics, confusion matrices, throughput."""

from __future__ import annotations

import os
import platform
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .errors import ValidationError
from .packets import VECTOR_LENGTH, LabeledDataset

# packets/ms -> Mbps for fixed 1456-byte payloads: bytes * 8 bits * 1000 ms/s / 1e6
MBPS_PER_PACKET_PER_MS = VECTOR_LENGTH * 8 * 1000 / 1e6


@dataclass
class PairCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class PRF:
    recall: float
    precision: float
    f_beta: float
    beta: float = 1.0
    undefined: tuple = ()

    def to_dict(self) -> dict:
        return {"recall": self.recall, "precision": self.precision, "f_beta": self.f_beta,
                "beta": self.beta, "undefined": list(self.undefined)}


def precision_recall_f(counts: PairCounts, beta: float = 1.0) -> PRF:
    """Recall, precision and F-beta. Zero denominators give 0 and are flagged."""
    undefined = []
    if counts.tp + counts.fn:
        r = counts.tp / (counts.tp + counts.fn)
    else:
        r = 0.0
        undefined.append("recall")
    if counts.tp + counts.fp:
        p = counts.tp / (counts.tp + counts.fp)
    else:
        p = 0.0
        undefined.append("precision")
    b2 = beta * beta
    if b2 * p + r > 0:
        f = (b2 + 1) * p * r / (b2 * p + r)
    else:
        f = 0.0
        undefined.append("f_beta")
    return PRF(r, p, f, beta, tuple(undefined))


def _comb2(x):
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def pair_counts(truth: Sequence, predicted: Sequence) -> PairCounts:
    """Pair-counting agreement over all C(n, 2) point pairs, via the contingency table."""
    truth = np.asarray(truth)
    predicted = np.asarray(predicted)
    if truth.shape != predicted.shape or truth.ndim != 1:
        raise ValidationError("truth and predicted labels must be 1-D and the same length")
    n = truth.size
    if n < 2:
        raise ValidationError("pair counting needs at least two points")
    _, t_idx = np.unique(truth, return_inverse=True)
    _, p_idx = np.unique(predicted, return_inverse=True)
    table = np.zeros((t_idx.max() + 1, p_idx.max() + 1), dtype=np.int64)
    np.add.at(table, (t_idx, p_idx), 1)
    tp = int(_comb2(table).sum())
    same_pred = int(_comb2(table.sum(axis=0)).sum())
    same_truth = int(_comb2(table.sum(axis=1)).sum())
    fp = same_pred - tp
    fn = same_truth - tp
    tn = n * (n - 1) // 2 - tp - fp - fn
    return PairCounts(tp, tn, fp, fn)


def rand_index(truth: Sequence, predicted: Sequence) -> float:
    c = pair_counts(truth, predicted)
    return (c.tp + c.tn) / c.total


def clustering_scores(truth: Sequence, predicted: Sequence, beta: float = 1.0) -> dict:
    c = pair_counts(truth, predicted)
    prf = precision_recall_f(c, beta)
    return {"rand_index": (c.tp + c.tn) / c.total, "tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn,
            **prf.to_dict()}


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def recall(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        return np.divide(np.diag(self.counts), rows, out=np.zeros(len(rows)), where=rows > 0)

    def precision(self) -> np.ndarray:
        cols = self.counts.sum(axis=0)
        return np.divide(np.diag(self.counts), cols, out=np.zeros(len(cols)), where=cols > 0)

    def to_dict(self) -> dict:
        return {"class_names": self.class_names, "counts": self.counts.tolist(), "accuracy": self.accuracy,
                "recall": self.recall().tolist(), "precision": self.precision().tolist()}

    def to_csv(self) -> str:
        names = self.class_names or [str(i) for i in range(len(self.counts))]
        lines = ["truth\\predicted," + ",".join(names) + ",recall"]
        rec = self.recall()
        for i, row in enumerate(self.counts):
            lines.append(",".join([names[i]] + [str(int(v)) for v in row] + [f"{rec[i]:.4f}"]))
        lines.append(",".join(["precision"] + [f"{p:.4f}" for p in self.precision()] + [""]))
        return "\n".join(lines) + "\n"

    def render(self) -> str:
        names = self.class_names or [str(i) for i in range(len(self.counts))]
        width = max(8, max(len(n) for n in names) + 1)
        head = "truth\\pred".ljust(width) + "".join(n.rjust(width) for n in names) + "recall".rjust(width)
        out = [head]
        rec = self.recall()
        for i, row in enumerate(self.counts):
            out.append(names[i].ljust(width) + "".join(str(int(v)).rjust(width) for v in row)
                       + f"{rec[i]:.3f}".rjust(width))
        out.append("precision".ljust(width) + "".join(f"{p:.3f}".rjust(width) for p in self.precision()))
        out.append(f"accuracy {self.accuracy:.4f} over {self.total} packets")
        return "\n".join(out)


def confusion_from_labels(truth: Sequence, predicted: Sequence, class_count: int,
                          class_names: Optional[list] = None) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if truth.size and (truth.min() < 0 or truth.max() >= class_count):
        raise ValidationError(f"truth labels must lie in [0, {class_count})")
    counts = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(counts, (truth, predicted), 1)
    return ConfusionMatrix(counts, list(class_names or []))


def confusion(model: nn.NeuralModel, dataset: LabeledDataset) -> ConfusionMatrix:
    probs, _ = nn.forward(model, dataset.vectors()) if len(dataset) else (np.zeros((0, model.class_count)), None)
    names = [model.metadata.get("class_names", {}).get(str(i), dataset.class_names.get(i, str(i)))
             for i in range(model.class_count)]
    return confusion_from_labels(dataset.labels, probs.argmax(axis=1), model.class_count, names)


def hardware_description() -> dict:
    return {"machine": platform.machine(), "processor": platform.processor() or platform.machine(),
            "python": platform.python_version(), "numpy": np.__version__, "cpu_count": os.cpu_count()}


def throughput_bench(model: nn.NeuralModel, vectors: np.ndarray, warmup: int = 2, rounds: int = 50,
                     per_round: int = 500, seed: int = 0) -> dict:
    """Median packets/ms over ``rounds`` timed batches of ``per_round`` packets.

    Bandwidth assumes 1456-byte payloads per packet.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if rounds < 1:
        raise ValidationError("rounds must be at least 1")
    if len(vectors) == 0 or per_round < 1:
        raise ValidationError("need at least one packet per round")
    rng = np.random.default_rng(seed)
    batches = [vectors[rng.integers(0, len(vectors), size=per_round)] for _ in range(warmup + rounds)]
    for b in batches[:warmup]:
        nn.forward(model, b)
    rates = []
    for b in batches[warmup:]:
        t0 = time.perf_counter()
        nn.forward(model, b)
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        rates.append(per_round / elapsed_ms)
    ppm = float(np.median(rates))
    return {"packets_per_ms": ppm, "mbps": ppm * MBPS_PER_PACKET_PER_MS, "rounds": rounds,
            "per_round": per_round, "warmup": warmup, "round_rates": rates,
            "mbps_basis": f"{VECTOR_LENGTH}-byte preprocessed payload per packet",
            "hardware": hardware_description()}
