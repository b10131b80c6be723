"""Filtering packets of unknown applications.

A confidence threshold pre-filters low-scoring packets; those seed a binary
discriminator (known = 0, unknown = 1) that then sweeps the high-confidence
remainder.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .classifier import FEATURE_WIDTH, score_set
from .errors import CannotTrainError, ValidationError

log = logging.getLogger(__name__)

MIN_PER_CLASS = 10  # below this many packets per side the discriminator is flagged low-confidence
HOLDOUT_FRACTION = 0.2
MIN_HOLDOUT_ACCURACY = 0.85


@dataclass
class ThresholdModel:
    theta: float
    epsilon: float
    sample_count: int


@dataclass
class DiscriminationResult:
    left: np.ndarray  # pre-filtered: top score <= theta
    remainder: np.ndarray  # everything above the threshold
    right: np.ndarray  # remainder judged unknown by the discriminator
    threshold: ThresholdModel
    discriminator: Optional[nn.NeuralModel] = None
    fallback: bool = False
    low_confidence: bool = False
    holdout_accuracy: Optional[float] = None
    swept: bool = True  # False when an untrusted discriminator was not applied to the remainder
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def unknown(self) -> np.ndarray:
        """Every packet judged unknown, as sorted indices."""
        return np.sort(np.concatenate([self.left, self.right]))

    def check(self, n: int) -> None:
        left, rem, right = set(self.left.tolist()), set(self.remainder.tolist()), set(self.right.tolist())
        assert not left & rem, "pre-filtered and remainder sets overlap"
        assert left | rem == set(range(n)), "pre-filtered and remainder sets do not cover the traffic"
        assert right <= rem, "swept packets lie outside the remainder"

    def summary(self) -> dict:
        return {"theta": self.threshold.theta, "epsilon": self.threshold.epsilon,
                "threshold_samples": self.threshold.sample_count, "traffic": len(self.left) + len(self.remainder),
                "prefiltered": len(self.left), "remainder": len(self.remainder), "swept": len(self.right),
                "discovered": len(self.left) + len(self.right), "fallback_threshold_only": self.fallback,
                "low_confidence_discriminator": self.low_confidence,
                "discriminator_holdout_accuracy": self.holdout_accuracy, "discriminator_applied": self.swept}


def compute_threshold(known_scores: Sequence[float], epsilon: float) -> ThresholdModel:
    """theta = nearest-rank (1 - epsilon) quantile of the known-class scores."""
    scores = np.sort(np.asarray(known_scores, dtype=np.float64))
    if scores.size == 0:
        raise ValidationError("cannot compute a threshold from an empty score set")
    if not (0.0 < epsilon <= 1.0):
        raise ValidationError(f"epsilon must lie in (0, 1], got {epsilon}")
    # round away float noise such as (1 - 0.75) * 4 = 1.0000000000000002
    rank = math.ceil(round((1.0 - epsilon) * scores.size, 9))
    return ThresholdModel(float(scores[max(rank, 1) - 1]), float(epsilon), int(scores.size))


def prefilter(scores: np.ndarray, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Split packet indices into (top score <= theta, top score > theta)."""
    scores = np.asarray(scores)
    low = scores <= theta
    return np.flatnonzero(low), np.flatnonzero(~low)


def prefilter_packets(vectors: np.ndarray, model: nn.NeuralModel, theta: float):
    """Score ``vectors`` with the classifier and split them; returns (left, right, scores)."""
    scores = score_set(model, vectors)
    left, right = prefilter(scores, theta)
    return left, right, scores


def build_discriminator(input_length: int, seed: int) -> nn.NeuralModel:
    rng = np.random.default_rng(seed)
    layers = [nn.init_dense(rng, input_length, FEATURE_WIDTH), nn.Layer("relu"),
              nn.init_dense(rng, FEATURE_WIDTH, 2), nn.Layer("softmax")]
    return nn.NeuralModel(layers, (input_length,), 2, 0, {"arch": "discriminator"})


def balanced_training_set(known: np.ndarray, unknown: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Downsample the larger side to the smaller one (seeded); label unknown as 1."""
    if len(known) == 0 or len(unknown) == 0:
        raise CannotTrainError("discriminator needs both known and pre-filtered unknown packets")
    n = min(len(known), len(unknown))
    rng = np.random.default_rng([seed, 0xD15C])
    k = known[np.sort(rng.choice(len(known), n, replace=False))] if len(known) > n else known
    u = unknown[np.sort(rng.choice(len(unknown), n, replace=False))] if len(unknown) > n else unknown
    x = np.concatenate([k, u])
    y = np.concatenate([np.zeros(len(k), dtype=np.int64), np.ones(len(u), dtype=np.int64)])
    return x, y


def holdout_split(n_per_class: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions (within one class block) kept for training and held out; seeded."""
    if n_per_class < MIN_PER_CLASS:
        return np.arange(n_per_class), np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng([seed, 0xD15D])
    order = rng.permutation(n_per_class)
    n_hold = max(1, int(round(HOLDOUT_FRACTION * n_per_class)))
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def train_discriminator(known: np.ndarray, unknown: np.ndarray, cfg: nn.TrainConfig) -> nn.NeuralModel:
    """Train the known(0)/unknown(1) MLP on a class-balanced sample.

    With at least ``MIN_PER_CLASS`` packets per side, a seeded fifth of each
    side is held out and the held-out accuracy lands in
    ``metadata['holdout_accuracy']``. Smaller samples train on everything and
    are flagged ``low_confidence``.
    """
    x, y = balanced_training_set(np.asarray(known), np.asarray(unknown), cfg.seed)
    n = len(y) // 2
    fit, hold = holdout_split(n, cfg.seed)
    fit_idx = np.concatenate([fit, n + fit])
    model = build_discriminator(x.shape[1], cfg.seed)
    model = nn.train(model, x[fit_idx], y[fit_idx], cfg)
    model.metadata["balanced_per_class"] = int(n)
    model.metadata["low_confidence"] = bool(n < MIN_PER_CLASS)
    if len(hold):
        hold_idx = np.concatenate([hold, n + hold])
        probs, _ = nn.forward(model, x[hold_idx])
        model.metadata["holdout_accuracy"] = float(np.mean(probs.argmax(axis=1) == y[hold_idx]))
    return model


def trusted(model: nn.NeuralModel) -> bool:
    """Whether a discriminator is good enough to sweep the high-confidence remainder."""
    acc = model.metadata.get("holdout_accuracy")
    return not model.metadata.get("low_confidence", False) and acc is not None and acc >= MIN_HOLDOUT_ACCURACY


def filter_remaining(vectors: np.ndarray, discriminator: nn.NeuralModel) -> np.ndarray:
    """Positions (into ``vectors``) the discriminator labels unknown."""
    if len(vectors) == 0:
        return np.zeros(0, dtype=np.int64)
    probs, _ = nn.forward(discriminator, vectors)
    return np.flatnonzero(probs.argmax(axis=1) == 1)


def discriminate(
    traffic: np.ndarray,
    known: np.ndarray,
    model: nn.NeuralModel,
    epsilon: float,
    cfg: nn.TrainConfig,
    known_scores: Optional[np.ndarray] = None,
) -> DiscriminationResult:
    """Run the full filter on packet vectors ``traffic``.

    ``known`` are the vectors of the classifier's current training set. The threshold
    is fitted on ``known_scores`` (held-out known-class scores) when given,
    otherwise on the scores of ``known`` itself.
    """
    traffic = np.asarray(traffic, dtype=np.float64)
    if known_scores is None:
        known_scores = score_set(model, known)
    threshold = compute_threshold(known_scores, epsilon)
    left, remainder, scores = prefilter_packets(traffic, model, threshold.theta)
    try:
        disc = train_discriminator(known, traffic[left], cfg)
    except CannotTrainError as exc:
        log.warning("%s; falling back to threshold-only filtering", exc)
        return DiscriminationResult(left, remainder, np.zeros(0, dtype=np.int64), threshold, None,
                                    fallback=True, swept=False, scores=scores)
    swept = trusted(disc)
    if swept:
        right = remainder[filter_remaining(traffic[remainder], disc)]
    else:
        # a discriminator that cannot tell its own held-out packets apart would only add noise
        log.warning("discriminator not trusted (per side %d, held-out accuracy %s); threshold-only filtering",
                    disc.metadata["balanced_per_class"], disc.metadata.get("holdout_accuracy"))
        right = np.zeros(0, dtype=np.int64)
    return DiscriminationResult(left, remainder, right, threshold, disc, fallback=False,
                                low_confidence=bool(disc.metadata["low_confidence"]),
                                holdout_accuracy=disc.metadata.get("holdout_accuracy"), swept=swept, scores=scores)


def discriminator_accuracy(discriminator: nn.NeuralModel, known: np.ndarray, unknown: np.ndarray) -> float:
    x = np.concatenate([known, unknown])
    y = np.concatenate([np.zeros(len(known)), np.ones(len(unknown))])
    probs, _ = nn.forward(discriminator, x)
    return float(np.mean(probs.argmax(axis=1) == y))
