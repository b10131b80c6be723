import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owtc import classifier, discriminator, nn, packets
from owtc.errors import CannotTrainError, ValidationError


def constant_discriminator(label):
    """A 2-way model that always predicts ``label`` (zero weights, biased head)."""
    model = discriminator.build_discriminator(1456, seed=0)
    for layer in model.layers:
        if layer.has_params:
            layer.weights[:] = 0
            layer.bias[:] = 0
    model.layers[model.final_dense].bias[label] = 5.0
    return model


class TestThreshold:
    def test_nearest_rank_example(self):
        assert discriminator.compute_threshold([0.2, 0.6, 0.9, 1.0], 0.75).theta == 0.2

    def test_rank_arithmetic(self):
        scores = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
        # ceil(0.3 * 10) = 3rd smallest; ceil(0.25 * 10) = 3rd smallest
        assert discriminator.compute_threshold(scores, 0.7).theta == 0.3
        assert discriminator.compute_threshold(scores, 0.75).theta == 0.3
        assert discriminator.compute_threshold(scores[::-1], 0.5).theta == 0.5

    def test_epsilon_one_is_minimum(self):
        scores = np.random.default_rng(0).random(50)
        th = discriminator.compute_threshold(scores, 1.0)
        assert th.theta == scores.min()
        assert not np.any(scores < th.theta)

    def test_constant_scores(self):
        for eps in [0.01, 0.5, 1.0]:
            assert discriminator.compute_threshold([0.9] * 7, eps).theta == 0.9

    def test_errors(self):
        with pytest.raises(ValidationError):
            discriminator.compute_threshold([], 0.5)
        for eps in [0.0, -0.1, 1.01]:
            with pytest.raises(ValidationError):
                discriminator.compute_threshold([0.5], eps)


class TestPrefilter:
    def test_extremes(self):
        scores = np.array([0.3, 0.99, 0.5, 1.0])
        left, right = discriminator.prefilter(scores, 0.0)
        assert len(left) == 0 and right.tolist() == [0, 1, 2, 3]
        left, right = discriminator.prefilter(scores, 1.0)
        assert left.tolist() == [0, 1, 2, 3] and len(right) == 0

    def test_boundary_goes_left(self):
        left, right = discriminator.prefilter(np.array([0.5, 0.6]), 0.5)
        assert left.tolist() == [0] and right.tolist() == [1]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=40), st.floats(0, 1), st.floats(0, 1))
    def test_monotone_and_partition(self, scores, a, b):
        scores = np.array(scores)
        lo, hi = sorted([a, b])
        left_lo, right_lo = discriminator.prefilter(scores, lo)
        left_hi, _ = discriminator.prefilter(scores, hi)
        assert set(left_lo) <= set(left_hi)
        assert sorted(np.concatenate([left_lo, right_lo]).tolist()) == list(range(len(scores)))


class TestDiscriminatorTraining:
    def test_balanced_downsample(self):
        known = np.zeros((30, 1456))
        unknown = np.ones((4, 1456))
        x, y = discriminator.balanced_training_set(known, unknown, seed=0)
        assert len(x) == 8 and y.tolist() == [0] * 4 + [1] * 4

    def test_empty_side(self):
        with pytest.raises(CannotTrainError):
            discriminator.train_discriminator(np.zeros((3, 1456)), np.zeros((0, 1456)), nn.TrainConfig(epochs=1))

    def test_single_unknown_is_low_confidence(self):
        rng = np.random.default_rng(0)
        model = discriminator.train_discriminator(rng.random((20, 1456)), rng.random((1, 1456)),
                                                  nn.TrainConfig(epochs=1))
        assert model.metadata["balanced_per_class"] == 1 and model.metadata["low_confidence"]

    def test_filter_constant_models(self):
        vectors = np.random.default_rng(1).random((9, 1456))
        assert len(discriminator.filter_remaining(vectors, constant_discriminator(0))) == 0
        assert discriminator.filter_remaining(vectors, constant_discriminator(1)).tolist() == list(range(9))

    def test_deterministic(self, trained):
        _, train, _, unknown = trained
        cfg = nn.TrainConfig(epochs=2, seed=9)
        a = discriminator.train_discriminator(train.vectors(), unknown.vectors(), cfg)
        b = discriminator.train_discriminator(train.vectors(), unknown.vectors(), cfg)
        assert nn.model_to_bytes(a) == nn.model_to_bytes(b)


class TestGate:
    def test_small_sample_not_applied(self, trained):
        model, train, held, _ = trained
        # threshold at the 2nd-lowest held-out score: a couple of known packets get pre-filtered
        result = discriminator.discriminate(held.vectors(), train.vectors(), model, 0.98,
                                            nn.TrainConfig(epochs=2, seed=1),
                                            known_scores=classifier.score_set(model, held.vectors()))
        assert 0 < len(result.left) < discriminator.MIN_PER_CLASS
        assert result.low_confidence and not result.swept and len(result.right) == 0
        assert result.discriminator is not None

    def test_holdout_split(self):
        fit, hold = discriminator.holdout_split(50, seed=3)
        assert len(hold) == 10 and not set(fit) & set(hold) and len(fit) + len(hold) == 50
        fit, hold = discriminator.holdout_split(5, seed=3)
        assert len(hold) == 0 and len(fit) == 5

    def test_indistinguishable_sides_are_rejected(self):
        rng = np.random.default_rng(0)
        noise = rng.random((200, 1456))
        model = discriminator.train_discriminator(noise[:100], noise[100:], nn.TrainConfig(epochs=3, seed=0))
        assert model.metadata["holdout_accuracy"] < discriminator.MIN_HOLDOUT_ACCURACY
        assert not discriminator.trusted(model)

    def test_separable_sides_are_trusted(self, trained):
        _, train, _, _ = trained
        unknown = packets.synth_generate(packets.default_profiles(6)[4:], 200, seed=3)
        model = discriminator.train_discriminator(train.vectors(), unknown.vectors(), nn.TrainConfig(epochs=10, seed=0))
        assert model.metadata["holdout_accuracy"] >= 0.85 and discriminator.trusted(model)

    def test_fallback_when_nothing_prefiltered(self, trained):
        model, train, held, _ = trained
        result = discriminator.discriminate(held.vectors()[:10], train.vectors(), model, 1.0,
                                            nn.TrainConfig(epochs=1), known_scores=np.zeros(5))
        assert result.fallback and result.discriminator is None
        assert len(result.left) == 0 and len(result.right) == 0
        result.check(10)
        assert result.summary()["fallback_threshold_only"]


class TestEpisodeFilter:
    """The filter on the default synthetic episode, re-run from its persisted artifacts."""

    @pytest.fixture(scope="class")
    @classmethod
    def rerun(cls, episode):
        report, out = episode
        model = nn.load_model(out / "classifier.ownn")
        traffic = packets.read_dataset(out / "traffic.owtc")
        train = packets.read_dataset(out / "train.owtc")
        val = packets.read_dataset(out / "validation.owtc")
        scores = classifier.score_set(model, val.vectors())
        eps = report["classifier"]["epsilon"]
        result = discriminator.discriminate(traffic.vectors(), train.vectors(), model, eps,
                                            nn.TrainConfig(epochs=10, seed=report["seed_stages"]["discriminator"]),
                                            known_scores=scores)
        return result, traffic.labels >= model.class_count, report, out

    def test_matches_persisted_indices(self, rerun):
        result, _, _, out = rerun
        saved = json.loads((out / "unknown_indices.json").read_text())
        assert saved["discovered"] == result.unknown.tolist() and saved["prefiltered"] == result.left.tolist()

    def test_partition(self, rerun):
        result, is_unknown, _, _ = rerun
        result.check(len(is_unknown))
        assert len(result.unknown) == len(result.left) + len(result.right)

    def test_prefilter_purity(self, rerun):
        result, is_unknown, _, _ = rerun
        assert is_unknown[result.left].mean() >= 0.8

    def test_recall_and_purity(self, rerun):
        result, is_unknown, _, _ = rerun
        p_n = result.unknown
        assert is_unknown[p_n].sum() / is_unknown.sum() >= 0.8
        assert is_unknown[p_n].mean() >= 0.8

    def test_discriminator_held_out_accuracy(self, rerun):
        result, _, _, _ = rerun
        assert result.swept and result.holdout_accuracy >= 0.85

    def test_unknown_only_traffic(self, rerun):
        result, is_unknown, _, _ = rerun
        # the unknown-only slice of the same traffic is caught almost entirely
        caught = np.isin(np.flatnonzero(is_unknown), result.unknown).mean()
        assert caught >= 0.8
