import numpy as np
import pytest

from owtc import classifier, nn, packets, updater
from owtc.classifier import ArchitectureSpec
from owtc.errors import DimensionError, ValidationError


@pytest.fixture(scope="module")
def merged(trained):
    _, train, _, unknown = trained
    clusters = (unknown.labels - 4).astype(np.int64)
    return updater.merge_dataset(train, unknown, clusters), len(train), len(unknown)


class TestMerge:
    def test_counts_and_labels(self, merged, trained):
        d, n_old, n_new = merged
        assert len(d) == n_old + n_new
        assert d.class_count == 6 and d.labels.max() == 5
        np.testing.assert_array_equal(d.labels[:n_old], trained[1].labels)
        assert d.class_names[4] == "discovered-0" and d.class_names[0] == "app0"

    def test_nine_known_two_discovered(self):
        known_set = packets.synth_generate(packets.default_profiles(9), 3, seed=0)
        new = packets.synth_generate(packets.default_profiles(2), 3, seed=1)
        d = updater.merge_dataset(known_set, new, [0, 1, 0, 1, 0, 1])
        assert d.class_count == 11

    def test_empty_discovery_is_identity(self, trained):
        train = trained[1]
        empty = train.subset(np.zeros(0, dtype=np.int64))
        assert updater.merge_dataset(train, empty, []).equals(train)

    def test_errors(self, trained):
        _, train, _, unknown = trained
        with pytest.raises(DimensionError):
            updater.merge_dataset(train, unknown, [0, 1])
        with pytest.raises(ValidationError):
            updater.merge_dataset(train, unknown, np.full(len(unknown), 1))


class TestPlan:
    def test_fields(self):
        plan = updater.make_plan(4, 2, nn.TrainConfig(learning_rate=0.02, epochs=7))
        assert plan.total_classes == 6 and plan.new_classes == 2
        assert plan.label_map == {0: 4, 1: 5}
        assert plan.cfg.learning_rate == pytest.approx(0.002) and plan.cfg.epochs == 7

    def test_invalid(self):
        with pytest.raises(ValidationError):
            updater.UpdatePlan(4, 3, nn.TrainConfig())
        with pytest.raises(ValidationError):
            updater.UpdatePlan(4, 6, nn.TrainConfig(), {0: 4, 1: 7})


class TestBalance:
    def test_mean_class_size(self):
        labels = np.array([0] * 10 + [1] * 30 + [2] * 20)
        keep = updater.balanced_indices(labels, seed=0)
        assert np.bincount(labels[keep]).tolist() == [20, 20, 20]
        # small classes keep every packet, large ones are subsampled without repeats
        assert set(np.flatnonzero(labels == 0)) <= set(keep)
        big = keep[labels[keep] == 1]
        assert len(set(big)) == len(big)

    def test_seeded(self):
        labels = np.repeat([0, 1], [5, 50])
        np.testing.assert_array_equal(updater.balanced_indices(labels, 3), updater.balanced_indices(labels, 3))


class TestResize:
    def test_migration_is_bit_exact(self, trained):
        model = trained[0]
        wide = updater.resize_output(model, 6, seed=0)
        assert wide.class_count == 6
        for old, new in zip(model.layers[:model.final_dense], wide.layers[:wide.final_dense]):
            if old.has_params:
                assert old.weights.tobytes() == new.weights.tobytes() and old.bias.tobytes() == new.bias.tobytes()
        last_old, last_new = model.layers[model.final_dense], wide.layers[wide.final_dense]
        np.testing.assert_array_equal(last_new.weights[:, :4], last_old.weights)
        np.testing.assert_array_equal(last_new.bias[4:], 0)

    def test_zero_epochs_renormalized_equal(self, trained, merged):
        model, _, held, _ = trained
        plan = updater.make_plan(4, 2, nn.TrainConfig(epochs=0, seed=1))
        new = updater.transfer_update(model, merged[0], plan)
        x = held.vectors()[:30]
        before, _ = nn.forward(model, x)
        after, _ = nn.forward(new, x)
        head = after[:, :4] / after[:, :4].sum(axis=1, keepdims=True)
        np.testing.assert_allclose(head, before, atol=1e-12)

    def test_no_new_classes_keeps_architecture(self, trained):
        model, train, _, _ = trained
        plan = updater.make_plan(4, 0, nn.TrainConfig(epochs=0))
        same = updater.transfer_update(model, train, plan)
        assert classifier.spec_of(same) == classifier.spec_of(model) and same.class_count == 4
        assert nn.model_to_bytes(updater.resize_output(model, 4, 0)) == nn.model_to_bytes(model)

    def test_cannot_shrink(self, trained):
        with pytest.raises(DimensionError):
            updater.resize_output(trained[0], 3, seed=0)


class TestTransfer:
    @pytest.fixture(scope="class")
    @classmethod
    def updated(cls, trained, merged):
        plan = updater.make_plan(4, 2, nn.TrainConfig(epochs=3, seed=5), lr_scale=0.3)
        return updater.transfer_update(trained[0], merged[0], plan)

    def test_learns_new_classes(self, updated, trained):
        _, _, held, _ = trained
        new_test = packets.synth_generate(packets.default_profiles(6)[4:], 40, seed=11)
        new_test = packets.LabeledDataset(new_test.payload, new_test.labels + 4, new_test.lengths)
        assert classifier.accuracy(updated, new_test) >= 0.85
        # short fine-tune on a small fixture; the 5-point bound is checked at episode scale
        assert classifier.accuracy(updated, held) >= 0.8

    def test_metadata(self, updated):
        assert updated.class_count == 6 and updated.metadata["updated_from_classes"] == 4
        assert updated.metadata["class_names"]["5"] == "discovered-1"

    def test_deterministic(self, trained, merged, updated):
        plan = updater.make_plan(4, 2, nn.TrainConfig(epochs=3, seed=5), lr_scale=0.3)
        assert nn.model_to_bytes(updater.transfer_update(trained[0], merged[0], plan)) == nn.model_to_bytes(updated)

    def test_errors(self, trained, merged):
        model = trained[0]
        with pytest.raises(DimensionError):
            updater.transfer_update(model, merged[0], updater.make_plan(5, 1, nn.TrainConfig(epochs=0)))
        with pytest.raises(ValidationError):
            updater.transfer_update(model, merged[0], updater.make_plan(4, 1, nn.TrainConfig(epochs=0)))


class TestRetrain:
    def test_independent_of_old_weights(self, merged):
        cfg = nn.TrainConfig(epochs=1, seed=2)
        a = updater.retrain_from_scratch(ArchitectureSpec("mlp"), merged[0], cfg)
        b = updater.retrain_from_scratch(ArchitectureSpec("mlp"), merged[0], cfg)
        assert a.class_count == 6 and nn.model_to_bytes(a) == nn.model_to_bytes(b)
