import numpy as np
import pytest

from aceseg import LabelError, MetricError
from aceseg.data import SceneDataset, SceneSpec, write_dataset
from aceseg.metrics import (
    ConfusionMatrix,
    evaluate_dataset,
    format_report,
    multiscale_predict,
    write_per_class_csv,
)
from aceseg.model import SegModel


class TestConfusionMatrix:
    def test_all_ignored_leaves_counts_unchanged(self):
        cm = ConfusionMatrix(3)
        cm.update(np.array([0, 1, 2]), np.array([255, 255, 255]))
        assert cm.total() == 0

    def test_perfect_prediction_is_diagonal(self):
        cm = ConfusionMatrix(3)
        labels = np.array([0, 1, 2, 1, 0])
        cm.update(labels, labels)
        assert np.all(cm.counts == np.diag([2, 2, 1]))
        assert cm.pix_acc() == 1.0
        assert cm.mean_iou() == 1.0

    def test_hand_counted_case(self):
        cm = ConfusionMatrix(2)
        cm.update(np.array([0, 0, 1, 1]), np.array([0, 0, 0, 1]))
        np.testing.assert_array_equal(cm.counts, [[2, 1], [0, 1]])
        assert cm.pix_acc() == 0.75
        np.testing.assert_allclose(cm.per_class_iou(), [2 / 3, 1 / 2])
        assert cm.mean_iou() == pytest.approx(7 / 12, abs=1e-12)

    def test_absent_class_excluded_from_mean(self):
        cm = ConfusionMatrix(3)
        cm.update(np.array([0, 1]), np.array([0, 1]))
        iou = cm.per_class_iou()
        assert np.isnan(iou[2])
        assert cm.mean_iou() == 1.0

    def test_out_of_range_prediction_rejected(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(LabelError):
            cm.update(np.array([2]), np.array([0]))

    def test_empty_matrix_has_no_metrics(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(MetricError):
            cm.pix_acc()

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 4, size=500)
        label = rng.integers(0, 4, size=500)
        cm = ConfusionMatrix(4).update(pred, label)
        perm = np.array([2, 0, 3, 1])
        cm_p = ConfusionMatrix(4).update(perm[pred], perm[label])
        assert cm.pix_acc() == pytest.approx(cm_p.pix_acc(), abs=1e-15)
        assert cm.mean_iou() == pytest.approx(cm_p.mean_iou(), abs=1e-12)

    def test_streamed_updates_equal_merged_batches(self):
        rng = np.random.default_rng(1)
        pred = rng.integers(0, 3, size=400)
        label = rng.integers(0, 3, size=400)
        whole = ConfusionMatrix(3).update(pred, label)
        parts = ConfusionMatrix(3).update(pred[:150], label[:150])
        parts.merge(ConfusionMatrix(3).update(pred[150:], label[150:]))
        np.testing.assert_array_equal(whole.counts, parts.counts)

    def test_report_and_csv(self, tmp_path):
        cm = ConfusionMatrix(2)
        cm.update(np.array([0, 0, 1, 1]), np.array([0, 0, 0, 1]))
        report = format_report(cm)
        assert report.startswith("pixAcc=0.750000 mIoU=0.583333")
        path = str(tmp_path / "iou.csv")
        write_per_class_csv(path, cm)
        lines = open(path).read().strip().splitlines()
        assert lines[0] == "class,iou"
        assert len(lines) == 3


@pytest.fixture(scope="module")
def tiny_model_and_data(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("scenes"))
    write_dataset(root, SceneSpec(canvas=32, classes=4, shapes=3,
                                  min_size=4, max_size=20, seed=9), 6)
    ds = SceneDataset(root)
    model = SegModel("ace", num_classes=4, backbone_channels=32, seed=2)
    model.eval()
    return model, ds


class TestMultiscale:
    def test_single_scale_equals_plain_forward(self, tiny_model_and_data):
        model, ds = tiny_model_and_data
        image, _ = ds.pair(0)
        plain = model.predict(image)
        ms = multiscale_predict(model, image, scales=[1.0], flip=False)
        np.testing.assert_array_equal(plain, ms)

    def test_duplicate_scales_idempotent(self, tiny_model_and_data):
        model, ds = tiny_model_and_data
        image, _ = ds.pair(1)
        once = multiscale_predict(model, image, scales=[1.0])
        twice = multiscale_predict(model, image, scales=[1.0, 1.0])
        np.testing.assert_array_equal(once, twice)

    def test_symmetric_input_flip_invariant(self, tiny_model_and_data):
        model, ds = tiny_model_and_data
        image, _ = ds.pair(2)
        sym = ((image + image[:, :, ::-1]) / 2).astype(np.float32)
        a = multiscale_predict(model, sym, scales=[1.0], flip=False)
        b = multiscale_predict(model, sym, scales=[1.0], flip=True)
        np.testing.assert_array_equal(a, b)

    def test_probabilities_average_to_unit_sum(self, tiny_model_and_data):
        model, ds = tiny_model_and_data
        image, _ = ds.pair(3)
        acc = None
        for s in (0.5, 1.0, 1.5):
            from aceseg.ops import resize_bilinear_array
            th = max(8, int(round(32 * s / 8)) * 8)
            scaled = resize_bilinear_array(image, th, th) if th != 32 else image
            probs = resize_bilinear_array(model.predict_probs(scaled), 32, 32)
            acc = probs if acc is None else acc + probs
        acc /= 3
        np.testing.assert_allclose(acc.sum(axis=0), np.ones((32, 32)), atol=1e-5)

    def test_empty_scales_rejected(self, tiny_model_and_data):
        model, ds = tiny_model_and_data
        image, _ = ds.pair(0)
        with pytest.raises(MetricError):
            multiscale_predict(model, image, scales=[])

    def test_evaluate_dataset_counts_every_pixel(self, tiny_model_and_data):
        model, ds = tiny_model_and_data
        cm = evaluate_dataset(model, ds, [0, 1, 2])
        assert cm.total() == 3 * 32 * 32
