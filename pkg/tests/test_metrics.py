import numpy as np
import pytest

from conftest import brute_classify, brute_pr_curve, brute_seg_metrics
from defectnet.metrics import classify_metrics, confusion_matrix, pr_curve, seg_metrics, select_operating_point


class TestSegMetrics:
    def test_identity(self, rng):
        gt = (rng.uniform(size=(8, 8)) > 0.5).astype(np.uint8)
        m = seg_metrics(gt, gt)
        assert m["pixel_acc"] == m["mean_acc"] == m["mean_iu"] == 1.0

    def test_complement(self, rng):
        gt = (rng.uniform(size=(8, 8)) > 0.5).astype(np.uint8)
        assert seg_metrics(1 - gt, gt)["pixel_acc"] == 0.0

    def test_four_by_four(self):
        gt = np.zeros((4, 4), np.uint8)
        gt[1:3, 1:3] = 1
        pred = np.zeros_like(gt)
        pred[1, 1:3] = 1
        pred[3, 3] = 1
        oracle = brute_seg_metrics(pred, gt)
        m = seg_metrics(pred, gt)
        assert oracle["pixel_acc"] == m["pixel_acc"] == 13 / 16
        assert oracle["mean_acc"] == m["mean_acc"] == pytest.approx(0.7083, abs=1e-4)
        assert oracle["mean_iu"] == m["mean_iu"] == pytest.approx(0.5929, abs=1e-4)
        assert m["confusion"] == [[11, 1], [2, 2]]

    def test_absent_class_excluded(self):
        gt = np.zeros((3, 3), np.uint8)
        pred = gt.copy()
        pred[0, 0] = 1
        m = seg_metrics(pred, gt)
        assert m["mean_acc"] == pytest.approx(8 / 9) and m["mean_iu"] == pytest.approx(8 / 9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            confusion_matrix(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_random_100_against_oracle(self, rng):
        for _ in range(100):
            shape = tuple(rng.integers(1, 12, 2))
            gt = (rng.uniform(size=shape) < rng.uniform()).astype(np.uint8)
            pred = (rng.uniform(size=shape) < rng.uniform()).astype(np.uint8)
            m, o = seg_metrics(pred, gt), brute_seg_metrics(pred, gt)
            for k in o:
                assert m[k] == o[k], k
            assert np.asarray(m["confusion"]).sum() == gt.size


def _random_scores(rng):
    n = int(rng.integers(2, 30))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = np.round(rng.uniform(size=n), int(rng.integers(1, 3)))  # rounding forces ties
    return scores, labels


class TestImageMetrics:
    def test_perfect_separation(self):
        pts = pr_curve([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert (0.8, 1.0, 1.0) in pts

    def test_all_equal(self):
        assert pr_curve([0.5] * 5, [1, 0, 0, 1, 0]) == [(0.5, 0.4, 1.0)]

    def test_six_mixed(self):
        scores, labels = [0.9, 0.8, 0.8, 0.4, 0.3, 0.1], [1, 0, 1, 1, 0, 0]
        assert pr_curve(scores, labels) == brute_pr_curve(scores, labels)

    def test_recall_nondecreasing(self, rng):
        for _ in range(20):
            pts = pr_curve(*_random_scores(rng))
            rec = [r for _, _, r in pts]
            assert rec == sorted(rec)
            thr = [t for t, _, _ in pts]
            assert thr == sorted(thr, reverse=True) and len(set(thr)) == len(thr)

    def test_threshold_zero(self):
        m = classify_metrics([0.1, 0.5, 0.7], [0, 1, 1], 0.0)
        assert m["recall"] == 1.0 and m["fp"] == 1

    def test_threshold_above_max(self):
        m = classify_metrics([0.1, 0.5, 0.7], [0, 1, 0], 0.9)
        assert m["recall"] == 0.0 and m["accuracy"] == pytest.approx(2 / 3)

    def test_random_20(self, rng):
        scores, labels = rng.uniform(size=20), np.r_[0, 1, rng.integers(0, 2, 18)]
        m, o = classify_metrics(scores, labels, 0.5), brute_classify(scores, labels, 0.5)
        for k in o:
            assert m[k] == o[k]

    def test_random_100_against_oracle(self, rng):
        for _ in range(100):
            scores, labels = _random_scores(rng)
            assert pr_curve(scores, labels) == brute_pr_curve(scores, labels)
            thr = float(rng.uniform())
            m, o = classify_metrics(scores, labels, thr), brute_classify(scores, labels, thr)
            for k in o:
                assert m[k] == o[k], k

    @pytest.mark.parametrize("labels", [[0, 0, 0], [1, 1, 1]])
    def test_degenerate(self, labels):
        with pytest.raises(ValueError):
            pr_curve([0.1, 0.2, 0.3], labels)
        with pytest.raises(ValueError):
            classify_metrics([0.1, 0.2, 0.3], labels, 0.5)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            pr_curve([0.1, 0.2], [0, 1, 1])
        with pytest.raises(ValueError):
            pr_curve([0.1, 0.2], [0, 2])


class TestOperatingPoint:
    def test_separable(self):
        assert select_operating_point([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 0.8

    def test_maximizes_f1(self, rng):
        for _ in range(30):
            scores, labels = _random_scores(rng)
            thr = select_operating_point(scores, labels)
            best = max(brute_classify(scores, labels, t)["f1"] for t, _, _ in brute_pr_curve(scores, labels))
            assert brute_classify(scores, labels, thr)["f1"] == best

    def test_ties_prefer_lower_threshold(self):
        # thresholds 0.9 and 0.6 both reach the best F1 of 2/3; the lower one misses fewer defects
        scores, labels = [0.9, 0.8, 0.7, 0.6], [1, 0, 0, 1]
        f1 = {t: brute_classify(scores, labels, t)["f1"] for t in scores}
        assert f1[0.9] == f1[0.6] == max(f1.values())
        assert select_operating_point(scores, labels) == 0.6
