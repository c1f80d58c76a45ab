import numpy as np
import pytest

from hyperseg.metrics import REPORT_COLUMNS, ConfusionMatrix, accumulate, compute, report_csv, report_row

from oracles import scalar_metrics

NAMES2 = ("a", "b")


def cm_of(counts, names=None):
    counts = np.asarray(counts, dtype=np.int64)
    return ConfusionMatrix(counts, names or tuple(f"c{i}" for i in range(len(counts))))


def test_identical_masks_are_diagonal():
    labels = np.random.default_rng(0).integers(0, 4, size=(6, 7))
    cm = accumulate(ConfusionMatrix.empty(["c0", "c1", "c2", "c3"]), labels, labels)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    np.testing.assert_array_equal(np.diag(cm.counts), np.bincount(labels.ravel(), minlength=4))


def test_hand_counted_pair():
    cm = accumulate(ConfusionMatrix.empty(NAMES2), np.array([[1], [0]]), np.array([[0], [0]]))
    np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 0]])


def test_tally_matches_loop():
    rng = np.random.default_rng(1)
    t, p = rng.integers(0, 5, size=(9, 11)), rng.integers(0, 5, size=(9, 11))
    expected = np.zeros((5, 5), dtype=np.int64)
    for a, b in zip(t.ravel(), p.ravel()):
        expected[a, b] += 1
    np.testing.assert_array_equal(accumulate(ConfusionMatrix.empty(list("abcde")), p, t).counts, expected)


def test_worked_two_class_example():
    rep = compute(cm_of([[3, 1], [2, 4]], NAMES2), include_background=True)
    assert rep.per_class_iou == pytest.approx((0.5, 4 / 7), abs=1e-15)
    assert rep.miou == pytest.approx((0.5 + 4 / 7) / 2, abs=1e-15)
    assert round(rep.miou, 4) == 0.5357
    assert rep.accuracy == 0.7


def test_background_excluded_by_default():
    rep = compute(cm_of([[3, 1], [2, 4]], NAMES2))
    assert rep.included == (False, True) and rep.miou == pytest.approx(4 / 7)
    assert rep.accuracy == 0.7


def test_absent_class_excluded():
    counts = [[5, 0, 1], [0, 0, 0], [2, 0, 3]]
    rep = compute(cm_of(counts))
    assert rep.included == (False, False, True)
    assert rep.miou == pytest.approx(3 / 6)


def test_empty_matrix_rejected():
    with pytest.raises(ValueError):
        compute(ConfusionMatrix.empty(NAMES2))


def test_permutation_equivariance():
    rng = np.random.default_rng(2)
    counts = rng.integers(0, 50, size=(5, 5))
    perm = rng.permutation(5)
    base = compute(cm_of(counts), include_background=True)
    moved = compute(cm_of(counts[np.ix_(perm, perm)]), include_background=True)
    assert moved.miou == pytest.approx(base.miou, abs=1e-12)
    assert moved.accuracy == pytest.approx(base.accuracy, abs=1e-12)
    assert np.allclose(np.array(moved.per_class_iou), np.array(base.per_class_iou)[perm])


def test_additivity():
    rng = np.random.default_rng(3)
    names = ["c0", "c1", "c2"]
    masks = [(rng.integers(0, 3, size=(4, 5)), rng.integers(0, 3, size=(4, 5))) for _ in range(3)]
    whole = ConfusionMatrix.empty(names)
    for p, t in masks:
        whole = accumulate(whole, p, t)
    parts = [accumulate(ConfusionMatrix.empty(names), p, t) for p, t in masks]
    assert parts[0] + parts[1] + parts[2] == whole


@pytest.mark.parametrize("include_background", [False, True])
def test_random_matrices_match_scalar_oracle(include_background):
    rng = np.random.default_rng(4)
    for _ in range(100):
        c = int(rng.integers(2, 7))
        counts = rng.integers(0, 20, size=(c, c)) * (rng.random((c, c)) < 0.7)
        counts[1, 1] += 1  # keep at least one non-background class present
        expected = scalar_metrics(counts.tolist(), include_background)
        rep = compute(cm_of(counts), include_background)
        for key, value in expected.items():
            assert getattr(rep, key) == pytest.approx(value, abs=1e-12), key


def test_accumulate_errors():
    with pytest.raises(ValueError, match="size"):
        accumulate(ConfusionMatrix.empty(NAMES2), np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(ValueError, match="outside"):
        accumulate(ConfusionMatrix.empty(NAMES2), np.full((2, 2), 2), np.zeros((2, 2), int))
    with pytest.raises(ValueError):
        ConfusionMatrix.empty(NAMES2) + ConfusionMatrix.empty(("x", "y"))


def test_report_formatting():
    rep = compute(cm_of([[3, 1], [2, 4]], NAMES2), include_background=True)
    row = report_row("e1", 76, "VGG-style", "U-Net", rep)
    assert row[-2:] == ["0.700000", "0.535714"]
    text = report_csv([row])
    assert text.splitlines()[0] == ",".join(REPORT_COLUMNS)
    assert report_csv([]) == ",".join(REPORT_COLUMNS) + "\n"


def test_confusion_csv():
    text = cm_of([[3, 1], [2, 4]], NAMES2).to_csv()
    assert text == "truth\\pred,a,b\na,3,1\nb,2,4\n"


def test_two_by_one_example():
    cm = accumulate(ConfusionMatrix.empty(NAMES2), np.array([[1], [1]]), np.array([[0], [1]]))
    assert cm.counts[0, 1] == 1 and cm.counts[1, 1] == 1 and cm.total == 2


@pytest.mark.parametrize("include_background", [False, True])
def test_perfect_prediction_scores_one(include_background):
    labels = np.random.default_rng(5).integers(0, 4, size=(8, 8))
    rep = compute(accumulate(ConfusionMatrix.empty(list("abcd")), labels, labels), include_background)
    assert (rep.precision, rep.recall, rep.f1, rep.accuracy, rep.miou) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_miou_is_mean_of_included_ious():
    rng = np.random.default_rng(6)
    for _ in range(20):
        rep = compute(cm_of(rng.integers(0, 9, size=(5, 5))))
        included = [v for v, keep in zip(rep.per_class_iou, rep.included) if keep]
        assert rep.miou == float(np.mean(included))
        assert all(0.0 <= v <= 1.0 for v in (rep.precision, rep.recall, rep.f1, rep.accuracy, rep.miou))
