import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepfusion import metrics
from deepfusion.metrics import BinaryMask


def block(shape, r0, r1, c0, c1):
    m = np.zeros(shape, bool)
    m[r0:r1, c0:c1] = True
    return m


def test_dice_examples():
    a = block((6, 6), 1, 3, 1, 3)
    assert metrics.dice(a, a) == 1
    assert metrics.dice(a, block((6, 6), 4, 6, 4, 6)) == 0
    assert metrics.dice(a, block((6, 6), 1, 3, 2, 4)) == 0.5
    empty = np.zeros((6, 6), bool)
    assert metrics.dice(empty, empty) == 1 and metrics.dice(empty, a) == 0


def test_hausdorff_examples():
    a, b = np.zeros((5, 5), bool), np.zeros((5, 5), bool)
    a[0, 0], b[3, 4] = True, True
    assert metrics.hausdorff_mm(a, a) == 0
    assert metrics.hausdorff_mm(BinaryMask(a), BinaryMask(b)) == 5.0
    assert metrics.hausdorff_mm(BinaryMask(a, (2, 2)), BinaryMask(b, (2, 2))) == 10.0
    with pytest.raises(metrics.UndefinedDistanceError):
        metrics.hausdorff_mm(a, np.zeros((5, 5), bool))


def test_contour_is_eight_connected_boundary():
    m = block((7, 7), 1, 6, 1, 6)
    c = metrics.contour(m).mask
    assert c.sum() == 16 and not c[2:5, 2:5].any()
    full = np.ones((3, 3), bool)
    assert metrics.contour(full).mask.sum() == 8


def test_apd_examples():
    sq = metrics.contour(block((20, 20), 5, 15, 5, 15))
    assert metrics.apd_mm(sq, sq) == 0
    assert metrics.good_percentage([metrics.apd_mm(sq, sq)]) == 100
    outer = metrics.contour(block((20, 20), 2, 18, 2, 18))
    assert abs(metrics.apd_mm(sq, outer) - 3) < 0.5


def test_apd_against_brute_force(rng):
    a = metrics.contour(rng.random((12, 12)) > 0.5)
    b = metrics.contour(rng.random((12, 12)) > 0.5)
    pa, pb = np.argwhere(a.mask), np.argwhere(b.mask)
    d = np.sqrt(((pa[:, None] - pb[None]) ** 2).sum(-1))
    expected = np.concatenate([d.min(1), d.min(0)]).mean()
    assert abs(metrics.apd_mm(a, b) - expected) < 1e-12
    assert metrics.apd_mm(a, b) == metrics.apd_mm(b, a)


def test_good_percentage():
    assert round(metrics.good_percentage([1, 6, 4]), 2) == 66.67


def random_pair(seed, shape=(16, 16)):
    r = np.random.default_rng(seed)
    a, b = r.random(shape) > 0.6, r.random(shape) > 0.6
    a[r.integers(shape[0]), r.integers(shape[1])] = True
    b[r.integers(shape[0]), r.integers(shape[1])] = True
    return a, b


def test_spacing_linearity_50_pairs():
    for seed in range(50):
        a, b = random_pair(seed)
        s = 0.5 + 2.5 * np.random.default_rng(seed + 1000).random()
        hd1 = metrics.hausdorff_mm(BinaryMask(a), BinaryMask(b))
        hds = metrics.hausdorff_mm(BinaryMask(a, (s, s)), BinaryMask(b, (s, s)))
        assert hds == pytest.approx(s * hd1, rel=1e-12)
        ap1 = metrics.apd_mm(metrics.contour(BinaryMask(a)), metrics.contour(BinaryMask(b)))
        aps = metrics.apd_mm(metrics.contour(BinaryMask(a, (s, s))), metrics.contour(BinaryMask(b, (s, s))))
        assert aps == pytest.approx(s * ap1, rel=1e-12)
        assert metrics.dice(BinaryMask(a, (s, s)), BinaryMask(b, (s, s))) == metrics.dice(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_symmetry(seed):
    a, b = random_pair(seed, (10, 9))
    d = metrics.dice(a, b)
    assert 0 <= d <= 1 and d == metrics.dice(b, a)
    assert metrics.hausdorff_mm(a, b) == metrics.hausdorff_mm(b, a) >= 0
    assert (metrics.hausdorff_mm(a, b) == 0) == bool(np.array_equal(a, b))


def test_evaluate_run_examples(rng):
    truth = block((12, 12), 3, 9, 3, 9)
    rep = metrics.evaluate_run({"s0": truth}, {"s0": truth}, (1.0, 1.0))
    assert rep.subjects[0].dice == 1.0 and rep.subjects[0].hd_mm == 0
    assert rep.summary()["dice"] == (1.0, 0.0)

    preds, truths = {}, {}
    for i in range(4):
        truths[f"s{i}"] = np.stack([truth, truth])
        preds[f"s{i}"] = np.stack([block((12, 12), 3 + i % 2, 9, 3, 9 + i // 2), truth])
    rep = metrics.evaluate_run(preds, truths, {k: (1.25, 1.25) for k in preds}, slice_mm=2.0)
    assert len(rep.subjects) == 4
    csv_rows = rep.to_csv().strip().splitlines()
    assert len(csv_rows) == 1 + 4 + 2
    cols = np.array([[float(x) for x in row.split(",")[1:]] for row in csv_rows[1:5]])
    mean = [float(x) for x in csv_rows[5].split(",")[1:]]
    std = [float(x) for x in csv_rows[6].split(",")[1:]]
    np.testing.assert_allclose(mean, cols.mean(axis=0), atol=1e-5)
    np.testing.assert_allclose(std, cols.std(axis=0), atol=1e-5)
    with pytest.raises(ValueError, match="unmatched"):
        metrics.evaluate_run({"a": truth}, {"b": truth}, (1, 1))


def test_spacing_must_be_positive():
    with pytest.raises(ValueError):
        BinaryMask(np.zeros((2, 2)), (0.0, 1.0))
