import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepfusion import feature_net as fn
from deepfusion import kernels, nlplf
from deepfusion.feature_net import Image, LabelMap
from deepfusion.gradcheck import numeric_grad, rel_error
from deepfusion.nlplf import Atlas, SearchWindow

from oracles import fusion_loops

BACKENDS = [kernels.python_backend] + ([kernels.compiled_backend] if kernels.compiled_backend else [])
BACKEND_IDS = ["python", "compiled"][: len(BACKENDS)]


def soft(rng, shape, c=2):
    return rng.dirichlet(np.ones(c), size=shape)


def test_shift_identity(rng):
    x = rng.random((4, 5, 2))
    out, valid = nlplf.shift(x, (0, 0))
    np.testing.assert_array_equal(out, x)
    assert valid.all()


def test_shift_moves_rows_down():
    x = np.arange(9.0).reshape(3, 3, 1)
    out, valid = nlplf.shift(x, (1, 0))
    np.testing.assert_array_equal(out[1:, :, 0], x[:2, :, 0])
    assert not valid[0].any() and valid[1:].all()


@settings(max_examples=40, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(0, 99))
def test_shift_inverse_pair(u, v, seed):
    x = np.random.default_rng(seed).random((6, 7, 2))
    once, m1 = nlplf.shift(x, (u, v))
    back, m2 = nlplf.shift(once, (-u, -v))
    both = m2 & nlplf.shift(m1[:, :, None].astype(float), (-u, -v))[0][:, :, 0].astype(bool)
    np.testing.assert_array_equal(back[both], x[both])


def test_distance_examples(rng):
    f = rng.random((5, 5, 3))
    dist, valid = nlplf.distance_field(f, f, SearchWindow(1))
    centre = SearchWindow(1).shifts.index((0, 0))
    assert np.all(dist[centre] == 0)
    const, _ = nlplf.distance_field(f, f + 0.25, SearchWindow(0))
    np.testing.assert_allclose(const[0], 3 * 0.25**2)


def test_distance_matches_direct_pairs(rng):
    """Distance via shifted maps equals the pairwise distance to q = p - alpha."""
    ft, fa = rng.random((5, 5, 3)), rng.random((5, 5, 3))
    window = SearchWindow(1)
    dist, valid = nlplf.distance_field(ft, fa, window)
    for s, (u, v) in enumerate(window.shifts):
        for i in range(5):
            for j in range(5):
                qi, qj = i - u, j - v
                inside = 0 <= qi < 5 and 0 <= qj < 5
                assert valid[s, i, j] == inside
                if inside:
                    assert abs(dist[s, i, j] - ((ft[i, j] - fa[qi, qj]) ** 2).sum()) < 1e-6
                else:
                    assert dist[s, i, j] == np.inf


def test_weight_examples(rng):
    window = SearchWindow(1)
    ones = np.ones((9, 4, 4))
    _, valid = nlplf.distance_field(np.zeros((4, 4, 1)), np.zeros((4, 4, 1)), window)
    wf = nlplf.weight_field([(np.where(valid, ones, np.inf), valid)] * 3)
    n_valid = valid.sum(axis=0)
    np.testing.assert_allclose(wf.weights.sum(axis=(0, 1)), 1)
    for k in range(3):
        np.testing.assert_allclose(wf.weights[k][valid], np.broadcast_to(1 / (3 * n_valid), valid.shape)[valid])
    assert np.all(wf.weights[:, ~valid] == 0)

    d = np.where(valid, 1e6, np.inf)
    d[4] = 0
    wf = nlplf.weight_field([(d, valid)])
    assert np.all(np.abs(wf.weights[0, 4] - 1) < 1e-9)


def test_weights_against_loops(rng):
    ft, fa = rng.random((4, 4, 2)), rng.random((2, 4, 4, 2))
    labels = soft(rng, (2, 4, 4))
    wf = nlplf.weight_field([nlplf.distance_field(ft, fa[k], SearchWindow(1)) for k in range(2)])
    _, w_ref = fusion_loops(ft, fa, labels, 1)
    np.testing.assert_allclose(wf.weights, w_ref, atol=1e-6)


def test_softmax_translation_invariance(rng):
    valid = np.ones((9, 3, 3), bool)
    d = [(rng.random((9, 3, 3)) * 5, valid) for _ in range(2)]
    c = rng.random((3, 3)) * 100
    a = nlplf.weight_field(d).weights
    b = nlplf.weight_field([(x + c, m) for x, m in d]).weights
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_vote_examples(rng):
    window = SearchWindow(1)
    labels = soft(rng, (2, 4, 4))
    shifted = np.stack([nlplf.shift_stack(l, window)[0] for l in labels])
    w = np.zeros((2, 9, 4, 4))
    w[1, window.shifts.index((0, 0))] = 1
    out = nlplf.vote(nlplf.WeightField(w, np.ones_like(w, bool)), shifted)
    np.testing.assert_allclose(out, labels[1])

    same = np.stack([labels[0], labels[0]])
    rw = rng.random((2, 1, 4, 4))
    rw /= rw.sum(axis=(0, 1))
    shifted = np.stack([nlplf.shift_stack(l, SearchWindow(0))[0] for l in same])
    np.testing.assert_allclose(nlplf.vote(nlplf.WeightField(rw, rw > 0), shifted), labels[0])


@pytest.mark.parametrize("impl", BACKENDS, ids=BACKEND_IDS)
def test_fusion_against_loops(rng, impl):
    for _ in range(10):
        h, w = rng.integers(3, 9, size=2)
        k, t, d = int(rng.integers(1, 4)), int(rng.integers(0, 3)), int(rng.integers(1, 4))
        ft, fa = rng.random((h, w, d)), rng.random((k, h, w, d))
        labels = soft(rng, (k, h, w))
        pred, weights = kernels.fuse_forward(ft, fa, labels, t, impl=impl)
        p_ref, w_ref = fusion_loops(ft, fa, labels, t)
        np.testing.assert_allclose(pred, p_ref, atol=1e-6)
        np.testing.assert_allclose(weights, w_ref, atol=1e-6)
        layered, _ = nlplf.fuse_layers(ft, list(fa), list(labels), SearchWindow(t))
        np.testing.assert_allclose(layered, p_ref, atol=1e-6)


def test_backends_agree(rng):
    if kernels.compiled_backend is None:
        pytest.skip("compiled kernels not built")
    ft, fa = rng.random((9, 10, 4)), rng.random((3, 9, 10, 4))
    labels = soft(rng, (3, 9, 10))
    g = rng.normal(size=(9, 10, 2))
    out = []
    for impl in BACKENDS:
        pred, wts = kernels.fuse_forward(ft, fa, labels, 2, impl=impl)
        out.append((pred, wts) + tuple(kernels.fuse_backward(ft, fa, labels, wts, 2, g, impl=impl)))
    for a, b in zip(*out):
        np.testing.assert_allclose(a, b, atol=1e-10)


@pytest.mark.parametrize("impl", BACKENDS, ids=BACKEND_IDS)
def test_kernel_backward_finite_differences(rng, impl):
    ft, fa = rng.random((5, 6, 2)), rng.random((2, 5, 6, 2))
    labels = soft(rng, (2, 5, 6))
    r = rng.normal(size=(5, 6, 2))
    f = lambda: float((kernels.fuse_forward(ft, fa, labels, 1, impl=impl)[0] * r).sum())
    _, wts = kernels.fuse_forward(ft, fa, labels, 1, impl=impl)
    gt, ga = kernels.fuse_backward(ft, fa, labels, wts, 1, r, impl=impl)
    assert rel_error(gt, numeric_grad(f, ft)) < 1e-5
    assert rel_error(ga, numeric_grad(f, fa)) < 1e-5


def test_loss_examples():
    p = np.array([[[0.2, 0.8]]])
    for kind in ("l2", "l1"):
        value, grad = nlplf.loss(p, p, kind)
        assert value == 0 and not grad.any()
    value, _ = nlplf.loss(np.array([[[1.0, 0.0]]]), np.array([[[0.0, 1.0]]]), "l2")
    assert value == 2
    with pytest.raises(ValueError):
        nlplf.loss(p, p, "cross_entropy")


@pytest.mark.parametrize("kind", nlplf.LOSS_KINDS)
def test_loss_gradients(rng, kind):
    pred = soft(rng, (4, 3), 3)
    truth = soft(rng, (4, 3), 3)
    if kind == "hinge":
        # keep every margin away from its kink at zero
        truth = np.round(truth)
    _, grad = nlplf.loss(pred, truth, kind)
    f = lambda: nlplf.loss(pred, truth, kind)[0]
    assert rel_error(grad, numeric_grad(f, pred, 1e-6)) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_normalization_invariants(seed):
    r = np.random.default_rng(seed)
    h, w = r.integers(2, 9, size=2)
    k, t = int(r.integers(1, 4)), int(r.integers(0, 3))
    ft, fa = r.random((h, w, 3)) * 3, r.random((k, h, w, 3)) * 3
    labels = soft(r, (k, h, w), 3)
    pred, wts = kernels.fuse_forward(ft, fa, labels, t)
    np.testing.assert_allclose(wts.sum(axis=(0, 1)), 1, atol=1e-5)
    assert pred.min() >= 0 and pred.max() <= 1 + 1e-12
    np.testing.assert_allclose(pred.sum(axis=-1), 1, atol=1e-5)


def test_zero_net_plain_average(rng):
    params = fn.init_params((2,), 3).zeros_like()
    target = Image(rng.random((8, 8)))
    atlases = [Atlas(Image(rng.random((8, 8))), LabelMap(soft(rng, (8, 8))), str(i)) for i in range(2)]
    res = nlplf.fuse(params, target, atlases, SearchWindow(1))
    labels = np.stack([fn.crop_to_margin(a.label, 1).probs for a in atlases])
    shifted, valid = zip(*[nlplf.shift_stack(l, SearchWindow(1)) for l in labels])
    shifted, valid = np.stack(shifted), np.stack(valid)
    expected = (shifted * valid[..., None]).sum(axis=(0, 1)) / valid.sum(axis=(0, 1))[..., None]
    np.testing.assert_allclose(res.pred, expected, atol=1e-6)


def test_perfect_atlas_t0(rng):
    params = fn.init_params((2,), 3, dtype=np.float64)
    img = Image(rng.random((8, 8)))
    label = LabelMap.from_mask(rng.integers(0, 2, (8, 8)))
    res = nlplf.fuse_forward_backward(params, img, label, [Atlas(img, label)], SearchWindow(0))
    np.testing.assert_array_equal(res.pred, fn.crop_to_margin(label, 1).probs)
    assert res.loss == 0


@pytest.mark.parametrize("kind", nlplf.LOSS_KINDS)
def test_end_to_end_gradients(kind):
    from deepfusion import gradcheck
    assert gradcheck.check_dfn(np.random.default_rng(3), kind) < 1e-4


def test_predict_full_shape(rng):
    params = fn.init_params((2, 2), 3)
    target = Image(rng.random((12, 11)))
    atlases = [Atlas(Image(rng.random((12, 11))), LabelMap(soft(rng, (12, 11))))]
    out = nlplf.predict_full(params, target, atlases, SearchWindow(1))
    assert out.shape == (12, 11)
    out.validate()


def test_rejects_mismatched_atlas(rng):
    params = fn.init_params((2,), 3)
    with pytest.raises(ValueError):
        nlplf.fuse(params, Image(rng.random((8, 8))), [Atlas(Image(rng.random((8, 9))), LabelMap(soft(rng, (8, 9))))],
                   SearchWindow(1))
    with pytest.raises(ValueError):
        nlplf.fuse(params, Image(rng.random((8, 8))), [], SearchWindow(1))
