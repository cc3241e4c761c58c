import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepfusion import feature_net as fn
from deepfusion import tensor_core as tc
from deepfusion.feature_net import FeatureNetParams, Image, LabelMap
from deepfusion.gradcheck import numeric_grad, rel_error
from deepfusion.tensor_core import ConvLayer, ShapeError


def test_default_config_dims():
    params = fn.init_params()
    fmap = fn.extract(params, Image(np.random.default_rng(0).random((120, 140))))
    assert fmap.tensor.shape == (104, 124, 128)
    assert fmap.margin == 8 == params.margin
    assert fmap.tensor.dtype == np.float32
    assert fmap.tensor.min() >= 0.5 and fmap.tensor.max() < 1
    assert fn.crop_to_margin(LabelMap.from_mask(np.zeros((120, 140), int)), 8).shape == (104, 124)


def test_zero_net_gives_half():
    params = fn.init_params((3, 2), 3).zeros_like()
    out = fn.extract(params, np.zeros((9, 9))).tensor
    assert np.all(out == 0.5)


def test_one_by_one_composition(rng):
    params = FeatureNetParams([ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1))])
    img = rng.random((6, 5)) * 4 - 1
    expected = tc.sigmoid_forward(tc.relu_forward(fn.normalize_intensity(img, np.float64)[:, :, None]))
    np.testing.assert_allclose(fn.extract(params.astype(np.float64), img).tensor, expected)


def test_zero_grad_features(rng):
    params = fn.init_params((3,), 3, dtype=np.float64)
    img = rng.random((6, 6))
    grads = fn.extract_backward(params, img, np.zeros((4, 4, 3)))
    assert all(not g.any() for g in grads.tensors())


def test_one_layer_backward_is_composition(rng):
    params = fn.init_params((2,), 3, seed=4, dtype=np.float64)
    params.layers[0].biases[:] = [0.3, -0.2]
    img = rng.random((6, 6))
    g = rng.normal(size=(4, 4, 2))
    fmap, (inputs, pre, out) = fn.extract_with_cache(params, img)
    upstream = tc.relu_backward(pre[0], tc.sigmoid_backward(out, g))
    _, gf, gb = tc.conv_backward(inputs[0], params.layers[0], upstream)
    grads = fn.extract_backward(params, img, g)
    np.testing.assert_allclose(grads.layers[0].filters, gf)
    np.testing.assert_allclose(grads.layers[0].biases, gb)


def test_two_layer_finite_differences(rng):
    layers = [ConvLayer(rng.uniform(0.5, 1.5, (2, 1, 1, 1)), np.array([0.2, 0.4])),
              ConvLayer(rng.uniform(0.5, 1.5, (3, 1, 1, 2)), np.array([0.1, 0.3, 0.2]))]
    params = FeatureNetParams(layers)
    img = rng.random((3, 3))
    r = rng.normal(size=(3, 3, 3))
    f = lambda: float((fn.extract(params, img).tensor * r).sum())
    grads = fn.extract_backward(params, img, r)
    for p, g in zip(params.tensors(), grads.tensors()):
        assert rel_error(g, numeric_grad(f, p)) < 1e-5


def test_crop_examples(rng):
    lab = LabelMap(rng.dirichlet([1, 1], size=(10, 10)))
    np.testing.assert_array_equal(fn.crop_to_margin(lab, 0).probs, lab.probs)
    np.testing.assert_array_equal(fn.crop_to_margin(lab, 2).probs, lab.probs[2:8, 2:8])
    with pytest.raises(ShapeError):
        fn.crop_to_margin(lab, 5)


def test_paste_interior_replicates_edges():
    inner = np.arange(4.0).reshape(2, 2, 1)
    full = fn.paste_interior(inner, 1)
    assert full.shape == (4, 4, 1)
    np.testing.assert_array_equal(full[1:3, 1:3], inner)
    assert full[0, 0, 0] == 0 and full[3, 3, 0] == 3


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from([1, 3, 5]), min_size=1, max_size=4), st.integers(0, 1000))
def test_margin_and_range_for_any_stack(sizes, seed):
    params = fn.init_params([2] * len(sizes), sizes, seed=seed)
    assert params.margin == sum((w - 1) // 2 for w in sizes)
    img = np.random.default_rng(seed).normal(size=(20, 21))
    fmap = fn.extract(params, img)
    assert fmap.margin == params.margin
    assert fmap.tensor.shape == (20 - 2 * params.margin, 21 - 2 * params.margin, 2)
    assert fmap.tensor.min() >= 0.5 and fmap.tensor.max() < 1


def test_weight_sharing_and_determinism(rng, monkeypatch):
    params = fn.init_params((2, 2), 3, seed=1)
    seen = []
    real = tc.conv_forward
    monkeypatch.setattr(tc, "conv_forward", lambda x, layer: seen.append(layer) or real(x, layer))
    a, b = rng.random((9, 9)), rng.random((9, 9))
    fa1, fb = fn.extract(params, a), fn.extract(params, b)
    assert [id(l) for l in seen[:2]] == [id(l) for l in seen[2:]] == [id(l) for l in params.layers]
    np.testing.assert_array_equal(fa1.tensor, fn.extract(params, a).tensor)


def test_too_small_names_layer():
    params = fn.init_params((2, 2), (5, 5))
    with pytest.raises(ShapeError, match="layer 1"):
        fn.extract(params, np.zeros((6, 6)))


def test_normalize_intensity():
    np.testing.assert_array_equal(fn.normalize_intensity(np.full((2, 2), 3.0)), 0)
    x = fn.normalize_intensity(np.array([[2.0, 4.0], [6.0, 10.0]]))
    assert x.min() == 0 and x.max() == 1


def test_checkpoint_round_trip(tmp_path):
    params = fn.init_params((3, 4), (3, 1), seed=7)
    params.layers[1].biases[:] = np.random.default_rng(0).normal(size=4)
    fn.save_checkpoint(params, tmp_path / "ck")
    back = fn.load_checkpoint(tmp_path / "ck")
    for a, b in zip(params.tensors(), back.tensors()):
        assert a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)


def test_checkpoint_rejects_broken_chain(tmp_path):
    from deepfusion import dfnt
    fn.save_checkpoint(fn.init_params((3, 4), 3), tmp_path)
    dfnt.write(tmp_path / "layer1_filters.dfnt", np.zeros((4, 3, 3, 2)))
    with pytest.raises(ShapeError):
        fn.load_checkpoint(tmp_path)


def test_label_map_validation():
    LabelMap(np.array([[[0.3, 0.7]]])).validate()
    with pytest.raises(ValueError, match="sum"):
        LabelMap(np.array([[[0.3, 0.5]]])).validate()
    lab = LabelMap(np.array([[[0.5, 0.5], [0.4, 0.6]]]))
    assert lab.hard().tolist() == [[0, 1]]
    assert lab.foreground().tolist() == [[True, True]]
