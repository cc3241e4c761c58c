"""Finite-difference verification of every hand-written backward pass.

All checks run in float64 on small seeded instances. Each row of the
report is one component with the worst relative error found over all of
its parameters:

    |analytic - numeric| / max(|analytic| + |numeric|, 1e-8)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import baselines, kernels, nlplf
from . import feature_net as fn
from . import tensor_core as tc
from .feature_net import FeatureNetParams, Image, LabelMap
from .nlplf import Atlas, SearchWindow
from .tensor_core import ConvLayer

TOLERANCE = 1e-4
STEP = 1e-4
KINK = 1e-3


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        return float("inf")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-8)))


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        g.reshape(-1)[i] = (hi - lo) / (2 * step)
    return g


def _worst(pairs) -> float:
    return max(rel_error(a, n) for a, n in pairs)


def check_conv(rng) -> float:
    x = rng.normal(size=(6, 6, 2))
    layer = ConvLayer(rng.normal(size=(2, 3, 3, 2)), rng.normal(size=2))
    r = rng.normal(size=tc.conv_output_shape(x.shape, layer))
    f = lambda: float((tc.conv_forward(x, layer) * r).sum())  # noqa: E731
    gx, gf, gb = tc.conv_backward(x, layer, r)
    return _worst([(gx, numeric_grad(f, x)), (gf, numeric_grad(f, layer.filters)), (gb, numeric_grad(f, layer.biases))])


def check_relu(rng) -> float:
    x = rng.normal(size=(5, 5, 3))
    x = np.where(np.abs(x) < KINK, KINK * 10, x)
    r = rng.normal(size=x.shape)
    f = lambda: float((tc.relu_forward(x) * r).sum())  # noqa: E731
    return rel_error(tc.relu_backward(x, r), numeric_grad(f, x))


def check_sigmoid(rng) -> float:
    x = rng.normal(scale=2.0, size=(5, 5, 3))
    r = rng.normal(size=x.shape)
    f = lambda: float((tc.sigmoid_forward(x) * r).sum())  # noqa: E731
    return rel_error(tc.sigmoid_backward(tc.sigmoid_forward(x), r), numeric_grad(f, x))


def _kink_free(params: FeatureNetParams, images) -> bool:
    for img in images:
        _, (_, pre, _) = fn.extract_with_cache(params, img)
        if any(np.min(np.abs(z)) < KINK for z in pre):
            return False
    return True


def _seeded_net(rng, widths, sizes, images):
    for _ in range(200):
        layers, depth = [], 1
        for wd, sz in zip(widths, sizes):
            layers.append(ConvLayer(rng.normal(scale=0.8, size=(wd, sz, sz, depth)),
                                    rng.uniform(0.1, 0.5, size=wd)))
            depth = wd
        params = FeatureNetParams(layers)
        if _kink_free(params, images):
            return params
    raise RuntimeError("could not draw a kink-free gradient-check instance")


def _param_pairs(params: FeatureNetParams, grads: FeatureNetParams, f):
    return [(g, numeric_grad(f, p)) for p, g in zip(params.tensors(), grads.tensors())]


def check_feature_net(rng) -> float:
    image = Image(rng.random((7, 7)))
    params = _seeded_net(rng, (3, 2), (3, 1), [image])
    out = fn.extract(params, image).tensor
    r = rng.normal(size=out.shape)
    f = lambda: float((fn.extract(params, image).tensor * r).sum())  # noqa: E731
    return _worst(_param_pairs(params, fn.extract_backward(params, image, r), f))


def _soft_probs(rng, shape, classes=2) -> np.ndarray:
    p = rng.random((*shape, classes)) + 0.05
    return p / p.sum(axis=-1, keepdims=True)


def _soft_labels(rng, shape, classes=2) -> LabelMap:
    return LabelMap(_soft_probs(rng, shape, classes))


def tiny_instance(rng, size=12, k=2, widths=(2,), sizes=(1,)):
    target = Image(rng.random((size, size)))
    atlases = [Atlas(Image(rng.random((size, size))), _soft_labels(rng, (size, size)), f"a{i}") for i in range(k)]
    truth = _soft_labels(rng, (size, size))
    params = _seeded_net(rng, widths, sizes, [target] + [a.image for a in atlases])
    return params, target, truth, atlases


def check_dfn(rng, kind: str, impl=None, t: int = 1) -> float:
    params, target, truth, atlases = tiny_instance(rng)
    window = SearchWindow(t)
    res = nlplf.fuse_forward_backward(params, target, truth, atlases, window, kind, impl=impl)
    f = lambda: nlplf.fuse_forward_backward(params, target, truth, atlases, window, kind, impl=impl).loss  # noqa: E731
    return _worst(_param_pairs(params, res.grad_params, f))


def check_fusion_kernel(rng, impl, t: int = 1) -> float:
    ft = rng.random((6, 7, 3))
    fa = rng.random((2, 6, 7, 3))
    labels = _soft_probs(rng, (2, 6, 7))
    r = rng.normal(size=(6, 7, 2))
    f = lambda: float((kernels.fuse_forward(ft, fa, labels, t, impl=impl)[0] * r).sum())  # noqa: E731
    _, weights = kernels.fuse_forward(ft, fa, labels, t, impl=impl)
    gt, ga = kernels.fuse_backward(ft, fa, labels, weights, t, r, impl=impl)
    return _worst([(gt, numeric_grad(f, ft)), (ga, numeric_grad(f, fa))])


def check_cnn_head(rng) -> float:
    image = Image(rng.random((8, 8)))
    features = _seeded_net(rng, (3,), (3,), [image])
    cnn = baselines.init_cnn(features, classes=3, zero_head=False, seed=int(rng.integers(1 << 30)))
    truth = LabelMap(np.eye(3)[rng.integers(0, 3, size=(8, 8))])
    _, _, grads = baselines.cnn_forward_backward(cnn, image, truth)
    f = lambda: baselines.cnn_forward_backward(cnn, image, truth)[1]  # noqa: E731
    params = cnn.features.tensors() + [cnn.head.filters, cnn.head.biases]
    analytic = grads.features.tensors() + [grads.head.filters, grads.head.biases]
    return _worst([(g, numeric_grad(f, p)) for p, g in zip(params, analytic)])


def run(seed: int = 0) -> list[CheckResult]:
    """Run every check; one :class:`CheckResult` per component."""
    rows = []

    def add(name, fn_, *args):
        rng = np.random.default_rng([seed, len(rows)])
        try:
            err = fn_(rng, *args)
        except Exception:  # a crashing backward is a failed check, not a crashed report
            err = float("inf")
        rows.append(CheckResult(name, err))

    add("conv", check_conv)
    add("relu", check_relu)
    add("sigmoid", check_sigmoid)
    add("feature_net", check_feature_net)
    add("fusion_kernel[python]", check_fusion_kernel, kernels.python_backend)
    if kernels.compiled_backend is not None:
        add("fusion_kernel[compiled]", check_fusion_kernel, kernels.compiled_backend)
    for kind in nlplf.LOSS_KINDS:
        add(f"dfn[{kind}]", check_dfn, kind)
    add("cnn_head", check_cnn_head)
    return rows


def format_report(rows) -> str:
    lines = [f"{'component':<26}{'max_rel_error':>16}  status"]
    for r in rows:
        lines.append(f"{r.component:<26}{r.max_rel_error:>16.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
