"""Reference fusion methods: majority voting, intensity patch fusion, and a plain CNN head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import feature_net as fn
from . import tensor_core as tc
from ._fusion_py import overlap, shift_vectors
from .feature_net import FeatureNetParams, Image, LabelMap
from .tensor_core import ConvLayer, ShapeError


def majority_vote(atlases) -> LabelMap:
    """Unweighted per-pixel mean of the atlas label vectors."""
    if not atlases:
        raise ShapeError("majority vote needs at least one atlas")
    labels = [a.label.probs if hasattr(a, "label") else np.asarray(a) for a in atlases]
    return LabelMap(np.mean(np.stack(labels).astype(np.float64), axis=0))


def patch_distances(target, atlas, patch_radius: int, t: int) -> np.ndarray:
    """Sum of squared intensity differences between patches, shape (S, H, W); inf where invalid."""
    target = np.asarray(target, dtype=np.float64)
    atlas = np.asarray(atlas, dtype=np.float64)
    r = patch_radius
    tp = np.pad(target, r, mode="edge")
    ap = np.pad(atlas, r, mode="edge")
    h, w = target.shape
    hp, wp = tp.shape
    out = np.full(((2 * t + 1) ** 2, h, w), np.inf)
    for s, (u, v) in enumerate(shift_vectors(t)):
        sq = np.zeros_like(tp)
        dst, src = overlap(hp, wp, u, v)
        sq[dst] = (tp[dst] - ap[src]) ** 2
        box = sliding_window_view(sq, (2 * r + 1, 2 * r + 1)).sum(axis=(-1, -2))
        d, _ = overlap(h, w, u, v)
        out[s][d] = box[d]
    return out


def patch_fusion(target: Image, atlases, patch_radius: int = 2, t: int = 3, h: float | None = None,
                 normalize: bool = True) -> LabelMap:
    """Non-local patch vote with weights exp(-d / h), normalized by their sum.

    ``h=None`` uses the per-pixel mean candidate distance. Intensities are
    min-max normalized per image unless ``normalize`` is False.
    """
    if not atlases:
        raise ShapeError("patch fusion needs at least one atlas")
    if h is not None and h <= 0:
        raise ValueError("bandwidth h must be positive")
    prep = (lambda x: fn.normalize_intensity(x, np.float64)) if normalize else (lambda x: np.asarray(x, float))
    tgt = prep(target.pixels)
    dist = np.stack([patch_distances(tgt, prep(a.image.pixels), patch_radius, t) for a in atlases])
    valid = np.isfinite(dist)
    if h is None:
        band = np.where(valid, dist, 0).sum(axis=(0, 1)) / valid.sum(axis=(0, 1))
        band = np.where(band > 0, band, 1.0)
    else:
        band = np.full(tgt.shape, float(h))
    dmin = np.where(valid, dist, np.inf).min(axis=(0, 1))
    wts = np.where(valid, np.exp(-(np.where(valid, dist, 0) - dmin) / band), 0.0)
    wts /= wts.sum(axis=(0, 1))
    hh, ww = tgt.shape
    pred = np.zeros((hh, ww, atlases[0].label.class_count))
    for k, a in enumerate(atlases):
        for s, (u, v) in enumerate(shift_vectors(t)):
            dst, src = overlap(hh, ww, u, v)
            pred[dst] += wts[k, s][dst][:, :, None] * a.label.probs[src]
    return LabelMap(pred)


@dataclass
class CNNParams:
    features: FeatureNetParams
    head: ConvLayer

    def copy(self) -> "CNNParams":
        return CNNParams(self.features.copy(), self.head.astype(self.head.filters.dtype))

    def astype(self, dtype) -> "CNNParams":
        return CNNParams(self.features.astype(dtype), self.head.astype(dtype))


@dataclass
class CNNState:
    params: CNNParams
    losses: list[float] = field(default_factory=list)


def init_cnn(features: FeatureNetParams, classes: int = 2, zero_head: bool = True, seed: int = 0) -> CNNParams:
    d = features.depth
    dtype = features.dtype
    if zero_head:
        filters = np.zeros((classes, 1, 1, d), dtype=dtype)
    else:
        bound = np.sqrt(6.0 / (d + classes))
        filters = np.random.default_rng(seed).uniform(-bound, bound, (classes, 1, 1, d)).astype(dtype)
    return CNNParams(features, ConvLayer(filters, np.zeros(classes, dtype=dtype)))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cnn_forward_backward(params: CNNParams, image: Image, truth: LabelMap | None = None):
    """Return ``(probs, loss, grads)`` on the cropped domain; loss is mean log loss."""
    fmap, cache = fn.extract_with_cache(params.features, image)
    logits = tc.conv_forward(fmap.tensor, params.head)
    probs = _softmax(logits)
    if truth is None:
        return probs, float("nan"), None
    y = fn.crop_to_margin(truth, params.features.margin).probs.astype(probs.dtype)
    if y.shape != probs.shape:
        raise ShapeError(f"truth {y.shape} does not match prediction {probs.shape}")
    p = probs.shape[0] * probs.shape[1]
    logp = logits - logits.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    value = float(-(y * logp).sum() / p)
    g_logits = (probs * y.sum(axis=-1, keepdims=True) - y) / p
    g_feat, g_f, g_b = tc.conv_backward(fmap.tensor, params.head, g_logits)
    g_features = fn.backward_from_cache(params.features, cache, g_feat)
    return probs, value, CNNParams(g_features, ConvLayer(g_f, g_b))


def cnn_baseline_train(pool, params: CNNParams, learning_rate: float, epochs: int, seed: int = 0) -> CNNState:
    """Plain SGD over (image, label) pairs, one image per step, shuffled per epoch."""
    state = CNNState(params.copy())
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(pool))
        for i in order:
            image, label = pool[i]
            _, value, grads = cnn_forward_backward(state.params, image, label)
            for theta, g in zip(_cnn_tensors(state.params), _cnn_tensors(grads)):
                theta -= (learning_rate * g).astype(theta.dtype)
            state.losses.append(value)
    return state


def _cnn_tensors(params: CNNParams) -> list[np.ndarray]:
    return params.features.tensors() + [params.head.filters, params.head.biases]


def cnn_baseline_predict(params: CNNParams, image: Image) -> np.ndarray:
    """Per-pixel class probabilities on the cropped domain."""
    return cnn_forward_backward(params, image)[0]
