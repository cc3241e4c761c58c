"""Non-local patch-based label fusion subnet.

Every atlas pixel inside a (2t+1)x(2t+1) window around a target pixel votes
for that pixel's label, weighted by a softmax over negative squared feature
distances taken jointly across all atlases and shifts. Candidates whose
source pixel falls outside the image are masked out of the softmax, so the
weights at border pixels still sum to one.

The individual layers (:func:`shift`, :func:`distance_field`,
:func:`weight_field`, :func:`vote`) are exposed for inspection and testing;
training and inference go through the fused kernels in :mod:`.kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import feature_net as fn
from . import kernels
from ._fusion_py import overlap, shift_vectors
from .feature_net import FeatureMap, FeatureNetParams, Image, LabelMap
from .tensor_core import ShapeError

LOSS_KINDS = ("l2", "l1", "hinge", "dice", "log")
DICE_EPS = 1e-6
LOG_EPS = 1e-7


@dataclass(frozen=True)
class SearchWindow:
    t: int = 3

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"window half-width must be >= 0, got {self.t}")

    @property
    def shifts(self) -> list[tuple[int, int]]:
        return shift_vectors(self.t)

    @property
    def size(self) -> int:
        return (2 * self.t + 1) ** 2


@dataclass
class Atlas:
    image: Image
    label: LabelMap
    id: str = ""


@dataclass
class WeightField:
    weights: np.ndarray  # (K, S, H, W)
    valid: np.ndarray  # (K, S, H, W) bool


@dataclass
class FusionResult:
    pred: np.ndarray  # cropped-domain (H, W, C)
    weights: np.ndarray
    loss: float
    grad_params: FeatureNetParams | None = None


def _tensor(x) -> np.ndarray:
    return x.tensor if isinstance(x, FeatureMap) else np.asarray(x)


def shift(x, alpha):
    """Translate an (H, W, c) map so the output at p holds the input at p - alpha.

    Returns ``(shifted, valid)``; positions whose source is out of bounds are
    zero in ``shifted`` and False in ``valid``.
    """
    x = np.asarray(x)
    h, w = x.shape[:2]
    u, v = alpha
    out = np.zeros_like(x)
    valid = np.zeros((h, w), dtype=bool)
    dst, src = overlap(h, w, u, v)
    out[dst] = x[src]
    valid[dst] = True
    return out, valid


def shift_stack(x, window: SearchWindow):
    """All window shifts of ``x``: arrays (S, H, W, c) and (S, H, W)."""
    pairs = [shift(x, a) for a in window.shifts]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def distance_field(f_target, f_atlas, window: SearchWindow):
    """Squared feature distances ``(S, H, W)`` between target and shifted atlas, plus validity."""
    ft, fa = _tensor(f_target), _tensor(f_atlas)
    if ft.shape != fa.shape:
        raise ShapeError(f"feature maps differ in shape: {ft.shape} vs {fa.shape}")
    shifted, valid = shift_stack(fa, window)
    dist = ((shifted - ft[None]) ** 2).sum(axis=-1)
    return np.where(valid, dist, np.inf), valid


def weight_field(distances) -> WeightField:
    """Joint softmax of -distance over every valid (atlas, shift) candidate.

    ``distances`` is a list (one entry per atlas) of ``(dist, valid)`` pairs
    as returned by :func:`distance_field`.
    """
    dist = np.stack([d for d, _ in distances])
    valid = np.stack([m for _, m in distances])
    logits = np.where(valid, -dist, -np.inf)
    peak = logits.max(axis=(0, 1))
    e = np.exp(logits - peak)
    return WeightField(e / e.sum(axis=(0, 1)), valid)


def vote(weights: WeightField, shifted_labels) -> np.ndarray:
    """Weighted sum of shifted atlas labels; ``shifted_labels`` is (K, S, H, W, C)."""
    shifted_labels = np.asarray(shifted_labels)
    if shifted_labels.shape[:4] != weights.weights.shape:
        raise ShapeError(f"labels {shifted_labels.shape[:4]} do not match weights {weights.weights.shape}")
    return np.einsum("ksij,ksijc->ijc", weights.weights, shifted_labels)


def fuse_layers(f_target, f_atlases, atlas_labels, window: SearchWindow) -> tuple[np.ndarray, WeightField]:
    """Forward pass composed from the separate shift/distance/weight/vote layers."""
    wf = weight_field([distance_field(f_target, fa, window) for fa in f_atlases])
    shifted = np.stack([shift_stack(np.asarray(l), window)[0] for l in atlas_labels])
    return vote(wf, shifted), wf


def loss(pred, truth, kind: str = "l2"):
    """Return ``(value, d value / d pred)`` for one fused prediction."""
    pred = np.asarray(pred)
    truth = truth.probs if isinstance(truth, LabelMap) else np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    kind = kind.lower()
    p = pred.shape[0] * pred.shape[1]
    if kind == "l2":
        diff = pred - truth
        return float((diff**2).sum() / p), 2 * diff / p
    if kind == "l1":
        diff = pred - truth
        return float(np.abs(diff).sum() / p), np.sign(diff) / p
    if kind == "hinge":
        n = pred.size
        sign = 2 * truth - 1
        margin = 1 - sign * (2 * pred - 1)
        active = margin > 0
        return float(np.where(active, margin, 0).sum() / n), np.where(active, -2 * sign, 0) / n
    if kind == "dice":
        inter = (pred * truth).sum()
        denom = (pred**2).sum() + (truth**2).sum() + DICE_EPS
        value = 1 - 2 * inter / denom
        grad = -2 * truth / denom + 4 * inter * pred / denom**2
        return float(value), grad
    if kind == "log":
        return float(-(truth * np.log(pred + LOG_EPS)).sum() / p), -truth / (pred + LOG_EPS) / p
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def _check_atlases(target: Image, atlases) -> None:
    if not atlases:
        raise ShapeError("atlas set is empty")
    for i, a in enumerate(atlases):
        if a.image.shape != target.shape or a.label.shape != target.shape:
            raise ShapeError(f"atlas {a.id or i} shape {a.image.shape} does not match target {target.shape}")


def fuse_forward_backward(params: FeatureNetParams, target: Image, truth: LabelMap, atlases,
                          window: SearchWindow, loss_kind: str = "l2", impl=None) -> FusionResult:
    """Full DFN pass on one (atlas set, target, target label) batch, with parameter gradients."""
    _check_atlases(target, atlases)
    margin = params.margin
    f_target, cache_t = fn.extract_with_cache(params, target)
    extracted = [fn.extract_with_cache(params, a.image) for a in atlases]
    f_atlas = np.stack([f.tensor for f, _ in extracted])
    labels = np.stack([fn.crop_to_margin(a.label, margin).probs for a in atlases]).astype(params.dtype)
    truth_c = fn.crop_to_margin(truth, margin).probs.astype(params.dtype)

    pred, weights = kernels.fuse_forward(f_target.tensor, f_atlas, labels, window.t, impl=impl)
    value, grad_pred = loss(pred, truth_c, loss_kind)
    g_target, g_atlas = kernels.fuse_backward(f_target.tensor, f_atlas, labels, weights, window.t,
                                              grad_pred.astype(params.dtype), impl=impl)

    grads = fn.backward_from_cache(params, cache_t, g_target)
    # shared weights: sum the target branch and every atlas branch in atlas order
    for k, (_, cache) in enumerate(extracted):
        gk = fn.backward_from_cache(params, cache, g_atlas[k])
        for acc, g in zip(grads.layers, gk.layers):
            acc.filters += g.filters
            acc.biases += g.biases
    return FusionResult(pred, weights, value, grads)


def fuse(params: FeatureNetParams, target: Image, atlases, window: SearchWindow, impl=None) -> FusionResult:
    """Inference: cropped-domain fused label (no loss, no gradients)."""
    _check_atlases(target, atlases)
    margin = params.margin
    f_target = fn.extract(params, target).tensor
    f_atlas = np.stack([fn.extract(params, a.image).tensor for a in atlases])
    labels = np.stack([fn.crop_to_margin(a.label, margin).probs for a in atlases]).astype(params.dtype)
    pred, weights = kernels.fuse_forward(f_target, f_atlas, labels, window.t, impl=impl)
    return FusionResult(pred, weights, float("nan"))


def predict_full(params: FeatureNetParams, target: Image, atlases, window: SearchWindow, impl=None) -> LabelMap:
    """Fused label pasted back to the full image grid (edge band replicated)."""
    res = fuse(params, target, atlases, window, impl=impl)
    return LabelMap(fn.paste_interior(res.pred, params.margin))
