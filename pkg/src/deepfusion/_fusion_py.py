"""Pure numpy fusion kernels; the fallback when the compiled extension is absent.

Shapes: target features (H, W, D), atlas features (K, H, W, D), atlas labels
(K, H, W, C), weights (K, S, H, W) with S = (2t+1)**2. Shift index
``s = (u + t) * (2t + 1) + (v + t)`` for shift vector (u, v); the shifted
map at p reads the source at p - (u, v). Out-of-bounds candidates get
weight exactly 0.
"""
from __future__ import annotations

import numpy as np


def shift_vectors(t: int) -> list[tuple[int, int]]:
    return [(u, v) for u in range(-t, t + 1) for v in range(-t, t + 1)]


def overlap(h: int, w: int, u: int, v: int):
    """Slices (target region, source region) where p - (u, v) is in bounds."""
    dst = (slice(max(0, u), min(h, h + u)), slice(max(0, v), min(w, w + v)))
    src = (slice(max(0, -u), min(h, h - u)), slice(max(0, -v), min(w, w - v)))
    return dst, src


def fuse_forward(f_target, f_atlas, labels, t):
    h, w, _ = f_target.shape
    k_count = f_atlas.shape[0]
    shifts = shift_vectors(t)
    dtype = f_target.dtype
    logits = np.full((k_count, len(shifts), h, w), -np.inf, dtype=dtype)
    for k in range(k_count):
        for s, (u, v) in enumerate(shifts):
            dst, src = overlap(h, w, u, v)
            diff = f_target[dst] - f_atlas[k][src]
            logits[k, s][dst] = -np.einsum("ijd,ijd->ij", diff, diff)
    peak = logits.max(axis=(0, 1))
    weights = np.exp(logits - peak)
    weights /= weights.sum(axis=(0, 1))
    pred = np.zeros((h, w, labels.shape[3]), dtype=dtype)
    for k in range(k_count):
        for s, (u, v) in enumerate(shifts):
            dst, src = overlap(h, w, u, v)
            pred[dst] += weights[k, s][dst][:, :, None] * labels[k][src]
    return pred, weights


def fuse_backward(f_target, f_atlas, labels, weights, t, grad_pred):
    h, w, _ = f_target.shape
    k_count = f_atlas.shape[0]
    shifts = shift_vectors(t)
    grad_w = np.zeros_like(weights)
    for k in range(k_count):
        for s, (u, v) in enumerate(shifts):
            dst, src = overlap(h, w, u, v)
            grad_w[k, s][dst] = np.einsum("ijc,ijc->ij", grad_pred[dst], labels[k][src])
    inner = (weights * grad_w).sum(axis=(0, 1))
    # softmax over -distance: d(loss)/d(distance) = -w * (gw - <w, gw>)
    grad_dist = -weights * (grad_w - inner)
    g_target = np.zeros_like(f_target)
    g_atlas = np.zeros_like(f_atlas)
    for k in range(k_count):
        for s, (u, v) in enumerate(shifts):
            dst, src = overlap(h, w, u, v)
            diff = f_target[dst] - f_atlas[k][src]
            g = 2 * grad_dist[k, s][dst][:, :, None] * diff
            g_target[dst] += g
            g_atlas[k][src] -= g
    return g_target, g_atlas
