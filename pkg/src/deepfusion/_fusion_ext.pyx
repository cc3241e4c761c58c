# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fusion kernels. Same contract as ``_fusion_py``."""
import numpy as np
cimport cython
from libc.math cimport exp, INFINITY

ctypedef fused real:
    float
    double


cdef inline double _sqdist(real* a, real* b, Py_ssize_t n) nogil:
    # four independent partial sums so the loop is not one long dependency chain
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0, e
    cdef Py_ssize_t d = 0
    while d + 4 <= n:
        e = a[d] - b[d]
        s0 += e * e
        e = a[d + 1] - b[d + 1]
        s1 += e * e
        e = a[d + 2] - b[d + 2]
        s2 += e * e
        e = a[d + 3] - b[d + 3]
        s3 += e * e
        d += 4
    while d < n:
        e = a[d] - b[d]
        s0 += e * e
        d += 1
    return (s0 + s1) + (s2 + s3)


def fuse_forward(real[:, :, ::1] f_target, real[:, :, :, ::1] f_atlas,
                 real[:, :, :, ::1] labels, int t):
    cdef Py_ssize_t h = f_target.shape[0], w = f_target.shape[1], depth = f_target.shape[2]
    cdef Py_ssize_t kc = f_atlas.shape[0], classes = labels.shape[3]
    cdef Py_ssize_t side = 2 * t + 1, ns = side * side
    dtype = np.float32 if real is float else np.float64
    pred_arr = np.zeros((h, w, classes), dtype=dtype)
    weights_arr = np.zeros((kc, ns, h, w), dtype=dtype)
    cdef real[:, :, ::1] pred = pred_arr
    cdef real[:, :, :, ::1] weights = weights_arr
    cdef Py_ssize_t i, j, k, s, u, v, qi, qj, d, c
    cdef double dist, peak, total, wt

    for i in range(h):
        for j in range(w):
            peak = -INFINITY
            for k in range(kc):
                for s in range(ns):
                    u = s // side - t
                    v = s % side - t
                    qi = i - u
                    qj = j - v
                    if qi < 0 or qi >= h or qj < 0 or qj >= w:
                        continue
                    dist = _sqdist(&f_target[i, j, 0], &f_atlas[k, qi, qj, 0], depth)
                    # stash -distance; turned into a weight below
                    weights[k, s, i, j] = <real>(-dist)
                    if -dist > peak:
                        peak = -dist
            total = 0.0
            for k in range(kc):
                for s in range(ns):
                    u = s // side - t
                    v = s % side - t
                    qi = i - u
                    qj = j - v
                    if qi < 0 or qi >= h or qj < 0 or qj >= w:
                        continue
                    wt = exp(weights[k, s, i, j] - peak)
                    weights[k, s, i, j] = <real>wt
                    total = total + wt
            for k in range(kc):
                for s in range(ns):
                    u = s // side - t
                    v = s % side - t
                    qi = i - u
                    qj = j - v
                    if qi < 0 or qi >= h or qj < 0 or qj >= w:
                        continue
                    wt = weights[k, s, i, j] / total
                    weights[k, s, i, j] = <real>wt
                    for c in range(classes):
                        pred[i, j, c] = pred[i, j, c] + <real>(wt * labels[k, qi, qj, c])
    return pred_arr, weights_arr


def fuse_backward(real[:, :, ::1] f_target, real[:, :, :, ::1] f_atlas,
                  real[:, :, :, ::1] labels, real[:, :, :, ::1] weights, int t,
                  real[:, :, ::1] grad_pred):
    cdef Py_ssize_t h = f_target.shape[0], w = f_target.shape[1], depth = f_target.shape[2]
    cdef Py_ssize_t kc = f_atlas.shape[0], classes = labels.shape[3]
    cdef Py_ssize_t side = 2 * t + 1, ns = side * side
    dtype = np.float32 if real is float else np.float64
    gt_arr = np.zeros((h, w, depth), dtype=dtype)
    ga_arr = np.zeros((kc, h, w, depth), dtype=dtype)
    gw_arr = np.zeros(ns * kc, dtype=np.float64)
    cdef real[:, :, ::1] g_target = gt_arr
    cdef real[:, :, :, ::1] g_atlas = ga_arr
    cdef double[::1] gw = gw_arr
    cdef Py_ssize_t i, j, k, s, u, v, qi, qj, d, c
    cdef double inner, acc, coef, diff

    for i in range(h):
        for j in range(w):
            inner = 0.0
            for k in range(kc):
                for s in range(ns):
                    u = s // side - t
                    v = s % side - t
                    qi = i - u
                    qj = j - v
                    if qi < 0 or qi >= h or qj < 0 or qj >= w:
                        gw[k * ns + s] = 0.0
                        continue
                    acc = 0.0
                    for c in range(classes):
                        acc = acc + grad_pred[i, j, c] * labels[k, qi, qj, c]
                    gw[k * ns + s] = acc
                    inner = inner + weights[k, s, i, j] * acc
            for k in range(kc):
                for s in range(ns):
                    u = s // side - t
                    v = s % side - t
                    qi = i - u
                    qj = j - v
                    if qi < 0 or qi >= h or qj < 0 or qj >= w:
                        continue
                    # 2 * d(loss)/d(distance)
                    coef = -2.0 * weights[k, s, i, j] * (gw[k * ns + s] - inner)
                    if coef == 0.0:
                        continue
                    for d in range(depth):
                        diff = coef * (f_target[i, j, d] - f_atlas[k, qi, qj, d])
                        g_target[i, j, d] = g_target[i, j, d] + <real>diff
                        g_atlas[k, qi, qj, d] = g_atlas[k, qi, qj, d] - <real>diff
    return gt_arr, ga_arr
