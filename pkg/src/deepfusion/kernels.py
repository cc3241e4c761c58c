"""Fusion kernel backend, chosen once at import.

The compiled extension is used when it was built; otherwise the numpy
implementation. Set ``DEEPFUSION_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fusion_py

python_backend = _fusion_py
compiled_backend = None
if os.environ.get("DEEPFUSION_BACKEND", "").lower() != "python":
    try:
        from . import _fusion_ext as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

backend = compiled_backend or python_backend
BACKEND_NAME = "compiled" if compiled_backend is not None else "python"


def _prepare(f_target, f_atlas, *rest):
    dtype = np.result_type(f_target, f_atlas)
    return [np.ascontiguousarray(a, dtype=dtype) for a in (f_target, f_atlas, *rest)]


def fuse_forward(f_target, f_atlas, labels, t, impl=None):
    impl = impl or backend
    f_target, f_atlas, labels = _prepare(f_target, f_atlas, labels)
    return impl.fuse_forward(f_target, f_atlas, labels, int(t))


def fuse_backward(f_target, f_atlas, labels, weights, t, grad_pred, impl=None):
    impl = impl or backend
    f_target, f_atlas, labels, weights, grad_pred = _prepare(f_target, f_atlas, labels, weights, grad_pred)
    return impl.fuse_backward(f_target, f_atlas, labels, weights, int(t), grad_pred)
