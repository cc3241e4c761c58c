"""Dense (height, width, depth) tensor kernels: valid convolution, ReLU, sigmoid.

Tensors are plain numpy arrays of shape ``(M, N, D)``. Convolution is
cross-correlation (filters are not flipped), stride 1, no padding.
Kernels keep the dtype of their inputs so the same code serves float32
training and float64 gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Rejected input: tensor dimensions do not fit the operation."""


def as_tensor3(x, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or min(x.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty (M, N, D) tensor, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


@dataclass
class ConvLayer:
    """One filter bank: ``filters`` is (D_out, w, w, D_in), ``biases`` is (D_out,)."""

    filters: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.filters = np.asarray(self.filters)
        self.biases = np.asarray(self.biases)
        if self.filters.ndim != 4:
            raise ShapeError(f"filters must be 4D (D_out, w, w, D_in), got {self.filters.shape}")
        d_out, wh, ww, _ = self.filters.shape
        if wh != ww or wh % 2 == 0:
            raise ShapeError(f"filter width must be odd and square, got {wh}x{ww}")
        if self.biases.shape != (d_out,):
            raise ShapeError(f"expected {d_out} biases, got shape {self.biases.shape}")

    @property
    def width(self) -> int:
        return self.filters.shape[1]

    @property
    def in_maps(self) -> int:
        return self.filters.shape[3]

    @property
    def out_maps(self) -> int:
        return self.filters.shape[0]

    def astype(self, dtype) -> "ConvLayer":
        return ConvLayer(self.filters.astype(dtype), self.biases.astype(dtype))


def _check_conv_input(x: np.ndarray, layer: ConvLayer) -> None:
    if x.shape[2] != layer.in_maps:
        raise ShapeError(f"input has {x.shape[2]} maps, layer expects {layer.in_maps}")
    if x.shape[0] < layer.width or x.shape[1] < layer.width:
        raise ShapeError(f"input {x.shape[:2]} smaller than filter width {layer.width}")


def conv_output_shape(shape, layer: ConvLayer) -> tuple[int, int, int]:
    w = layer.width
    return (shape[0] - w + 1, shape[1] - w + 1, layer.out_maps)


def conv_forward(x, layer: ConvLayer) -> np.ndarray:
    """Valid cross-correlation plus bias; no activation."""
    x = as_tensor3(x, "input")
    _check_conv_input(x, layer)
    w = layer.width
    # windows: (M', N', D, w, w)
    windows = sliding_window_view(x, (w, w), axis=(0, 1))
    out = np.tensordot(windows, layer.filters, axes=([2, 3, 4], [3, 1, 2]))
    out += layer.biases
    return out


def conv_backward(x, layer: ConvLayer, grad_out):
    """Return ``(grad_input, grad_filters, grad_biases)`` for :func:`conv_forward`."""
    x = as_tensor3(x, "input")
    _check_conv_input(x, layer)
    grad_out = as_tensor3(grad_out, "grad_out")
    expected = conv_output_shape(x.shape, layer)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    w = layer.width
    windows = sliding_window_view(x, (w, w), axis=(0, 1))
    # (D_out, D_in, w, w) -> (D_out, w, w, D_in)
    grad_filters = np.tensordot(grad_out, windows, axes=([0, 1], [0, 1])).transpose(0, 2, 3, 1)
    grad_biases = grad_out.sum(axis=(0, 1))
    padded = np.pad(grad_out, ((w - 1, w - 1), (w - 1, w - 1), (0, 0)))
    gwin = sliding_window_view(padded, (w, w), axis=(0, 1))
    flipped = layer.filters[:, ::-1, ::-1, :]
    grad_input = np.tensordot(gwin, flipped, axes=([2, 3, 4], [0, 1, 2]))
    return grad_input, np.ascontiguousarray(grad_filters), grad_biases


def relu_forward(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, 0)


def relu_backward(x, grad_out) -> np.ndarray:
    x = np.asarray(x)
    # subgradient at exactly zero is 0
    return np.where(x > 0, grad_out, 0).astype(np.result_type(x, grad_out))


def sigmoid_forward(x) -> np.ndarray:
    x = np.asarray(x)
    # split by sign so neither branch overflows
    out = np.empty_like(x, dtype=x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # float rounding would otherwise reach 1.0 exactly for large inputs
    np.minimum(out, np.nextafter(out.dtype.type(1), out.dtype.type(0)), out=out)
    return out


def sigmoid_backward(output, grad_out) -> np.ndarray:
    output = np.asarray(output)
    return grad_out * output * (1 - output)
