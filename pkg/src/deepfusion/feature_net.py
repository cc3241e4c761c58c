"""Feature extraction subnet shared by the target and every warped atlas.

A stack of (valid conv, ReLU) blocks closed by one sigmoid. Each block
shrinks the image by ``(w - 1) / 2`` pixels per side; the accumulated
shrinkage is the *margin*, and labels are cropped by the same amount so
they line up with the feature grid.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dfnt
from . import tensor_core as tc
from .tensor_core import ConvLayer, ShapeError

DEFAULT_WIDTHS = (64, 64, 128, 128)
DEFAULT_FILTER = 5


@dataclass
class Image:
    pixels: np.ndarray
    spacing_mm: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise ShapeError(f"image must be 2D, got shape {self.pixels.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 2 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be two positive values, got {self.spacing_mm}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass
class LabelMap:
    """Per-pixel class probability vectors, shape (M, N, C)."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs)
        if self.probs.ndim != 3:
            raise ShapeError(f"label map must be (M, N, C), got shape {self.probs.shape}")

    @property
    def class_count(self) -> int:
        return self.probs.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[:2]

    def validate(self, tol: float = 1e-5, name: str = "label") -> "LabelMap":
        if np.any(self.probs < -tol):
            raise ValueError(f"{name}: negative class probability")
        sums = self.probs.sum(axis=2)
        bad = np.argwhere(np.abs(sums - 1) > tol)
        if len(bad):
            r, c = bad[0]
            raise ValueError(f"{name}: pixel ({r}, {c}) probabilities sum to {sums[r, c]:.6g}, not 1")
        return self

    @classmethod
    def from_mask(cls, mask, classes: int = 2) -> "LabelMap":
        """One-hot encode an integer class raster (class 0 is background)."""
        mask = np.asarray(mask).astype(np.int64)
        return cls(np.eye(classes, dtype=np.float32)[mask])

    def hard(self) -> np.ndarray:
        # argmax breaks ties toward the lowest class index
        return np.argmax(self.probs, axis=2)

    def foreground(self, threshold: float = 0.5) -> np.ndarray:
        return self.probs[..., 1] >= threshold


@dataclass
class FeatureMap:
    tensor: np.ndarray
    margin: int


@dataclass
class FeatureNetParams:
    layers: list[ConvLayer]
    sigmoid: bool = True

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("feature net needs at least one layer")
        depth = 1
        for i, layer in enumerate(self.layers):
            if layer.in_maps != depth:
                raise ShapeError(f"layer {i} expects {layer.in_maps} input maps, previous layer gives {depth}")
            depth = layer.out_maps

    @property
    def margin(self) -> int:
        return sum((layer.width - 1) // 2 for layer in self.layers)

    @property
    def depth(self) -> int:
        return self.layers[-1].out_maps

    @property
    def dtype(self):
        return self.layers[0].filters.dtype

    def astype(self, dtype) -> "FeatureNetParams":
        return FeatureNetParams([layer.astype(dtype) for layer in self.layers], self.sigmoid)

    def copy(self) -> "FeatureNetParams":
        return self.astype(self.dtype)

    def tensors(self) -> list[np.ndarray]:
        """Flat parameter list in a fixed order: filters then biases per layer."""
        out = []
        for layer in self.layers:
            out += [layer.filters, layer.biases]
        return out

    def zeros_like(self) -> "FeatureNetParams":
        return FeatureNetParams(
            [ConvLayer(np.zeros_like(l.filters), np.zeros_like(l.biases)) for l in self.layers], self.sigmoid
        )


def init_params(widths=DEFAULT_WIDTHS, filter_size=DEFAULT_FILTER, seed=0, sigmoid=True, dtype=np.float32):
    """Uniform Glorot filters, zero biases."""
    if isinstance(filter_size, int):
        filter_size = [filter_size] * len(widths)
    rng = np.random.default_rng(seed)
    layers = []
    depth = 1
    for width, w in zip(widths, filter_size):
        fan_in, fan_out = w * w * depth, w * w * width
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        filters = rng.uniform(-bound, bound, size=(width, w, w, depth)).astype(dtype)
        layers.append(ConvLayer(filters, np.zeros(width, dtype=dtype)))
        depth = width
    return FeatureNetParams(layers, sigmoid)


def normalize_intensity(pixels, dtype=np.float32) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant image maps to zeros."""
    x = np.asarray(pixels, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi > lo:
        x = (x - lo) / (hi - lo)
    else:
        x = np.zeros_like(x)
    return x.astype(dtype)


def _pixels(image) -> np.ndarray:
    return image.pixels if isinstance(image, Image) else np.asarray(image)


def extract_with_cache(params: FeatureNetParams, image):
    """Forward pass keeping the activations needed by :func:`backward_from_cache`."""
    x = normalize_intensity(_pixels(image), params.dtype)[:, :, None]
    size = x.shape[:2]
    for i, layer in enumerate(params.layers):
        if size[0] < layer.width or size[1] < layer.width:
            raise ShapeError(f"image {x.shape[:2]} too small: layer {i} ({layer.width}x{layer.width}) "
                             f"would see a {size[0]}x{size[1]} input")
        size = (size[0] - layer.width + 1, size[1] - layer.width + 1)
    inputs, pre = [], []
    h = x
    for layer in params.layers:
        inputs.append(h)
        z = tc.conv_forward(h, layer)
        pre.append(z)
        h = tc.relu_forward(z)
    out = tc.sigmoid_forward(h) if params.sigmoid else h
    return FeatureMap(out, params.margin), (inputs, pre, out)


def extract(params: FeatureNetParams, image) -> FeatureMap:
    return extract_with_cache(params, image)[0]


def backward_from_cache(params: FeatureNetParams, cache, grad_features) -> FeatureNetParams:
    inputs, pre, out = cache
    grad_features = np.asarray(grad_features)
    if grad_features.shape != out.shape:
        raise ShapeError(f"grad_features shape {grad_features.shape} != feature shape {out.shape}")
    g = tc.sigmoid_backward(out, grad_features) if params.sigmoid else grad_features
    grads = [None] * len(params.layers)
    for i in reversed(range(len(params.layers))):
        g = tc.relu_backward(pre[i], g)
        g_in, g_f, g_b = tc.conv_backward(inputs[i], params.layers[i], g)
        grads[i] = ConvLayer(g_f.astype(params.dtype), g_b.astype(params.dtype))
        g = g_in
    return FeatureNetParams(grads, params.sigmoid)


def extract_backward(params: FeatureNetParams, image, grad_features) -> FeatureNetParams:
    """Parameter gradients of ``sum(grad_features * extract(params, image))``."""
    _, cache = extract_with_cache(params, image)
    return backward_from_cache(params, cache, grad_features)


def crop_to_margin(label: LabelMap, margin: int) -> LabelMap:
    m, n = label.shape
    if margin < 0 or 2 * margin >= m or 2 * margin >= n:
        raise ShapeError(f"margin {margin} too large for a {m}x{n} label map")
    if margin == 0:
        return LabelMap(label.probs)
    return LabelMap(label.probs[margin:-margin, margin:-margin])


def paste_interior(interior: np.ndarray, margin: int) -> np.ndarray:
    """Grow a cropped (M', N', C) map back to full size by replicating the edge band."""
    if margin == 0:
        return interior
    return np.pad(interior, ((margin, margin), (margin, margin), (0, 0)), mode="edge")


def save_checkpoint(params: FeatureNetParams, directory: str | os.PathLike, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, layer in enumerate(params.layers):
        fname, bname = f"layer{i}_filters.dfnt", f"layer{i}_biases.dfnt"
        dfnt.write(directory / fname, layer.filters)
        dfnt.write(directory / bname, layer.biases)
        layers.append({"filters": fname, "biases": bname, "shape": list(layer.filters.shape)})
    manifest = {"format": "deepfusion-checkpoint", "version": 1, "sigmoid": params.sigmoid, "layers": layers}
    if extra:
        manifest["extra"] = extra
    path = directory / "checkpoint.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path: str | os.PathLike) -> FeatureNetParams:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    manifest = json.loads(path.read_text())
    layers = []
    for i, entry in enumerate(manifest["layers"]):
        filters = dfnt.read(path.parent / entry["filters"])
        biases = dfnt.read(path.parent / entry["biases"])
        if list(filters.shape) != list(entry["shape"]):
            raise ShapeError(f"layer {i}: filter file shape {filters.shape} != manifest shape {entry['shape']}")
        if biases.shape != (filters.shape[0],):
            raise ShapeError(f"layer {i}: {biases.shape[0]} biases for {filters.shape[0]} filters")
        layers.append(ConvLayer(filters, biases))
    return FeatureNetParams(layers, bool(manifest.get("sigmoid", True)))
