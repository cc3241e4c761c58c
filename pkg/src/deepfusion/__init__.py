"""Deep fusion net for registration-based multi-atlas label fusion."""
from .feature_net import FeatureMap, FeatureNetParams, Image, LabelMap, extract, init_params
from .kernels import BACKEND_NAME
from .tensor_core import ConvLayer, ShapeError

__all__ = [
    "BACKEND_NAME",
    "ConvLayer",
    "FeatureMap",
    "FeatureNetParams",
    "Image",
    "LabelMap",
    "ShapeError",
    "extract",
    "init_params",
]
