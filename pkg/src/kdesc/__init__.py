"""Kernelized local patch descriptors built from explicit Von Mises feature maps."""

from .descriptor import (DEFAULT_CONFIG, Descriptor, DescriptorConfig, Kind, combined_descriptor, describe,
                         extract_batch)
from .exceptions import DegenerateInputError, DomainError, FormatError, KDescError, LoadError, RangeError
from .featmap import Domain, FeatureMap, KernelConfig, bessel_i, build_feature_map, eval_kernel, eval_map
from .patch import Patch, PixelAttributes, extract_attributes
from .postprocess import Variant, WhiteningModel, apply_batch, fit_lw, fit_pca, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_CONFIG", "Descriptor", "DescriptorConfig", "Kind", "combined_descriptor", "describe", "extract_batch",
    "DegenerateInputError", "DomainError", "FormatError", "KDescError", "LoadError", "RangeError",
    "Domain", "FeatureMap", "KernelConfig", "bessel_i", "build_feature_map", "eval_kernel", "eval_map",
    "Patch", "PixelAttributes", "extract_attributes",
    "Variant", "WhiteningModel", "apply_batch", "fit_lw", "fit_pca", "load_model", "save_model",
]
