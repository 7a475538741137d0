"""Unified 3D token representations, 3D nearby attention and a desk-scale
encoder-decoder trained on text-to-image, video prediction and text-to-video."""

from .attention import ALL, AttnMask, Extent, ProjWeights, attend_dense_masked, attend_sparse
from .codec import Codebook, FeatureGrid, TokenGrid
from .errors import ContractError, FormatError, NumericError, ShapeError
from .model import ModelConfig
from .tensor import Tape, Tensor4, backward, finite_diff_check

__version__ = "0.1.0"

__all__ = [
    "ALL", "AttnMask", "Extent", "ProjWeights", "attend_dense_masked", "attend_sparse",
    "Codebook", "FeatureGrid", "TokenGrid",
    "ContractError", "FormatError", "NumericError", "ShapeError",
    "ModelConfig", "Tape", "Tensor4", "backward", "finite_diff_check",
]
