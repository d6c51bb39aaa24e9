"""Data-free pattern-based pruning of CNNs with a sparse inference runtime."""
from .admm import PruneConfig, PruneResult, compression_rate, prune_model
from .modelio import FormatError, LayerMask, load_model, save_model
from .patterns import Pattern, PatternLibrary, extract_pattern_library, project_kernel
from .tensor import Activation, ConvLayer, ConvModel, DenseLayer

__version__ = "0.1.0"

__all__ = [
    "Activation", "ConvLayer", "ConvModel", "DenseLayer", "FormatError", "LayerMask",
    "Pattern", "PatternLibrary", "PruneConfig", "PruneResult", "compression_rate",
    "extract_pattern_library", "load_model", "prune_model", "project_kernel", "save_model",
]
