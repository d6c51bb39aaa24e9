"""Compressed storage and execution of pattern-pruned 3x3 convolutions."""
from .csr import CsrWeights, encode_csr
from .executor import CsrGatherConv, DenseDirectConv, SparseConv, sparse_conv_exec
from .fkw import CompressedWeights, decode_fkw, encode_fkw, parse_fkw
from .plan import ReorderPlan, build_reorder_plan

__all__ = [
    "CompressedWeights", "CsrGatherConv", "CsrWeights", "DenseDirectConv", "ReorderPlan",
    "SparseConv", "build_reorder_plan", "decode_fkw", "encode_csr", "encode_fkw", "parse_fkw",
    "sparse_conv_exec",
]
