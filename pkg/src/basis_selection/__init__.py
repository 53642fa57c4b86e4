"""Low-rank compression by retraining singular weights of a fixed SVD basis."""

from .layer import DenseLinear, FactorizedLinear, FinalizedLinear, finalize, prune_by_mass, select_by_mass
from .linalg import SvdResult, frobenius_inner, matmul, svd
from .pipeline import (
    CompressionConfig,
    CompressionEvent,
    baseline_fwsvd,
    baseline_svd_truncate,
    compress,
    compression_ratio,
)

__all__ = [
    "CompressionConfig",
    "CompressionEvent",
    "DenseLinear",
    "FactorizedLinear",
    "FinalizedLinear",
    "SvdResult",
    "baseline_fwsvd",
    "baseline_svd_truncate",
    "compress",
    "compression_ratio",
    "finalize",
    "frobenius_inner",
    "matmul",
    "prune_by_mass",
    "select_by_mass",
    "svd",
]
