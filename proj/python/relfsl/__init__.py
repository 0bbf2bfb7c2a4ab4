# SPDX-License-Identifier: Apache-2.0
"""Few-shot image classification with relational embeddings and routed co-attention."""

from ._relfsl import (
    ConfigError,
    ContractError,
    Error,
    IoError,
    NumericError,
    ShapeError,
    compute_metrics,
    cross_correlation,
    default_config,
    flop_count,
    gradcheck,
    normalize_config,
    routed_attention,
    run_cli,
    sample_lambda,
    self_correlation,
    synthetic_images,
    vanilla_attention,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "Error",
    "IoError",
    "NumericError",
    "ShapeError",
    "compute_metrics",
    "cross_correlation",
    "default_config",
    "flop_count",
    "gradcheck",
    "normalize_config",
    "routed_attention",
    "run_cli",
    "sample_lambda",
    "self_correlation",
    "synthetic_images",
    "vanilla_attention",
]
