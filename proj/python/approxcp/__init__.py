"""Approximate full conformal prediction for regularized logistic regression."""

from ._core import (
    ACP,
    ConfigError,
    FormatError,
    IngestionError,
    NumericError,
    cv_plus_pvalues,
    fit,
    full_cp_pvalues,
    fuzziness,
    prediction_sets,
    scp_pvalues,
    synthesize,
)

__all__ = [
    "ACP",
    "ConfigError",
    "FormatError",
    "IngestionError",
    "NumericError",
    "cv_plus_pvalues",
    "fit",
    "full_cp_pvalues",
    "fuzziness",
    "prediction_sets",
    "scp_pvalues",
    "synthesize",
]
