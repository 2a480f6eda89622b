"""Feasible GLS for balanced panels with a thresholded, banded error covariance."""

from .banded import BlockBandedMatrix, assemble, block_norm_bound, cholesky, min_eig_probe, solve, sym_sqrt_dense
from .covariance import (
    CVConfig,
    TuningConfig,
    bartlett_weights,
    cross_validate_M,
    default_bandwidth,
    estimate_omega,
    lag_autocov,
    pd_lower_bound_c,
    soft_threshold_blocks,
)
from .errors import (
    ConfigError,
    DataError,
    EmptyIntervalError,
    NotPositiveDefiniteError,
    NumericalError,
    PanelFGLSError,
    SingularMatrixError,
    StageError,
    UnbalancedPanelError,
)
from .estimators import fgls, fgls_pipeline, gls_oracle, wald_test
from .montecarlo import DgpConfig, McExperimentReport, run_experiment
from .panel import ColumnMap, DesignSpec, PanelData, StackedModel, build_stacked, ingest_long_csv, ols, ols_standard_errors
from .results import EstimationResult

__version__ = "0.1.0"

__all__ = [
    "BlockBandedMatrix",
    "assemble",
    "block_norm_bound",
    "cholesky",
    "min_eig_probe",
    "solve",
    "sym_sqrt_dense",
    "CVConfig",
    "TuningConfig",
    "bartlett_weights",
    "cross_validate_M",
    "default_bandwidth",
    "estimate_omega",
    "lag_autocov",
    "pd_lower_bound_c",
    "soft_threshold_blocks",
    "ConfigError",
    "DataError",
    "EmptyIntervalError",
    "NotPositiveDefiniteError",
    "NumericalError",
    "PanelFGLSError",
    "SingularMatrixError",
    "StageError",
    "UnbalancedPanelError",
    "fgls",
    "fgls_pipeline",
    "gls_oracle",
    "wald_test",
    "DgpConfig",
    "McExperimentReport",
    "run_experiment",
    "ColumnMap",
    "DesignSpec",
    "PanelData",
    "StackedModel",
    "build_stacked",
    "ingest_long_csv",
    "ols",
    "ols_standard_errors",
    "EstimationResult",
]
