"""FGLS, oracle GLS and normal-based inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
import scipy.linalg as sla
from scipy.stats import norm

from .banded import BlockBandedMatrix, cholesky, solve
from .covariance import (
    TuningConfig,
    diagonal_omega,
    estimate_omega,
    resolve_tuning,
)
from .errors import DataError, NotPositiveDefiniteError, PanelFGLSError, SingularMatrixError, StageError
from .panel import COND_LIMIT, DesignSpec, PanelData, StackedModel, build_stacked, ols, residual_panel
from .results import EstimationResult

__all__ = ["fgls", "gls_oracle", "fgls_pipeline", "fgls_from_model", "wald_test", "WaldResult"]


def _gls_core(X: np.ndarray, Y: np.ndarray, wX: np.ndarray, wY: np.ndarray):
    # wX = W X, wY = W Y for the inverse covariance W
    G = X.T @ wX
    G = 0.5 * (G + G.T)
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularMatrixError(f"X' Omega^-1 X is singular or ill-conditioned (condition number {cond:.3e})")
    cf = sla.cho_factor(G)
    beta = sla.cho_solve(cf, X.T @ wY)
    vcov = sla.cho_solve(cf, np.eye(G.shape[0]))
    return beta, vcov, G


def fgls(model: StackedModel, omega: BlockBandedMatrix, estimator_kind: str = "fgls",
         tuning: dict[str, Any] | None = None) -> EstimationResult:
    """GLS with an estimated block-banded covariance.

    Omega^-1 X and Omega^-1 Y come from banded Cholesky solves.  The
    reported covariance is (X' Omega^-1 X)^-1.
    """
    if omega.size != model.n_obs:
        raise DataError(f"omega is {omega.size} x {omega.size} but the model has {model.n_obs} rows")
    f = cholesky(omega)
    rhs = np.column_stack([model.X, model.Y])
    sol = solve(f, rhs)
    beta, vcov, G = _gls_core(model.X, model.Y, sol[:, :-1], sol[:, -1])
    return EstimationResult(
        beta=beta,
        vcov=vcov,
        estimator_kind=estimator_kind,
        gamma_hat=G / model.n_obs,
        n_obs=model.n_obs,
        names=model.names,
        residuals=model.Y - model.X @ beta,
        tuning=tuning,
    )


def gls_oracle(model: StackedModel, omega_true) -> EstimationResult:
    """Infeasible GLS with the true covariance (dense array or block-banded)."""
    if isinstance(omega_true, BlockBandedMatrix):
        return fgls(model, omega_true, estimator_kind="gls_oracle")
    om = np.asarray(omega_true, dtype=float)
    if om.shape != (model.n_obs, model.n_obs):
        raise DataError(f"omega_true has shape {om.shape}, expected {(model.n_obs, model.n_obs)}")
    try:
        cf = sla.cho_factor(om, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(-1, "true covariance is not positive definite") from None
    sol = sla.cho_solve(cf, np.column_stack([model.X, model.Y]), check_finite=False)
    beta, vcov, G = _gls_core(model.X, model.Y, sol[:, :-1], sol[:, -1])
    return EstimationResult(
        beta=beta,
        vcov=vcov,
        estimator_kind="gls_oracle",
        gamma_hat=G / model.n_obs,
        n_obs=model.n_obs,
        names=model.names,
        residuals=model.Y - model.X @ beta,
    )


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except PanelFGLSError as exc:
        raise StageError(name, exc) from exc


def fgls_from_model(
    model: StackedModel,
    cfg: TuningConfig | None = None,
    ols_result: EstimationResult | None = None,
    diag: bool = False,
) -> EstimationResult:
    """OLS residuals -> tuned covariance estimate -> FGLS, on a stacked model.

    With ``diag=True`` the covariance is the heteroskedasticity-only
    block-diagonal estimate (L = 0, all off-diagonals thresholded away).
    """
    cfg = cfg or TuningConfig()
    if ols_result is None:
        ols_result = _stage("ols", ols, model)
    u = residual_panel(model, ols_result.residuals)
    if diag:
        omega = _stage("covariance", diagonal_omega, u)
        return _stage("fgls", fgls, model, omega, "fgls_diag", {"L": 0, "mode": "diagonal"})
    outcome = _stage("tuning", resolve_tuning, u, cfg)
    omega, lbs, diagn = _stage("covariance", estimate_omega, u, outcome.config)
    prov = outcome.provenance()
    prov["gamma_T"] = lbs.gamma_T
    prov["m_N_hat"] = diagn.m_N_hat
    prov["survivor_fraction"] = list(diagn.survivor_fraction)
    prov["transform_log"] = list(model.transform_log)
    return _stage("fgls", fgls, model, omega, "fgls", prov)


def fgls_pipeline(data: PanelData, spec: DesignSpec | None = None, cfg: TuningConfig | None = None) -> EstimationResult:
    """Full FGLS from a panel: design -> OLS -> tuning -> covariance -> FGLS.

    Tuning provenance (L, M*, c, C_bar, sparsity diagnostics, transform
    log) is attached as ``result.tuning``.  Stage failures are re-raised as
    :class:`StageError` carrying the stage name.
    """
    model = _stage("design", build_stacked, data, spec or DesignSpec())
    return fgls_from_model(model, cfg)


@dataclass(frozen=True)
class WaldResult:
    z: np.ndarray
    p_values: np.ndarray
    reject: np.ndarray
    level: float
    critical_value: float


def wald_test(result: EstimationResult, null_value=0.0, level: float = 0.05) -> WaldResult:
    """Per-coefficient two-sided z tests with N(0, 1) critical values.

    Rejects when |z| is strictly greater than the critical value.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    null = np.broadcast_to(np.asarray(null_value, dtype=float), result.beta.shape)
    se = result.se
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (result.beta - null) / np.where(se > 0, se, 1.0), np.where(result.beta == null, 0.0, np.inf))
    crit = float(norm.ppf(1 - level / 2))
    p = 2.0 * norm.sf(np.abs(z))
    return WaldResult(z=z, p_values=p, reject=np.abs(z) > crit, level=level, critical_value=crit)
