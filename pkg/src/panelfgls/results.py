"""Estimation result container shared by OLS, FGLS and the oracle GLS."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

ESTIMATOR_KINDS = ("ols", "fgls", "fgls_diag", "gls_oracle")


@dataclass(frozen=True)
class EstimationResult:
    """Coefficients, their covariance and derived inference quantities.

    ``gamma_hat`` is X' W X / NT for the weighting matrix W actually used
    (identity for OLS), so that ``vcov == inv(gamma_hat * NT)`` holds for the
    GLS-type estimators.
    """

    beta: np.ndarray
    vcov: np.ndarray
    estimator_kind: str
    gamma_hat: np.ndarray
    n_obs: int
    names: tuple[str, ...] = ()
    residuals: np.ndarray | None = None
    tuning: dict[str, Any] | None = None
    se_kind: str = "model"
    extra_se: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.estimator_kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator kind {self.estimator_kind!r}")
        beta = np.asarray(self.beta, dtype=float).reshape(-1)
        vcov = np.asarray(self.vcov, dtype=float)
        # symmetrize away round-off from the inversion
        vcov = 0.5 * (vcov + vcov.T)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "vcov", vcov)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{k + 1}" for k in range(beta.size)))

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def t_stats(self) -> np.ndarray:
        se = self.se
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, self.beta / np.where(se > 0, se, 1.0), np.nan)

    def with_vcov(self, vcov: np.ndarray, se_kind: str) -> EstimationResult:
        """Copy of this result with a different coefficient covariance."""
        return EstimationResult(
            beta=self.beta,
            vcov=vcov,
            estimator_kind=self.estimator_kind,
            gamma_hat=self.gamma_hat,
            n_obs=self.n_obs,
            names=self.names,
            residuals=self.residuals,
            tuning=self.tuning,
            se_kind=se_kind,
            extra_se=dict(self.extra_se),
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "estimator": self.estimator_kind,
            "se_kind": self.se_kind,
            "n_obs": self.n_obs,
            "names": list(self.names),
            "beta": self.beta.tolist(),
            "se": self.se.tolist(),
            "t": [None if not np.isfinite(v) else float(v) for v in self.t_stats],
            "vcov": self.vcov.tolist(),
            "gamma_hat": np.asarray(self.gamma_hat).tolist(),
        }
        if self.extra_se:
            out["extra_se"] = {k: np.asarray(v).tolist() for k, v in self.extra_se.items()}
        if self.tuning is not None:
            out["tuning"] = self.tuning
        return out
