"""Thresholded, kernel-banded estimation of the NT x NT error covariance.

Pipeline: residual lag autocovariances R_h (h = 0..L, divisor T) ->
entry-wise soft thresholding of off-diagonal entries with
tau_ij = M * gamma_T * sqrt(R_0,ii R_0,jj) -> kernel weights -> stationary
block-banded matrix.  The threshold constant M is tuned by contiguous-block
cross-validation on the lag-0 block, restricted to [c, C_bar] where c is the
positive-definiteness lower bound and C_bar the smallest constant that
diagonalizes the lag-0 block.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Literal

import numpy as np

from .banded import BlockBandedMatrix, assemble, cholesky, is_positive_definite
from .errors import (
    ConfigError,
    DataError,
    EmptyIntervalError,
    NotPositiveDefiniteError,
)

__all__ = [
    "CVConfig",
    "TuningConfig",
    "LagBlockSet",
    "SparsityDiagnostics",
    "CVResult",
    "lag_autocov",
    "gamma_rate",
    "soft_threshold",
    "soft_threshold_blocks",
    "bartlett_weights",
    "kernel_weights",
    "default_bandwidth",
    "bandwidth_advisory",
    "diagonalizing_bound",
    "omega_at",
    "pd_lower_bound_c",
    "cross_validate_M",
    "estimate_omega",
    "diagonal_omega",
]

Kernel = Literal["bartlett", "truncated"]
Mode = Literal["lag_wise", "universal"]
PD_RESOLUTION = 1e-3
M_FLOOR = 1e-2
# distance kept between the PD bound c and the CV grid; at M just above c
# the estimate is close to singular and GLS weights become erratic
PD_MARGIN = 0.1


@dataclass(frozen=True)
class CVConfig:
    P_override: int | None = None
    grid_size: int = 50
    M_upper: float | None = None
    pd_margin: float = PD_MARGIN

    def __post_init__(self):
        if self.pd_margin < 0:
            raise ConfigError("pd_margin must be non-negative")
        if self.grid_size < 1:
            raise ConfigError("grid_size must be at least 1")
        if self.P_override is not None and self.P_override < 2:
            raise ConfigError("P_override must be at least 2")
        if self.M_upper is not None and not self.M_upper > 0:
            raise ConfigError("M_upper must be positive")


@dataclass(frozen=True)
class TuningConfig:
    """Bandwidth L and threshold constant M; ``None`` means choose automatically."""

    L: int | None = None
    M: float | None = None
    kernel: Kernel = "bartlett"
    mode: Mode = "lag_wise"
    cv: CVConfig = field(default_factory=CVConfig)

    def __post_init__(self):
        if self.L is not None and self.L < 0:
            raise ConfigError("L must be non-negative")
        if self.M is not None and not self.M > 0:
            raise ConfigError("M must be positive")
        if self.kernel not in ("bartlett", "truncated"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.mode not in ("lag_wise", "universal"):
            raise ConfigError(f"unknown thresholding mode {self.mode!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class LagBlockSet:
    raw: np.ndarray  # (L+1, N, N)
    thresholded: np.ndarray  # (L+1, N, N)
    L: int
    M: float
    gamma_T: float
    threshold_matrix: np.ndarray  # (N, N)
    mode: Mode


@dataclass(frozen=True)
class SparsityDiagnostics:
    m_N_hat: int
    survivor_fraction: tuple[float, ...]


@dataclass(frozen=True)
class CVResult:
    M_star: float
    curve: tuple[tuple[float, float], ...]
    c: float
    C_bar: float
    P: int
    L: int

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["M", "objective"])
        for m, obj in self.curve:
            w.writerow([repr(float(m)), repr(float(obj))])
        return buf.getvalue()


# --------------------------------------------------------------------------
# building blocks


def lag_autocov(residuals: np.ndarray, L: int) -> np.ndarray:
    """Raw lag blocks R_h[i, j] = T^-1 sum_{t > h} u_it u_j,t-h for h = 0..L."""
    u = np.asarray(residuals, dtype=float)
    if u.ndim != 2:
        raise DataError(f"residuals must be an (N, T) array; got shape {u.shape}")
    n, t = u.shape
    if not 0 <= L < t:
        raise ConfigError(f"bandwidth L={L} must satisfy 0 <= L < T={t}")
    out = np.empty((L + 1, n, n))
    for h in range(L + 1):
        out[h] = u[:, h:] @ u[:, : t - h].T / t
    out[0] = 0.5 * (out[0] + out[0].T)
    return out


def gamma_rate(L: int, n_units: int, n_periods: int) -> float:
    """sqrt(log(L N) / T), with L floored at 1 so that L = 0 stays defined."""
    return math.sqrt(math.log(max(L, 1) * n_units) / n_periods)


def soft_threshold(z, tau):
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - tau, 0.0)


def _scale_matrix(raw0: np.ndarray) -> np.ndarray:
    d = np.diag(raw0)
    if np.any(d <= 0):
        bad = int(np.argmax(d <= 0))
        raise DataError(
            f"residual variance of unit {bad} is {d[bad]:.3g}; thresholds need every R_0,ii > 0"
        )
    s = np.sqrt(np.abs(d))
    return np.outer(s, s)


def soft_threshold_blocks(
    raw: np.ndarray, M: float, n_periods: int, mode: Mode = "lag_wise", L: int | None = None
) -> LagBlockSet:
    """Soft-threshold the off-diagonal entries of every lag block.

    Diagonal entries are never thresholded, at any lag.  In ``universal``
    mode an off-diagonal pair (i, j) is zeroed at every lag unless
    max_h |R_h,ij| exceeds tau_ij.
    """
    raw = np.asarray(raw, dtype=float)
    if L is None:
        L = raw.shape[0] - 1
    n = raw.shape[1]
    gamma = gamma_rate(L, n, n_periods)
    tau = M * gamma * _scale_matrix(raw[0])
    off = ~np.eye(n, dtype=bool)
    out = raw.copy()
    shrunk = soft_threshold(raw, tau[None])
    out[:, off] = shrunk[:, off]
    if mode == "universal":
        dead = (np.max(np.abs(raw), axis=0) <= tau) & off
        out[:, dead] = 0.0
    elif mode != "lag_wise":
        raise ConfigError(f"unknown thresholding mode {mode!r}")
    return LagBlockSet(raw=raw, thresholded=out, L=L, M=float(M), gamma_T=gamma, threshold_matrix=tau, mode=mode)


def bartlett_weights(L: int) -> np.ndarray:
    if L < 0:
        raise ConfigError("L must be non-negative")
    return 1.0 - np.arange(L + 1) / (L + 1)


def kernel_weights(L: int, kernel: Kernel = "bartlett") -> np.ndarray:
    if kernel == "bartlett":
        return bartlett_weights(L)
    if kernel == "truncated":
        return np.ones(L + 1)
    raise ConfigError(f"unknown kernel {kernel!r}")


def default_bandwidth(n_periods: int) -> int:
    """round(4 (T/100)^(2/9)), capped at T - 2."""
    if n_periods < 2:
        raise ConfigError("T must be at least 2")
    L = int(round(4.0 * (n_periods / 100.0) ** (2.0 / 9.0)))
    return max(0, min(L, n_periods - 2))


def bandwidth_advisory(n_periods: int) -> str | None:
    if n_periods < 100:
        return f"T={n_periods} < 100: a bandwidth L <= 3 is recommended"
    return None


def diagonalizing_bound(raw0: np.ndarray, gamma: float) -> float:
    """Smallest M at which every off-diagonal entry of the lag-0 block is zeroed."""
    n = raw0.shape[0]
    if n < 2 or gamma <= 0:
        return 0.0
    ratio = np.abs(raw0) / _scale_matrix(raw0)
    ratio[np.diag_indices(n)] = 0.0
    return float(np.max(ratio) / gamma)


def omega_at(
    raw: np.ndarray, M: float, n_periods: int, kernel: Kernel = "bartlett", mode: Mode = "lag_wise"
) -> tuple[BlockBandedMatrix, LagBlockSet]:
    lbs = soft_threshold_blocks(raw, M, n_periods, mode)
    return assemble(lbs.thresholded, kernel_weights(lbs.L, kernel), n_periods), lbs


def diagonal_omega(residuals: np.ndarray) -> BlockBandedMatrix:
    """Block-diagonal estimate with blocks diag(R_0,11, ..., R_0,NN).

    This is the thresholded estimator at L = 0 and M >= C_bar, built directly.
    """
    u = np.asarray(residuals, dtype=float)
    var = np.mean(u * u, axis=1)
    return BlockBandedMatrix(blocks=np.diag(var)[None], n_time=u.shape[1])


# --------------------------------------------------------------------------
# tuning


def pd_lower_bound_c(
    raw: np.ndarray,
    n_periods: int,
    kernel: Kernel = "bartlett",
    mode: Mode = "lag_wise",
    resolution: float = PD_RESOLUTION,
    c_bar: float | None = None,
) -> float:
    """Bisection for the smallest M above which the assembled matrix is PD.

    Positive definiteness is decided by whether the banded Cholesky succeeds.
    Returns 0 when the unthresholded (M = 0) estimate is already PD.  The
    search assumes PD-ness is monotone in M between 0 and C_bar.
    """
    raw = np.asarray(raw, dtype=float)
    L = raw.shape[0] - 1
    if c_bar is None:
        c_bar = diagonalizing_bound(raw[0], gamma_rate(L, raw.shape[1], n_periods))

    def pd(m: float) -> bool:
        return is_positive_definite(omega_at(raw, m, n_periods, kernel, mode)[0])

    if pd(0.0):
        return 0.0
    hi = c_bar
    if not pd(hi):
        raise NotPositiveDefiniteError(
            -1,
            f"the estimate at the diagonalizing bound C_bar = {c_bar:.4g} is not positive "
            f"definite with L={L}; use a smaller bandwidth L",
        )
    lo = 0.0
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if pd(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _cv_objective(u: np.ndarray, folds: list[np.ndarray], L: int, grid: np.ndarray) -> np.ndarray:
    n, t = u.shape
    off = ~np.eye(n, dtype=bool)
    total = np.zeros(grid.size)
    for idx in folds:
        mask = np.ones(t, dtype=bool)
        mask[idx] = False
        val = u[:, idx]
        trn = u[:, mask]
        v_cov = val @ val.T / val.shape[1]
        s_cov = trn @ trn.T / trn.shape[1]
        gamma = gamma_rate(L, n, trn.shape[1])
        scale = _scale_matrix(s_cov)[off]
        z = s_cov[off]
        target = v_cov[off]
        diag_err = float(np.sum((np.diag(s_cov) - np.diag(v_cov)) ** 2))
        # (len(grid), n_off) thresholded training entries
        shrunk = np.sign(z) * np.maximum(np.abs(z)[None, :] - grid[:, None] * gamma * scale[None, :], 0.0)
        total += diag_err + np.sum((shrunk - target[None, :]) ** 2, axis=1)
    return total / len(folds)


def n_folds(n_periods: int, cfg: CVConfig | None = None) -> int:
    if cfg is not None and cfg.P_override is not None:
        return cfg.P_override
    return max(2, int(round(math.log(n_periods))))


def cross_validate_M(
    residuals: np.ndarray, L: int, cfg: TuningConfig | None = None, raw: np.ndarray | None = None
) -> CVResult:
    """Choose M by P-fold contiguous-block cross-validation of the lag-0 block.

    Folds are consecutive time segments of (nearly) equal length T/P.  The
    objective at each M is the fold-averaged squared Frobenius distance
    between the thresholded training covariance and the validation sample
    covariance.  M* is the grid argmin over [c + pd_margin, C_bar] on a
    log-spaced grid (over [0.01, C_bar] when the unthresholded estimate is
    already PD, c = 0); ties go to the smaller M.
    """
    cfg = cfg or TuningConfig(L=L)
    u = np.asarray(residuals, dtype=float)
    n, t = u.shape
    P = n_folds(t, cfg.cv)
    if t < 2 * P:
        raise ConfigError(f"cross-validation with P={P} folds needs T >= {2 * P} (got T={t})")
    if raw is None:
        raw = lag_autocov(u, L)
    gamma = gamma_rate(L, n, t)
    c_bar = diagonalizing_bound(raw[0], gamma)
    upper = cfg.cv.M_upper if cfg.cv.M_upper is not None else c_bar
    if n == 1 or upper <= 0:
        # nothing to threshold
        return CVResult(M_star=1.0, curve=(), c=0.0, C_bar=c_bar, P=P, L=L)
    c = pd_lower_bound_c(raw, t, cfg.kernel, cfg.mode, c_bar=upper)
    if c > upper:
        raise EmptyIntervalError(c, upper)
    lower = M_FLOOR if c == 0 else max(min(c + cfg.cv.pd_margin, upper), M_FLOOR)
    if lower > upper:
        raise EmptyIntervalError(c, upper)
    grid = np.array([upper]) if cfg.cv.grid_size == 1 else np.geomspace(lower, upper, cfg.cv.grid_size)
    folds = np.array_split(np.arange(t), P)
    obj = _cv_objective(u, folds, L, grid)
    k = int(np.argmin(obj))
    curve = tuple((float(m), float(o)) for m, o in zip(grid, obj))
    return CVResult(M_star=float(grid[k]), curve=curve, c=c, C_bar=c_bar, P=P, L=L)


def sparsity_diagnostics(lbs: LagBlockSet) -> SparsityDiagnostics:
    th = lbs.thresholded
    n = th.shape[1]
    nz = th != 0
    m_hat = max(1, int(np.max(nz.sum(axis=2))))
    off = ~np.eye(n, dtype=bool)
    if n > 1:
        frac = tuple(float(nz[h][off].mean()) for h in range(th.shape[0]))
    else:
        frac = tuple(0.0 for _ in range(th.shape[0]))
    return SparsityDiagnostics(m_N_hat=m_hat, survivor_fraction=frac)


def estimate_omega(
    residuals: np.ndarray, cfg: TuningConfig
) -> tuple[BlockBandedMatrix, LagBlockSet, SparsityDiagnostics]:
    """Assemble the covariance estimate for fixed (L, M) and check it is PD."""
    if cfg.L is None or cfg.M is None:
        raise ConfigError("estimate_omega needs explicit L and M (tune them first)")
    u = np.asarray(residuals, dtype=float)
    raw = lag_autocov(u, cfg.L)
    omega, lbs = omega_at(raw, cfg.M, u.shape[1], cfg.kernel, cfg.mode)
    try:
        cholesky(omega)
    except NotPositiveDefiniteError as exc:
        try:
            c = pd_lower_bound_c(raw, u.shape[1], cfg.kernel, cfg.mode)
        except NotPositiveDefiniteError:
            c = None
        raise NotPositiveDefiniteError(exc.row, c_estimate=c) from None
    return omega, lbs, sparsity_diagnostics(lbs)


@dataclass(frozen=True)
class TuningOutcome:
    """Resolved tuning with its provenance."""

    config: TuningConfig
    cv: CVResult | None
    advisory: str | None

    def provenance(self) -> dict[str, Any]:
        out: dict[str, Any] = {"L": self.config.L, "M_star": self.config.M, "kernel": self.config.kernel,
                               "mode": self.config.mode}
        if self.cv is not None:
            out.update({"c": self.cv.c, "C_bar": self.cv.C_bar, "P": self.cv.P})
        if self.advisory:
            out["advisory"] = self.advisory
        return out


def resolve_tuning(residuals: np.ndarray, cfg: TuningConfig) -> TuningOutcome:
    """Fill in L (bandwidth rule) and M (cross-validation) where unset.

    If the CV argmin does not give a PD estimate (PD-ness need not be
    monotone in M), the next larger grid point that does is taken.
    """
    u = np.asarray(residuals, dtype=float)
    t = u.shape[1]
    L = cfg.L if cfg.L is not None else default_bandwidth(t)
    advisory = bandwidth_advisory(t) if cfg.L is None else None
    cfg = replace(cfg, L=L)
    if cfg.M is not None:
        return TuningOutcome(cfg, None, advisory)
    raw = lag_autocov(u, L)
    cv = cross_validate_M(u, L, cfg, raw=raw)
    M = cv.M_star
    if cv.curve:
        grid = [m for m, _ in cv.curve]
        start = grid.index(M)
        for m in grid[start:]:
            if is_positive_definite(omega_at(raw, m, t, cfg.kernel, cfg.mode)[0]):
                M = m
                break
        else:
            raise NotPositiveDefiniteError(-1, "no grid point above the CV minimum gives a PD estimate",
                                           c_estimate=cv.c)
    return TuningOutcome(replace(cfg, M=M), cv, advisory)
