"""Balanced panel data model, CSV ingestion and design construction.

Stacking convention: the regression vectors are ordered time-major, i.e.
row ``t * N + i`` holds unit ``i`` at period ``t`` (zero-based), so the
stacked error vector is ``(u_1', ..., u_T')'`` with ``u_t`` the N-vector of
period-t errors.  Every covariance routine in the package relies on this.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, SingularMatrixError, UnbalancedPanelError
from .results import EstimationResult

__all__ = [
    "ColumnMap",
    "PanelData",
    "DesignSpec",
    "StackedModel",
    "ingest_long_csv",
    "build_stacked",
    "unstack",
    "ols",
    "ols_standard_errors",
    "within_transform",
]

COND_LIMIT = 1e12
_WITHIN_TOL = 1e-12
_WITHIN_MAXITER = 1000


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelData:
    """Balanced N x T panel with d regressors.

    ``y`` has shape (N, T) and ``x`` has shape (N, T, d).
    """

    y: np.ndarray
    x: np.ndarray
    unit_labels: tuple[str, ...] | None = None
    time_labels: tuple[str, ...] | None = None
    x_names: tuple[str, ...] | None = None
    unit_weights: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 2:
            x = x[:, :, None]
        if y.ndim != 2 or x.ndim != 3 or x.shape[:2] != y.shape:
            raise DataError(f"shape mismatch: y {y.shape}, x {x.shape}")
        n, t = y.shape
        if n < 2 or t < 2 or x.shape[2] < 1:
            raise DataError(f"need N >= 2, T >= 2, d >= 1; got N={n}, T={t}, d={x.shape[2]}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise DataError("panel contains non-finite values")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        if self.unit_labels is not None and len(self.unit_labels) != n:
            raise DataError("unit_labels length does not match N")
        if self.time_labels is not None and len(self.time_labels) != t:
            raise DataError("time_labels length does not match T")
        if self.x_names is not None and len(self.x_names) != x.shape[2]:
            raise DataError("x_names length does not match d")
        if self.unit_weights is not None:
            w = np.asarray(self.unit_weights, dtype=float).reshape(-1)
            if w.size != n or not np.all(w > 0) or not np.all(np.isfinite(w)):
                raise DataError("unit_weights must be N finite positive values")
            object.__setattr__(self, "unit_weights", _frozen(w))

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def n_regressors(self) -> int:
        return self.x.shape[2]


@dataclass(frozen=True)
class DesignSpec:
    unit_fe: bool = False
    time_fe: bool = False
    unit_trend: bool = False
    weights: Sequence[float] | None = None

    def __post_init__(self):
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).reshape(-1)
            if not np.all(w > 0) or not np.all(np.isfinite(w)):
                raise DataError("weights must be strictly positive and finite")
            object.__setattr__(self, "weights", tuple(float(v) for v in w))


@dataclass(frozen=True)
class StackedModel:
    """Time-major stacked regression ``Y = X beta + U``."""

    Y: np.ndarray
    X: np.ndarray
    n_units: int
    n_periods: int
    transform_log: tuple[str, ...] = ()
    names: tuple[str, ...] = ()

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        nt = self.n_units * self.n_periods
        if Y.size != nt or X.shape[0] != nt:
            raise DataError(f"stacked model needs {nt} rows; got Y {Y.shape}, X {X.shape}")
        object.__setattr__(self, "Y", _frozen(Y))
        object.__setattr__(self, "X", _frozen(X))
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{k + 1}" for k in range(X.shape[1])))

    @property
    def n_obs(self) -> int:
        return self.Y.size

    @property
    def n_regressors(self) -> int:
        return self.X.shape[1]


# --------------------------------------------------------------------------
# ingestion


@dataclass(frozen=True)
class ColumnMap:
    unit: str
    time: str
    y: str
    x: tuple[str, ...]
    weights: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(self.x))
        if not self.x:
            raise DataError("at least one regressor column is required")


def _sort_labels(labels: set[str]) -> list[str]:
    # numeric labels sort by value so that time order survives "9" < "10"
    try:
        return sorted(labels, key=lambda s: (float(s), s))
    except ValueError:
        return sorted(labels)


def ingest_long_csv(path: str | Path, column_map: ColumnMap) -> PanelData:
    """Read a long-form CSV (one row per unit-period) into a PanelData.

    The delimiter is sniffed among comma, tab and semicolon.  Row numbers in
    error messages count the header as row 1.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        sample = fh.read(65536)
        fh.seek(0)
        try:
            dialect = csv.Sniffer().sniff(sample, delimiters=",\t;")
        except csv.Error:
            dialect = csv.excel
        reader = csv.reader(fh, dialect)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        needed = [column_map.unit, column_map.time, column_map.y, *column_map.x]
        if column_map.weights:
            needed.append(column_map.weights)
        missing_cols = [c for c in needed if c not in header]
        if missing_cols:
            raise DataError(f"{path}: missing column(s) {missing_cols}; header is {header}")
        idx = {c: header.index(c) for c in needed}
        value_cols = [column_map.y, *column_map.x]
        if column_map.weights:
            value_cols.append(column_map.weights)

        cells: dict[tuple[str, str], tuple[list[float], int]] = {}
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataError(f"{path}: row {rownum} has {len(row)} fields, expected {len(header)}")
            unit = row[idx[column_map.unit]].strip()
            time = row[idx[column_map.time]].strip()
            vals = []
            for c in value_cols:
                raw = row[idx[c]].strip()
                try:
                    v = float(raw)
                except ValueError:
                    raise DataError(f"{path}: non-numeric value {raw!r} in column {c!r} at row {rownum}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: non-finite value in column {c!r} at row {rownum}")
                vals.append(v)
            key = (unit, time)
            if key in cells:
                raise DataError(
                    f"{path}: duplicate (unit, time) = ({unit}, {time}) at rows {cells[key][1]} and {rownum}"
                )
            cells[key] = (vals, rownum)

    if not cells:
        raise DataError(f"{path}: no data rows")
    units = _sort_labels({k[0] for k in cells})
    times = _sort_labels({k[1] for k in cells})
    missing = [(u, t) for u in units for t in times if (u, t) not in cells]
    if missing:
        raise UnbalancedPanelError(missing[:10], len(missing))

    n, t, d = len(units), len(times), len(column_map.x)
    y = np.empty((n, t))
    x = np.empty((n, t, d))
    w = np.empty((n, t)) if column_map.weights else None
    for i, u in enumerate(units):
        for s, tm in enumerate(times):
            vals = cells[(u, tm)][0]
            y[i, s] = vals[0]
            x[i, s, :] = vals[1 : 1 + d]
            if w is not None:
                w[i, s] = vals[1 + d]
    unit_weights = None
    if w is not None:
        if not np.all(w == w[:, :1]):
            bad = units[int(np.argmax(np.any(w != w[:, :1], axis=1)))]
            raise DataError(f"{path}: weight column {column_map.weights!r} varies within unit {bad}")
        unit_weights = w[:, 0]
    return PanelData(
        y=y,
        x=x,
        unit_labels=tuple(units),
        time_labels=tuple(times),
        x_names=column_map.x,
        unit_weights=unit_weights,
    )


# --------------------------------------------------------------------------
# design construction


def _detrend_units(v: np.ndarray, basis_q: np.ndarray) -> np.ndarray:
    # v: (N, T, k); basis_q: (T, 2) orthonormal basis of span{1, t}
    coef = np.einsum("tb,ntk->nbk", basis_q, v)
    return v - np.einsum("tb,nbk->ntk", basis_q, coef)


def within_transform(
    v: np.ndarray, unit_fe: bool, time_fe: bool, unit_trend: bool = False
) -> tuple[np.ndarray, int]:
    """Partial out unit effects, time effects and unit-specific trends.

    ``v`` has shape (N, T, k).  Alternating projections are iterated until
    the largest change falls below 1e-12 (relative to the data scale);
    for balanced panels this takes two sweeps.  Returns the transformed
    array and the number of sweeps.
    """
    v = np.array(v, dtype=float)
    if not (unit_fe or time_fe or unit_trend):
        return v, 0
    n_t = v.shape[1]
    basis_q = None
    if unit_trend:
        if n_t < 3:
            raise DataError(f"unit-specific trends need T >= 3 (got T={n_t})")
        basis = np.column_stack([np.ones(n_t), np.arange(1, n_t + 1, dtype=float)])
        basis_q, r = np.linalg.qr(basis)
        if abs(r[1, 1]) < 1e-10 * abs(r[0, 0]):
            raise DataError("unit trend regressor is collinear with the unit intercept")
    two_way = time_fe and (unit_fe or unit_trend)
    scale = max(1.0, float(np.max(np.abs(v))) if v.size else 1.0)
    sweeps = 0
    for sweeps in range(1, _WITHIN_MAXITER + 1):
        old = v
        if unit_trend:
            v = _detrend_units(v, basis_q)
        elif unit_fe:
            v = v - v.mean(axis=1, keepdims=True)
        if time_fe:
            v = v - v.mean(axis=0, keepdims=True)
        # a single projection is idempotent
        if not two_way or np.max(np.abs(v - old)) <= _WITHIN_TOL * scale:
            break
    return v, sweeps


def build_stacked(data: PanelData, spec: DesignSpec | None = None) -> StackedModel:
    """Apply weighting, fixed-effect removal and detrending, then stack.

    Order: multiply each unit's variables by sqrt(weight), then remove
    unit/time effects and unit trends jointly.
    """
    spec = spec or DesignSpec()
    n, t, d = data.n_units, data.n_periods, data.n_regressors
    log: list[str] = []
    v = np.concatenate([data.y[:, :, None], data.x], axis=2)

    weights = spec.weights
    if weights is None and data.unit_weights is not None:
        weights = data.unit_weights
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.size != n:
            raise DataError(f"weights have length {w.size}, expected N={n}")
        v = v * np.sqrt(w)[:, None, None]
        log.append("weight:sqrt_unit_weight")

    if spec.unit_fe or spec.time_fe or spec.unit_trend:
        v, sweeps = within_transform(v, spec.unit_fe, spec.time_fe, spec.unit_trend)
        parts = [p for p, on in (("unit_fe", spec.unit_fe), ("time_fe", spec.time_fe), ("unit_trend", spec.unit_trend)) if on]
        log.append(f"within:{'+'.join(parts)}:sweeps={sweeps}")

    Y = v[:, :, 0].T.reshape(-1)
    X = v[:, :, 1:].transpose(1, 0, 2).reshape(n * t, d)
    names = data.x_names or tuple(f"x{k + 1}" for k in range(d))
    return StackedModel(Y=Y, X=X, n_units=n, n_periods=t, transform_log=tuple(log), names=tuple(names))


def unstack(model: StackedModel) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of the stacking: returns y (N, T) and x (N, T, d)."""
    n, t = model.n_units, model.n_periods
    y = model.Y.reshape(t, n).T.copy()
    x = model.X.reshape(t, n, -1).transpose(1, 0, 2).copy()
    return y, x


def residual_panel(model: StackedModel, resid: np.ndarray) -> np.ndarray:
    """Reshape a stacked residual vector into the (N, T) layout."""
    return np.asarray(resid, dtype=float).reshape(model.n_periods, model.n_units).T


# --------------------------------------------------------------------------
# OLS


def _check_design(X: np.ndarray) -> None:
    s = np.linalg.svd(X, compute_uv=False)
    if s.size == 0 or s[-1] <= 0 or (s[0] / s[-1]) ** 2 > COND_LIMIT:
        smin = s[-1] if s.size else 0.0
        raise SingularMatrixError(
            f"X'X is singular or ill-conditioned: smallest singular value of X is {smin:.3e} "
            f"(largest {s[0] if s.size else 0.0:.3e}); check for collinear regressors or "
            "regressors absorbed by the fixed effects"
        )


def ols(model: StackedModel, se: str = "iid") -> EstimationResult:
    """Pooled OLS on the stacked model.

    Residuals are kept on the result in stacked order; ``se`` picks the
    reported covariance (see :func:`ols_standard_errors`).  All three
    variants are also stored in ``extra_se``.
    """
    X, Y = model.X, model.Y
    _check_design(X)
    xtx = X.T @ X
    beta = np.linalg.solve(xtx, X.T @ Y)
    resid = Y - X @ beta
    xtx_inv = np.linalg.inv(xtx)
    vcovs = {kind: _ols_vcov(model, resid, kind, xtx_inv) for kind in ("iid", "white", "cluster_by_unit")}
    if se not in vcovs:
        raise ValueError(f"unknown OLS standard error kind {se!r}")
    return EstimationResult(
        beta=beta,
        vcov=vcovs[se],
        estimator_kind="ols",
        gamma_hat=xtx / model.n_obs,
        n_obs=model.n_obs,
        names=model.names,
        residuals=resid,
        se_kind=se,
        extra_se={k: np.sqrt(np.clip(np.diag(v), 0, None)) for k, v in vcovs.items()},
    )


def _ols_vcov(model: StackedModel, resid: np.ndarray, kind: str, xtx_inv: np.ndarray) -> np.ndarray:
    X = model.X
    if kind == "iid":
        dof = model.n_obs - X.shape[1]
        sigma2 = float(resid @ resid) / dof if dof > 0 else 0.0
        return sigma2 * xtx_inv
    if kind == "white":
        meat = (X * resid[:, None] ** 2).T @ X
    elif kind == "cluster_by_unit":
        n, t = model.n_units, model.n_periods
        scores = (X * resid[:, None]).reshape(t, n, -1).sum(axis=0)  # (N, d)
        meat = scores.T @ scores
    else:
        raise ValueError(f"unknown OLS standard error kind {kind!r}")
    return xtx_inv @ meat @ xtx_inv


def ols_standard_errors(model: StackedModel, residuals: np.ndarray, kind: str = "iid") -> np.ndarray:
    """OLS standard errors: ``iid``, ``white`` or ``cluster_by_unit``.

    No finite-sample corrections beyond the n - d divisor of the iid case.
    """
    X = model.X
    _check_design(X)
    xtx_inv = np.linalg.inv(X.T @ X)
    v = _ols_vcov(model, np.asarray(residuals, dtype=float).reshape(-1), kind, xtx_inv)
    return np.sqrt(np.clip(np.diag(v), 0.0, None))
