"""Simulation design with clustered, heteroskedastic, serially correlated
errors and regressors, and a replication harness comparing OLS, the
heteroskedasticity-only FGLS, the full FGLS and (optionally) the infeasible
GLS that knows the true covariance.

Each replication draws from its own generator, spawned from
``SeedSequence(seed)`` by replication index, so serial and parallel runs give
bitwise-identical reports.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable

import numpy as np
import scipy.linalg as sla
from scipy.stats import norm

from .banded import sym_sqrt_dense
from .covariance import CVConfig, TuningConfig
from .errors import ConfigError, NumericalError, PanelFGLSError
from .estimators import fgls_from_model, gls_oracle
from .panel import DesignSpec, PanelData, StackedModel, build_stacked, ols

log = logging.getLogger(__name__)

__all__ = [
    "DgpConfig",
    "DgpCovariances",
    "McExperimentReport",
    "EstimatorSummary",
    "build_dgp_covariances",
    "simulate_panel",
    "run_experiment",
    "rep_rng",
]

ESTIMATORS = ("ols", "fgls_diag", "fgls", "gls_oracle")
MAX_SKIP_RATE = 0.02


@dataclass(frozen=True)
class DgpConfig:
    N: int = 50
    T: int = 50
    G: int = 25
    gamma: float = 0.3
    m: float = math.sqrt(5.0)
    rho_max: float = 0.6
    beta0: float = 1.0
    fe_var: float = 0.5
    error_noise_var: float = 5.0
    x_noise_var: float = 1.0
    seed: int = 0
    fixed_structure: bool = False
    sqrt_method: str = "symmetric"

    def __post_init__(self):
        if self.N < 2 or self.T < 2:
            raise ConfigError("N and T must be at least 2")
        if self.G < 1 or self.N % self.G:
            raise ConfigError(f"N={self.N} must be divisible by the cluster count G={self.G}")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0 <= self.rho_max < 1:
            raise ConfigError("rho_max must lie in [0, 1)")
        if not self.m >= 1:
            raise ConfigError("m must be at least 1")
        if self.sqrt_method not in ("cholesky", "symmetric"):
            raise ConfigError("sqrt_method must be 'cholesky' or 'symmetric'")
        for name in ("fe_var", "error_noise_var", "x_noise_var"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass(frozen=True)
class DgpCovariances:
    """Drawn design parameters plus per-cluster square-root factors.

    Both covariances are block diagonal across clusters, so only the
    (size*T)-square cluster blocks are factored.  The dense NT x NT matrices
    are assembled on demand.
    """

    sigma_u: np.ndarray
    rho_u: np.ndarray
    rho_x: np.ndarray
    r_eta: np.ndarray
    n_periods: int
    n_clusters: int
    factors_u: tuple[np.ndarray, ...] = ()
    factors_x: tuple[np.ndarray, ...] = ()
    redraws: int = 0

    @property
    def rho(self) -> np.ndarray:
        return self.rho_u

    @property
    def omega_u(self) -> np.ndarray:
        return serial_covariance(self.sigma_u, self.rho_u, self.n_periods)

    @property
    def omega_x(self) -> np.ndarray:
        return serial_covariance(self.r_eta, self.rho_x, self.n_periods)


MAX_CLUSTER_REDRAWS = 100


def rep_rng(seed: int, rep: int) -> np.random.Generator:
    """Generator for replication ``rep``; independent of how reps are scheduled."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))


def _cluster_block(size: int, gamma: float, rng: np.random.Generator) -> np.ndarray:
    blk = np.eye(size)
    iu = np.triu_indices(size, k=1)
    vals = rng.uniform(0.0, gamma, size=iu[0].size)
    blk[iu] = vals
    blk[(iu[1], iu[0])] = vals
    return blk


def serial_covariance(sigma: np.ndarray, rho: np.ndarray, n_periods: int) -> np.ndarray:
    """NT x NT matrix with (t, s) block Sigma * S^|t-s| (entrywise power),
    where S_ii = rho_i and S_ij = rho_i rho_j."""
    n = sigma.shape[0]
    s = np.outer(rho, rho)
    s[np.diag_indices(n)] = rho
    lags = np.arange(n_periods)
    with np.errstate(invalid="ignore"):
        blocks = sigma[None] * np.power(s[None], lags[:, None, None])
    blocks[0] = sigma  # 0**0 = 1 regardless of rho
    dist = np.abs(lags[:, None] - lags[None, :])
    full = blocks[dist]  # (T, T, N, N)
    return full.transpose(0, 2, 1, 3).reshape(n * n_periods, n * n_periods)


def _factor(a: np.ndarray, method: str) -> np.ndarray | None:
    """Square-root factor F with F F' = a, or None when a is not PD."""
    if method == "symmetric":
        # sym_sqrt_dense tolerates tiny negative eigenvalues; require PD here
        if np.linalg.eigvalsh(a)[0] <= 0:
            return None
        return sym_sqrt_dense(a)
    try:
        return sla.cholesky(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None


def build_dgp_covariances(cfg: DgpConfig, rng: np.random.Generator, with_factors: bool = True) -> DgpCovariances:
    """Draw the cluster correlation, scales and AR coefficients cluster by
    cluster.  A cluster whose error or regressor covariance is not PD has its
    parameters redrawn (at most ``MAX_CLUSTER_REDRAWS`` times)."""
    n, t, g = cfg.N, cfg.T, cfg.G
    size = n // g
    r_eta = np.zeros((n, n))
    d = np.empty(n)
    rho_u = np.empty(n)
    rho_x = np.empty(n)
    fus: list[np.ndarray] = []
    fxs: list[np.ndarray] = []
    redraws = 0
    for k in range(g):
        sl = slice(k * size, (k + 1) * size)
        for _ in range(MAX_CLUSTER_REDRAWS + 1):
            r = _cluster_block(size, cfg.gamma, rng)
            dk = rng.uniform(1.0, cfg.m, size=size)
            ru = rng.uniform(0.0, cfg.rho_max, size=size)
            rx = rng.uniform(0.0, cfg.rho_max, size=size)
            fu = _factor(serial_covariance(dk[:, None] * r * dk[None, :], ru, t), cfg.sqrt_method)
            fx = _factor(serial_covariance(r, rx, t), cfg.sqrt_method) if fu is not None else None
            if fu is not None and fx is not None:
                break
            redraws += 1
        else:
            raise NumericalError(
                f"cluster {k}: simulated covariance not positive definite after {MAX_CLUSTER_REDRAWS} redraws"
            )
        r_eta[sl, sl] = r
        d[sl], rho_u[sl], rho_x[sl] = dk, ru, rx
        if with_factors:
            fus.append(fu)
            fxs.append(fx)
    if redraws:
        log.debug("%d cluster redraw(s) for positive definiteness", redraws)
    return DgpCovariances(
        sigma_u=d[:, None] * r_eta * d[None, :],
        rho_u=rho_u,
        rho_x=rho_x,
        r_eta=r_eta,
        n_periods=t,
        n_clusters=g,
        factors_u=tuple(fus),
        factors_x=tuple(fxs),
        redraws=redraws,
    )


def _cluster_draws(factors: tuple[np.ndarray, ...], n: int, t: int, sd: float, rng) -> np.ndarray:
    """(N, T) panel from per-cluster factors; each factor acts on its
    cluster's time-major stacked noise."""
    g = len(factors)
    size = n // g
    noise = rng.normal(0.0, sd, size=(g, size * t))
    out = np.empty((n, t))
    for k, f in enumerate(factors):
        out[k * size : (k + 1) * size] = (f @ noise[k]).reshape(t, size).T
    return out


def simulate_panel(cfg: DgpConfig, covs: DgpCovariances, rng: np.random.Generator) -> PanelData:
    """One panel from the design: y_it = a_i + m_t + beta0 x_it + u_it."""
    n, t = cfg.N, cfg.T
    if not covs.factors_u or not covs.factors_x:
        raise ConfigError("covariances were built without factors")
    u = _cluster_draws(covs.factors_u, n, t, math.sqrt(cfg.error_noise_var), rng)
    x = _cluster_draws(covs.factors_x, n, t, math.sqrt(cfg.x_noise_var), rng)
    alpha = rng.normal(0.0, math.sqrt(cfg.fe_var), size=n)
    mu = rng.normal(0.0, math.sqrt(cfg.fe_var), size=t)
    y = alpha[:, None] + mu[None, :] + cfg.beta0 * x + u
    return PanelData(y=y, x=x[:, :, None], x_names=("x",))


def _dummy_model(data: PanelData) -> StackedModel:
    """Untransformed stacked model with explicit unit and time dummies
    (one time dummy dropped), regressor of interest first."""
    raw = build_stacked(data, DesignSpec())
    n, t = data.n_units, data.n_periods
    unit = np.tile(np.eye(n), (t, 1))
    time = np.repeat(np.eye(t)[:, 1:], n, axis=0)
    X = np.column_stack([raw.X, unit, time])
    return StackedModel(Y=raw.Y, X=X, n_units=n, n_periods=t, transform_log=("dummies:unit+time",))


# --------------------------------------------------------------------------
# replications


@dataclass(frozen=True)
class RepOutcome:
    rep: int
    beta: dict[str, float] = field(default_factory=dict)
    se: dict[str, float] = field(default_factory=dict)
    M_star: float | None = None
    c: float | None = None
    error: str | None = None


@dataclass(frozen=True)
class _RepTask:
    cfg: DgpConfig
    tuning: TuningConfig
    estimators: tuple[str, ...]
    ols_se: str
    structure: DgpCovariances | None


def _one_rep(task: _RepTask, rep: int) -> RepOutcome:
    cfg = task.cfg
    rng = rep_rng(cfg.seed, rep)
    try:
        covs = task.structure if task.structure is not None else build_dgp_covariances(cfg, rng)
        data = simulate_panel(cfg, covs, rng)
        model = build_stacked(data, DesignSpec(unit_fe=True, time_fe=True))
        beta: dict[str, float] = {}
        se: dict[str, float] = {}
        o = ols(model, se=task.ols_se)
        beta["ols"], se["ols"] = float(o.beta[0]), float(o.se[0])
        M_star = c = None
        if "fgls_diag" in task.estimators:
            r = fgls_from_model(model, task.tuning, ols_result=o, diag=True)
            beta["fgls_diag"], se["fgls_diag"] = float(r.beta[0]), float(r.se[0])
        if "fgls" in task.estimators:
            r = fgls_from_model(model, task.tuning, ols_result=o)
            beta["fgls"], se["fgls"] = float(r.beta[0]), float(r.se[0])
            M_star = r.tuning.get("M_star")
            c = r.tuning.get("c")
        if "gls_oracle" in task.estimators:
            r = gls_oracle(_dummy_model(data), cfg.error_noise_var * covs.omega_u)
            beta["gls_oracle"], se["gls_oracle"] = float(r.beta[0]), float(r.se[0])
        return RepOutcome(rep=rep, beta=beta, se=se, M_star=M_star, c=c)
    except PanelFGLSError as exc:
        return RepOutcome(rep=rep, error=f"{type(exc).__name__}: {exc}")


def _run_chunk(task: _RepTask, reps: list[int]) -> list[RepOutcome]:
    return [_one_rep(task, r) for r in reps]


@dataclass(frozen=True)
class EstimatorSummary:
    mean_beta: float
    std_beta: float
    rmse_ratio_vs_ols: float
    mean_se: float
    std_se: float
    rejection_rate: float


@dataclass(frozen=True)
class McExperimentReport:
    config: DgpConfig
    tuning: TuningConfig
    reps: int
    n_skipped: int
    skip_log: tuple[str, ...]
    summaries: dict[str, EstimatorSummary]
    mean_M_star: float | None = None
    mean_c: float | None = None
    betas: dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": asdict(self.config),
            "tuning": self.tuning.to_dict(),
            "reps": self.reps,
            "n_skipped": self.n_skipped,
            "skip_log": list(self.skip_log),
            "mean_M_star": self.mean_M_star,
            "mean_c": self.mean_c,
            "estimators": {k: asdict(v) for k, v in self.summaries.items()},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["mean_beta", "std_beta", "rmse_ratio_vs_ols", "mean_se", "std_se", "rejection_rate"]
        w.writerow(["estimator", *cols])
        for name, s in self.summaries.items():
            w.writerow([name, *(repr(getattr(s, c)) for c in cols)])
        return buf.getvalue()

    def to_text(self) -> str:
        labels = {"ols": "OLS", "fgls_diag": "Diag", "fgls": "Our", "gls_oracle": "Oracle"}
        names = list(self.summaries)
        c = self.config
        width = 8 * len(names)
        head = "".join(f"{labels.get(n, n):>8}" for n in names)
        lines = [
            f"N={c.N} T={c.T} G={c.G} gamma={c.gamma:g} m={c.m:.4g} rho_max={c.rho_max:g} "
            f"beta0={c.beta0:g} reps={self.reps} skipped={self.n_skipped} seed={c.seed}",
            f"{'mean(b)':^{width}} | {'std(b)':^{width}} | {'RMSE':^{width}}",
            f"{head} | {head} | {head}",
        ]
        s = self.summaries
        lines.append(
            "".join(f"{s[n].mean_beta:8.3f}" for n in names) + " | "
            + "".join(f"{s[n].std_beta:8.3f}" for n in names) + " | "
            + "".join(f"{s[n].rmse_ratio_vs_ols:8.3f}" for n in names)
        )
        lines.append(f"{'mean(se)':^{width}} | {'std(se)':^{width}} | {'reject':^{width}}")
        lines.append(f"{head} | {head} | {head}")
        lines.append(
            "".join(f"{s[n].mean_se:8.3f}" for n in names) + " | "
            + "".join(f"{s[n].std_se:8.3f}" for n in names) + " | "
            + "".join(f"{s[n].rejection_rate:8.3f}" for n in names)
        )
        if self.mean_M_star is not None:
            lines.append(f"mean M* = {self.mean_M_star:.3f}   mean c = {self.mean_c:.3f}")
        return "\n".join(lines) + "\n"


def _summarize(betas: np.ndarray, ses: np.ndarray, ols_mse: float, beta0: float, crit: float) -> EstimatorSummary:
    ddof = 1 if betas.size > 1 else 0
    mse = float(np.mean((betas - beta0) ** 2))
    return EstimatorSummary(
        mean_beta=float(np.mean(betas)),
        std_beta=float(np.std(betas, ddof=ddof)),
        rmse_ratio_vs_ols=mse / ols_mse if ols_mse > 0 else float("nan"),
        mean_se=float(np.mean(ses)),
        std_se=float(np.std(ses, ddof=ddof)),
        rejection_rate=float(np.mean(np.abs(betas - beta0) / ses > crit)),
    )


def run_experiment(
    cfg: DgpConfig,
    reps: int,
    estimators: Iterable[str] = ("ols", "fgls_diag", "fgls"),
    tuning: TuningConfig | None = None,
    workers: int = 1,
    ols_se: str = "cluster_by_unit",
    level: float = 0.05,
) -> McExperimentReport:
    """Replicate the design ``reps`` times and summarize each estimator.

    ``tuning`` defaults to L = 3 with M chosen by cross-validation.  Failed
    replications are logged and excluded; more than 2% failures raises.
    """
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    tuning = tuning or TuningConfig(L=3, cv=CVConfig())
    est = tuple(e for e in ESTIMATORS if e in set(estimators) | {"ols"})
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ConfigError(f"unknown estimator(s) {sorted(unknown)}")
    structure = None
    if cfg.fixed_structure:
        structure = build_dgp_covariances(cfg, np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2**32,))))
    task = _RepTask(cfg=cfg, tuning=tuning, estimators=est, ols_se=ols_se, structure=structure)

    rep_ids = list(range(reps))
    if workers <= 1 or reps == 1:
        outcomes = _run_chunk(task, rep_ids)
    else:
        chunks = [rep_ids[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [task] * len(chunks), chunks))
        outcomes = sorted((o for p in parts for o in p), key=lambda o: o.rep)

    failed = [o for o in outcomes if o.error is not None]
    ok = [o for o in outcomes if o.error is None]
    skip_log = tuple(f"rep {o.rep}: {o.error}" for o in failed)
    for line in skip_log:
        log.warning("skipped %s", line)
    if len(failed) > MAX_SKIP_RATE * reps or not ok:
        raise NumericalError(
            f"{len(failed)} of {reps} replications failed (limit {MAX_SKIP_RATE:.0%}): " + "; ".join(skip_log[:5])
        )

    crit = float(norm.ppf(1 - level / 2))
    betas = {e: np.array([o.beta[e] for o in ok]) for e in est}
    ses = {e: np.array([o.se[e] for o in ok]) for e in est}
    ols_mse = float(np.mean((betas["ols"] - cfg.beta0) ** 2))
    summaries = {e: _summarize(betas[e], ses[e], ols_mse, cfg.beta0, crit) for e in est}
    m_vals = [o.M_star for o in ok if o.M_star is not None]
    c_vals = [o.c for o in ok if o.c is not None]
    return McExperimentReport(
        config=cfg,
        tuning=tuning,
        reps=reps,
        n_skipped=len(failed),
        skip_log=skip_log,
        summaries=summaries,
        mean_M_star=float(np.mean(m_vals)) if m_vals else None,
        mean_c=float(np.mean(c_vals)) if c_vals else None,
        betas=betas,
    )


def write_panel_csv(data: PanelData, fh) -> None:
    """Long-form CSV (unit, time, y, x1..xd) of a simulated panel."""
    w = csv.writer(fh, lineterminator="\n")
    d = data.n_regressors
    xn = list(data.x_names or [f"x{k + 1}" for k in range(d)])
    w.writerow(["unit", "time", "y", *xn])
    for i in range(data.n_units):
        for t in range(data.n_periods):
            w.writerow([i + 1, t + 1, repr(float(data.y[i, t])), *(repr(float(v)) for v in data.x[i, t])])
