"""Command-line interface: ``panelfgls {estimate,tune,simulate}``.

Exit codes: 0 success, 1 input/data error, 2 numerical failure,
3 configuration error.  Settings may come from a flat ``key = value`` file
(``--config``); command-line flags take precedence over the file, which
takes precedence over built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any


from . import __version__
from .covariance import (
    PD_MARGIN,
    CVConfig,
    TuningConfig,
    cross_validate_M,
    default_bandwidth,
    lag_autocov,
    soft_threshold_blocks,
    sparsity_diagnostics,
)
from .errors import ConfigError, PanelFGLSError
from .estimators import fgls_from_model, wald_test
from .montecarlo import DgpConfig, build_dgp_covariances, rep_rng, run_experiment, simulate_panel, write_panel_csv
from .panel import ColumnMap, DesignSpec, build_stacked, ingest_long_csv, ols, residual_panel

log = logging.getLogger("panelfgls")

DEFAULTS: dict[str, Any] = {
    "format": "text",
    "kernel": "bartlett",
    "M_grid": 50,
    "pd_margin": PD_MARGIN,
    "seed": 0,
    "threads": "1",
    "N": 50,
    "T": 50,
    "G": 25,
    "gamma": 0.3,
    "m": 5 ** 0.5,
    "rho_max": 0.6,
    "beta0": 1.0,
    "reps": 100,
    "L_sim": 3,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(3, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value settings file; flags override it")
    p.add_argument("--format", choices=["text", "csv", "json"], help="report format (default text)")
    p.add_argument("--output", help="write the report here instead of standard output")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--threads", help="worker processes for replications: integer or 'auto' (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")


def _add_data(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--input", help="long-form CSV, one row per unit and period")
    g.add_argument("--unit-col", help="unit identifier column")
    g.add_argument("--time-col", help="time identifier column")
    g.add_argument("--y-col", help="dependent variable column")
    g.add_argument("--x-cols", help="comma-separated regressor columns")
    g.add_argument("--weights-col", help="per-unit weight column (constant within unit)")
    g.add_argument("--fe", choices=["unit", "time", "unit,time", "none"], help="fixed effects to remove")
    g.add_argument("--trend", choices=["unit"], help="remove unit-specific linear trends")


def _add_tuning(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("covariance tuning")
    g.add_argument("--L", type=int, help="bandwidth (default: round(4 (T/100)^(2/9)))")
    g.add_argument("--M", type=float, help="threshold constant (default: cross-validated)")
    g.add_argument("--auto-tune", action="store_const", const=True, help="cross-validate M (default when --M is absent)")
    g.add_argument("--kernel", choices=["bartlett", "truncated"], help="lag kernel (default bartlett)")
    g.add_argument("--universal-threshold", action="store_const", const=True,
                   help="zero a pair at every lag unless it survives at some lag")
    g.add_argument("--M-grid", type=int, help="number of cross-validation grid points (default 50)")
    g.add_argument("--cv-folds", type=int, help="number of cross-validation folds (default round(log T))")
    g.add_argument("--M-upper", type=float, help="upper end of the M grid (default C_bar)")
    g.add_argument("--pd-margin", type=float,
                   help="keep the M grid at least this far above the PD bound c (default 0.1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="panelfgls", description="Thresholded-covariance FGLS for balanced panels.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    est = sub.add_parser("estimate", help="OLS and FGLS estimates for a panel CSV")
    _add_common(est)
    _add_data(est)
    _add_tuning(est)

    tune = sub.add_parser("tune", help="cross-validate the threshold constant M")
    _add_common(tune)
    _add_data(tune)
    _add_tuning(tune)
    tune.add_argument("--curve-csv", help="write the (M, objective) curve to this CSV")

    sim = sub.add_parser("simulate", help="Monte Carlo comparison of OLS and FGLS")
    _add_common(sim)
    _add_tuning(sim)
    g = sim.add_argument_group("design")
    g.add_argument("--N", type=int, help="units (default 50)")
    g.add_argument("--T", type=int, help="periods (default 50)")
    g.add_argument("--G", type=int, help="clusters; must divide N (default 25)")
    g.add_argument("--gamma", type=float, help="within-cluster correlation bound (default 0.3)")
    g.add_argument("--m", type=float, help="heteroskedasticity scale bound (default sqrt 5)")
    g.add_argument("--rho-max", type=float, help="serial correlation bound (default 0.6)")
    g.add_argument("--beta0", type=float, help="true coefficient (default 1)")
    g.add_argument("--reps", type=int, help="replications (default 100; 0 only with --emit-csv)")
    g.add_argument("--oracle", action="store_const", const=True, help="also run the infeasible GLS")
    g.add_argument("--fixed-structure", action="store_const", const=True,
                   help="draw the covariance structure once instead of per replication")
    g.add_argument("--emit-csv", help="write one simulated panel (replication 0) as long-form CSV")
    return parser


# --------------------------------------------------------------------------
# configuration resolution


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    if not args.config:
        return args
    settings = read_config_file(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    for key, raw in settings.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise ConfigError(f"unknown key {key!r} in config file {args.config}")
        if getattr(args, key) is not None:
            continue  # command line wins
        if isinstance(action, argparse._StoreConstAction):  # noqa: SLF001
            value: Any = raw.lower() in ("1", "true", "yes", "on")
            if raw.lower() not in ("0", "1", "true", "false", "yes", "no", "on", "off"):
                raise ConfigError(f"config key {key!r} expects a boolean, got {raw!r}")
            value = value or None
        else:
            try:
                value = action.type(raw) if action.type else raw
            except ValueError:
                raise ConfigError(f"config key {key!r}: invalid value {raw!r}") from None
            if action.choices and value not in action.choices:
                raise ConfigError(f"config key {key!r}: {value!r} not in {sorted(action.choices)}")
        setattr(args, key, value)
    return args


def _get(args: argparse.Namespace, name: str, default_key: str | None = None):
    v = getattr(args, name, None)
    return DEFAULTS.get(default_key or name) if v is None else v


def _workers(args) -> int:
    raw = str(_get(args, "threads"))
    if raw == "auto":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"--threads must be an integer or 'auto', got {raw!r}") from None
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    return n


def _tuning_from_args(args, default_L: int | None = None) -> TuningConfig:
    if args.M is not None and args.auto_tune:
        raise ConfigError("--M and --auto-tune are mutually exclusive")
    L = args.L if args.L is not None else default_L
    return TuningConfig(
        L=L,
        M=args.M,
        kernel=_get(args, "kernel"),
        mode="universal" if args.universal_threshold else "lag_wise",
        cv=CVConfig(P_override=args.cv_folds, grid_size=_get(args, "M_grid"), M_upper=args.M_upper,
                    pd_margin=_get(args, "pd_margin")),
    )


def _design_from_args(args) -> DesignSpec:
    fe = args.fe or "none"
    return DesignSpec(unit_fe="unit" in fe, time_fe="time" in fe, unit_trend=args.trend == "unit")


def _load_panel(args):
    missing = [f for f in ("input", "unit_col", "time_col", "y_col", "x_cols") if getattr(args, f) is None]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    cmap = ColumnMap(
        unit=args.unit_col,
        time=args.time_col,
        y=args.y_col,
        x=tuple(c.strip() for c in args.x_cols.split(",") if c.strip()),
        weights=args.weights_col,
    )
    return ingest_long_csv(args.input, cmap)


# --------------------------------------------------------------------------
# output


def write_atomic(path: str | os.PathLike, text: str) -> None:
    """Write via a temporary file in the target directory and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _emit(args, text: str) -> None:
    if args.output:
        write_atomic(args.output, text)
    else:
        sys.stdout.write(text)


def _star(beta: float, se: float, crit: float) -> str:
    return "*" if se > 0 and abs(beta / se) > crit else " "


def render_estimate(ols_res, fgls_res, fmt: str) -> str:
    w = wald_test(fgls_res)
    crit = w.critical_value
    names = ols_res.names
    se_iid = ols_res.extra_se["iid"]
    se_w = ols_res.extra_se["white"]
    se_cx = ols_res.extra_se["cluster_by_unit"]
    if fmt == "json":
        rec = {
            "ols": ols_res.to_dict(),
            "fgls": fgls_res.to_dict(),
            "fgls_tests": {"z": w.z.tolist(), "p": w.p_values.tolist(), "reject_5pct": w.reject.tolist()},
        }
        return json.dumps(rec, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        cw = csv.writer(buf, lineterminator="\n")
        cw.writerow(["name", "beta_ols", "se_iid", "se_white", "se_cluster", "beta_fgls", "se_fgls", "t_fgls", "p_fgls"])
        for k, n in enumerate(names):
            cw.writerow([n, *(repr(float(v)) for v in (ols_res.beta[k], se_iid[k], se_w[k], se_cx[k],
                                                        fgls_res.beta[k], fgls_res.se[k], w.z[k], w.p_values[k]))])
        return buf.getvalue()
    width = max(8, *(len(n) for n in names))
    lines = [
        f"{'':{width}} {'b_OLS':>9} {'se_iid':>10} {'se_W':>10} {'se_CX':>10} {'b_FGLS':>9} {'se_FGLS':>10}",
    ]
    for k, n in enumerate(names):
        b, bf = ols_res.beta[k], fgls_res.beta[k]
        cells = [f"{se:9.4f}{_star(b, se, crit)}" for se in (se_iid[k], se_w[k], se_cx[k])]
        lines.append(
            f"{n:{width}} {b:9.4f} {' '.join(cells)} {bf:9.4f} {fgls_res.se[k]:9.4f}{_star(bf, fgls_res.se[k], crit)}"
        )
    tun = fgls_res.tuning or {}
    lines.append("")
    lines.append("* significant at 5% (N(0,1) critical value)")
    lines.append(
        "FGLS tuning: "
        + ", ".join(f"{k}={_fmt(tun[k])}" for k in ("L", "M_star", "c", "C_bar", "P", "m_N_hat", "kernel", "mode") if k in tun)
    )
    if tun.get("transform_log"):
        lines.append("transforms: " + "; ".join(tun["transform_log"]))
    if tun.get("advisory"):
        lines.append("note: " + tun["advisory"])
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return f"{v:.4g}" if isinstance(v, float) else str(v)


# --------------------------------------------------------------------------
# commands


def cmd_estimate(args) -> int:
    data = _load_panel(args)
    model = build_stacked(data, _design_from_args(args))
    o = ols(model)
    res = fgls_from_model(model, _tuning_from_args(args), ols_result=o)
    _emit(args, render_estimate(o, res, _get(args, "format")))
    return 0


def cmd_tune(args) -> int:
    data = _load_panel(args)
    model = build_stacked(data, _design_from_args(args))
    o = ols(model)
    u = residual_panel(model, o.residuals)
    cfg = _tuning_from_args(args)
    L = cfg.L if cfg.L is not None else default_bandwidth(u.shape[1])
    raw = lag_autocov(u, L)
    cv = cross_validate_M(u, L, cfg, raw=raw)
    diag = sparsity_diagnostics(soft_threshold_blocks(raw, cv.M_star, u.shape[1], cfg.mode))
    if args.curve_csv:
        write_atomic(args.curve_csv, cv.curve_csv())
    record = {
        "L": L, "P": cv.P, "c": cv.c, "C_bar": cv.C_bar, "M_star": cv.M_star,
        "m_N_hat": diag.m_N_hat, "survivor_fraction": list(diag.survivor_fraction),
    }
    fmt = _get(args, "format")
    if fmt == "json":
        record["curve"] = [list(p) for p in cv.curve]
        text = json.dumps(record, indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        text = cv.curve_csv()
    else:
        lines = [f"L = {L}   folds P = {cv.P}",
                 f"c = {cv.c:.4f}   C_bar = {cv.C_bar:.4f}   M* = {cv.M_star:.4f}",
                 f"m_N_hat = {diag.m_N_hat}   survivor fraction by lag = "
                 + ", ".join(f"{f:.3f}" for f in diag.survivor_fraction),
                 "", f"{'M':>10} {'objective':>14}"]
        lines += [f"{m:10.4f} {obj:14.6g}" for m, obj in cv.curve]
        text = "\n".join(lines) + "\n"
    _emit(args, text)
    return 0


def cmd_simulate(args) -> int:
    reps = _get(args, "reps")
    cfg = DgpConfig(
        N=_get(args, "N"), T=_get(args, "T"), G=_get(args, "G"), gamma=_get(args, "gamma"), m=_get(args, "m"),
        rho_max=_get(args, "rho_max"), beta0=_get(args, "beta0"), seed=_get(args, "seed"),
        fixed_structure=bool(args.fixed_structure),
    )
    if reps < 0 or (reps == 0 and not args.emit_csv):
        raise ConfigError("--reps must be at least 1 (0 is allowed only with --emit-csv)")
    tuning = _tuning_from_args(args, default_L=DEFAULTS["L_sim"])
    if args.emit_csv:
        rng = rep_rng(cfg.seed, 0)
        panel = simulate_panel(cfg, build_dgp_covariances(cfg, rng), rng)
        buf = io.StringIO()
        write_panel_csv(panel, buf)
        write_atomic(args.emit_csv, buf.getvalue())
    if reps == 0:
        return 0
    estimators = ["ols", "fgls_diag", "fgls"] + (["gls_oracle"] if args.oracle else [])
    report = run_experiment(cfg, reps, estimators, tuning, workers=_workers(args))
    fmt = _get(args, "format")
    if fmt == "json":
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        text = report.to_csv()
    else:
        text = report.to_text()
    _emit(args, text)
    return 0


COMMANDS = {"estimate": cmd_estimate, "tune": cmd_tune, "simulate": cmd_simulate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args = _apply_config(parser, args)
        return COMMANDS[args.command](args)
    except PanelFGLSError as exc:
        print(f"panelfgls {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"panelfgls {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
