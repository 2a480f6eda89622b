import numpy as np
import pytest

from panelfgls import montecarlo as mc
from panelfgls.covariance import TuningConfig
from panelfgls.errors import ConfigError, NumericalError
from panelfgls.montecarlo import (
    DgpConfig,
    build_dgp_covariances,
    rep_rng,
    run_experiment,
    serial_covariance,
    simulate_panel,
)


def small_cfg(**kw):
    base = dict(N=4, T=10, G=2, seed=3)
    base.update(kw)
    return DgpConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        DgpConfig(N=10, G=3)
    with pytest.raises(ConfigError):
        DgpConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        DgpConfig(rho_max=-0.1)


def test_gamma_zero_gives_identity_correlation():
    covs = build_dgp_covariances(small_cfg(gamma=0.0), np.random.default_rng(0))
    np.testing.assert_array_equal(covs.r_eta, np.eye(4))
    assert np.count_nonzero(covs.sigma_u - np.diag(np.diag(covs.sigma_u))) == 0


def test_rho_zero_has_no_serial_blocks():
    cfg = small_cfg(rho_max=0.0)
    covs = build_dgp_covariances(cfg, np.random.default_rng(1))
    om = covs.omega_u.reshape(cfg.T, cfg.N, cfg.T, cfg.N)
    for t in range(cfg.T):
        for s in range(cfg.T):
            if t != s:
                assert np.all(om[t, :, s, :] == 0)
    np.testing.assert_array_equal(om[0, :, 0, :], covs.sigma_u)


def test_covariances_match_entrywise_formula():
    cfg = small_cfg()
    covs = build_dgp_covariances(cfg, np.random.default_rng(7))
    n, t = cfg.N, cfg.T
    # cluster structure: units {0,1} and {2,3}
    assert covs.r_eta[0, 2] == 0 and covs.r_eta[1, 3] == 0
    assert 0 <= covs.r_eta[0, 1] < cfg.gamma
    d = np.sqrt(np.diag(covs.sigma_u))
    assert np.all((d >= 1) & (d <= cfg.m))
    for name, sig, rho in (("u", covs.sigma_u, covs.rho_u), ("x", covs.r_eta, covs.rho_x)):
        om = covs.omega_u if name == "u" else covs.omega_x
        for r in range(n * t):
            ti, i = divmod(r, n)
            for c in range(n * t):
                si, j = divmod(c, n)
                s_ij = rho[i] if i == j else rho[i] * rho[j]
                assert om[r, c] == pytest.approx(sig[i, j] * s_ij ** abs(ti - si), rel=1e-14, abs=0)
        np.testing.assert_array_equal(om, om.T)
        assert np.linalg.eigvalsh(om)[0] > 0


def test_cluster_factors_reproduce_covariance():
    cfg = small_cfg(N=6, G=3, T=8)
    covs = build_dgp_covariances(cfg, np.random.default_rng(2))
    size = cfg.N // cfg.G
    for k, f in enumerate(covs.factors_u):
        units = np.arange(k * size, (k + 1) * size)
        block = serial_covariance(covs.sigma_u[np.ix_(units, units)], covs.rho_u[units], cfg.T)
        np.testing.assert_allclose(f @ f.T, block, atol=1e-10)
        np.testing.assert_allclose(f, f.T, atol=1e-12)  # symmetric root


def test_cholesky_factor_option():
    cfg = small_cfg(sqrt_method="cholesky")
    covs = build_dgp_covariances(cfg, np.random.default_rng(2))
    f = covs.factors_x[0]
    np.testing.assert_array_equal(f, np.tril(f))


def test_high_gamma_draws_are_positive_definite():
    cfg = DgpConfig(N=50, T=20, gamma=0.7, seed=1)
    covs = build_dgp_covariances(cfg, rep_rng(1, 0))
    assert np.linalg.eigvalsh(covs.omega_u)[0] > 0
    assert np.linalg.eigvalsh(covs.omega_x)[0] > 0


# ---- simulated panels ----------------------------------------------------------------


def test_error_variance_matches_design():
    cfg = small_cfg(beta0=0.0, fe_var=0.0)
    covs = build_dgp_covariances(cfg, np.random.default_rng(4))
    rng = np.random.default_rng(5)
    draws = np.array([simulate_panel(cfg, covs, rng).y for _ in range(2000)])
    var = draws.var(axis=0)  # (N, T)
    expect = cfg.error_noise_var * np.diag(covs.sigma_u)[:, None]
    assert np.max(np.abs(var / expect - 1)) < 0.10


def test_regressor_independent_of_error():
    cfg = small_cfg(beta0=0.0, fe_var=0.0, N=10, G=5, T=40)
    covs = build_dgp_covariances(cfg, np.random.default_rng(6))
    rng = np.random.default_rng(8)
    u, x = [], []
    for _ in range(50):
        p = simulate_panel(cfg, covs, rng)
        u.append(p.y.ravel())
        x.append(p.x[:, :, 0].ravel())
    assert abs(np.corrcoef(np.concatenate(u), np.concatenate(x))[0, 1]) < 0.05


def test_lag_one_autocorrelation_matches_rho():
    cfg = DgpConfig(N=4, T=500, G=2, beta0=0.0, fe_var=0.0, seed=9)
    covs = build_dgp_covariances(cfg, np.random.default_rng(9))
    u = simulate_panel(cfg, covs, np.random.default_rng(10)).y
    for i in range(cfg.N):
        ac = np.corrcoef(u[i, 1:], u[i, :-1])[0, 1]
        assert abs(ac - covs.rho_u[i]) < 0.1


def test_simulate_is_seeded():
    cfg = small_cfg()
    a = simulate_panel(cfg, build_dgp_covariances(cfg, rep_rng(1, 4)), rep_rng(1, 4))
    rng = rep_rng(1, 4)
    b = simulate_panel(cfg, build_dgp_covariances(cfg, rng), rng)
    assert not np.array_equal(a.y, b.y)  # same stream, different consumption
    rng = rep_rng(1, 4)
    c = simulate_panel(cfg, build_dgp_covariances(cfg, rng), rng)
    np.testing.assert_array_equal(b.y, c.y)


# ---- experiments ----------------------------------------------------------------------


def test_single_rep_report():
    rep = run_experiment(DgpConfig(N=10, T=30, G=5, seed=2), 1)
    for name, s in rep.summaries.items():
        assert s.std_beta == 0.0 and s.std_se == 0.0
        assert s.mean_beta == rep.betas[name][0]
        assert s.rejection_rate in (0.0, 1.0)
    assert rep.summaries["ols"].rmse_ratio_vs_ols == 1.0


def test_report_is_deterministic():
    cfg = DgpConfig(N=10, T=30, G=5, seed=11)
    a = run_experiment(cfg, 4)
    b = run_experiment(cfg, 4)
    assert a.to_text() == b.to_text() and a.to_csv() == b.to_csv()
    assert a.to_dict() == b.to_dict()


def test_fixed_structure_mode():
    cfg = DgpConfig(N=10, T=30, G=5, seed=11, fixed_structure=True)
    rep = run_experiment(cfg, 3, estimators=("ols", "fgls", "gls_oracle"), tuning=TuningConfig(L=2))
    assert set(rep.summaries) == {"ols", "fgls", "gls_oracle"}
    assert rep.n_skipped == 0


def test_report_renderings():
    rep = run_experiment(DgpConfig(N=10, T=30, G=5, seed=1), 2)
    text = rep.to_text()
    assert "OLS" in text and "Diag" in text and "Our" in text and "mean M*" in text
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("estimator,mean_beta")
    assert [ln.split(",")[0] for ln in lines[1:]] == ["ols", "fgls_diag", "fgls"]
    assert 0 <= rep.to_dict()["estimators"]["fgls"]["rejection_rate"] <= 1


def test_unknown_estimator_rejected():
    with pytest.raises(ConfigError):
        run_experiment(DgpConfig(N=10, T=30, G=5), 1, estimators=("ols", "lasso"))


def _fail_some(fail):
    real = mc._one_rep

    def fake(task, rep):
        if rep in fail:
            return mc.RepOutcome(rep=rep, error="NotPositiveDefiniteError: forced")
        return real(task, rep)

    return fake


def test_skips_are_reported(monkeypatch):
    monkeypatch.setattr(mc, "_one_rep", _fail_some({1}))
    rep = run_experiment(DgpConfig(N=4, T=12, G=2, seed=0), 60, estimators=("ols",))
    assert rep.n_skipped == 1 and rep.skip_log[0].startswith("rep 1:")
    assert "skipped=1" in rep.to_text()


def test_skip_rate_limit(monkeypatch):
    monkeypatch.setattr(mc, "_one_rep", _fail_some({0, 1}))
    with pytest.raises(NumericalError, match="replications failed"):
        run_experiment(DgpConfig(N=4, T=12, G=2, seed=0), 60, estimators=("ols",))


def test_ols_unbiased_at_design_scale():
    rep = run_experiment(DgpConfig(N=10, T=30, G=5, seed=21), 40, estimators=("ols",))
    s = rep.summaries["ols"]
    assert abs(s.mean_beta - 1.0) <= 3 * s.std_beta / np.sqrt(40)
