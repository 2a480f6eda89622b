import json

import numpy as np
import pytest

from panelfgls.cli import main, read_config_file
from panelfgls.errors import ConfigError
from panelfgls.montecarlo import DgpConfig, build_dgp_covariances, rep_rng, simulate_panel, write_panel_csv
from panelfgls.panel import PanelData

DATA_FLAGS = ["--unit-col", "unit", "--time-col", "time", "--y-col", "y", "--x-cols", "x"]
SMALL_SIM = ["--N", "10", "--T", "30", "--G", "5"]


def emit(tmp_path, *extra):
    path = tmp_path / "panel.csv"
    assert main(["simulate", *SMALL_SIM, "--reps", "0", "--emit-csv", str(path), *extra]) == 0
    return path


def write_panel(path, data: PanelData):
    with open(path, "w", newline="") as fh:
        write_panel_csv(data, fh)
    return path


def test_emit_and_estimate_round_trip(tmp_path):
    hits = 0
    for seed in range(5):
        csv_path = emit(tmp_path, "--seed", str(seed))
        out = tmp_path / "est.json"
        rc = main(["estimate", "--input", str(csv_path), *DATA_FLAGS, "--fe", "unit,time",
                   "--format", "json", "--output", str(out)])
        assert rc == 0
        rec = json.loads(out.read_text())
        b, se = rec["fgls"]["beta"][0], rec["fgls"]["se"][0]
        hits += abs(b - 1.0) <= 2 * se
        tun = rec["fgls"]["tuning"]
        assert {"L", "M_star", "c", "C_bar", "m_N_hat"} <= set(tun)
    assert hits >= 4  # a 2-SE band covers about 95% of draws


def test_estimate_text_table(tmp_path, capsys):
    csv_path = emit(tmp_path)
    assert main(["estimate", "--input", str(csv_path), *DATA_FLAGS, "--fe", "unit,time", "--L", "2"]) == 0
    out = capsys.readouterr().out
    assert "b_OLS" in out and "se_CX" in out and "b_FGLS" in out
    assert "L=2" in out and "M_star=" in out


def test_estimate_csv_format(tmp_path, capsys):
    csv_path = emit(tmp_path)
    assert main(["estimate", "--input", str(csv_path), *DATA_FLAGS, "--format", "csv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split(",")[:3] == ["name", "beta_ols", "se_iid"]
    assert lines[1].startswith("x,")


def test_fe_and_trend_model_shape(tmp_path, capsys):
    rng = np.random.default_rng(0)
    n, t = 8, 20
    tt = np.arange(t)
    x = rng.normal(size=(n, t, 2))
    y = (rng.normal(size=n)[:, None] + rng.normal(size=t)[None] + rng.normal(size=n)[:, None] * tt
         + x @ np.array([0.5, -1.0]) + 0.1 * rng.normal(size=(n, t)))
    path = write_panel(tmp_path / "p.csv", PanelData(y=y, x=x, x_names=("a", "b")))
    rc = main(["estimate", "--input", str(path), "--unit-col", "unit", "--time-col", "time", "--y-col", "y",
               "--x-cols", "a,b", "--fe", "unit,time", "--trend", "unit", "--L", "1", "--format", "json"])
    assert rc == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["fgls"]["names"] == ["a", "b"]
    np.testing.assert_allclose(rec["ols"]["beta"], [0.5, -1.0], atol=0.1)
    log = rec["fgls"]["tuning"]["transform_log"]
    assert any("unit_trend" in s and "time_fe" in s for s in log)


def test_missing_file_exit_1_no_output(tmp_path, capsys):
    out = tmp_path / "report.txt"
    rc = main(["estimate", "--input", str(tmp_path / "absent.csv"), *DATA_FLAGS, "--output", str(out)])
    assert rc == 1
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []
    cap = capsys.readouterr()
    assert cap.out == "" and "absent.csv" in cap.err


def test_data_error_exit_1(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("unit,time,y,x\nA,1,1,1\nA,2,oops,1\nB,1,1,1\nB,2,1,1\n")
    assert main(["estimate", "--input", str(path), *DATA_FLAGS]) == 1


def test_numerical_error_exit_2(tmp_path):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 10, 1))
    path = write_panel(tmp_path / "p.csv", PanelData(y=rng.normal(size=(4, 10)), x=np.concatenate([x, x], axis=2),
                                                    x_names=("a", "b")))
    rc = main(["estimate", "--input", str(path), "--unit-col", "unit", "--time-col", "time", "--y-col", "y",
               "--x-cols", "a,b"])
    assert rc == 2


def test_unknown_flag_exit_3(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["simulate", "--bogus", "1"])
    assert ei.value.code == 3


def test_missing_required_setting_exit_3(tmp_path):
    assert main(["estimate", "--input", str(tmp_path / "x.csv")]) == 3


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit):
        main(["simulate", "--help"])
    text = capsys.readouterr().out
    for flag in ("--N", "--T", "--gamma", "--m", "--rho-max", "--reps", "--seed", "--threads", "--format",
                 "--output", "--L", "--M", "--auto-tune", "--kernel", "--universal-threshold"):
        assert flag in text


def test_tune_grid_size_and_curve_csv(tmp_path, capsys):
    csv_path = emit(tmp_path)
    curve = tmp_path / "curve.csv"
    rc = main(["tune", "--input", str(csv_path), *DATA_FLAGS, "--fe", "unit,time", "--L", "2", "--M-grid", "10",
               "--curve-csv", str(curve), "--format", "json"])
    assert rc == 0
    rec = json.loads(capsys.readouterr().out)
    assert len(rec["curve"]) == 10
    lines = curve.read_text().splitlines()
    assert lines[0] == "M,objective" and len(lines) == 11
    assert rec["c"] <= rec["M_star"] <= rec["C_bar"]


def test_tune_diagonal_truth_has_few_survivors(tmp_path, capsys):
    rng = np.random.default_rng(4)
    n, t = 10, 400
    data = PanelData(y=rng.normal(size=(n, t)) * rng.uniform(1, 2, size=(n, 1)), x=rng.normal(size=(n, t, 1)),
                     x_names=("x",))
    path = write_panel(tmp_path / "diag.csv", data)
    assert main(["tune", "--input", str(path), *DATA_FLAGS, "--L", "0", "--format", "json"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["survivor_fraction"][0] < 0.05


def test_tune_smaller_M_under_stronger_correlation(tmp_path, capsys):
    smaller = 0
    runs = 50
    for seed in range(runs):
        ms = {}
        for gamma in (0.3, 0.7):
            cfg = DgpConfig(N=50, T=50, gamma=gamma, seed=seed)
            rng = rep_rng(seed, 0)
            data = simulate_panel(cfg, build_dgp_covariances(cfg, rng), rng)
            path = write_panel(tmp_path / f"g{gamma}.csv", data)
            assert main(["tune", "--input", str(path), *DATA_FLAGS, "--fe", "unit,time", "--L", "3",
                         "--format", "json"]) == 0
            ms[gamma] = json.loads(capsys.readouterr().out)["M_star"]
        smaller += ms[0.7] < ms[0.3]
    assert smaller > runs / 2


def test_simulate_reps_one_identical_bytes(tmp_path):
    outs = []
    for k in range(2):
        p = tmp_path / f"r{k}.txt"
        assert main(["simulate", *SMALL_SIM, "--reps", "1", "--seed", "7", "--output", str(p)]) == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


def test_simulate_threads_identical(tmp_path):
    outs = []
    for threads in ("1", "8"):
        p = tmp_path / f"t{threads}.json"
        assert main(["simulate", *SMALL_SIM, "--reps", "6", "--seed", "3", "--threads", threads,
                     "--format", "json", "--output", str(p)]) == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


def test_simulate_formats_and_oracle(tmp_path, capsys):
    assert main(["simulate", *SMALL_SIM, "--reps", "2", "--oracle", "--format", "csv"]) == 0
    rows = [ln.split(",")[0] for ln in capsys.readouterr().out.splitlines()]
    assert rows == ["estimator", "ols", "fgls_diag", "fgls", "gls_oracle"]
    assert main(["simulate", *SMALL_SIM, "--reps", "2"]) == 0
    assert "mean(b)" in capsys.readouterr().out


def test_simulate_bad_design_exit_3():
    assert main(["simulate", "--N", "10", "--G", "3", "--reps", "1"]) == 3
    assert main(["simulate", *SMALL_SIM, "--reps", "0"]) == 3


def test_config_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# design\nN = 10\nT = 30\nG = 5\nreps = 1\nseed = 7\nformat = json\n")
    assert main(["simulate", "--config", str(cfg)]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["config"]["N"] == 10 and rec["config"]["seed"] == 7
    assert main(["simulate", "--config", str(cfg), "--seed", "8"]) == 0
    assert json.loads(capsys.readouterr().out)["config"]["seed"] == 8


def test_config_file_rejects_unknown_key(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("N = 10\ncolour = blue\n")
    assert main(["simulate", "--config", str(cfg)]) == 3
    cfg.write_text("N = ten\n")
    assert main(["simulate", "--config", str(cfg)]) == 3


def test_read_config_file_syntax(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("rho-max = 0.4  # trailing comment\n\nreps=3\n")
    assert read_config_file(p) == {"rho_max": "0.4", "reps": "3"}
    p.write_text("just words\n")
    with pytest.raises(ConfigError):
        read_config_file(p)
