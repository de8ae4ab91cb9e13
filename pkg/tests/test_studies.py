import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdgreen import ConfigurationError, FitModel, StudyConfig, fit, judge, verdict_table
from cdgreen.cli import main
from cdgreen.studies import (
    NormRow,
    RhoSpec,
    fit_breakpoint,
    level_boxes,
    read_csv,
    sweep,
    write_csv,
)

EPS = np.array([1e-2, 3e-3, 1e-3, 3e-4, 1e-4])


def rows(quantity, eps, values, rho=None):
    return [NormRow(quantity, float(e), rho if rho is None else float(r), float(v), 0.0, 1, 0.0)
            for e, v, r in zip(eps, values, rho if rho is not None else [None] * len(eps))]


# -- fits ----------------------------------------------------------------


def test_log_fit_recovers_coefficients():
    f = fit(FitModel.LOG, EPS, 1.2 + 0.7 * np.log(1 / EPS))
    assert f.coefficients["a0"] == pytest.approx(1.2)
    assert f.leading == pytest.approx(0.7)
    assert f.r2 == pytest.approx(1.0)
    assert judge(f) == "consistent"


def test_power_fit_fixed_and_free():
    y = 0.8 * EPS**-0.5
    assert judge(fit(FitModel.POW, EPS, y, beta=0.5)) == "consistent"
    free = fit(FitModel.POW, EPS, y, beta=None)
    assert free.coefficients["beta"] == pytest.approx(0.5)
    wrong = fit(FitModel.POW, EPS, y, beta=1.0)
    assert wrong.band > 2 and judge(wrong) == "inconsistent"


def test_const_fit_band():
    assert judge(fit(FitModel.CONST, EPS, [0.5, 0.52, 0.49, 0.5, 0.51])) == "consistent"
    f = fit(FitModel.CONST, EPS, [0.2, 0.3, 0.5, 0.8, 1.2])
    assert f.band > 2 and judge(f) == "inconsistent"


def test_ball_forms():
    rho = 0.25 * EPS
    y = 1.7 * np.log(2 + EPS / rho) / EPS
    assert fit(FitModel.LOG_BALL, EPS, y, rho).leading == pytest.approx(1.7)
    y = 0.4 * (np.log(2 + EPS / rho) + np.abs(np.log(EPS))) / EPS
    assert judge(fit(FitModel.LOG_BALL_ETA, EPS, y, rho)) == "consistent"
    with pytest.raises(ConfigurationError):
        fit(FitModel.LOG_BALL, EPS, y)


def test_exponential_decay_fit():
    e = np.array([0.1, 0.05, 0.02, 0.01])
    f = fit(FitModel.EXP_DECAY, e, 3.0 * np.exp(-0.7 / e))
    assert f.leading == pytest.approx(0.7)
    assert f.r2 == pytest.approx(1.0)


def test_negative_leading_coefficient_is_inconsistent():
    f = fit(FitModel.LOG, EPS, 5.0 - 0.3 * np.log(1 / EPS))
    assert f.leading < 0 and judge(f) == "inconsistent"


@pytest.mark.parametrize("values", [[], [1.0]])
def test_fit_needs_data(values):
    with pytest.raises(ConfigurationError):
        fit(FitModel.LOG, EPS[: len(values)], values)


def test_breakpoint_fit_recovers_two_regimes():
    eps = 1e-3
    rho = eps * 2.0 ** np.arange(-4, 7)
    rb = 2 * eps
    y = 1.5 * np.where(rho <= rb, rho / eps, np.sqrt(rb / eps) * np.sqrt(rho / eps))
    b = fit_breakpoint(eps, rho, y)
    assert b.breakpoint == pytest.approx(rb, rel=0.02)
    assert b.c_linear == pytest.approx(1.5, rel=1e-3)
    assert b.r2 == pytest.approx(1.0)


@settings(max_examples=60, deadline=None)
@given(
    st.sampled_from([FitModel.CONST, FitModel.LOG, FitModel.POW]),
    st.lists(st.floats(-0.15, 0.15), min_size=5, max_size=5),
    st.floats(1e-4, 1e-2),
)
def test_adding_a_point_on_the_fit_never_flips_consistent(model, noise, e_new):
    base = {FitModel.CONST: np.ones_like(EPS), FitModel.LOG: 1 + 0.5 * np.log(1 / EPS),
            FitModel.POW: EPS**-0.5}[model]
    y = base * np.exp(np.asarray(noise))
    f = fit(model, EPS, y)
    if judge(f) != "consistent":
        return
    c = f.coefficients
    if model is FitModel.CONST:
        y_new = c["a0"]
    elif model is FitModel.LOG:
        y_new = c["a0"] + c["a1"] * math.log(1 / e_new)
    else:
        y_new = c["a0"] * e_new ** -c["beta"]
    g = fit(model, np.append(EPS, e_new), np.append(y, y_new))
    assert judge(g) == "consistent"


# -- verdicts --------------------------------------------------------------


def synthetic_main(dxi2_beta=0.5):
    out = rows("G", EPS, np.full(5, 0.5))
    out += rows("dxi1", EPS, 1.1 + 0.74 * np.log(1 / EPS))
    out += rows("dxi2", EPS, 0.8 * EPS**-dxi2_beta)
    rho = np.repeat([1 / 64, 1 / 16, 1 / 4, 1.0], 5)
    e = np.tile(EPS, 4) * 1.0
    r = rho * e
    out += rows("d2xi2", e, 0.55 * (np.log(2 + e / r) + np.abs(np.log(e))) / e, r)
    return out


def test_verdict_table_on_synthetic_data():
    table = verdict_table({"main": synthetic_main()})
    by = {r.display: r for r in table}
    assert by["l1-norm-bounded"].verdict == "consistent"
    assert by["xi1-gradient-log-growth"].verdict == "consistent"
    assert by["xi2-gradient-inverse-sqrt"].verdict == "consistent"
    assert by["xi2-second-derivative-log-ball"].verdict == "consistent"
    assert by["control-xi2-gradient-wrong-exponent"].verdict == "consistent"
    assert all(r.verdict == "consistent" for r in table)


def test_adversarial_data_is_flagged():
    table = verdict_table({"main": synthetic_main(dxi2_beta=1.0)})
    by = {r.display: r for r in table}
    assert by["xi2-gradient-inverse-sqrt"].verdict == "inconsistent"
    assert by["control-xi2-gradient-wrong-exponent"].verdict == "inconsistent"


def test_failed_entries_make_verdict_inconclusive():
    data = rows("dxi1", EPS, [1.0, 2.0, float("nan"), 3.0, 4.0])
    (row,) = verdict_table({"main": data})
    assert row.verdict == "inconclusive"


def test_lower_bound_rows():
    def point(c):
        return rows("dxi1", EPS, c * np.log(1 / EPS) + 1) + rows("dxi2", EPS, c * EPS**-0.5)

    table = verdict_table({"lower": [point(0.7), point(0.8), point(0.9)]})
    assert [r.verdict for r in table] == ["consistent", "consistent"]
    table = verdict_table({"lower": [point(0.2), point(0.8), point(0.9)]})
    assert [r.verdict for r in table] == ["inconsistent", "inconsistent"]


def test_ball_and_residual_rows():
    eps = 1e-3
    rho = eps * 2.0 ** np.arange(-4, 7)
    y = np.where(rho <= 2 * eps, rho / eps, math.sqrt(2) * np.sqrt(rho / eps))
    ball = rows("ball_w11", [eps] * len(rho), y, rho)
    e = [0.1, 0.05, 0.02, 0.01]
    res = rows("phi_bar", e, [math.exp(-0.7 / v) for v in e])
    by = {r.display: r for r in verdict_table({"ball": (eps, ball), "residual": res})}
    assert by["lower-bound-ball-two-regime"].verdict == "consistent"
    assert by["residual-exponential-decay"].verdict == "consistent"
    y_bad = rho / eps  # no second regime: breakpoint at the top of the range
    by = {r.display: r for r in verdict_table({"ball": (eps, rows("ball_w11", [eps] * len(rho), y_bad, rho))})}
    assert by["lower-bound-ball-two-regime"].verdict == "inconsistent"


# -- config -----------------------------------------------------------------


def test_config_parsing_and_round_trip():
    text = """
    # a comment
    preset = smooth1
    eps_list = 1e-2, 1e-3   # trailing comment
    x = 0.5,0.5,0.5; 0.3,0.6,0.4
    rho_list = eps/64, eps, 2*eps, 0.05
    tol = 1e-4
    timing = false
    """
    cfg = StudyConfig.from_text(text, out_dir="/tmp/elsewhere")
    assert cfg.preset == "smooth1" and cfg.eps_list == (1e-2, 1e-3)
    assert cfg.x == ((0.5, 0.5, 0.5), (0.3, 0.6, 0.4))
    assert [r.resolve(1e-2) for r in cfg.rho_list] == pytest.approx([1e-2 / 64, 1e-2, 2e-2, 0.05])
    assert cfg.out_dir == "/tmp/elsewhere" and not cfg.timing
    assert StudyConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("text", [
    "eps_list =",
    "eps_list = 0.1, 0.1",
    "eps_list = 2.0",
    "x = 0.5, 0.5",
    "x = 0, 0.5, 0.5",
    "bogus = 1",
    "no equals sign",
    "variant = nope",
    "tol = -1",
    "a = 1 + x1",
    "rho_list = banana",
])
def test_config_errors(text):
    with pytest.raises(ConfigurationError):
        StudyConfig.from_text(text)


def test_inline_coefficients():
    cfg = StudyConfig.from_text("a = 2 + x1\nb = 1.5\nalpha = 2")
    spec = cfg.problem(0.1)
    assert float(spec.a.value(np.array([0.5, 0.5, 0.5]))) == pytest.approx(2.5)
    assert not cfg.lower_bound_applicable


def test_rho_spec():
    assert RhoSpec.parse("eps/16").resolve(0.1) == pytest.approx(0.1 / 16)
    assert RhoSpec.parse("0.25").resolve(0.1) == 0.25
    assert RhoSpec.parse(str(RhoSpec.parse("4*eps"))) == RhoSpec(4.0, True)


# -- outputs ----------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    data = rows("G", [0.1, 0.01], [1 / 3, 2 / 3]) + rows("d2xi1", [0.1], [1e-300], rho=[0.1 / 7])
    write_csv(tmp_path / "t.csv", data)
    assert read_csv(tmp_path / "t.csv") == data
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "quantity,eps,rho,value,error_est,cells,wall_ms"


def test_sweep_is_deterministic_and_parallel_safe(tmp_path):
    cfg = StudyConfig(eps_list=(0.1, 0.05), x=((0.5, 0.5, 0.5), (0.4, 0.6, 0.5)), rho_list=(RhoSpec(1, True),),
                      tol=1e-2, timing=False, out_dir=str(tmp_path / "a"))
    q = ("G", "dxi2")
    a = sweep(cfg, quantities=q)
    b = sweep(replace(cfg, out_dir=str(tmp_path / "b"), threads=2), quantities=q)
    for fa, fb in zip(a.files, b.files):
        assert open(fa, "rb").read() == open(fb, "rb").read()
    assert len(read_csv(a.files[0])) == 2 * 2
    fits = json.loads(open(a.files[-1]).read())["fits"]
    assert set(fits) == set(q)


def test_level_boxes_on_analytic_field():
    ax = np.linspace(-1, 1, 41)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    v = 10 * np.exp(-(X / 0.5) ** 2 - (Y / 0.2) ** 2 - (Z / 0.2) ** 2)
    boxes = level_boxes((ax, ax, ax), v, (0, 0, 0), levels=(1.0, 5.0, 20.0))
    r = math.sqrt(math.log(10))
    assert boxes[0]["downstream"] == pytest.approx(0.5 * r, rel=0.02)
    assert boxes[0]["transverse2"] == pytest.approx(0.2 * r, rel=0.05)
    assert boxes[1]["downstream"] < boxes[0]["downstream"]
    assert boxes[2]["empty"]


# -- command line -----------------------------------------------------------


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("eps_list =\n")
    assert main(["--config", str(bad), "sweep"]) == 2
    assert main(["--config", str(tmp_path / "missing.cfg"), "sweep"]) == 2
    assert main(["eval", "--xi", "0.5,0.5,0.5", "--x", "0.5,0.5,0.5", "--variant", "kernel"]) == 3
    assert main(["eval", "--xi", "0.6,0.5,0.5", "--eps", "0.05"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["kind"] == "parametrix" and out["value"] > 0


def test_cli_solve_and_figure(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["--out", str(out), "solve", "--eps", "0.2", "--n", "12", "--x", "0.3,0.5,0.5"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["min_value"] >= 0 and (out / "fd_adjoint_eps0.2.vtk").exists()
    assert main(["--out", str(out), "figure", "--eps", "0.05"]) == 0
    boxes = json.loads((out / "figure_levels.json").read_text())["levels"]
    assert [b["level"] for b in boxes] == [1, 4, 8, 16, 32, 64, 128, 256]


def test_cli_norms_and_verify_from_tables(tmp_path, capsys):
    out = tmp_path / "v"
    cfg = tmp_path / "c.cfg"
    cfg.write_text("eps_list = 0.05, 0.02, 0.01\nrho_list = eps\ntol = 1e-2\n")
    assert main(["--config", str(cfg), "--no-timing", "norms", "--eps", "0.05"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "quantity,eps,rho,value,error_est,cells,wall_ms" and len(lines) > 5
    out.mkdir()
    write_csv(out / "sweep_x0.csv", synthetic_main())
    write_csv(out / "residual.csv", rows("phi_bar", [0.1, 0.05, 0.02, 0.01],
                                         [math.exp(-0.7 / v) for v in (0.1, 0.05, 0.02, 0.01)]))
    eps = 1e-3
    rho = eps * 2.0 ** np.arange(-4, 7)
    y = np.where(rho <= 2 * eps, rho / eps, math.sqrt(2) * np.sqrt(rho / eps))
    write_csv(out / "ball.csv", rows("ball_w11", [eps] * len(rho), y, rho))
    write_csv(out / "fd.csv", rows("G", [0.2, 0.1], [0.5, 0.6]))
    assert main(["--out", str(out), "verify"]) == 0
    write_csv(out / "sweep_x0.csv", synthetic_main(dxi2_beta=1.0))
    assert main(["--out", str(out), "verify"]) == 1
    verdicts = json.loads((out / "verdicts.json").read_text())
    assert any(v["verdict"] == "inconsistent" for v in verdicts)
