"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints a single ``[PASS]``/``[FAIL]`` line (repeated in the
terminal summary) before asserting.
"""

import math
import time

import numpy as np
import pytest

from cdgreen import Domain, FitModel, StudyConfig, Variant, Which, crossplane_integral, eval_jet
from cdgreen import build_mesh, eval_parametrix, fit, frozen_residual, hat_coords, preset, residual_phi, solve_green
from cdgreen.fundamental import frozen_residual_scale
from cdgreen.quadrature import crossplane_h, norm_suite
from cdgreen.studies import RhoSpec, ball_study, figure_export, fit_quantity, residual_study, transverse_scaling

from oracles import jet_errors, random_offsets

EPS_SWEEP = (1e-2, 3e-3, 1e-3, 3e-4, 1e-4)
CENTRE = (0.5, 0.5, 0.5)
LOWER_X = (CENTRE, (0.3, 0.6, 0.4), (0.7, 0.35, 0.65))
FIG_X = (0.2, 0.5, 1 / 3)

_SWEEPS = {}


def sweep_rows(x, quantities, rho_factors=()):
    """Norm rows for the default eps grid at ``x`` (cached across criteria)."""
    key = (x, tuple(quantities), tuple(rho_factors))
    if key not in _SWEEPS:
        rows, t0 = [], time.perf_counter()
        for eps in EPS_SWEEP:
            rep = norm_suite(np.array(x), preset("const", eps), Variant.BAR_CUBE, [c * eps for c in rho_factors], 1e-3,
                             quantities=quantities)
            for q, e, rho, v, *_ in rep.rows():
                rows.append((q, e, rho, v))
        _SWEEPS[key] = (rows, time.perf_counter() - t0)
    return _SWEEPS[key]


def to_norm_rows(rows):
    from cdgreen.studies import NormRow

    return [NormRow(q, e, rho, v, 0.0, 0, 0.0) for q, e, rho, v in rows]


def test_criterion_1_derivative_fidelity(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {}
    for eps in (1.0, 0.1, 0.02):
        errs = jet_errors(*random_offsets(rng, 200, eps, r_min=0.1), eps)
        worst[eps] = max(errs.values())
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-6 and dt < 1.0
    detail = ", ".join(f"eps={e:g}: {w:.1e}" for e, w in worst.items())
    assert criterion(1, "closed-form derivatives vs central differences (<= 1e-6)", ok, f"{detail}; {dt:.2f} s")


def test_criterion_2_kernel_exactness(criterion):
    rng = np.random.default_rng(17)
    t0 = time.perf_counter()
    res, ident = 0.0, 0.0
    for eps in (1.0, 0.1, 0.01):
        x, xi, q = random_offsets(rng, 100, eps)
        res = max(res, float(np.max(np.abs(frozen_residual(x, xi, q, eps)) / frozen_residual_scale(x, xi, q, eps))))
        J = eval_jet(hat_coords(x, xi, eps), q, eps)
        rhs = -J.d2_xi2xi2 - J.d2_xi3xi3 + 2 * q / eps * J.d_xi1
        scale = np.abs(J.d2_xi2xi2) + np.abs(J.d2_xi3xi3) + np.abs(2 * q / eps * J.d_xi1)
        ident = max(ident, float(np.max(np.abs(J.d2_xi1xi1 - rhs) / scale)))
    dt = time.perf_counter() - t0
    ok = res <= 1e-8 and ident <= 1e-12 and dt < 1.0
    assert criterion(2, "frozen residual (<= 1e-8) and xi1 identity (<= 1e-12)", ok,
                     f"residual {res:.1e}, identity {ident:.1e}; {dt:.2f} s")


def test_criterion_3_crossplane_oracle(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    x = np.array(CENTRE)
    for eps in (0.1, 0.01):
        spec = preset("const", eps, domain=Domain.SLAB)
        for s in (-4 * eps, -3 * eps, -2 * eps, 2 * eps, 3 * eps, 0.25, 0.45):
            r = crossplane_integral(x, x[0] + s, spec, Variant.BARE)
            h = float(crossplane_h(s, 0.5, eps))
            worst = max(worst, abs(r.value - h) / h)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-5 and dt < 30
    assert criterion(3, "cross-plane mass vs 1D fundamental solution (<= 1e-5)", ok, f"max rel {worst:.1e}; {dt:.1f} s")


def _faces(rng, n, x, eps):
    out = []
    for k in range(3):
        for v in (0.0, 1.0):
            near = np.clip(np.asarray(x) + rng.normal(scale=3 * math.sqrt(eps), size=(n // 2, 3)), 0, 1)
            p = np.vstack([rng.uniform(0, 1, (n - n // 2, 3)), near])
            p[:, k] = v
            out.append(p)
    return np.vstack(out)


def test_criterion_4_boundary_vanishing(criterion):
    eps = 0.01
    spec = preset("const", eps)
    rng = np.random.default_rng(5)
    scale = 1 / (4 * math.pi * eps * 0.1)  # kernel on the plume axis at distance 0.1
    t0 = time.perf_counter()
    bar = tilde = 0.0
    for x in (FIG_X, CENTRE, (0.8, 0.9, 0.93)):
        x = np.array(x)
        bar = max(bar, float(np.max(np.abs(eval_parametrix(x, _faces(rng, 1000, x, eps), spec, Variant.BAR_CUBE).value))))
        tilde = max(tilde, float(np.max(np.abs(eval_parametrix(_faces(rng, 1000, x, eps), x, spec,
                                                              Variant.TILDE_CUBE).value))))
    dt = time.perf_counter() - t0
    ok = bar <= 1e-10 * scale and tilde <= 1e-10 * scale and dt < 30
    assert criterion(4, "cube parametrices vanish on all faces (<= 1e-10 scale)", ok,
                     f"bar {bar / scale:.1e}, tilde {tilde / scale:.1e} (relative); {dt:.1f} s")


@pytest.mark.slow
def test_criterion_5_upper_bound_scaling(criterion):
    rows, dt = sweep_rows(CENTRE, ("G", "dxi1", "dxi2", "d2xi2"), (1 / 64, 1 / 16, 1 / 4, 1.0))
    nr = to_norm_rows(rows)
    fa = fit_quantity(nr, "dxi1", FitModel.LOG)
    g2 = np.array([r.value * math.sqrt(r.eps) for r in nr if r.quantity == "dxi2"])
    g0 = np.array([r.value for r in nr if r.quantity == "G"])
    d = [r for r in nr if r.quantity == "d2xi2" and r.eps in EPS_SWEEP[:4]]
    fd = fit(FitModel.LOG_BALL_ETA, [r.eps for r in d], [r.value for r in d], [r.rho for r in d])
    band_b, band_c = g2.max() / g2.min(), g0.max() / g0.min()
    ok = (fa.r2 >= 0.98 and fa.leading > 0 and band_b <= 2 and band_c <= 2 and fd.r2 >= 0.95 and len(d) == 16
          and dt < 1200)
    assert criterion(5, "upper-bound forms at x = centre", ok,
                     f"(a) R2 {fa.r2:.4f} slope {fa.leading:.3f}; (b) band {band_b:.3f}; (c) band {band_c:.4f}; "
                     f"(d) R2 {fd.r2:.4f} on {len(d)} points; {dt:.0f} s")


@pytest.mark.slow
def test_criterion_6_lower_bound_consistency(criterion):
    t0 = time.perf_counter()
    c_log, c_pow = [], []
    for x in LOWER_X:
        nr = to_norm_rows(sweep_rows(x, ("dxi1", "dxi2"))[0])
        nr = [r for r in nr if r.eps <= 1e-2]
        c_log.append(fit_quantity(nr, "dxi1", FitModel.LOG).leading)
        c_pow.append(fit_quantity(nr, "dxi2", FitModel.POW, 0.5).leading)
    cfg = StudyConfig(ball_rho_list=tuple(RhoSpec(2.0**k, True) for k in range(-4, 7)))
    breaks = []
    for x in LOWER_X:
        b = ball_study(cfg, 1e-3, x, write=False).breakpoint_fit
        breaks.append(b.breakpoint / 2e-3)
    dt = time.perf_counter() - t0

    def stable(cs):
        return min(cs) > 0 and max(cs) / min(cs) <= 2

    ok = stable(c_log) and stable(c_pow) and all(0.5 <= b <= 2 for b in breaks) and dt < 1200
    assert criterion(6, "lower-bound constants positive and stable; ball breakpoint ~ 2 eps", ok,
                     f"c_log {np.round(c_log, 3).tolist()}, c_pow {np.round(c_pow, 3).tolist()}, "
                     f"breakpoint/(2 eps) {np.round(breaks, 2).tolist()}; {dt:.0f} s")


def test_criterion_7_residual_smallness(criterion):
    t0 = time.perf_counter()
    fits = {}
    for name in ("const", "smooth1"):
        rows = residual_study(StudyConfig(preset=name), x=CENTRE, write=False)
        v = [r.value for r in rows]
        fits[name] = (fit(FitModel.EXP_DECAY, [r.eps for r in rows], v), all(a > b for a, b in zip(v, v[1:])))
    spec = preset("smooth1", 0.05, domain=Domain.SLAB)
    rng = np.random.default_rng(3)
    xi = rng.uniform(0, 1, (20000, 3))
    outside = (xi[:, 0] <= 1 / 6) | (xi[:, 0] >= 1 / 3)
    faces = np.column_stack([np.repeat([0.0, 1.0], 500), rng.uniform(0, 1, (1000, 2))])
    support_ok = bool(np.all(residual_phi(np.array(CENTRE), xi[outside], spec).value == 0)
                      and np.all(residual_phi(np.array(CENTRE), faces, spec).value == 0))
    dt = time.perf_counter() - t0
    ok = all(f.r2 >= 0.99 and f.leading > 0 and dec for f, dec in fits.values()) and support_ok and dt < 300
    detail = "; ".join(f"{n}: R2 {f.r2:.5f} rate {f.leading:.3f}" for n, (f, _) in fits.items())
    assert criterion(7, "residual decays exponentially in 1/eps; zero off the band", ok,
                     f"{detail}; support {'ok' if support_ok else 'violated'}; {dt:.0f} s")


def _fd_mismatch(N, eps, x):
    spec = preset("const", eps)
    mesh = build_mesh(spec, x, N)
    gf = solve_green(spec, mesh, x, Which.ADJOINT)
    pts = mesh.points()[1:-1, 1:-1, 1:-1].reshape(-1, 3)
    vals = gf.values[1:-1, 1:-1, 1:-1].ravel()
    far = np.linalg.norm(pts - np.asarray(x), axis=1) / eps >= 3
    ref = np.empty(far.sum())
    p = pts[far]
    for s in range(0, len(p), 200_000):
        ref[s:s + 200_000] = eval_parametrix(np.asarray(x), p[s:s + 200_000], spec, Variant.BAR_CUBE).value
    rel = np.abs(vals[far] - ref) / ref
    return gf, float(rel.max()), float(np.median(rel))


@pytest.mark.slow
def test_criterion_8_fd_cross_validation(criterion):
    eps, x = 0.1, FIG_X
    t0 = time.perf_counter()
    gf64, max64, med64 = _fd_mismatch(64, eps, x)
    _, max128, med128 = _fd_mismatch(128, eps, x)
    spec = preset("const", eps)
    recip = []
    for xi in ((0.5, 0.5, 1 / 3), (0.35, 0.55, 0.36), (0.7, 0.45, 0.3), (0.45, 0.5, 0.45), (0.6, 0.6, 0.4)):
        pri = solve_green(spec, build_mesh(spec, xi, 64, which=Which.PRIMAL), xi, Which.PRIMAL)
        a = gf64.sample(np.array([xi]))[0]
        p = pri.sample(np.array([x]))[0]
        recip.append(abs(a - p) / p)
    positive = bool(np.all(gf64.values >= 0) and np.all(gf64.values[1:-1, 1:-1, 1:-1] > 0))
    dt = time.perf_counter() - t0
    ok = max64 <= 0.15 and max128 < max64 and max(recip) <= 0.05 and positive and dt < 900
    assert criterion(8, "FD Green's function vs cube parametrix (<= 15% at r_hat >= 3)", ok,
                     f"64^3 max {max64:.3f} (median {med64:.3f}); 128^3 max {max128:.3f} (median {med128:.3f}); "
                     f"reciprocity max {max(recip):.3f}; positivity {'ok' if positive else 'violated'}; {dt:.0f} s")


def test_criterion_9_figure(criterion, tmp_path):
    t0 = time.perf_counter()
    cfg = StudyConfig(figure_eps=0.01, figure_x=FIG_X, out_dir=str(tmp_path))
    res = figure_export(cfg)
    boxes = res.boxes
    nested = all(not b["empty"] for b in boxes) and all(
        b["nodes"] > c["nodes"] and all(b["bbox"][k][0] <= c["bbox"][k][0] and c["bbox"][k][1] <= b["bbox"][k][1]
                                        for k in range(3))
        for b, c in zip(boxes, boxes[1:]))
    outer = boxes[0]
    aniso = outer["downstream"] / outer["upstream"]
    per_level = [round(b["downstream"] / b["upstream"], 1) for b in boxes]
    sc = transverse_scaling(cfg, write=False)
    dev = [abs(r / e - 1) for r, e in zip(sc["ratio"], sc["expected_ratio"])]
    dt = time.perf_counter() - t0
    ok = nested and aniso >= 10 and max(dev) <= 0.3 and dt < 600 and len(res.files) == 3
    assert criterion(9, "level sets nested, downstream >= 10x upstream, width ~ sqrt(eps)", ok,
                     f"nested {nested}; downstream/upstream at level 1: {aniso:.1f} (per level {per_level}); "
                     f"width ratios {np.round(sc['ratio'], 3).tolist()} vs 2 (max dev {max(dev):.2f}); {dt:.0f} s")
