import math

import numpy as np
import pytest

from cdgreen import Ball, Base, BudgetError, DivergenceError, Domain, MeshHints, Region, SingularityError, Variant
from cdgreen import crossplane_integral, l1_norm, norm_suite, preset
from cdgreen.quadrature import QuadResult, crossplane_h, l1_norms, parametrix_field, slab_half_width

X = np.array([0.2, 0.5, 1 / 3])


def bare_slab_l1(x1, q, eps):
    """Exact L1 norm of the free-space kernel over 0 < xi1 < 1 (whole transverse plane).

    Integrates the cross-plane mass h(s) = 1/(2q) (s > 0), exp(2qs/eps)/(2q) (s < 0).
    """
    return (1 - x1) / (2 * q) + eps / (4 * q * q) * (1 - math.exp(-2 * q * x1 / eps))


def test_volume_of_cube():
    r = l1_norm(lambda p: np.ones(len(p)), Region.cube(), None, 1e-6, MeshHints(center=(0.5, 0.5, 0.5)))
    assert r.value == pytest.approx(1.0, rel=1e-6)
    assert r.converged


def test_volume_with_excluded_and_intersected_ball():
    c = (0.5, 0.5, 0.5)
    hints = MeshHints(0.1, 0.5)
    inside = l1_norm(lambda p: np.ones(len(p)), Region.cube(intersection=Ball(c, 0.2)), c, 1e-4, hints)
    outside = l1_norm(lambda p: np.ones(len(p)), Region.cube(exclusion=Ball(c, 0.2)), c, 1e-4, hints)
    vol = 4 / 3 * math.pi * 0.2**3
    assert inside.value == pytest.approx(vol, rel=1e-3)
    assert outside.value == pytest.approx(1 - vol, rel=1e-3)


@pytest.mark.parametrize("eps", [0.1, 0.01, 0.001])
def test_bare_kernel_slab_norm_matches_closed_form(eps):
    spec = preset("const", eps, domain=Domain.SLAB)
    region = Region(Base.SLAB_TRUNCATED, W=slab_half_width(eps, 0.5))
    r = l1_norm(lambda p: parametrix_field(X, spec, Variant.BARE, ["G"])(p)[:, 0], region, X, 1e-6,
                MeshHints(eps, 0.5))
    assert r.value == pytest.approx(bare_slab_l1(X[0], 0.5, eps), rel=1e-5)


def test_transverse_truncation_is_stable():
    eps = 0.1
    spec = preset("const", eps, domain=Domain.SLAB)
    f = lambda p: parametrix_field(X, spec, Variant.BARE, ["G"])(p)[:, 0]
    W = 20 * math.sqrt(eps)
    a = l1_norm(f, Region(Base.SLAB_TRUNCATED, W=W), X, 1e-6, MeshHints(eps, 0.5))
    b = l1_norm(f, Region(Base.SLAB_TRUNCATED, W=2 * W), X, 1e-6, MeshHints(eps, 0.5))
    assert a.value == pytest.approx(b.value, rel=1e-6)


def test_error_estimate_bounds_refinement_change():
    eps = 0.01
    spec = preset("const", eps)
    f = parametrix_field(X, spec, Variant.BAR_CUBE, ["dxi1"])
    a = l1_norms(f, 1, Region.cube(), X, 1e-2, MeshHints(eps, 0.5))[0]
    b = l1_norms(f, 1, Region.cube(), X, 5e-3, MeshHints(eps, 0.5))[0]
    assert abs(a.value - b.value) <= a.error_estimate
    assert a.error_estimate <= 1e-2 * a.value


def test_second_derivative_log_ball_form():
    cs = []
    for eps in (0.1, 0.02, 0.004):
        spec = preset("const", eps, domain=Domain.SLAB)
        region = Region(Base.SLAB_TRUNCATED, W=slab_half_width(eps, 0.5), exclusion=Ball(tuple(X), eps))
        r = l1_norms(parametrix_field(X, spec, Variant.BARE, ["d2xi1"]), 1, region, X, 1e-3, MeshHints(eps, 0.5))[0]
        cs.append(r.value * eps / math.log(3.0))
    c_fit = math.exp(np.mean(np.log(cs)))
    assert all(abs(c / c_fit - 1) <= 0.2 for c in cs), cs


def test_non_integrable_singularity_is_detected():
    eps = 0.05
    spec = preset("const", eps)
    res = l1_norms(parametrix_field(X, spec, Variant.BAR_CUBE, ["G", "d2xi2"]), 2, Region.cube(), X, 1e-3,
                   MeshHints(eps, 0.5))
    assert isinstance(res[0], QuadResult)
    assert isinstance(res[1], DivergenceError)
    with pytest.raises(DivergenceError):
        l1_norm(lambda p: parametrix_field(X, spec, Variant.BAR_CUBE, ["d2xi2"])(p)[:, 0], Region.cube(), X)


def test_budget_error_carries_partial_value():
    spec = preset("const", 0.01)
    with pytest.raises(BudgetError) as info:
        l1_norm(lambda p: parametrix_field(X, spec, Variant.BAR_CUBE, ["dxi2"])(p)[:, 0], Region.cube(), X, 1e-8,
                MeshHints(0.01, 0.5), budget=200_000)
    assert info.value.partial is not None and info.value.partial.value > 0


@pytest.mark.parametrize("eps", [0.1, 0.01])
def test_crossplane_bare_kernel_matches_1d_solution(eps):
    spec = preset("const", eps, domain=Domain.SLAB)
    for s in (-4 * eps, -2 * eps, 2 * eps, 0.3):
        r = crossplane_integral(X, X[0] + s, spec, Variant.BARE)
        assert r.value == pytest.approx(float(crossplane_h(s, 0.5, eps)), rel=1e-5)


def test_crossplane_downstream_limit():
    spec = preset("const", 0.01, alpha=2.0, domain=Domain.SLAB)
    r = crossplane_integral(X, 0.7, spec, Variant.BARE)
    assert r.value == pytest.approx(1 / 2.0, rel=1e-6)


def test_crossplane_through_source_raises():
    with pytest.raises(SingularityError):
        crossplane_integral(X, X[0], preset("const", 0.1))


def test_norm_suite_monotone_in_rho():
    eps = 3e-3
    rhos = [eps / 16, eps / 4, eps, 4 * eps]
    rep = norm_suite(X, preset("const", eps), Variant.BAR_CUBE, rhos, 1e-3,
                     quantities=("G", "d2xi1", "d2xi2", "ball_w11"))
    ball = [rep.value("ball_w11", r) for r in rhos]
    assert all(a < b for a, b in zip(ball, ball[1:]))
    for q in ("d2xi1", "d2xi2"):
        v = [rep.value(q, r) for r in rhos]
        assert all(a > b for a, b in zip(v, v[1:]))
    assert 0 < rep.value("G") < 1
    rows = rep.rows()
    assert {r[0] for r in rows} == {"G", "d2xi1", "d2xi2", "ball_w11"}
    assert all(len(r) == 7 for r in rows)


def test_norm_suite_reproducible_with_fixed_timer():
    spec = preset("const", 1e-2)
    kw = dict(rho_list=[1e-2], quantities=("G", "dxi2", "d2xi3"), timer=lambda: 0.0)
    a = norm_suite(X, spec, **kw).rows()
    b = norm_suite(X, spec, **kw).rows()
    assert a == b
    assert all(r[-1] == 0.0 for r in a)


def test_region_invariants():
    with pytest.raises(ValueError):
        Region(Base.SLAB_TRUNCATED)
    with pytest.raises(ValueError):
        Region.cube(exclusion=Ball((0.5, 0.5, 0.5), 0.1), intersection=Ball((0.5, 0.5, 0.5), 0.1))
