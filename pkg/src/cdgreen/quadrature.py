"""Adaptive L1 quadrature for singular, anisotropic kernel fields.

The integrands produced by the parametrix module have three features that a
generic cubature code handles badly: a point singularity of order up to
``r^-3`` at the source, exponential decay on the scale ``eps`` upstream of
the source, and a paraboloidal plume of width ``sqrt(eps * d)`` at distance
``d`` downstream.  The engine here therefore starts from a planned mesh:

* a *star* of six Duffy pyramids covering the cube ``|xi - x|_inf <= H``
  around the singular point, with radial coordinate ``u`` so that the
  Jacobian ``H^3 u^2`` cancels the ``r^-2`` singularity (and, combined with
  a logarithmic radial map, resolves ``r^-3`` on ``r >= rho``);
* Cartesian cells outside the star, arranged in slabs ``xi1 in [a, b]``
  graded geometrically away from the source and toward the outflow face,
  each slab partitioned into square rings around the plume axis whose base
  half-width follows the local plume width.

Cells carry a tensor Gauss-Legendre rule of order 5; the error indicator is
the difference to the order-3 rule.  Cells are refined by bisection in
every parameter direction using bulk (Doerfler) marking until the summed
indicators fall below ``tol`` times the integral, separately for each
component of a vector-valued integrand.  Sums are compensated
(``math.fsum``) so the result is independent of evaluation batching.

Non-integrable singularities are detected before integration by probing
dyadic shells around the source: shell contributions of an integrable
``r^-k`` (``k <= 2``) shrink by ``2^(k-3) <= 1/2`` per halving of the
radius, those of ``r^-3`` do not shrink.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, DivergenceError, SingularityError
from .parametrix import Variant, Want, eval_parametrix
from .problem import ProblemSpec

__all__ = [
    "Ball",
    "Base",
    "Region",
    "MeshHints",
    "QuadResult",
    "NormReport",
    "l1_norm",
    "l1_norms",
    "crossplane_integral",
    "crossplane_h",
    "norm_suite",
    "parametrix_field",
    "slab_half_width",
    "QUANTITIES",
    "DEFAULT_BUDGET",
]

#: Default limit on integrand evaluations per call.
DEFAULT_BUDGET = 50_000_000

_DORFLER = 0.5
_CHUNK_POINTS = 250_000
_TINY = 1e-300


# ---------------------------------------------------------------------------
# regions and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("ball radius must be nonnegative")


class Base(enum.Enum):
    CUBE = "cube"
    SLAB_TRUNCATED = "slab"


@dataclass(frozen=True)
class Region:
    """Integration region.

    Attributes
    ----------
    base : Base
        The unit cube, or the slab truncated to ``|xi_k - c_k| <= W`` for
        ``k = 2, 3`` around ``transverse_center``.
    W : float
        Transverse half-width for the truncated slab.
    transverse_center : tuple of two floats, optional
        Centre of the slab truncation; defaults to the singular point.
    exclusion, intersection : Ball, optional
        Remove a ball from, or intersect with a ball; mutually exclusive.
    xi1_bounds : tuple, optional
        Restrict ``xi1`` to a sub-interval of [0, 1] (used for fields known
        to vanish outside a band).
    """

    base: Base = Base.CUBE
    W: float | None = None
    transverse_center: tuple | None = None
    exclusion: Ball | None = None
    intersection: Ball | None = None
    xi1_bounds: tuple | None = None

    def __post_init__(self):
        if self.exclusion is not None and self.intersection is not None:
            raise ValueError("exclusion and intersection balls are mutually exclusive")
        if self.base is Base.SLAB_TRUNCATED and not (self.W and self.W > 0):
            raise ValueError("truncated slab needs W > 0")

    @classmethod
    def cube(cls, **kw):
        return cls(Base.CUBE, **kw)

    def bounds(self, center=None):
        lo = np.array([0.0, 0.0, 0.0])
        hi = np.array([1.0, 1.0, 1.0])
        if self.base is Base.SLAB_TRUNCATED:
            tc = self.transverse_center
            if tc is None:
                tc = (0.5, 0.5) if center is None else (center[1], center[2])
            lo[1:] = np.asarray(tc) - self.W
            hi[1:] = np.asarray(tc) + self.W
        if self.xi1_bounds is not None:
            lo[0], hi[0] = max(0.0, self.xi1_bounds[0]), min(1.0, self.xi1_bounds[1])
        return lo, hi

    @property
    def ball(self):
        return self.exclusion if self.exclusion is not None else self.intersection


@dataclass(frozen=True)
class MeshHints:
    """Length scales used to plan the initial mesh.

    ``eps`` and ``q`` set the upstream decay length ``~eps/q`` and plume width
    ``sqrt(eps d / q)``.  ``center`` anchors the grading for fields without a
    singular point; ``transverse_scale`` overrides the plume width.
    """

    eps: float = 1.0
    q: float = 0.5
    center: tuple | None = None
    transverse_scale: float | None = None


@dataclass
class QuadResult:
    """Result of an L1 integration.

    Attributes
    ----------
    value : float
    error_estimate : float
        Sum of per-cell indicators ``|I5 - I3|`` plus the geometric
        contribution of cells cut by a ball surface.
    cells : int
    evaluations : int
    eps, rho : float or None
        Echo of the problem parameters.
    converged : bool
    """

    value: float
    error_estimate: float
    cells: int
    evaluations: int = 0
    eps: float | None = None
    rho: float | None = None
    converged: bool = True

    def __add__(self, other: "QuadResult") -> "QuadResult":
        return QuadResult(
            self.value + other.value,
            self.error_estimate + other.error_estimate,
            self.cells + other.cells,
            self.evaluations + other.evaluations,
            self.eps,
            self.rho,
            self.converged and other.converged,
        )


def slab_half_width(eps: float, q: float) -> float:
    """Default transverse truncation ``max(20 sqrt(eps), 20 eps) / sqrt(q)``."""
    return max(20.0 * math.sqrt(eps), 20.0 * eps) / math.sqrt(q)


# ---------------------------------------------------------------------------
# rules and patches
# ---------------------------------------------------------------------------


def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _tensor_rule(n, d):
    x, w = _gauss01(n)
    grids = np.meshgrid(*([x] * d), indexing="ij")
    wgrids = np.meshgrid(*([w] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    return nodes, weights


class _Rule:
    def __init__(self, d):
        n5, w5 = _tensor_rule(5, d)
        n3, w3 = _tensor_rule(3, d)
        self.d = d
        self.nodes = np.vstack([n5, n3])
        self.n5 = len(n5)
        self.w5 = w5
        self.w3 = w3
        self.npts = len(self.nodes)


_RULES = {}


def _rule(d):
    if d not in _RULES:
        _RULES[d] = _Rule(d)
    return _RULES[d]


class _Cartesian:
    """Identity parametrisation of physical space (dimension 3)."""

    dim = 3
    apex = False

    def map(self, u):
        return u, np.ones(len(u))


class _Plane:
    """Parametrisation ``(s, t) -> (xi1, s, t)`` of a cross-section."""

    dim = 2
    apex = False

    def __init__(self, xi1):
        self.xi1 = float(xi1)

    def map(self, u):
        p = np.empty((len(u), 3))
        p[:, 0] = self.xi1
        p[:, 1:] = u
        return p, np.ones(len(u))


class _Pyramid:
    """Duffy pyramid over one face of the cube ``|xi - c|_inf <= H``.

    Parameters ``(w, s, t) in [0,1] x [-1,1]^2``; the direction is ``v`` with
    ``v[axis] = sign`` and the other two components ``(s, t)``; the point is
    ``c + H u v``.  The radial coordinate ``u`` ranges over
    ``[u_lo(v), u_hi(v)]`` determined by an optional centred ball.
    """

    dim = 3

    def __init__(self, center, H, axis, sign, mode="full", rho=0.0):
        self.c = np.asarray(center, dtype=float)
        self.H = float(H)
        self.axis = axis
        self.sign = float(sign)
        self.mode = mode
        self.rho = float(rho)
        self.others = [k for k in range(3) if k != axis]
        self.log = mode == "exclude" and self.rho > 0
        self.apex = not self.log

    def directions(self, s, t):
        v = np.empty((len(s), 3))
        v[:, self.axis] = self.sign
        v[:, self.others[0]] = s
        v[:, self.others[1]] = t
        return v

    def radial_bounds(self, nv):
        if self.mode == "full" or (self.mode == "exclude" and self.rho == 0):
            return np.zeros_like(nv), np.ones_like(nv)
        b = np.minimum(self.rho / (self.H * nv), 1.0)
        if self.mode == "exclude":
            return b, np.ones_like(nv)
        return np.zeros_like(nv), b

    def map(self, u):
        w, s, t = u[:, 0], u[:, 1], u[:, 2]
        v = self.directions(s, t)
        nv = np.sqrt(np.einsum("ij,ij->i", v, v))
        lo, hi = self.radial_bounds(nv)
        if self.log:
            ratio = hi / lo
            r = lo * ratio**w
            dr = r * np.log(ratio)
        else:
            r = lo + (hi - lo) * w
            dr = hi - lo
        pts = self.c + (self.H * r)[:, None] * v
        jac = self.H**3 * r * r * dr
        return pts, jac

    def map_radial(self, r, s, t):
        """Physical points and Jacobian (with respect to r, s, t) at raw radius r."""
        v = self.directions(s, t)
        return self.c + (self.H * r)[:, None] * v, self.H**3 * r * r


# ---------------------------------------------------------------------------
# mesh planning
# ---------------------------------------------------------------------------


def _geometric_offsets(start, step, limit):
    out = []
    k = 1
    while True:
        off = start + step * (2.0**k - 1.0)
        if off >= limit:
            break
        out.append(off)
        k += 1
    return out


def _axis1_edges(lo, hi, c, H, eps):
    e = {lo, hi}
    if c is not None:
        if lo < c - H < hi:
            e.add(c - H)
        if lo < c + H < hi:
            e.add(c + H)
        if lo < c < hi:
            e.add(c)
        for off in _geometric_offsets(H, eps, hi - c):
            e.add(c + off)
        for off in _geometric_offsets(H, eps, c - lo):
            e.add(c - off)
    # grading toward both ends (outflow layer at xi1 = 1)
    step = 0.25 * eps
    while step < 0.25 * (hi - lo):
        e.add(hi - step)
        e.add(lo + step)
        step *= 2.0
    e = np.array(sorted(v for v in e if lo <= v <= hi))
    keep = np.concatenate([[True], np.diff(e) > 1e-13])
    return e[keep]


def _rings(c2, c3, s0, rect_lo, rect_hi, hole, max_rings=9):
    """Boxes covering ``rect`` minus an optional central square.

    Square rings of half-width ``s0 * 2^j`` around ``(c2, c3)``, each split
    into 12 boxes so that the lines through the centre are cell edges.
    """
    boxes = []
    ext = max(abs(rect_lo[0] - c2), abs(rect_hi[0] - c2), abs(rect_lo[1] - c3), abs(rect_hi[1] - c3))
    halfs = [s0]
    while halfs[-1] < ext and len(halfs) <= max_rings:
        halfs.append(halfs[-1] * 2.0)
    if halfs[-1] < ext:
        halfs.append(ext * (1.0 + 1e-12))
    if not hole:
        a = halfs[0]
        for e2 in ((c2 - a, c2), (c2, c2 + a)):
            for e3 in ((c3 - a, c3), (c3, c3 + a)):
                boxes.append((e2, e3))
    for j in range(1, len(halfs)):
        a, b = halfs[j - 1], halfs[j]
        g2 = (c2 - b, c2 - a, c2, c2 + a, c2 + b)
        g3 = (c3 - b, c3 - a, c3, c3 + a, c3 + b)
        for i in range(4):
            for k in range(4):
                if 1 <= i <= 2 and 1 <= k <= 2:
                    continue
                boxes.append(((g2[i], g2[i + 1]), (g3[k], g3[k + 1])))
    out = []
    for (a2, b2), (a3, b3) in boxes:
        a2, b2 = max(a2, rect_lo[0]), min(b2, rect_hi[0])
        a3, b3 = max(a3, rect_lo[1]), min(b3, rect_hi[1])
        if b2 - a2 > 1e-14 and b3 - a3 > 1e-14:
            out.append((a2, b2, a3, b3))
    return out


def _plume_width(dist, eps, q, hints):
    if hints.transverse_scale is not None:
        return hints.transverse_scale
    return math.sqrt(eps * max(dist, eps) / q)


class _Plan:
    def __init__(self):
        self.patches = []
        self.cells = []  # (patch_id, lo, hi)

    def add_patch(self, p):
        self.patches.append(p)
        return len(self.patches) - 1


def _plan_3d(region: Region, center, hints: MeshHints):
    eps, q = hints.eps, hints.q
    lo, hi = region.bounds(center)
    ball = region.ball
    plan = _Plan()
    cart = plan.add_patch(_Cartesian())
    anchor = center if center is not None else hints.center
    H = 0.0
    centred_ball = False
    if center is not None:
        c = np.asarray(center, dtype=float)
        dist = float(min(np.min(c - lo), np.min(hi - c)))
        if dist <= 0:
            raise ValueError("singular point must lie inside the region")
        H = eps
        if ball is not None and np.allclose(ball.center, c, rtol=0, atol=1e-15):
            centred_ball = True
            H = max(H, ball.radius)
        H = min(H, 0.95 * dist)
        if ball is None:
            mode, rho = "full", 0.0
        elif centred_ball:
            mode = "exclude" if region.exclusion is not None else "intersect"
            rho = ball.radius
        else:
            mode, rho = "full", 0.0
        for axis in range(3):
            for sign in (1.0, -1.0):
                pyr = _Pyramid(c, H, axis, sign, mode, rho)
                pid = plan.add_patch(pyr)
                for cell in _pyramid_cells(pyr, eps, q, downstream=(axis == 0 and sign > 0)):
                    plan.cells.append((pid, cell[0], cell[1]))
    # Cartesian part
    if anchor is None:
        n = 2
        e1 = np.linspace(lo[0], hi[0], n + 1)
        e2 = np.linspace(lo[1], hi[1], n + 1)
        e3 = np.linspace(lo[2], hi[2], n + 1)
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    plan.cells.append(
                        (cart, np.array([e1[i], e2[j], e3[k]]), np.array([e1[i + 1], e2[j + 1], e3[k + 1]]))
                    )
        return plan, cart
    c1, c2, c3 = (float(v) for v in anchor)
    edges = _axis1_edges(lo[0], hi[0], c1, H, eps)
    for a, b in zip(edges[:-1], edges[1:]):
        overlaps = H > 0 and (a < c1 + H - 1e-15) and (b > c1 - H + 1e-15)
        if overlaps:
            s0, hole = H, True
        else:
            dist = (b - c1) if a >= c1 else (c1 - a)
            s0, hole = max(H, _plume_width(dist, eps, q, hints)), False
        for a2, b2, a3, b3 in _rings(c2, c3, s0, lo[1:], hi[1:], hole):
            plan.cells.append((cart, np.array([a, a2, a3]), np.array([b, b2, b3])))
    return plan, cart


def _pyramid_cells(pyr: _Pyramid, eps, q, downstream):
    H = pyr.H
    st = [-1.0, 0.0, 1.0]
    if downstream and H > 4.0 * eps:
        delta = max(math.sqrt(eps / (q * H)), 1.0 / 128.0)
        vals = {0.0, 1.0, -1.0}
        x = delta
        while x < 1.0:
            vals.add(x)
            vals.add(-x)
            x *= 2.0
        st = sorted(vals)
    if pyr.log:
        nv_max = math.sqrt(3.0)
        ratio = max(1.0, H / pyr.rho)  # u_hi / u_lo at v = e_axis
        nw = max(2, int(math.ceil(math.log2(ratio * nv_max))) if ratio * nv_max > 1 else 2)
        wedges = np.linspace(0.0, 1.0, nw + 1)
    else:
        scale = H
        if pyr.mode == "intersect":
            scale = min(H, pyr.rho)
        J = max(1, int(math.ceil(math.log2(max(4.0 * scale / eps, 2.0)))))
        wedges = np.concatenate([[0.0], 2.0 ** -np.arange(J, -1, -1.0)])
    cells = []
    for i in range(len(wedges) - 1):
        for j in range(len(st) - 1):
            for k in range(len(st) - 1):
                cells.append(
                    (np.array([wedges[i], st[j], st[k]]), np.array([wedges[i + 1], st[j + 1], st[k + 1]]))
                )
    return cells


def _plan_plane(xi1, region_lo, region_hi, center, hints):
    eps, q = hints.eps, hints.q
    plan = _Plan()
    pid = plan.add_patch(_Plane(xi1))
    c2, c3 = float(center[1]), float(center[2])
    s0 = _plume_width(abs(xi1 - center[0]), eps, q, hints)
    for a2, b2, a3, b3 in _rings(c2, c3, s0, region_lo, region_hi, False, max_rings=12):
        plan.cells.append((pid, np.array([a2, a3]), np.array([b2, b3])))
    return plan


# ---------------------------------------------------------------------------
# ball classification for cells not handled by the star
# ---------------------------------------------------------------------------


def _corner_points(patch, lo, hi):
    d = len(lo)
    corners = np.array(np.meshgrid(*[[0.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
    pts, _ = patch.map(lo + (hi - lo) * corners)
    return pts


def _classify(patch, lo, hi, ball: Ball):
    """Return 'in', 'out' or 'cut' for a cell relative to a ball."""
    c = np.asarray(ball.center, dtype=float)
    pts = _corner_points(patch, lo, hi)
    dmax = float(np.max(np.linalg.norm(pts - c, axis=1)))
    if isinstance(patch, _Cartesian):
        clamp = np.clip(c, lo, hi)
        dmin = float(np.linalg.norm(clamp - c))
    else:
        diam = float(np.max(np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)))
        dmin = max(0.0, float(np.min(np.linalg.norm(pts - c, axis=1))) - diam)
    if dmax <= ball.radius:
        return "in"
    if dmin >= ball.radius:
        return "out"
    return "cut"


def _apply_ball(plan: _Plan, region: Region, centred: bool, contained: bool):
    """Drop or pre-split cells according to the region's ball.

    ``centred`` means the star pyramids already restrict their radial range
    to the ball; ``contained`` additionally means the ball lies inside the
    star, so every Cartesian cell is outside it.  Remaining cells are
    classified, and those cut by the sphere are split three levels and
    kept or dropped by their centres (flagged ``geo`` when still cut).

    Returns the list of cell tuples ``(pid, lo, hi, geo)``.
    """
    ball = region.ball
    out = []
    if ball is None or ball.radius == 0.0:
        if region.intersection is not None:
            return []  # empty ball
        return [(pid, lo, hi, False) for pid, lo, hi in plan.cells]
    keep_inside = region.intersection is not None
    for pid, lo, hi in plan.cells:
        patch = plan.patches[pid]
        if centred and isinstance(patch, _Pyramid):
            out.append((pid, lo, hi, False))
            continue
        if contained:
            if not keep_inside:
                out.append((pid, lo, hi, False))
            continue
        cls = _classify(patch, lo, hi, ball)
        if cls == "in":
            if keep_inside:
                out.append((pid, lo, hi, False))
        elif cls == "out":
            if not keep_inside:
                out.append((pid, lo, hi, False))
        else:
            for slo, shi in _split_levels(lo, hi, 3):
                mid = 0.5 * (slo + shi)
                pt, _ = patch.map(mid[None, :])
                inside = np.linalg.norm(pt[0] - np.asarray(ball.center)) < ball.radius
                if inside == keep_inside:
                    geo = _classify(patch, slo, shi, ball) == "cut"
                    out.append((pid, slo, shi, geo))
    return out


def _split_levels(lo, hi, levels):
    boxes = [(lo, hi)]
    for _ in range(levels):
        nxt = []
        for a, b in boxes:
            nxt.extend(_children(a, b))
        boxes = nxt
    return boxes


def _children(lo, hi):
    d = len(lo)
    mid = 0.5 * (lo + hi)
    out = []
    for bits in range(2**d):
        clo = lo.copy()
        chi = hi.copy()
        for k in range(d):
            if bits >> k & 1:
                clo[k] = mid[k]
            else:
                chi[k] = mid[k]
        out.append((clo, chi))
    return out


# ---------------------------------------------------------------------------
# the adaptive engine
# ---------------------------------------------------------------------------


class _Engine:
    def __init__(self, func, patches, m, tol, budget, atol=0.0):
        self.func = func
        self.patches = patches
        self.m = m
        self.tol = tol
        self.budget = budget
        self.atol = atol
        self.evaluations = 0

    def _eval_cells(self, pids, lo, hi):
        """Order-5 and order-3 estimates for cells; returns (I5, I3)."""
        n = len(pids)
        I5 = np.zeros((n, self.m))
        I3 = np.zeros((n, self.m))
        for pid in np.unique(pids):
            sel = np.nonzero(pids == pid)[0]
            patch = self.patches[pid]
            rule = _rule(patch.dim)
            per = max(1, _CHUNK_POINTS // rule.npts)
            for start in range(0, len(sel), per):
                idx = sel[start : start + per]
                a = lo[idx]
                w = hi[idx] - a
                u = a[:, None, :] + w[:, None, :] * rule.nodes[None, :, :]
                pts, jac = patch.map(u.reshape(-1, patch.dim))
                vals = np.abs(np.asarray(self.func(pts), dtype=float).reshape(len(pts), self.m))
                vals *= jac[:, None]
                vals = vals.reshape(len(idx), rule.npts, self.m)
                vol = np.prod(w, axis=1)
                I5[idx] = vol[:, None] * np.einsum("j,kjc->kc", rule.w5, vals[:, : rule.n5])
                I3[idx] = vol[:, None] * np.einsum("j,kjc->kc", rule.w3, vals[:, rule.n5 :])
                self.evaluations += len(pts)
        if not np.all(np.isfinite(I5)):
            raise SingularityError("integrand is not finite at a quadrature node")
        return I5, I3

    def run(self, cells, rho=None, eps=None, max_iter=400):
        d_by_patch = {}
        pids = np.array([c[0] for c in cells], dtype=int)
        if len(cells) == 0:
            return [QuadResult(0.0, 0.0, 0, 0, eps, rho, True) for _ in range(self.m)]
        dmax = max(self.patches[p].dim for p in set(pids.tolist()))
        lo = np.zeros((len(cells), dmax))
        hi = np.zeros((len(cells), dmax))
        for i, c in enumerate(cells):
            lo[i, : len(c[1])] = c[1]
            hi[i, : len(c[2])] = c[2]
        geo = np.array([c[3] for c in cells], dtype=bool)
        for p in set(pids.tolist()):
            d_by_patch[p] = self.patches[p].dim
        # process each dimension group separately (only one in practice)
        dims = {d_by_patch[p] for p in d_by_patch}
        assert len(dims) == 1, "mixed patch dimensions"
        d = dims.pop()
        lo, hi = lo[:, :d], hi[:, :d]
        I5, I3 = self._eval_cells(pids, lo, hi)
        converged = False
        for _ in range(max_iter):
            err = np.abs(I5 - I3)
            V = np.array([math.fsum(I5[:, c]) for c in range(self.m)])
            E = np.array([math.fsum(err[:, c]) for c in range(self.m)])
            target = np.maximum(self.tol * V, self.atol)
            bad = E > target
            if not bad.any():
                converged = True
                break
            score = (err[:, bad] / np.maximum(target[bad], _TINY)).sum(axis=1)
            width = np.max(hi - lo, axis=1)
            score[width < 1e-13] = 0.0
            total = score.sum()
            if total <= 0:
                break
            order = np.argsort(-score, kind="stable")
            cum = np.cumsum(score[order])
            k = int(np.searchsorted(cum, _DORFLER * total)) + 1
            marked = order[:k]
            npts = _rule(d).npts
            cost = len(marked) * 2**d * npts
            if self.evaluations + cost > self.budget:
                partial = [
                    QuadResult(float(V[c]), float(E[c]), len(pids), self.evaluations, eps, rho, False)
                    for c in range(self.m)
                ]
                raise BudgetError(
                    f"evaluation budget {self.budget:.3g} exhausted (relative error {np.max(E / np.maximum(V, _TINY)):.2e})",
                    partial=partial if self.m > 1 else partial[0],
                )
            # children
            mid = 0.5 * (lo[marked] + hi[marked])
            clo, chi = [], []
            for bits in range(2**d):
                a = lo[marked].copy()
                b = hi[marked].copy()
                for ax in range(d):
                    if bits >> ax & 1:
                        a[:, ax] = mid[:, ax]
                    else:
                        b[:, ax] = mid[:, ax]
                clo.append(a)
                chi.append(b)
            clo = np.concatenate(clo)
            chi = np.concatenate(chi)
            cp = np.tile(pids[marked], 2**d)
            cg = np.tile(geo[marked], 2**d)
            c5, c3 = self._eval_cells(cp, clo, chi)
            keep = np.ones(len(pids), dtype=bool)
            keep[marked] = False
            lo = np.concatenate([lo[keep], clo])
            hi = np.concatenate([hi[keep], chi])
            pids = np.concatenate([pids[keep], cp])
            geo = np.concatenate([geo[keep], cg])
            I5 = np.concatenate([I5[keep], c5])
            I3 = np.concatenate([I3[keep], c3])
        err = np.abs(I5 - I3)
        out = []
        for c in range(self.m):
            val = math.fsum(I5[:, c])
            e = math.fsum(err[:, c]) + 0.5 * math.fsum(I5[geo, c])
            out.append(QuadResult(val, e, len(pids), self.evaluations, eps, rho, converged))
        return out


def _probe_divergence(func, m, plan: _Plan, eps):
    """Per-component flags of non-integrable blow-up at the star apex.

    Returns ``(flags, shells)`` where ``shells`` has shape (levels, m).
    """
    pyramids = [p for p in plan.patches if isinstance(p, _Pyramid) and p.apex]
    if not pyramids:
        return np.zeros(m, dtype=bool), None
    H = pyramids[0].H
    u_top = min(1e-3 * eps / H, 0.5)
    if pyramids[0].mode == "intersect":
        u_top = min(u_top, 0.5 * pyramids[0].rho / (H * math.sqrt(3.0)))
    rule = _rule(3)
    levels = 7
    shells = np.zeros((levels, m))
    st_cells = [((-1.0, 0.0), (-1.0, 0.0)), ((-1.0, 0.0), (0.0, 1.0)), ((0.0, 1.0), (-1.0, 0.0)), ((0.0, 1.0), (0.0, 1.0))]
    for j in range(levels):
        r_hi = u_top * 2.0**-j
        r_lo = 0.5 * r_hi
        total = np.zeros(m)
        for pyr in pyramids:
            for (s0, s1), (t0, t1) in st_cells:
                lo = np.array([r_lo, s0, t0])
                hi = np.array([r_hi, s1, t1])
                u = lo + (hi - lo) * rule.nodes[: rule.n5]
                pts, jac = pyr.map_radial(u[:, 0], u[:, 1], u[:, 2])
                vals = np.abs(np.asarray(func(pts), dtype=float).reshape(len(pts), m)) * jac[:, None]
                total += np.prod(hi - lo) * (rule.w5 @ vals)
        shells[j] = total
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = shells[1:] / shells[:-1]
    flags = np.all(ratios[-3:] >= 0.75, axis=0) & np.all(shells[-3:] > 0, axis=0)
    return flags, shells


def l1_norms(
    func,
    m: int,
    region: Region,
    singular_center=None,
    tol: float = 1e-3,
    hints: MeshHints | None = None,
    budget: int = DEFAULT_BUDGET,
    atol: float = 0.0,
):
    """L1 norms of the ``m`` components of a vector field over a region.

    Parameters
    ----------
    func : callable
        ``func(points (N, 3)) -> (N, m)`` array (or ``(N,)`` when m == 1).
    m : int
    region : Region
    singular_center : array_like, optional
        Point where the field may be singular; the mesh is refined around it.
    tol : float
        Relative tolerance per component.
    hints : MeshHints, optional
    budget : int
        Maximum number of integrand evaluations.

    Returns
    -------
    list of (QuadResult or DivergenceError)
        One entry per component; non-integrable components yield the error
        object instead of a result.
    """
    hints = hints or MeshHints()
    c = None if singular_center is None else np.asarray(singular_center, dtype=float)
    plan, _ = _plan_3d(region, c, hints)
    ball = region.ball
    rho = None if ball is None else ball.radius
    if region.intersection is not None and region.intersection.radius == 0.0:
        return [QuadResult(0.0, 0.0, 0, 0, hints.eps, 0.0, True) for _ in range(m)]
    pyrs = [p for p in plan.patches if isinstance(p, _Pyramid)]
    centred = bool(pyrs) and pyrs[0].mode != "full"
    contained = centred and ball.radius <= pyrs[0].H
    cells = _apply_ball(plan, region, centred, contained)
    flags = np.zeros(m, dtype=bool)
    shells = None
    if c is not None and (ball is None or ball.radius == 0.0 or region.intersection is not None):
        flags, shells = _probe_divergence(func, m, plan, hints.eps)
    results = [None] * m
    live = [k for k in range(m) if not flags[k]]
    for k in range(m):
        if flags[k]:
            results[k] = DivergenceError(
                f"component {k} is not integrable at the singular point "
                "(dyadic shell contributions do not decay)",
                shells[:, k].tolist(),
            )
    if live:
        if len(live) == m:
            f = func
        else:
            def f(p, _f=func, _live=live):
                return np.asarray(_f(p)).reshape(len(p), m)[:, _live]
        eng = _Engine(f, plan.patches, len(live), tol, budget, atol)
        res = eng.run(cells, rho=rho, eps=hints.eps)
        for k, r in zip(live, res):
            results[k] = r
    return results


def l1_norm(field, region: Region, singular_center=None, tol: float = 1e-3, hints=None, budget=DEFAULT_BUDGET):
    """L1 norm of a scalar field; see :func:`l1_norms`.

    Raises
    ------
    DivergenceError
        If the field is not integrable at ``singular_center``.
    BudgetError
        If ``budget`` evaluations do not reach ``tol``.
    """
    res = l1_norms(lambda p: np.asarray(field(p)).reshape(-1, 1), 1, region, singular_center, tol, hints, budget)[0]
    if isinstance(res, Exception):
        raise res
    return res


# ---------------------------------------------------------------------------
# parametrix fields, cross-plane integrals, the norm suite
# ---------------------------------------------------------------------------

#: NormReport quantity keys, in report order.
QUANTITIES = (
    "G",
    "dxi1",
    "dxi2",
    "dxi3",
    "dx2",
    "dx3",
    "ball_w11",
    "d2xi1",
    "d2xi2",
    "d2xi3",
    "crossplane_sup",
)

_COMPONENTS = {
    "G": ("value", None),
    "dxi1": ("d_xi", 0),
    "dxi2": ("d_xi", 1),
    "dxi3": ("d_xi", 2),
    "dx1": ("d_x", 0),
    "dx2": ("d_x", 1),
    "dx3": ("d_x", 2),
    "d2xi1": ("d2_xi", 0),
    "d2xi2": ("d2_xi", 1),
    "d2xi3": ("d2_xi", 2),
}


def parametrix_field(x, spec: ProblemSpec, variant, components):
    """Vectorised field ``xi -> [component values]`` of a parametrix at fixed ``x``."""
    variant = Variant(variant)
    want = Want.VALUE
    for name in components:
        attr = _COMPONENTS[name][0]
        want |= {"value": Want.VALUE, "d_xi": Want.DXI, "d_x": Want.DX, "d2_xi": Want.D2XI}[attr]
    x = np.asarray(x, dtype=float)

    def f(pts):
        ev = eval_parametrix(x, pts, spec, variant, want)
        cols = []
        for name in components:
            attr, k = _COMPONENTS[name]
            arr = getattr(ev, attr)
            cols.append(arr if k is None else arr[:, k])
        return np.stack(cols, axis=-1)

    return f


def _q_hint(spec, x):
    return float(spec.q_at(np.asarray(x, dtype=float)))


def crossplane_h(s, q, eps):
    """Cross-plane mass of the free-space kernel: the 1D fundamental solution.

    ``h(s) = 1/(2q)`` for ``s > 0`` and ``exp(2 q s / eps)/(2q)`` for ``s < 0``;
    it solves ``-eps h'' + 2 q h' = delta``.
    """
    s = np.asarray(s, dtype=float)
    return np.where(s > 0, 1.0, np.exp(2.0 * q * np.minimum(s, 0.0) / eps)) / (2.0 * q)


def _plane_half_width(s_hat, q, eps, T=70.0):
    """Transverse radius beyond which the kernel is below exp(-T) of its axis value."""
    a = abs(s_hat)
    return eps * math.sqrt((T / q + a) ** 2 - a * a)


def crossplane_integral(x, xi1, spec: ProblemSpec, variant=Variant.BAR_CUBE, tol: float = 1e-7, budget=DEFAULT_BUDGET):
    """``iint |G(x; (xi1, xi2, xi3))| dxi2 dxi3`` over the cross-section.

    For cube variants the section is ``(0,1)^2``; for slab variants and the
    bare kernel it is the whole plane, truncated where the kernel has
    decayed below ``exp(-70)`` relative to its value on the plume axis.

    Raises
    ------
    SingularityError
        If the plane passes through the source (``|xi1 - x1| < 1e-12 eps``).
    """
    variant = Variant(variant)
    x = np.asarray(x, dtype=float)
    eps = spec.eps
    xi1 = float(xi1)
    if abs(xi1 - x[0]) < 1e-12 * eps:
        raise SingularityError("cross-section through the source point")
    q = _q_hint(spec, x)
    hints = MeshHints(eps=eps, q=q)
    if variant in (Variant.BAR_CUBE, Variant.TILDE_CUBE):
        rlo, rhi = np.zeros(2), np.ones(2)
    else:
        W = _plane_half_width((xi1 - x[0]) / eps, q, eps)
        rlo = x[1:] - W
        rhi = x[1:] + W
    plan = _plan_plane(xi1, rlo, rhi, x, hints)
    f = parametrix_field(x, spec, variant, ["G"])
    cells = [(pid, lo, hi, False) for pid, lo, hi in plan.cells]
    eng = _Engine(f, plan.patches, 1, tol, budget)
    return eng.run(cells, eps=eps)[0]


@dataclass
class NormReport:
    """Norm quantities of one parametrix (or FD) field at one source point.

    ``entries`` maps ``(quantity, rho)`` to a :class:`QuadResult` or to the
    exception raised while computing it; ``rho`` is None for quantities
    without a ball.
    """

    x: tuple
    eps: float
    variant: str
    entries: dict = field(default_factory=dict)
    wall_ms: dict = field(default_factory=dict)

    def get(self, quantity, rho=None):
        return self.entries[(quantity, rho)]

    def value(self, quantity, rho=None) -> float:
        r = self.entries[(quantity, rho)]
        if isinstance(r, Exception):
            raise r
        return r.value

    def ok(self, quantity, rho=None) -> bool:
        r = self.entries.get((quantity, rho))
        return r is not None and not isinstance(r, Exception)

    def rows(self):
        """Rows ``(quantity, eps, rho, value, error_est, cells, wall_ms)``."""
        out = []
        for (qname, rho), r in self.entries.items():
            ms = self.wall_ms.get((qname, rho), 0.0)
            if isinstance(r, Exception):
                out.append((qname, self.eps, rho, float("nan"), float("nan"), 0, ms))
            else:
                out.append((qname, self.eps, rho, r.value, r.error_estimate, r.cells, ms))
        return out


def _crossplane_planes(x1, eps):
    planes = []
    step = 2.0 * eps
    while x1 + step < 1.0:
        planes.append(x1 + step)
        step *= 2.0
    planes.append(0.5 * (x1 + 1.0))
    for k in (2.0, 8.0):
        if x1 - k * eps > 0:
            planes.append(x1 - k * eps)
    return sorted(set(planes))


def norm_suite(
    x,
    spec: ProblemSpec,
    variant=Variant.BAR_CUBE,
    rho_list=(),
    tol: float = 1e-3,
    ball_centers=None,
    quantities=QUANTITIES,
    budget: int = DEFAULT_BUDGET,
    timer=None,
) -> NormReport:
    """Compute the norm quantities of a parametrix at source ``x``.

    Parameters
    ----------
    x : array_like
        Interior source point.
    spec : ProblemSpec
    variant : Variant
    rho_list : sequence of float
        Radii for the ball-restricted and ball-excluded norms.
    tol : float
    ball_centers : sequence of points, optional
        Centres ``x'`` of the balls for ``ball_w11`` (default: ``x``).
    quantities : sequence of str
        Subset of :data:`QUANTITIES`.
    timer : callable, optional
        Zero-argument clock in seconds used for ``wall_ms``; pass
        ``lambda: 0.0`` for reproducible output.

    Returns
    -------
    NormReport
        Errors raised for individual entries are stored in place of results.
    """
    import time

    clock = timer or time.perf_counter
    variant = Variant(variant)
    x = np.asarray(x, dtype=float)
    eps = spec.eps
    q = _q_hint(spec, x)
    hints = MeshHints(eps=eps, q=q)
    domain = Region.cube() if variant in (Variant.BAR_CUBE, Variant.TILDE_CUBE) else None
    if domain is None:
        domain = Region(Base.SLAB_TRUNCATED, W=slab_half_width(eps, q))
    rep = NormReport(tuple(float(v) for v in x), eps, variant.value)

    def record(key, fn):
        t0 = clock()
        try:
            rep.entries[key] = fn()
        except (DivergenceError, BudgetError, NotImplementedError, SingularityError) as exc:
            rep.entries[key] = exc
        rep.wall_ms[key] = 1000.0 * (clock() - t0)

    full = [k for k in ("G", "dxi1", "dxi2", "dxi3", "dx2", "dx3") if k in quantities]
    if full:
        t0 = clock()
        try:
            res = l1_norms(parametrix_field(x, spec, variant, full), len(full), domain, x, tol, hints, budget)
        except (BudgetError, NotImplementedError) as exc:
            res = [exc] * len(full)
        ms = 1000.0 * (clock() - t0)
        for k, r in zip(full, res):
            rep.entries[(k, None)] = r
            rep.wall_ms[(k, None)] = ms
    second = [k for k in ("d2xi1", "d2xi2", "d2xi3") if k in quantities]
    for rho in rho_list:
        rho = float(rho)
        if second:
            region = Region(domain.base, domain.W, exclusion=Ball(tuple(x), rho))
            t0 = clock()
            try:
                res = l1_norms(parametrix_field(x, spec, variant, second), len(second), region, x, tol, hints, budget)
            except (BudgetError, NotImplementedError) as exc:
                res = [exc] * len(second)
            ms = 1000.0 * (clock() - t0)
            for k, r in zip(second, res):
                rep.entries[(k, rho)] = r
                rep.wall_ms[(k, rho)] = ms
        if "ball_w11" in quantities:
            centers = [x] if ball_centers is None else [np.asarray(c, dtype=float) for c in ball_centers]

            def ball_norm(rho=rho, centers=centers):
                total = None
                for cen in centers:
                    region = Region(domain.base, domain.W, intersection=Ball(tuple(cen), rho))
                    comps = ["G", "dxi1", "dxi2", "dxi3"]
                    res = l1_norms(parametrix_field(x, spec, variant, comps), 4, region, x, tol, hints, budget)
                    for r in res:
                        if isinstance(r, Exception):
                            raise r
                    s = res[0] + res[1] + res[2] + res[3]
                    s.rho = rho
                    total = s if total is None or s.value > total.value else total
                return total

            record(("ball_w11", rho), ball_norm)
    if "crossplane_sup" in quantities:

        def sup():
            best = None
            for p in _crossplane_planes(float(x[0]), eps):
                r = crossplane_integral(x, p, spec, variant, tol=min(tol, 1e-4), budget=budget)
                if best is None or r.value > best.value:
                    best = r
            return best

        record(("crossplane_sup", None), sup)
    return rep
