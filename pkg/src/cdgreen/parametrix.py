"""Method-of-images parametrices on the slab and on the unit cube.

Two frozen-coefficient approximations of the Green's function are built
from the kernel of :mod:`cdgreen.fundamental`:

* the *bar* family freezes ``q = a(x)/2`` (natural for the adjoint problem
  in ``xi``), with images in ``xi1`` tapered by ``omega1(xi1)``;
* the *tilde* family freezes ``q = a(xi)/2`` (natural for the primal problem
  in ``x``), with images in ``x1`` tapered by ``omega0(x1)``.

On the slab ``(0,1) x R^2`` four shifted kernels ``g[d]``, ``d in {x1, -x1,
2-x1, 2+x1}``, are combined.  Each enters multiplied by one of the weights
``p``, ``lambda^-``, ``p lambda^+``, which all equal ``exp(q (d - x1)/eps)``;
the weight is folded into the kernel exponent so nothing overflows.  The
cube versions repeat the construction in the two transverse directions.

Evaluators are vectorised: ``x`` and ``xi`` broadcast against each other
over leading dimensions.  Image terms whose exponential factor is smaller
than ``exp(-PRUNE_EXPONENT)`` relative to the direct kernel are skipped.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import CutoffDomainError, SingularityError
from .fundamental import SINGULAR_RHAT, eval_jet, hat_coords
from .problem import ProblemSpec

__all__ = [
    "Cutoff",
    "Variant",
    "Want",
    "ParametrixEval",
    "ResidualEval",
    "ResidualKind",
    "cutoff_eval",
    "omega0",
    "omega1",
    "eval_bar_slab",
    "eval_tilde_slab",
    "eval_cube",
    "eval_parametrix",
    "residual_phi",
    "PRUNE_EXPONENT",
]

#: Image terms smaller than exp(-PRUNE_EXPONENT) times the direct term are dropped.
PRUNE_EXPONENT = 80.0

_T0, _T1 = 2.0 / 3.0, 5.0 / 6.0
_W = _T1 - _T0


class Cutoff(enum.Enum):
    """The two smooth cut-off functions; ``omega1(t) = omega0(1 - t)``."""

    OMEGA0 = "omega0"
    OMEGA1 = "omega1"


def omega0(t):
    """Value, first and second derivative of ``omega0`` (vectorised).

    ``omega0 = 1 - s(u)``, ``u = (t - 2/3)/(1/6)`` clipped to [0, 1], with the
    quintic smoothstep ``s(u) = 6u^5 - 15u^4 + 10u^3``.  Outside [0, 1] the
    function is continued by its constant plateaus.
    """
    t = np.asarray(t, dtype=float)
    u = np.clip((t - _T0) / _W, 0.0, 1.0)
    s = u * u * u * (u * (6.0 * u - 15.0) + 10.0)
    ds = 30.0 * u * u * (u - 1.0) ** 2
    d2s = 60.0 * u * (2.0 * u - 1.0) * (u - 1.0)
    return 1.0 - s, -ds / _W, -d2s / (_W * _W)


def omega1(t):
    """Value and derivatives of ``omega1(t) = omega0(1 - t)``."""
    v, d1, d2 = omega0(1.0 - np.asarray(t, dtype=float))
    return v, -d1, d2


def cutoff_eval(c: Cutoff, t):
    """Evaluate a cut-off on [0, 1].

    Returns
    -------
    (value, d1, d2) : tuple of floats

    Raises
    ------
    CutoffDomainError
        If ``t`` lies outside [0, 1].
    """
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise CutoffDomainError(f"cut-off argument {t} outside [0, 1]")
    f = omega0 if Cutoff(c) is Cutoff.OMEGA0 else omega1
    return tuple(float(v) for v in f(t))


class Variant(enum.Enum):
    """Parametrix selector."""

    BAR_SLAB = "bar_slab"
    TILDE_SLAB = "tilde_slab"
    BAR_CUBE = "bar_cube"
    TILDE_CUBE = "tilde_cube"
    # bare kernel g[x1] with q = a(x)/2, no images (used as a reference field)
    BARE = "bare"

    @property
    def is_tilde(self) -> bool:
        return self in (Variant.TILDE_SLAB, Variant.TILDE_CUBE)


class Want(enum.Flag):
    """Derivative mask: which parts of :class:`ParametrixEval` to compute."""

    VALUE = 1
    DXI = 2
    D2XI = 4
    DX = 8
    FIRST = VALUE | DXI
    ALL = VALUE | DXI | D2XI | DX


#: Column order of ``ParametrixEval.d2_xi``.
D2_LABELS = ("xi1xi1", "xi2xi2", "xi3xi3", "xi1xi2", "xi1xi3")


@dataclass
class ParametrixEval:
    """Value and requested derivatives of a parametrix.

    Attributes
    ----------
    value : ndarray, shape (...)
    d_xi : ndarray, shape (..., 3) or None
    d2_xi : ndarray, shape (..., 5) or None
        Columns follow ``D2_LABELS``.
    d_x : ndarray, shape (..., 3) or None
    which : Variant
    """

    value: np.ndarray
    d_xi: np.ndarray | None
    d2_xi: np.ndarray | None
    d_x: np.ndarray | None
    which: Variant


class ResidualKind(enum.Enum):
    PHI_BAR = "phi_bar"
    PHI_TILDE = "phi_tilde"


@dataclass
class ResidualEval:
    value: np.ndarray
    kind: ResidualKind


# ---------------------------------------------------------------------------
# internal vectorised assembly
# ---------------------------------------------------------------------------


class _Acc:
    """Accumulator for value and derivative arrays over N points."""

    def __init__(self, n, want):
        self.v = np.zeros(n)
        self.dxi = np.zeros((n, 3)) if Want.DXI in want else None
        self.d2 = np.zeros((n, 5)) if Want.D2XI in want else None
        self.dx = np.zeros((n, 3)) if Want.DX in want else None


def _dist_hat(x, xi, eps, d=None):
    d1 = xi[:, 0] - (x[:, 0] if d is None else d)
    return np.sqrt(d1 * d1 + (xi[:, 1] - x[:, 1]) ** 2 + (xi[:, 2] - x[:, 2]) ** 2) / eps


def _kernel(x, xi, q, eps, d, second):
    """Weighted image kernel ``exp(q (d - x1)/eps) g[d]`` and its jet."""
    h = hat_coords(x, xi, eps, shift=d)
    return eval_jet(h, q, eps, log_weight=q * (d - x[:, 0]) / eps, second=second)


def _bar_slab(x, xi, q, qx, eps, want, r0, acc):
    """Accumulate the bar slab parametrix (q frozen at x) into ``acc``.

    ``r0`` is the hat distance to the original source, the reference for
    pruning negligible image terms.
    """
    n = len(xi)
    x1 = x[:, 0]
    w, w1, w2 = omega1(xi[:, 0])
    second = Want.D2XI in want
    terms = (
        (x1, 1.0, 1.0, False),
        (-x1, -1.0, -1.0, False),
        (2.0 - x1, -1.0, -1.0, True),
        (2.0 + x1, 1.0, 1.0, True),
    )
    for k, (d, sig, sgn, cut) in enumerate(terms):
        if cut:
            active = (w != 0.0) | (w1 != 0.0) | (w2 != 0.0)
        else:
            active = np.ones(n, dtype=bool)
        if k > 0:
            active &= q * (_dist_hat(x, xi, eps, d) - r0) <= PRUNE_EXPONENT
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            continue
        xs, xis, qs, ds = x[idx], xi[idx], q[idx], d[idx]
        J = _kernel(xs, xis, qs, eps, ds, second)
        if cut:
            c, c1, c2 = sgn * w[idx], sgn * w1[idx], sgn * w2[idx]
        else:
            c, c1, c2 = sgn, 0.0, 0.0
        acc.v[idx] += c * J.value
        if acc.dxi is not None:
            acc.dxi[idx, 0] += c1 * J.value + c * J.d_xi1
            acc.dxi[idx, 1] += c * J.d_xi2
            acc.dxi[idx, 2] += c * J.d_xi3
        if acc.d2 is not None:
            acc.d2[idx, 0] += c2 * J.value + 2.0 * c1 * J.d_xi1 + c * J.d2_xi1xi1
            acc.d2[idx, 1] += c * J.d2_xi2xi2
            acc.d2[idx, 2] += c * J.d2_xi3xi3
            acc.d2[idx, 3] += c1 * J.d_xi2 + c * J.d2_xi1xi2
            acc.d2[idx, 4] += c1 * J.d_xi3 + c * J.d2_xi1xi3
        if acc.dx is not None:
            kq = J.d_q + (ds - xs[:, 0]) / eps * J.value
            qxs = qx[idx]
            acc.dx[idx, 0] += c * (-sig * J.d_xi1 + (sig - 1.0) * qs / eps * J.value + kq * qxs[:, 0])
            acc.dx[idx, 1] += c * (-J.d_xi2 + kq * qxs[:, 1])
            acc.dx[idx, 2] += c * (-J.d_xi3 + kq * qxs[:, 2])


def _tilde_slab(x, xi, q, qxi, eps, want, r0, acc):
    """Accumulate the tilde slab parametrix (q depends on xi) into ``acc``."""
    n = len(xi)
    x1 = x[:, 0]
    w, w1, w2 = omega0(x1)
    second = Want.D2XI in want
    if second and np.any(qxi != 0.0):
        raise NotImplementedError(
            "second xi-derivatives of the tilde parametrix need second partials of a; "
            "only constant a is supported"
        )
    terms = (
        (x1, 1.0, 1.0, False),
        (2.0 - x1, -1.0, -1.0, False),
        (-x1, -1.0, -1.0, True),
        (2.0 + x1, 1.0, 1.0, True),
    )
    for k, (d, sig, sgn, cut) in enumerate(terms):
        if cut:
            active = (w != 0.0) | (w1 != 0.0) | (w2 != 0.0)
        else:
            active = np.ones(n, dtype=bool)
        if k > 0:
            active &= q * (_dist_hat(x, xi, eps, d) - r0) <= PRUNE_EXPONENT
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            continue
        xs, xis, qs, ds = x[idx], xi[idx], q[idx], d[idx]
        J = _kernel(xs, xis, qs, eps, ds, second)
        if cut:
            c, c1 = sgn * w[idx], sgn * w1[idx]
        else:
            c, c1 = sgn, 0.0
        acc.v[idx] += c * J.value
        if acc.dxi is not None:
            kq = J.d_q + (ds - xs[:, 0]) / eps * J.value
            g = qxi[idx]
            acc.dxi[idx, 0] += c * (J.d_xi1 + kq * g[:, 0])
            acc.dxi[idx, 1] += c * (J.d_xi2 + kq * g[:, 1])
            acc.dxi[idx, 2] += c * (J.d_xi3 + kq * g[:, 2])
        if acc.d2 is not None:
            acc.d2[idx, 0] += c * J.d2_xi1xi1
            acc.d2[idx, 1] += c * J.d2_xi2xi2
            acc.d2[idx, 2] += c * J.d2_xi3xi3
            acc.d2[idx, 3] += c * J.d2_xi1xi2
            acc.d2[idx, 4] += c * J.d2_xi1xi3
        if acc.dx is not None:
            acc.dx[idx, 0] += c1 * J.value + c * (-sig * J.d_xi1 + (sig - 1.0) * qs / eps * J.value)
            acc.dx[idx, 1] += c * (-J.d_xi2)
            acc.dx[idx, 2] += c * (-J.d_xi3)


def _bare(x, xi, q, qx, eps, want, acc):
    J = _kernel(x, xi, q, eps, x[:, 0], Want.D2XI in want)
    acc.v += J.value
    if acc.dxi is not None:
        acc.dxi += np.stack([J.d_xi1, J.d_xi2, J.d_xi3], axis=-1)
    if acc.d2 is not None:
        acc.d2 += np.stack([J.d2_xi1xi1, J.d2_xi2xi2, J.d2_xi3xi3, J.d2_xi1xi2, J.d2_xi1xi3], axis=-1)
    if acc.dx is not None:
        kq = J.d_q
        acc.dx += np.stack([-J.d_xi1, -J.d_xi2, -J.d_xi3], axis=-1) + kq[:, None] * qx


# image factors in one transverse direction: (reflection, cut-off, orientation)
def _transverse_factors(t):
    """Return the three (mapped coordinate, C, C', C'', orientation) tuples."""
    one = np.ones_like(t)
    zero = np.zeros_like(t)
    w0, w01, w02 = omega0(t)
    w1, w11, w12 = omega1(t)
    return (
        (t, one, zero, zero, 1.0),
        (-t, -w0, -w01, -w02, -1.0),
        (2.0 - t, -w1, -w11, -w12, -1.0),
    )


def _bar_cube(x, xi, q, qx, eps, want, r0, acc):
    n = len(xi)
    f2 = _transverse_factors(xi[:, 1])
    f3 = _transverse_factors(xi[:, 2])
    need_d1 = Want.DXI in want or Want.D2XI in want
    sub_want = want | Want.DXI if Want.D2XI in want else want
    for i, (t2, C2, C2d, C2dd, o2) in enumerate(f2):
        for j, (t3, C3, C3d, C3dd, o3) in enumerate(f3):
            if i == 0 and j == 0:
                active = np.ones(n, dtype=bool)
                xr = xi
            else:
                active = (C2 != 0) | (C2d != 0) | (C2dd != 0)
                active &= (C3 != 0) | (C3d != 0) | (C3dd != 0)
                xr = np.stack([xi[:, 0], t2, t3], axis=-1)
                active &= q * (_dist_hat(x, xr, eps) - r0) <= PRUNE_EXPONENT
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                continue
            sub = _Acc(idx.size, sub_want | Want.VALUE)
            _bar_slab(x[idx], xr[idx], q[idx], qx[idx], eps, sub_want, r0[idx], sub)
            a2, a2d, a2dd = C2[idx], C2d[idx], C2dd[idx]
            a3, a3d, a3dd = C3[idx], C3d[idx], C3dd[idx]
            S = sub.v
            P = a2 * a3
            acc.v[idx] += P * S
            if need_d1:
                S1, S2, S3 = sub.dxi[:, 0], sub.dxi[:, 1], sub.dxi[:, 2]
            if acc.dxi is not None:
                acc.dxi[idx, 0] += P * S1
                acc.dxi[idx, 1] += a3 * (a2d * S + a2 * o2 * S2)
                acc.dxi[idx, 2] += a2 * (a3d * S + a3 * o3 * S3)
            if acc.d2 is not None:
                D = sub.d2
                acc.d2[idx, 0] += P * D[:, 0]
                acc.d2[idx, 1] += a3 * (a2dd * S + 2.0 * a2d * o2 * S2 + a2 * D[:, 1])
                acc.d2[idx, 2] += a2 * (a3dd * S + 2.0 * a3d * o3 * S3 + a3 * D[:, 2])
                acc.d2[idx, 3] += a3 * (a2d * S1 + a2 * o2 * D[:, 3])
                acc.d2[idx, 4] += a2 * (a3d * S1 + a3 * o3 * D[:, 4])
            if acc.dx is not None:
                acc.dx[idx] += P[:, None] * sub.dx


def _tilde_cube(x, xi, q, qxi, eps, want, r0, acc):
    n = len(xi)
    f2 = _transverse_factors(x[:, 1])
    f3 = _transverse_factors(x[:, 2])
    for i, (t2, C2, C2d, _C2dd, o2) in enumerate(f2):
        for j, (t3, C3, C3d, _C3dd, o3) in enumerate(f3):
            if i == 0 and j == 0:
                active = np.ones(n, dtype=bool)
                xr = x
            else:
                active = (C2 != 0) | (C2d != 0)
                active &= (C3 != 0) | (C3d != 0)
                xr = np.stack([x[:, 0], t2, t3], axis=-1)
                active &= q * (_dist_hat(xr, xi, eps) - r0) <= PRUNE_EXPONENT
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                continue
            sub = _Acc(idx.size, want | Want.VALUE)
            _tilde_slab(xr[idx], xi[idx], q[idx], qxi[idx], eps, want, r0[idx], sub)
            a2, a2d, a3, a3d = C2[idx], C2d[idx], C3[idx], C3d[idx]
            P = a2 * a3
            acc.v[idx] += P * sub.v
            if acc.dxi is not None:
                acc.dxi[idx] += P[:, None] * sub.dxi
            if acc.d2 is not None:
                acc.d2[idx] += P[:, None] * sub.d2
            if acc.dx is not None:
                acc.dx[idx, 0] += P * sub.dx[:, 0]
                acc.dx[idx, 1] += a3 * (a2d * sub.v + a2 * o2 * sub.dx[:, 1])
                acc.dx[idx, 2] += a2 * (a3d * sub.v + a3 * o3 * sub.dx[:, 2])


def _prepare(x, xi):
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], xi.shape[:-1])
    n = int(np.prod(shape)) if shape else 1
    xb = np.broadcast_to(x, shape + (3,)).reshape(n, 3)
    xib = np.broadcast_to(xi, shape + (3,)).reshape(n, 3)
    return xb, xib, shape


def _finish(acc, shape, which):
    def rs(a, extra=()):
        if a is None:
            return None
        out = a.reshape(shape + extra)
        return out

    v = rs(acc.v)
    if v.ndim == 0:
        v = float(v)
    return ParametrixEval(v, rs(acc.dxi, (3,)), rs(acc.d2, (5,)), rs(acc.dx, (3,)), which)


def eval_parametrix(x, xi, spec: ProblemSpec, variant, want: Want = Want.VALUE) -> ParametrixEval:
    """Evaluate any parametrix variant.

    Parameters
    ----------
    x, xi : array_like, shape (..., 3)
        Source and field points; broadcast against each other.
    spec : ProblemSpec
        Supplies ``a`` (through ``q = a/2``) and ``eps``.
    variant : Variant or str
    want : Want
        Derivative mask.  ``Want.VALUE`` is always included.

    Raises
    ------
    SingularityError
        If any ``xi`` coincides with ``x`` (``r_hat < 1e-12``).
    """
    variant = Variant(variant)
    want = Want(want) | Want.VALUE
    eps = spec.eps
    xb, xib, shape = _prepare(x, xi)
    r0 = _dist_hat(xb, xib, eps)
    if np.any(r0 < SINGULAR_RHAT):
        raise SingularityError("parametrix evaluated at the source point")
    acc = _Acc(len(xb), want)
    if variant.is_tilde:
        q = spec.q_at(xib)
        qg = 0.5 * spec.a.grad(xib)
    else:
        # q is frozen at x; evaluate once when x is a single point
        if np.ndim(x) == 1:
            q = np.full(len(xb), float(spec.q_at(np.asarray(x, dtype=float))))
            qg = np.broadcast_to(0.5 * spec.a.grad(np.asarray(x, dtype=float)), xb.shape)
        else:
            q = spec.q_at(xb)
            qg = 0.5 * spec.a.grad(xb)
    if variant is Variant.BAR_SLAB:
        _bar_slab(xb, xib, q, qg, eps, want, r0, acc)
    elif variant is Variant.TILDE_SLAB:
        _tilde_slab(xb, xib, q, qg, eps, want, r0, acc)
    elif variant is Variant.BAR_CUBE:
        _bar_cube(xb, xib, q, qg, eps, want, r0, acc)
    elif variant is Variant.TILDE_CUBE:
        _tilde_cube(xb, xib, q, qg, eps, want, r0, acc)
    else:
        _bare(xb, xib, q, qg, eps, want, acc)
    return _finish(acc, shape, variant)


def eval_bar_slab(x, xi, spec: ProblemSpec, want: Want = Want.VALUE) -> ParametrixEval:
    """Bar slab parametrix, ``q = a(x)/2``, images in ``xi1`` tapered by ``omega1(xi1)``."""
    return eval_parametrix(x, xi, spec, Variant.BAR_SLAB, want)


def eval_tilde_slab(x, xi, spec: ProblemSpec, want: Want = Want.VALUE) -> ParametrixEval:
    """Tilde slab parametrix, ``q = a(xi)/2``, images in ``x1`` tapered by ``omega0(x1)``.

    Derivatives in ``xi`` include the chain-rule terms through ``q``.
    """
    return eval_parametrix(x, xi, spec, Variant.TILDE_SLAB, want)


def eval_cube(x, xi, spec: ProblemSpec, which=Variant.BAR_CUBE, want: Want = Want.VALUE) -> ParametrixEval:
    """Cube parametrix: transverse images in ``xi`` (bar) or in ``x`` (tilde)."""
    which = Variant(which)
    if which not in (Variant.BAR_CUBE, Variant.TILDE_CUBE):
        raise ValueError(f"eval_cube expects a cube variant, got {which}")
    return eval_parametrix(x, xi, spec, which, want)


def residual_phi(x, xi, spec: ProblemSpec, kind=ResidualKind.PHI_BAR) -> ResidualEval:
    """Closed-form residual of the slab parametrix.

    ``phi_bar`` is what the frozen adjoint operator leaves behind when applied
    to the bar parametrix; it lives where ``omega1'(xi1) != 0``, i.e. the band
    ``1/6 < xi1 < 1/3``.  ``phi_tilde`` is the primal counterpart and lives
    where ``omega0'(x1) != 0``.
    """
    kind = ResidualKind(kind)
    eps = spec.eps
    xb, xib, shape = _prepare(x, xi)
    n = len(xb)
    out = np.zeros(n)
    x1 = xb[:, 0]
    if kind is ResidualKind.PHI_BAR:
        _, w1, w2 = omega1(xib[:, 0])
        idx = np.nonzero((w1 != 0) | (w2 != 0))[0]
        if idx.size:
            xs, xis = xb[idx], xib[idx]
            q = spec.q_at(xs)
            Ja = _kernel(xs, xis, q, eps, 2.0 - x1[idx], False)
            Jb = _kernel(xs, xis, q, eps, 2.0 + x1[idx], False)
            G2 = Ja.value - Jb.value
            G2_1 = Ja.d_xi1 - Jb.d_xi1
            out[idx] = 2.0 * eps * w1[idx] * G2_1 + (eps * w2[idx] - 2.0 * q * w1[idx]) * G2
    else:
        _, w1, w2 = omega0(x1)
        idx = np.nonzero((w1 != 0) | (w2 != 0))[0]
        if idx.size:
            xs, xis = xb[idx], xib[idx]
            q = spec.q_at(xis)
            Ja = _kernel(xs, xis, q, eps, -xs[:, 0], False)  # sigma = -1
            Jb = _kernel(xs, xis, q, eps, 2.0 + xs[:, 0], False)  # sigma = +1
            G2 = Ja.value - Jb.value
            dA = Ja.d_xi1 - 2.0 * q / eps * Ja.value
            dB = -Jb.d_xi1
            G2_x1 = dA - dB
            out[idx] = 2.0 * eps * w1[idx] * G2_x1 + (eps * w2[idx] + 2.0 * q * w1[idx]) * G2
    v = out.reshape(shape)
    return ResidualEval(float(v) if v.ndim == 0 else v, kind)
