"""Constant-coefficient fundamental solution and its closed-form jet.

The kernel is

    g(x; xi; q) = exp(q (xi1_hat - r_hat)) / (4 pi eps^2 r_hat),

with hat coordinates ``xi_hat = (xi - x) / eps`` (the first component may be
measured against a shifted abscissa ``d``, the image position).  It solves
``-eps Laplace_xi g + 2 q d_xi1 g = delta(xi - x)`` in free space.

Every evaluator here is vectorised over leading array dimensions and can
take an additive ``log_weight`` that is folded into the exponent before
exponentiation.  This is how exponentially large weights such as
``exp(2 q (1 + x1) / eps)`` are combined with exponentially small kernels
without overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularityError

__all__ = [
    "HatCoords",
    "FundamentalJet",
    "Weights",
    "hat_coords",
    "eval_g",
    "eval_jet",
    "eval_weights",
    "frozen_residual",
    "frozen_residual_scale",
    "SINGULAR_RHAT",
    "EXP_CLAMP",
]

#: Points with ``r_hat`` below this are treated as coincident with the source.
SINGULAR_RHAT = 1e-12

#: Exponents beyond +-EXP_CLAMP are clamped (and flagged) in eval_weights.
EXP_CLAMP = 700.0

_FOUR_PI = 4.0 * np.pi


def _out(a):
    """Return a Python float for 0-d results, the array otherwise."""
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a


@dataclass(frozen=True)
class HatCoords:
    """Scaled relative coordinates of ``xi`` with respect to a source.

    Attributes
    ----------
    xi1_hat : ndarray
        ``(xi1 - shift) / eps``.
    xi2_hat, xi3_hat : ndarray
        ``(xi_k - x_k) / eps``.
    r_hat : ndarray
        Euclidean norm of the three components.
    shift : ndarray
        Image abscissa used for the first component.
    """

    xi1_hat: np.ndarray
    xi2_hat: np.ndarray
    xi3_hat: np.ndarray
    r_hat: np.ndarray
    shift: np.ndarray

    def check_regular(self):
        if np.any(np.asarray(self.r_hat) < SINGULAR_RHAT):
            raise SingularityError("kernel evaluated at its singular point (r_hat < 1e-12)")


def hat_coords(x, xi, eps: float, shift=None) -> HatCoords:
    """Hat coordinates of ``xi`` relative to ``x``.

    Parameters
    ----------
    x, xi : array_like, shape (..., 3)
        Source and field points (broadcast against each other).
    eps : float
    shift : float or array_like, optional
        Abscissa ``d`` for the first component; defaults to ``x1``.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    d = x[..., 0] if shift is None else np.asarray(shift, dtype=float)
    h1 = (xi[..., 0] - d) / eps
    h2 = (xi[..., 1] - x[..., 1]) / eps
    h3 = (xi[..., 2] - x[..., 2]) / eps
    r = np.sqrt(h1 * h1 + h2 * h2 + h3 * h3)
    return HatCoords(h1, h2, h3, r, np.broadcast_to(d, np.shape(r)))


def eval_g(h: HatCoords, q, eps: float, log_weight=0.0):
    """Kernel value ``exp(q (xi1_hat - r_hat) + log_weight) / (4 pi eps^2 r_hat)``.

    Raises
    ------
    SingularityError
        If any ``r_hat < 1e-12``.
    """
    h.check_regular()
    q = np.asarray(q, dtype=float)
    e = np.exp(q * (h.xi1_hat - h.r_hat) + log_weight)
    return _out(e / (_FOUR_PI * eps * eps * h.r_hat))


@dataclass(frozen=True)
class FundamentalJet:
    """Value and closed-form partials of the kernel at one (or many) points.

    All derivatives are with respect to the physical coordinates ``xi`` and
    the parameter ``q``.  Gradients in ``x`` follow from ``grad_x g = -grad_xi g``
    (for the unshifted kernel).
    """

    value: np.ndarray
    d_xi1: np.ndarray
    d_xi2: np.ndarray
    d_xi3: np.ndarray
    d_q: np.ndarray
    d2_xi1xi1: np.ndarray
    d2_xi2xi2: np.ndarray
    d2_xi3xi3: np.ndarray
    d2_xi1xi2: np.ndarray
    d2_xi1xi3: np.ndarray
    d2_xi1q: np.ndarray

    @property
    def grad_xi(self) -> np.ndarray:
        return np.stack([self.d_xi1, self.d_xi2, self.d_xi3], axis=-1)

    @property
    def grad_x(self) -> np.ndarray:
        return -self.grad_xi

    def laplacian_xi(self):
        return self.d2_xi1xi1 + self.d2_xi2xi2 + self.d2_xi3xi3


def eval_jet(h: HatCoords, q, eps: float, log_weight=0.0, second: bool = True) -> FundamentalJet:
    """Closed-form first and second partials of the kernel.

    Parameters
    ----------
    h : HatCoords
    q : float or ndarray
    eps : float
    log_weight : float or ndarray
        Added to the exponent; the whole jet is multiplied by ``exp(log_weight)``.
    second : bool
        When False the second-order fields are returned as ``None``.
    """
    h.check_regular()
    q = np.asarray(q, dtype=float)
    s1, s2, s3, r = h.xi1_hat, h.xi2_hat, h.xi3_hat, h.r_hat
    E = np.exp(q * (s1 - r) + log_weight)
    inv_r = 1.0 / r
    c2 = E / (_FOUR_PI * eps * eps)
    c3 = c2 / eps
    g = c2 * inv_r
    rm = r - s1
    # d/dxi1, d/dxi_k (k = 2, 3), d/dq
    g1 = c3 * inv_r**2 * (q * rm - s1 * inv_r)
    qr1 = q * r + 1.0
    ck = -c3 * qr1 * inv_r**3
    g2 = ck * s2
    g3 = ck * s3
    gq = c2 * (s1 - r) * inv_r
    if not second:
        return FundamentalJet(g, g1, g2, g3, gq, None, None, None, None, None, None)
    c4 = c3 / eps
    inv_r2 = inv_r * inv_r
    mix = c4 * inv_r**3 * (q * q * (s1 - r) + q * (3.0 * s1 - r) * inv_r + 3.0 * s1 * inv_r2)
    g12 = mix * s2
    g13 = mix * s3
    g1q = c3 * inv_r2 * (-q * rm * rm + (r * r - s1 * s1) * inv_r)
    cc = c4 * inv_r**3
    g22 = cc * (q * q * s2 * s2 + qr1 * (3.0 * s2 * s2 - r * r) * inv_r2)
    g33 = cc * (q * q * s3 * s3 + qr1 * (3.0 * s3 * s3 - r * r) * inv_r2)
    g11 = cc * (q * q * rm * rm - q * rm * (1.0 + 3.0 * s1 * inv_r) + (3.0 * s1 * s1 - r * r) * inv_r2)
    return FundamentalJet(g, g1, g2, g3, gq, g11, g22, g33, g12, g13, g1q)


@dataclass(frozen=True)
class Weights:
    """Exponential weights of the image construction at abscissa ``x1``.

    ``lambda_ = exp(2q(x1-1)/eps)``, ``lambda_plus/minus = exp(2q(1 +- x1)/eps)``,
    ``p = exp(-2 q x1 / eps)``.  The ``log_*`` fields hold the exact exponents;
    ``saturated`` is True when any exponent exceeded +-700 and the
    corresponding value was clamped.
    """

    lambda_: float
    lambda_plus: float
    lambda_minus: float
    p: float
    q: float
    log_lambda: float
    log_lambda_plus: float
    log_lambda_minus: float
    log_p: float
    saturated: bool


def eval_weights(x1, q, eps: float) -> Weights:
    """Compute the four exponential weights with an overflow guard."""
    q = float(q)
    x1 = float(x1)
    logs = (2 * q * (x1 - 1) / eps, 2 * q * (1 + x1) / eps, 2 * q * (1 - x1) / eps, -2 * q * x1 / eps)
    saturated = any(abs(v) > EXP_CLAMP for v in logs)
    vals = [float(np.exp(np.clip(v, -EXP_CLAMP, EXP_CLAMP))) for v in logs]
    return Weights(vals[0], vals[1], vals[2], vals[3], q, *logs, saturated=saturated)


def frozen_residual(x, xi, q, eps: float, shift=None):
    """Apply ``-eps Laplace_xi + 2 q d_xi1`` to the (possibly shifted) kernel.

    The result vanishes analytically away from the singularity; the returned
    value is the rounding-level residual.  Use :func:`frozen_residual_scale`
    for a magnitude to normalise it against.
    """
    h = hat_coords(x, xi, eps, shift)
    j = eval_jet(h, q, eps)
    return _out(-eps * j.laplacian_xi() + 2.0 * np.asarray(q) * j.d_xi1)


def frozen_residual_scale(x, xi, q, eps: float, shift=None):
    """Sum of the magnitudes of the terms entering :func:`frozen_residual`."""
    h = hat_coords(x, xi, eps, shift)
    j = eval_jet(h, q, eps)
    return _out(
        eps * (np.abs(j.d2_xi1xi1) + np.abs(j.d2_xi2xi2) + np.abs(j.d2_xi3xi3))
        + 2.0 * np.abs(np.asarray(q) * j.d_xi1)
    )
