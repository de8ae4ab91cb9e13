"""Independent reference computations shared by the test modules.

Nothing here calls the closed-form derivative code: derivatives are
central finite differences of the kernel value, the cross-plane oracle is
the 1D fundamental solution, and the FD comparison uses the parametrix.
"""

import numpy as np

from cdgreen import eval_g, hat_coords
from cdgreen.fundamental import eval_jet

JET_FIELDS = ("d_xi1", "d_xi2", "d_xi3", "d_q", "d2_xi1xi1", "d2_xi2xi2", "d2_xi3xi3", "d2_xi1xi2", "d2_xi1xi3",
              "d2_xi1q")


def random_offsets(rng, n, eps, r_min=0.1, r_max=5.0):
    """Source, field point and q with hat distance in [r_min, r_max]."""
    x = rng.uniform(0.3, 0.7, size=(n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.uniform(r_min, r_max, size=n)
    xi = x + eps * r[:, None] * d
    q = rng.uniform(0.5, 1.5, size=n)
    return x, xi, q


def _g(x, xi, q, eps):
    return eval_g(hat_coords(x, xi, eps), q, eps)


def fd_jet(x, xi, q, eps):
    """Central-difference approximations of the ten kernel derivatives.

    Steps are ``1e-4`` of the local length scale ``eps * min(1, r_hat)`` in
    space and ``1e-4`` in ``q``.
    """
    r = np.linalg.norm(xi - x, axis=1) / eps
    h = 1e-4 * eps * np.minimum(1.0, r)
    hq = 1e-4 * np.ones_like(q)

    def shifted(k, s):
        e = np.zeros_like(xi)
        e[:, k] = s * h
        return xi + e

    g0 = _g(x, xi, q, eps)
    out = {}
    for k in range(3):
        gp, gm = _g(x, shifted(k, 1), q, eps), _g(x, shifted(k, -1), q, eps)
        out[f"d_xi{k + 1}"] = (gp - gm) / (2 * h)
        out[f"d2_xi{k + 1}xi{k + 1}"] = (gp - 2 * g0 + gm) / (h * h)
    out["d_q"] = (_g(x, xi, q + hq, eps) - _g(x, xi, q - hq, eps)) / (2 * hq)
    for k in (1, 2):
        def at(s1, s2):
            e = np.zeros_like(xi)
            e[:, 0] = s1 * h
            e[:, k] = s2 * h
            return _g(x, xi + e, q, eps)

        out[f"d2_xi1xi{k + 1}"] = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4 * h * h)

    def atq(s1, s2):
        e = np.zeros_like(xi)
        e[:, 0] = s1 * h
        return _g(x, xi + e, q + s2 * hq, eps)

    out["d2_xi1q"] = (atq(1, 1) - atq(1, -1) - atq(-1, 1) + atq(-1, -1)) / (4 * h * hq)
    return out


def jet_errors(x, xi, q, eps):
    """Maximum relative error of each closed-form derivative against :func:`fd_jet`.

    Errors are relative to the natural size of the derivative,
    ``|g| (q + 1/r_hat)^k / eps^k`` for a k-th spatial derivative (times
    ``r_hat`` per q-derivative), so components that happen to vanish by
    symmetry are still measured on a meaningful scale.
    """
    h = hat_coords(x, xi, eps)
    J = eval_jet(h, q, eps)
    ref = fd_jet(x, xi, q, eps)
    base = np.abs(J.value)
    s = (q + 1.0 / h.r_hat) / eps
    scale = {
        "d_xi1": base * s, "d_xi2": base * s, "d_xi3": base * s, "d_q": base * h.r_hat,
        "d2_xi1xi1": base * s * s, "d2_xi2xi2": base * s * s, "d2_xi3xi3": base * s * s,
        "d2_xi1xi2": base * s * s, "d2_xi1xi3": base * s * s, "d2_xi1q": base * s * h.r_hat,
    }
    return {k: float(np.max(np.abs(getattr(J, k) - ref[k]) / scale[k])) for k in JET_FIELDS}
