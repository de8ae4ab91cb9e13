"""Continuous problem definition: coefficients, domain, diffusion parameter.

The operator of interest is

    L u = -eps * Laplace(u) - d/dx1 (a(x) u) + b(x) u     in Omega,

with homogeneous Dirichlet data, under the standing assumptions
``a >= alpha > 0`` and ``b - d a / d x1 >= 0``.  This module holds the
coefficient fields, the :class:`ProblemSpec` container, named presets and
a sampling-based validator for the assumptions.

Coefficient evaluators are vectorised: they receive an array of shape
``(..., 3)`` and return values of shape ``(...)`` (gradients ``(..., 3)``).
"""

from __future__ import annotations

import ast
import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .errors import CoefficientEvaluationError, ConfigurationError

__all__ = [
    "Domain",
    "CoefficientField",
    "ProblemSpec",
    "ValidationReport",
    "validate_problem",
    "validation_points",
    "with_fd_partials",
    "expression_field",
    "preset",
    "PRESETS",
    "FD_STEP",
]

#: Step of the central-difference partials helper, (machine epsilon)^(1/3).
FD_STEP = float(np.finfo(float).eps ** (1.0 / 3.0))

#: Violations smaller than this are attributed to rounding.
VALIDATION_TOL = 1e-12


class Domain(enum.Enum):
    """Geometry selector: the slab (0,1) x R^2 or the unit cube (0,1)^3."""

    SLAB = "slab"
    CUBE = "cube"


ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CoefficientField:
    """A smooth scalar coefficient with analytic first partials.

    Parameters
    ----------
    value_fn : callable
        Maps points ``(..., 3)`` to values ``(...)``.
    grad_fn : callable
        Maps points ``(..., 3)`` to gradients ``(..., 3)``.
    name : str
        Human readable description.
    constant : float or None
        Set when the field is known to be constant; lets downstream code
        skip chain-rule terms that vanish identically.
    """

    value_fn: ArrayFn
    grad_fn: ArrayFn
    name: str = "field"
    constant: float | None = None

    def value(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        out = np.asarray(self.value_fn(pts), dtype=float)
        return np.broadcast_to(out, pts.shape[:-1]).copy() if out.shape != pts.shape[:-1] else out

    def grad(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        out = np.asarray(self.grad_fn(pts), dtype=float)
        return np.broadcast_to(out, pts.shape).copy() if out.shape != pts.shape else out

    def partial(self, k: int, pts) -> np.ndarray:
        """Partial derivative in direction ``k`` (0, 1 or 2)."""
        return self.grad(pts)[..., k]

    @property
    def is_constant(self) -> bool:
        return self.constant is not None

    @classmethod
    def const(cls, c: float, name: str | None = None) -> "CoefficientField":
        c = float(c)
        return cls(
            value_fn=lambda p: np.full(np.shape(p)[:-1], c),
            grad_fn=lambda p: np.zeros(np.shape(p)),
            name=name or f"{c:g}",
            constant=c,
        )


def with_fd_partials(value_fn: ArrayFn, name: str = "field", h: float = FD_STEP) -> CoefficientField:
    """Wrap a value-only evaluator with central finite-difference partials.

    The step is absolute (coordinates live in [0, 1]) and defaults to the
    cube root of machine epsilon, which balances truncation and rounding
    for central differences.
    """

    def grad_fn(p):
        p = np.asarray(p, dtype=float)
        g = np.empty(p.shape)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[..., k] = (np.asarray(value_fn(p + e)) - np.asarray(value_fn(p - e))) / (2.0 * h)
        return g

    return CoefficientField(value_fn=value_fn, grad_fn=grad_fn, name=name)


_EXPR_NAMES = {
    name: getattr(np, name)
    for name in (
        "sin", "cos", "tan", "exp", "log", "sqrt", "tanh", "sinh", "cosh",
        "arctan", "arcsin", "arccos", "abs", "minimum", "maximum", "where",
    )
}
_EXPR_NAMES["pi"] = np.pi
_EXPR_NAMES["e"] = np.e


def expression_field(expr: str, name: str | None = None) -> CoefficientField:
    """Build a coefficient from an arithmetic expression in ``x1, x2, x3``.

    Only numeric literals, the coordinate names, arithmetic operators and a
    small whitelist of numpy functions are accepted.  Partials come from
    :func:`with_fd_partials`.

    Examples
    --------
    >>> f = expression_field("2 + cos(pi*x1)/4")
    >>> float(f.value([0.0, 0.3, 0.3]))
    2.25
    """
    allowed_nodes = (
        ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load,
        ast.Constant, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub,
        ast.UAdd, ast.Mod, ast.Compare, ast.Lt, ast.Gt, ast.LtE, ast.GtE,
    )
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse coefficient expression {expr!r}: {exc}") from None
    for node in ast.walk(tree):
        if not isinstance(node, allowed_nodes):
            raise ConfigurationError(f"disallowed syntax {type(node).__name__} in {expr!r}")
        if isinstance(node, ast.Name) and node.id not in _EXPR_NAMES and node.id not in ("x1", "x2", "x3"):
            raise ConfigurationError(f"unknown name {node.id!r} in {expr!r}")
    code = compile(tree, "<coefficient>", "eval")

    def value_fn(p):
        p = np.asarray(p, dtype=float)
        env = dict(_EXPR_NAMES, x1=p[..., 0], x2=p[..., 1], x3=p[..., 2])
        out = eval(code, {"__builtins__": {}}, env)  # noqa: S307 - whitelisted AST
        return np.broadcast_to(np.asarray(out, dtype=float), p.shape[:-1])

    return with_fd_partials(value_fn, name=name or expr)


@dataclass(frozen=True)
class ProblemSpec:
    """Continuous problem: coefficients ``a``, ``b``, diffusion ``eps``.

    Attributes
    ----------
    a, b : CoefficientField
        Convection and reaction coefficients.
    eps : float
        Diffusion parameter, ``eps > 0``.
    alpha : float
        Claimed lower bound of ``a``, ``alpha > 0``.
    domain : Domain
        Slab or cube geometry.
    name : str
        Label used in reports.
    """

    a: CoefficientField
    b: CoefficientField
    eps: float
    alpha: float
    domain: Domain = Domain.CUBE
    name: str = "custom"

    def __post_init__(self):
        if not (np.isfinite(self.eps) and self.eps > 0):
            raise ConfigurationError(f"eps must be positive, got {self.eps}")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")

    def with_eps(self, eps: float) -> "ProblemSpec":
        return ProblemSpec(self.a, self.b, float(eps), self.alpha, self.domain, self.name)

    def with_domain(self, domain: Domain) -> "ProblemSpec":
        return ProblemSpec(self.a, self.b, self.eps, self.alpha, domain, self.name)

    def q_at(self, pts) -> np.ndarray:
        """Frozen kernel parameter ``q = a/2`` at the given points."""
        return 0.5 * self.a.value(pts)


@dataclass
class ValidationReport:
    """Outcome of :func:`validate_problem`."""

    passed: bool
    n_samples: int
    min_a_minus_alpha: float
    argmin_a: np.ndarray
    min_b_minus_da: float
    argmin_b: np.ndarray
    tol: float = VALIDATION_TOL

    @property
    def worst_violation(self) -> float:
        """Most negative of the two margins (positive when both hold)."""
        return min(self.min_a_minus_alpha, self.min_b_minus_da)

    @property
    def worst_location(self) -> np.ndarray:
        if self.min_a_minus_alpha <= self.min_b_minus_da:
            return self.argmin_a
        return self.argmin_b


def validation_points(n_samples: int) -> np.ndarray:
    """Deterministic nested sample of the closed unit cube.

    The eight corners and the centre come first, followed by the
    unscrambled Halton sequence, so the first ``n`` points of a larger
    sample are exactly the ``n``-point sample.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=float)
    head = np.vstack([corners, [[0.5, 0.5, 0.5]]])
    if n_samples <= len(head):
        return head[:n_samples].copy()
    halton = qmc.Halton(d=3, scramble=False).random(n_samples - len(head))
    return np.vstack([head, halton])


def _checked(name, values, pts):
    values = np.asarray(values, dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        idx = np.argwhere(bad)[0][0]
        raise CoefficientEvaluationError(name, pts[idx])
    return values


def validate_problem(spec: ProblemSpec, n_samples: int = 1000) -> ValidationReport:
    """Check ``a >= alpha`` and ``b - d_1 a >= 0`` on a nested sample.

    Raises
    ------
    CoefficientEvaluationError
        If any evaluator returns a non-finite value.
    """
    pts = validation_points(n_samples)
    a = _checked(spec.a.name, spec.a.value(pts), pts)
    b = _checked(spec.b.name, spec.b.value(pts), pts)
    da = _checked(spec.a.name + " (d/dx1)", spec.a.grad(pts)[:, 0], pts)
    m1 = a - spec.alpha
    m2 = b - da
    i1, i2 = int(np.argmin(m1)), int(np.argmin(m2))
    passed = bool(m1[i1] >= -VALIDATION_TOL and m2[i2] >= -VALIDATION_TOL)
    return ValidationReport(
        passed=passed,
        n_samples=n_samples,
        min_a_minus_alpha=float(m1[i1]),
        argmin_a=pts[i1].copy(),
        min_b_minus_da=float(m2[i2]),
        argmin_b=pts[i2].copy(),
    )


def _smooth1_a() -> CoefficientField:
    def value(p):
        return 2.0 + 0.25 * np.cos(np.pi * np.asarray(p)[..., 0])

    def grad(p):
        p = np.asarray(p)
        g = np.zeros(p.shape)
        g[..., 0] = -0.25 * np.pi * np.sin(np.pi * p[..., 0])
        return g

    return CoefficientField(value, grad, name="2+cos(pi*x1)/4")


@dataclass(frozen=True)
class _Preset:
    build: Callable[[float, float | None, Domain], ProblemSpec]
    description: str = field(default="")


def _const_preset(eps, alpha, domain):
    alpha = 1.0 if alpha is None else float(alpha)
    return ProblemSpec(CoefficientField.const(alpha), CoefficientField.const(0.0), eps, alpha, domain, "const")


def _smooth1_preset(eps, alpha, domain):
    alpha = 1.75 if alpha is None else float(alpha)
    return ProblemSpec(_smooth1_a(), CoefficientField.const(1.0), eps, alpha, domain, "smooth1")


PRESETS = {
    "const": _Preset(_const_preset, "a = alpha (default 1), b = 0"),
    "smooth1": _Preset(_smooth1_preset, "a = 2 + cos(pi x1)/4, b = 1, alpha = 1.75"),
}


def preset(name: str, eps: float, alpha: float | None = None, domain: Domain = Domain.CUBE) -> ProblemSpec:
    """Look up a named problem preset.

    Parameters
    ----------
    name : {"const", "smooth1"}
    eps : float
    alpha : float, optional
        Overrides the preset's lower bound (for "const" it is also the value of a).
    domain : Domain
    """
    try:
        p = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return p.build(float(eps), alpha, domain)
