"""Parameter studies: epsilon sweeps, scaling-law fits, verdicts, figure data.

A study is driven by a :class:`StudyConfig` (a flat ``key = value`` text
file).  :func:`sweep` runs the quadrature norm suite for every
``(eps, x)`` pair and fits each norm quantity against the functional form
of its bound; :func:`ball_study` resolves the dependence on the ball
radius; :func:`figure_export` samples the cube parametrix near the source
and records the bounding boxes of its superlevel sets; :func:`verify`
turns all of this into a verdict table.

Fits never assume values for the constants: only the functional form in
``eps`` (and ``rho``) is checked.  A fit is *consistent* when its
coefficient of determination reaches the threshold, its leading
coefficient is positive, and the ratio of measured value to fitted
prediction varies by at most a factor 2 across the data.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .fdsolver import Which, build_mesh, discrete_norms, solve_green, write_vtk_rectilinear
from .parametrix import ResidualKind, Variant, Want, eval_parametrix, residual_phi
from .problem import CoefficientField, Domain, ProblemSpec, expression_field, preset
from .quadrature import QUANTITIES, Base, MeshHints, Region, l1_norm, norm_suite, slab_half_width

__all__ = [
    "StudyConfig",
    "RhoSpec",
    "FitModel",
    "ScalingFit",
    "BallFit",
    "NormRow",
    "VerdictRow",
    "fit",
    "fit_breakpoint",
    "judge",
    "sweep",
    "ball_study",
    "residual_study",
    "fd_study",
    "figure_export",
    "level_boxes",
    "verdict_table",
    "verify",
    "write_csv",
    "read_csv",
    "CSV_COLUMNS",
    "FIGURE_LEVELS",
]

#: Column order of every norm table written to CSV.
CSV_COLUMNS = ("quantity", "eps", "rho", "value", "error_est", "cells", "wall_ms")

#: Isosurface levels of the anisotropy figure.
FIGURE_LEVELS = (1.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0)

DEFAULT_EPS = (1e-2, 3e-3, 1e-3, 3e-4, 1e-4)
DEFAULT_FD_EPS = (0.2, 0.1, 0.05, 0.02)
DEFAULT_RESIDUAL_EPS = (0.1, 0.05, 0.02, 0.01)
DEFAULT_RHO = "eps/64, eps/16, eps/4, eps"
DEFAULT_BALL_RHO = ", ".join(f"{2.0 ** k:g}*eps" for k in range(-4, 7))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RhoSpec:
    """A ball radius, absolute or proportional to ``eps``."""

    value: float
    relative: bool = False

    def resolve(self, eps: float) -> float:
        return self.value * eps if self.relative else self.value

    def __str__(self):
        return f"{_num(self.value)}*eps" if self.relative else _num(self.value)

    @classmethod
    def parse(cls, text: str) -> "RhoSpec":
        t = text.strip().replace(" ", "")
        try:
            if t == "eps":
                return cls(1.0, True)
            if t.endswith("*eps"):
                return cls(float(t[:-4]), True)
            if t.startswith("eps/"):
                return cls(1.0 / float(t[4:]), True)
            if t.startswith("eps*"):
                return cls(float(t[4:]), True)
            return cls(float(t), False)
        except ValueError:
            raise ConfigurationError(f"cannot parse radius {text!r}") from None


def _num(v) -> str:
    """Shortest text that parses back to the same float."""
    return repr(float(v))


def _floats(text, key):
    try:
        return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())
    except ValueError:
        raise ConfigurationError(f"{key}: expected a comma separated list of numbers, got {text!r}") from None


def _points(text, key):
    pts = []
    for chunk in text.split(";"):
        if chunk.strip():
            p = _floats(chunk, key)
            if len(p) != 3:
                raise ConfigurationError(f"{key}: points need three coordinates, got {chunk!r}")
            pts.append(p)
    return tuple(pts)


def _bool(text, key):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")


@dataclass(frozen=True)
class StudyConfig:
    """Inputs of a study.

    Documented config-file keys (``key = value``, ``#`` starts a comment):

    ``preset``
        Named problem (``const``, ``smooth1``); ignored when ``a`` is given.
    ``a``, ``b``, ``alpha``
        Inline coefficients as expressions in ``x1, x2, x3`` and the lower
        bound of ``a``.
    ``eps_list``
        Diffusion parameters of the parametrix sweep.
    ``x``
        Source points, ``x1,x2,x3`` separated by ``;``.  The first is the
        main point; all are used for the lower-bound stability check.
    ``rho_list``
        Radii for the excluded-ball norms: numbers or ``eps``, ``eps/N``,
        ``N*eps``.
    ``ball_rho_list``, ``ball_eps``
        Radii and diffusion parameter of the ball study.
    ``variant``
        Parametrix variant (``bar_cube`` by default).
    ``tol``
        Relative quadrature tolerance.
    ``mesh_n``, ``fd_eps_list``
        Finite-difference mesh size and diffusion parameters.
    ``residual_eps_list``
        Diffusion parameters of the residual-decay study.
    ``lower_bound_eps_max``
        Only ``eps`` up to this value enter lower-bound verdicts.
    ``figure_eps``, ``figure_x``, ``figure_eps_list``, ``figure_field``
        Figure export settings (``figure_field`` is ``parametrix`` or ``fd``).
    ``out_dir``, ``threads``, ``timing``
        Output directory, worker processes, and whether wall times are
        recorded (``false`` gives byte-reproducible tables).
    """

    preset: str = "const"
    a: str | None = None
    b: str | None = None
    alpha: float | None = None
    eps_list: tuple = DEFAULT_EPS
    x: tuple = ((0.5, 0.5, 0.5),)
    rho_list: tuple = tuple(RhoSpec.parse(t) for t in DEFAULT_RHO.split(","))
    ball_rho_list: tuple = tuple(RhoSpec.parse(t) for t in DEFAULT_BALL_RHO.split(","))
    ball_eps: float = 1e-3
    variant: str = "bar_cube"
    tol: float = 1e-3
    mesh_n: int = 64
    fd_eps_list: tuple = DEFAULT_FD_EPS
    residual_eps_list: tuple = DEFAULT_RESIDUAL_EPS
    lower_bound_eps_max: float = 1e-2
    figure_eps: float = 0.01
    figure_x: tuple = (0.2, 0.5, 1.0 / 3.0)
    figure_eps_list: tuple = (0.04, 0.01, 0.0025)
    figure_field: str = "parametrix"
    out_dir: str = "results"
    threads: int = 1
    timing: bool = True

    def __post_init__(self):
        for key in ("eps_list", "fd_eps_list", "residual_eps_list", "figure_eps_list"):
            vals = getattr(self, key)
            if key == "eps_list" and len(vals) == 0:
                raise ConfigurationError("eps_list is empty")
            if len(set(vals)) != len(vals):
                raise ConfigurationError(f"{key}: values must be distinct")
            if any(not (0 < v <= 1) for v in vals):
                raise ConfigurationError(f"{key}: values must lie in (0, 1]")
        if not self.x:
            raise ConfigurationError("x: at least one source point is required")
        for p in tuple(self.x) + (tuple(self.figure_x),):
            if len(p) != 3 or not all(0 < v < 1 for v in p):
                raise ConfigurationError(f"source point {p} is not interior")
        if not (self.tol > 0):
            raise ConfigurationError("tol must be positive")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        if self.figure_field not in ("parametrix", "fd"):
            raise ConfigurationError("figure_field must be 'parametrix' or 'fd'")
        try:
            Variant(self.variant)
        except ValueError:
            raise ConfigurationError(
                f"unknown variant {self.variant!r}; choose from {[v.value for v in Variant]}"
            ) from None
        if self.a is not None and self.alpha is None:
            raise ConfigurationError("inline coefficient a requires alpha")

    # -- parsing ---------------------------------------------------------

    _PARSERS = {
        "preset": lambda t, k: t.strip(),
        "a": lambda t, k: t.strip(),
        "b": lambda t, k: t.strip(),
        "alpha": lambda t, k: float(t),
        "eps_list": _floats,
        "x": _points,
        "rho_list": lambda t, k: tuple(RhoSpec.parse(v) for v in t.split(",") if v.strip()),
        "ball_rho_list": lambda t, k: tuple(RhoSpec.parse(v) for v in t.split(",") if v.strip()),
        "ball_eps": lambda t, k: float(t),
        "variant": lambda t, k: t.strip(),
        "tol": lambda t, k: float(t),
        "mesh_n": lambda t, k: int(t),
        "fd_eps_list": _floats,
        "residual_eps_list": _floats,
        "lower_bound_eps_max": lambda t, k: float(t),
        "figure_eps": lambda t, k: float(t),
        "figure_x": lambda t, k: _points(t, k)[0],
        "figure_eps_list": _floats,
        "figure_field": lambda t, k: t.strip(),
        "out_dir": lambda t, k: t.strip(),
        "threads": lambda t, k: int(t),
        "timing": _bool,
    }

    @classmethod
    def from_text(cls, text: str, **overrides) -> "StudyConfig":
        """Parse the flat key-value format; later keys override earlier ones."""
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in cls._PARSERS:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            try:
                kw[key] = cls._PARSERS[key](value, key)
            except ValueError as exc:
                raise ConfigurationError(f"line {lineno}: {key}: {exc}") from None
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    @classmethod
    def from_file(cls, path, **overrides) -> "StudyConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, **overrides)

    def to_text(self) -> str:
        """Serialise back to the config-file format."""
        out = []
        for key in self._PARSERS:
            v = getattr(self, key)
            if v is None:
                continue
            if key == "x":
                v = "; ".join(",".join(_num(c) for c in p) for p in v)
            elif key == "figure_x":
                v = ",".join(_num(c) for c in v)
            elif isinstance(v, tuple):
                v = ", ".join(str(e) if isinstance(e, RhoSpec) else _num(e) for e in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = _num(v)
            out.append(f"{key} = {v}")
        return "\n".join(out) + "\n"

    # -- problem ---------------------------------------------------------

    def problem(self, eps: float) -> ProblemSpec:
        """The problem at diffusion ``eps`` on the cube."""
        if self.a is not None:
            a = expression_field(self.a)
            b = expression_field(self.b) if self.b else CoefficientField.const(0.0)
            return ProblemSpec(a, b, float(eps), float(self.alpha), Domain.CUBE, "inline")
        return preset(self.preset, eps, self.alpha, Domain.CUBE)

    @property
    def lower_bound_applicable(self) -> bool:
        """Lower bounds are stated for a constant ``a`` and ``b = 0``."""
        return self.a is None and self.preset == "const"


# ---------------------------------------------------------------------------
# norm tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormRow:
    quantity: str
    eps: float
    rho: float | None
    value: float
    error_est: float
    cells: int
    wall_ms: float

    @property
    def ok(self) -> bool:
        return math.isfinite(self.value)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, rows) -> None:
    """Write norm rows with the fixed column set (floats round-trip exactly)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.quantity, _fmt(r.eps), _fmt(r.rho), _fmt(r.value), _fmt(r.error_est), _fmt(r.cells),
                    _fmt(r.wall_ms)])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read table {path}: {exc}") from None
    rows = []
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ConfigurationError(f"{path}: unexpected columns {reader.fieldnames}")
    for d in reader:
        rows.append(NormRow(d["quantity"], float(d["eps"]), float(d["rho"]) if d["rho"] else None,
                            float(d["value"]), float(d["error_est"]), int(d["cells"]), float(d["wall_ms"])))
    return rows


def _select(rows, quantity, rho=None, any_rho=False):
    out = [r for r in rows if r.quantity == quantity and (any_rho or r.rho == rho)]
    return sorted(out, key=lambda r: (-r.eps, r.rho if r.rho is not None else 0.0))


# ---------------------------------------------------------------------------
# scaling fits
# ---------------------------------------------------------------------------


class FitModel(enum.Enum):
    """Functional forms; ``y`` the measured norm."""

    CONST = "const"  # y = a0
    LOG = "log"  # y = a0 + a1 ln(1/eps)
    POW = "pow"  # y = a0 eps^-beta (beta fixed or free)
    LOG_BALL = "log-ball"  # y = a0 eps^-1 ln(2 + eps/rho)
    LOG_BALL_ETA = "log-ball-eta"  # y = a0 eps^-1 (ln(2 + eps/rho) + |ln eps|)
    RHO_LINEAR = "rho-linear"  # y = a0 rho/eps
    RHO_SQRT = "rho-sqrt"  # y = a0 (rho/eps)^(1/2)
    EXP_DECAY = "exp-decay"  # ln y = a0 - a1/eps


_SHAPES = {
    FitModel.LOG_BALL: lambda e, r: np.log(2.0 + e / r) / e,
    FitModel.LOG_BALL_ETA: lambda e, r: (np.log(2.0 + e / r) + np.abs(np.log(e))) / e,
    FitModel.RHO_LINEAR: lambda e, r: r / e,
    FitModel.RHO_SQRT: lambda e, r: np.sqrt(r / e),
}


@dataclass
class ScalingFit:
    """Result of fitting one quantity against one functional form.

    Attributes
    ----------
    quantity : str
    model : FitModel
    coefficients : dict
        Fitted constants; ``leading`` is the coefficient multiplying the
        growth (or decay) term and must be positive for a consistent fit.
    r2 : float
        Coefficient of determination in [0, 1].  One-coefficient scaling
        forms and free power laws are fitted in log space (and ``r2``
        refers to ``ln y``); the affine log model and the exponential decay
        in the natural variables.  For ``CONST`` the uncentred value
        ``1 - sum (y - mean)^2 / sum y^2`` is reported.
    band : float
        ``max(y / prediction) / min(y / prediction)``.
    table : list of dict
        Per-point ``eps, rho, value, predicted, ratio``.
    """

    quantity: str
    model: FitModel
    coefficients: dict
    r2: float
    band: float
    table: list = field(default_factory=list)
    n_failed: int = 0

    @property
    def leading(self) -> float:
        return self.coefficients.get("leading", float("nan"))

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.value
        return d


def _r2(y, pred, centred=True):
    y = np.asarray(y, dtype=float)
    res = float(np.sum((y - pred) ** 2))
    tot = float(np.sum((y - y.mean()) ** 2)) if centred else float(np.sum(y * y))
    if tot == 0.0:
        return 1.0 if res == 0.0 else 0.0
    return float(min(1.0, max(0.0, 1.0 - res / tot)))


def fit(model, eps, values, rho=None, beta: float | None = 0.5, quantity: str = "") -> ScalingFit:
    """Fit ``values`` measured at ``eps`` (and ``rho``) against ``model``.

    Parameters
    ----------
    model : FitModel
    eps, values : sequence of float
    rho : sequence of float, optional
        Needed by the ball-dependent forms.
    beta : float or None
        Exponent of ``POW``; None fits it freely.
    quantity : str
        Label carried into the result.

    Raises
    ------
    ConfigurationError
        On empty input, too few points for the free coefficients, or
        nonpositive values where a log-space fit needs them.
    """
    model = FitModel(model)
    e = np.asarray(eps, dtype=float)
    y = np.asarray(values, dtype=float)
    r = None if rho is None else np.asarray(rho, dtype=float)
    if e.size == 0:
        raise ConfigurationError("nothing to fit")
    n_free = {FitModel.LOG: 2, FitModel.EXP_DECAY: 2}.get(model, 2 if (model is FitModel.POW and beta is None) else 1)
    if e.size < max(n_free, 1) + (1 if n_free == 2 else 0):
        raise ConfigurationError(f"{model.value} fit needs at least {n_free + 1} points, got {e.size}")
    needs_log = model not in (FitModel.CONST, FitModel.LOG)
    if needs_log and np.any(y <= 0):
        raise ConfigurationError(f"{model.value} fit needs positive values")
    coeffs = {}
    if model is FitModel.CONST:
        a0 = float(y.mean())
        pred = np.full_like(y, a0)
        coeffs = {"a0": a0, "leading": a0}
        r2 = _r2(y, pred, centred=False)
    elif model is FitModel.LOG:
        A = np.vstack([np.ones_like(e), np.log(1.0 / e)]).T
        (a0, a1), *_ = np.linalg.lstsq(A, y, rcond=None)
        pred = A @ np.array([a0, a1])
        coeffs = {"a0": float(a0), "a1": float(a1), "leading": float(a1)}
        r2 = _r2(y, pred)
    elif model is FitModel.POW:
        ly, le = np.log(y), np.log(e)
        if beta is None:
            A = np.vstack([np.ones_like(e), -le]).T
            (c, b), *_ = np.linalg.lstsq(A, ly, rcond=None)
        else:
            b = float(beta)
            c = float(np.mean(ly + b * le))
        lp = c - b * le
        pred = np.exp(lp)
        coeffs = {"a0": float(np.exp(c)), "beta": float(b), "leading": float(np.exp(c))}
        r2 = _r2(ly, lp)
    elif model is FitModel.EXP_DECAY:
        A = np.vstack([np.ones_like(e), -1.0 / e]).T
        (c, k), *_ = np.linalg.lstsq(A, np.log(y), rcond=None)
        lp = A @ np.array([c, k])
        pred = np.exp(lp)
        coeffs = {"a0": float(c), "rate": float(k), "leading": float(k)}
        r2 = _r2(np.log(y), lp)
    else:
        if r is None or r.shape != e.shape:
            raise ConfigurationError(f"{model.value} fit needs a radius per point")
        shape = _SHAPES[model](e, r)
        ly, ls = np.log(y), np.log(shape)
        c = float(np.mean(ly - ls))
        lp = c + ls
        pred = np.exp(lp)
        coeffs = {"a0": float(np.exp(c)), "leading": float(np.exp(c))}
        r2 = _r2(ly, lp)
    ratio = y / pred
    band = float(ratio.max() / ratio.min()) if np.all(ratio > 0) else float("inf")
    table = [
        {"eps": float(e[i]), "rho": None if r is None else float(r[i]), "value": float(y[i]),
         "predicted": float(pred[i]), "ratio": float(ratio[i])}
        for i in range(e.size)
    ]
    return ScalingFit(quantity, model, coeffs, r2, band, table)


@dataclass
class BallFit:
    """Continuous two-regime fit ``c rho/eps`` below and ``c' (rho/eps)^(1/2)`` above a breakpoint."""

    eps: float
    breakpoint: float
    c_linear: float
    c_sqrt: float
    r2: float
    rho: list
    values: list

    def to_json(self) -> dict:
        return asdict(self)


def fit_breakpoint(eps: float, rho, values, n_grid: int = 2001) -> BallFit:
    """Least-squares breakpoint of the two-regime ball law, in log space.

    The model is ``ln y = ln c + ln(rho/eps) - 1/2 max(0, ln(rho/rho_b))``,
    continuous at ``rho_b``; ``ln c`` is eliminated in closed form and
    ``rho_b`` found by scanning a fine logarithmic grid spanning the data.
    """
    r = np.asarray(rho, dtype=float)
    y = np.asarray(values, dtype=float)
    if r.size < 4:
        raise ConfigurationError("breakpoint fit needs at least 4 radii")
    if np.any(y <= 0) or np.any(r <= 0):
        raise ConfigurationError("breakpoint fit needs positive radii and values")
    ly = np.log(y)
    base = ly - np.log(r / eps)
    lr = np.log(r)
    grid = np.linspace(lr.min(), lr.max(), n_grid)
    best = None
    for lb in grid:
        kink = -0.5 * np.maximum(0.0, lr - lb)
        c = float(np.mean(base - kink))
        sse = float(np.sum((base - kink - c) ** 2))
        if best is None or sse < best[0] - 1e-15:
            best = (sse, lb, c)
    _, lb, c = best
    lp = c + np.log(r / eps) - 0.5 * np.maximum(0.0, lr - lb)
    rb = float(np.exp(lb))
    return BallFit(eps, rb, float(np.exp(c)), float(np.exp(c) * math.sqrt(rb / eps)), _r2(ly, lp),
                   r.tolist(), y.tolist())


def judge(f: ScalingFit, r2_min: float = 0.98, band_max: float = 2.0) -> str:
    """Verdict of one fit: consistent, inconsistent or inconclusive."""
    if f.n_failed:
        return "inconclusive"
    if not (f.leading > 0):
        return "inconsistent"
    if f.r2 >= r2_min and f.band <= band_max:
        return "consistent"
    return "inconsistent"


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def _report_rows(rep):
    rows = []
    for q, e, rho, v, err, cells, ms in rep.rows():
        rows.append(NormRow(q, float(e), None if rho is None else float(rho), float(v), float(err), int(cells),
                            float(ms)))
    return rows


def _norm_task(args):
    """Worker: one norm suite (top level so it can run in a process pool)."""
    cfg, eps, x, quantities, rhos = args
    spec = cfg.problem(eps)
    timer = None if cfg.timing else (lambda: 0.0)
    rep = norm_suite(np.asarray(x), spec, Variant(cfg.variant), rhos, cfg.tol, quantities=quantities, timer=timer)
    return _report_rows(rep)


def _run_tasks(cfg, tasks):
    if cfg.threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(_norm_task, tasks))
    return [_norm_task(t) for t in tasks]


@dataclass
class SweepResult:
    """Norm tables per source point and the fits of the main point."""

    x: tuple
    tables: dict  # x index -> list of NormRow
    fits: dict  # quantity -> ScalingFit
    files: list = field(default_factory=list)


#: Model matched to each sweep quantity.
SWEEP_MODELS = {
    "G": (FitModel.CONST, None),
    "crossplane_sup": (FitModel.CONST, None),
    "dxi1": (FitModel.LOG, None),
    "dxi2": (FitModel.POW, 0.5),
    "dxi3": (FitModel.POW, 0.5),
    "dx2": (FitModel.POW, 0.5),
    "dx3": (FitModel.POW, 0.5),
    "d2xi1": (FitModel.LOG_BALL, None),
    "d2xi2": (FitModel.LOG_BALL_ETA, None),
    "d2xi3": (FitModel.LOG_BALL_ETA, None),
    "ball_w11": (FitModel.RHO_LINEAR, None),
}


def fit_quantity(rows, quantity, model=None, beta=None) -> ScalingFit:
    """Fit one quantity of a norm table with its matched (or a given) model."""
    m, b = SWEEP_MODELS[quantity] if model is None else (FitModel(model), beta)
    if model is not None and beta is None and m is FitModel.POW:
        b = SWEEP_MODELS.get(quantity, (None, 0.5))[1]
    sel = _select(rows, quantity, any_rho=True)
    good = [r for r in sel if r.ok and r.value > 0]
    if not good:
        return ScalingFit(quantity, m, {}, 0.0, float("inf"), [], n_failed=len(sel))
    f = fit(m, [r.eps for r in good], [r.value for r in good],
            [r.rho for r in good] if m in _SHAPES else None, beta=b, quantity=quantity)
    f.n_failed = len(sel) - len(good)
    return f


def sweep(cfg: StudyConfig, quantities=QUANTITIES, write: bool = True, x_points=None, eps_list=None) -> SweepResult:
    """Run the norm suite over ``eps_list x x`` and fit each quantity.

    Tables are written to ``out_dir/sweep_x{i}.csv`` (one per source
    point) and the fits of the first point to ``out_dir/sweep_fits.json``.
    """
    xs = tuple(x_points or cfg.x)
    eps_list = tuple(eps_list or cfg.eps_list)
    tasks, owner = [], []
    for ix, x in enumerate(xs):
        for eps in eps_list:
            rhos = tuple(sorted({rs.resolve(eps) for rs in cfg.rho_list}))
            tasks.append((cfg, eps, tuple(x), tuple(quantities), rhos))
            owner.append(ix)
    tables = {ix: [] for ix in range(len(xs))}
    for ix, rows in zip(owner, _run_tasks(cfg, tasks)):
        tables[ix].extend(rows)
    fits = {q: fit_quantity(tables[0], q) for q in quantities if q in SWEEP_MODELS}
    res = SweepResult(xs, tables, fits)
    if write:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for ix, rows in tables.items():
            p = out / f"sweep_x{ix}.csv"
            write_csv(p, rows)
            res.files.append(str(p))
        p = out / "sweep_fits.json"
        p.write_text(json.dumps({"x": [list(x) for x in xs], "fits": {q: f.to_json() for q, f in fits.items()}},
                                indent=2, sort_keys=True) + "\n")
        res.files.append(str(p))
    return res


@dataclass
class BallStudy:
    eps: float
    x: tuple
    rows: list
    breakpoint_fit: BallFit | None
    second_fits: dict
    files: list = field(default_factory=list)


def ball_study(cfg: StudyConfig, eps: float | None = None, x=None, write: bool = True) -> BallStudy:
    """Ball-radius dependence at fixed ``eps``.

    Computes ``||G||_{1,1; B(x, rho)}`` and the excluded-ball second
    derivatives for every radius of ``ball_rho_list`` (restricted to
    ``rho <= 1/8``), fits the two-regime ball law and the log-ball forms.
    """
    eps = float(eps or cfg.ball_eps)
    x = tuple(x or cfg.x[0])
    rhos = tuple(sorted({rs.resolve(eps) for rs in cfg.ball_rho_list if 0 < rs.resolve(eps) <= 0.125}))
    if len(rhos) < 4:
        raise ConfigurationError("ball study needs at least 4 radii in (0, 1/8]")
    rows = _norm_task((cfg, eps, x, ("ball_w11", "d2xi1", "d2xi2", "d2xi3"), rhos))
    ball = [r for r in _select(rows, "ball_w11", any_rho=True) if r.ok and r.value > 0]
    bfit = fit_breakpoint(eps, [r.rho for r in ball], [r.value for r in ball]) if len(ball) >= 4 else None
    second = {}
    for q in ("d2xi1", "d2xi2", "d2xi3"):
        sel = [r for r in _select(rows, q, any_rho=True) if r.ok and r.value > 0]
        if len(sel) >= 2:
            second[q] = fit(FitModel.LOG_BALL, [r.eps for r in sel], [r.value for r in sel],
                            [r.rho for r in sel], quantity=q)
    res = BallStudy(eps, x, rows, bfit, second)
    if write:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        p = out / "ball.csv"
        write_csv(p, rows)
        j = out / "ball_fit.json"
        j.write_text(json.dumps({"eps": eps, "x": list(x),
                                 "breakpoint": None if bfit is None else bfit.to_json(),
                                 "second": {q: f.to_json() for q, f in second.items()}},
                                indent=2, sort_keys=True) + "\n")
        res.files += [str(p), str(j)]
    return res


def residual_study(cfg: StudyConfig, eps_list=None, x=None, tol: float = 1e-4, write: bool = True):
    """``||phi_bar(x; .)||_1`` over the slab for each ``eps``; returns rows.

    The residual lives in the band ``1/6 < xi1 < 1/3``; it is integrated
    over that band and the transverse truncation of the slab.
    """
    eps_list = tuple(eps_list or cfg.residual_eps_list)
    x = np.asarray(x or cfg.x[0], dtype=float)
    clock = time.perf_counter if cfg.timing else (lambda: 0.0)
    rows = []
    for eps in eps_list:
        spec = cfg.problem(eps).with_domain(Domain.SLAB)
        q = float(spec.q_at(x))
        region = Region(Base.SLAB_TRUNCATED, W=slab_half_width(eps, q), xi1_bounds=(1.0 / 6.0, 1.0 / 3.0))
        t0 = clock()
        r = l1_norm(lambda p, spec=spec: residual_phi(x, p, spec, ResidualKind.PHI_BAR).value, region, None, tol,
                    MeshHints(eps, q, center=tuple(x)))
        rows.append(NormRow("phi_bar", eps, None, r.value, r.error_estimate, r.cells, 1000.0 * (clock() - t0)))
    if write:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "residual.csv", rows)
    return rows


def fd_study(cfg: StudyConfig, eps_list=None, x=None, write: bool = True):
    """Discrete norms of finite-difference Green's functions (adjoint solves)."""
    eps_list = tuple(eps_list or cfg.fd_eps_list)
    x = np.asarray(x or cfg.x[0], dtype=float)
    clock = time.perf_counter if cfg.timing else (lambda: 0.0)
    rows = []
    for eps in eps_list:
        spec = cfg.problem(eps)
        t0 = clock()
        mesh = build_mesh(spec, x, cfg.mesh_n, "layer", Which.ADJOINT)
        gf = solve_green(spec, mesh, x, Which.ADJOINT)
        rep = discrete_norms(gf)
        ms = 1000.0 * (clock() - t0)
        for row in _report_rows(rep):
            rows.append(NormRow(row.quantity, row.eps, row.rho, row.value, row.error_est, row.cells, ms))
    if write:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "fd.csv", rows)
    return rows


# ---------------------------------------------------------------------------
# figure data
# ---------------------------------------------------------------------------


def _graded_axis(c, delta, growth=1.08, hmax=1.0 / 80.0):
    """Nodes on [0, 1] clustered symmetrically around ``c`` without hitting it.

    Offsets from ``c`` start at ``delta/2`` and grow geometrically up to
    the spacing cap ``hmax``.
    """
    def side(limit):
        offs, o, h = [], 0.5 * delta, delta
        while o < limit:
            offs.append(o)
            o += h
            h = min(h * growth, hmax)
        return offs

    left = [c - o for o in side(c)]
    right = [c + o for o in side(1.0 - c)]
    nodes = np.array(sorted([0.0] + left + right + [1.0]))
    keep = np.concatenate([[True], np.diff(nodes) > 1e-12])
    return nodes[keep]


def level_boxes(axes, values, center, levels=FIGURE_LEVELS) -> list:
    """Bounding boxes of the superlevel sets ``{G >= level}`` on a rectilinear grid.

    The box of each level is the extent of nodes at or above the level,
    extended to the linearly interpolated crossings on the outgoing grid
    edges.  Extents are reported relative to ``center``: ``downstream``
    (``max xi1 - c1``), ``upstream`` (``c1 - min xi1``) and the transverse
    half-widths (maximum distance from ``c2``, ``c3``).
    """
    v = np.asarray(values, dtype=float)
    out = []
    for L in levels:
        inside = v >= L
        if not inside.any():
            out.append({"level": float(L), "empty": True})
            continue
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for k in range(3):
            idx = np.nonzero(inside.any(axis=tuple(j for j in range(3) if j != k)))[0]
            ax = np.asarray(axes[k])
            lo[k], hi[k] = ax[idx.min()], ax[idx.max()]
            # refine with crossings along axis k
            vin = np.moveaxis(v, k, 0)
            a, b = vin[:-1], vin[1:]
            up = (a >= L) & (b < L)
            dn = (a < L) & (b >= L)
            for mask, sign in ((up, 1), (dn, -1)):
                if mask.any():
                    i = np.nonzero(mask)
                    frac = (a[i] - L) / (a[i] - b[i])
                    pos = ax[i[0]] + frac * (ax[i[0] + 1] - ax[i[0]])
                    if sign > 0:
                        hi[k] = max(hi[k], pos.max())
                    else:
                        lo[k] = min(lo[k], pos.min())
        c = np.asarray(center, dtype=float)
        out.append({
            "level": float(L),
            "empty": False,
            "nodes": int(inside.sum()),
            "bbox": [[float(lo[k]), float(hi[k])] for k in range(3)],
            "downstream": float(hi[0] - c[0]),
            "upstream": float(c[0] - lo[0]),
            "transverse2": float(max(hi[1] - c[1], c[1] - lo[1])),
            "transverse3": float(max(hi[2] - c[2], c[2] - lo[2])),
        })
    return out


def _sample_parametrix(x, spec, axes, variant=Variant.BAR_CUBE, chunk=200_000):
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    pts = g.reshape(-1, 3)
    vals = np.zeros(len(pts))
    interior = np.all((pts > 0) & (pts < 1), axis=1)
    idx = np.flatnonzero(interior)
    for s in range(0, len(idx), chunk):
        sel = idx[s:s + chunk]
        vals[sel] = eval_parametrix(np.asarray(x), pts[sel], spec, variant, Want.VALUE).value
    return vals.reshape(g.shape[:-1])


@dataclass
class FigureResult:
    eps: float
    x: tuple
    levels: list
    boxes: list
    files: list = field(default_factory=list)


def figure_field(cfg: StudyConfig, eps: float | None = None, x=None):
    """Sample the field on an anisotropy-adapted grid; returns ``(axes, values)``.

    Axis 1 is graded on the scale ``eps`` around the source, the
    transverse axes on the scale ``sqrt(eps)``.  With
    ``figure_field = fd`` the finite-difference adjoint solution on its own
    layer mesh is returned instead.
    """
    eps = float(eps or cfg.figure_eps)
    x = tuple(x or cfg.figure_x)
    spec = cfg.problem(eps)
    if cfg.figure_field == "fd":
        mesh = build_mesh(spec, x, cfg.mesh_n, "layer", Which.ADJOINT)
        gf = solve_green(spec, mesh, x, Which.ADJOINT)
        return mesh.axes, gf.values
    s = math.sqrt(eps)
    axes = (
        _graded_axis(x[0], eps / 4.0, 1.08, 1.0 / 100.0),
        _graded_axis(x[1], s / 24.0, 1.08, 1.0 / 60.0),
        _graded_axis(x[2], s / 24.0, 1.08, 1.0 / 60.0),
    )
    return axes, _sample_parametrix(x, spec, axes, Variant(cfg.variant))


def figure_export(cfg: StudyConfig, eps: float | None = None, x=None, levels=FIGURE_LEVELS,
                  write: bool = True, tag: str = "figure") -> FigureResult:
    """Export the field and the level-set boxes for one ``eps``.

    Writes ``{tag}.vtk`` (3-D rectilinear grid), ``{tag}_slice.vtk`` (the
    plane ``xi3 = x3`` sampled on the same axes 1 and 2) and
    ``{tag}_levels.json`` (one bounding box per level).
    """
    eps = float(eps or cfg.figure_eps)
    x = tuple(x or cfg.figure_x)
    axes, vals = figure_field(cfg, eps, x)
    boxes = level_boxes(axes, vals, x, levels)
    res = FigureResult(eps, x, list(levels), boxes)
    if write:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        p = out / f"{tag}.vtk"
        write_vtk_rectilinear(p, axes, vals, "G", f"Green's function parametrix eps={eps:g} x={x}")
        res.files.append(str(p))
        if cfg.figure_field == "parametrix":
            sl_axes = (axes[0], axes[1], np.array([x[2]]))
            sl = _sample_parametrix(x, cfg.problem(eps), sl_axes, Variant(cfg.variant))
            p = out / f"{tag}_slice.vtk"
            write_vtk_rectilinear(p, sl_axes, sl, "G", f"slice xi3={x[2]:g} eps={eps:g}")
            res.files.append(str(p))
        p = out / f"{tag}_levels.json"
        p.write_text(json.dumps({"eps": eps, "x": list(x), "field": cfg.figure_field, "levels": boxes},
                                indent=2, sort_keys=True) + "\n")
        res.files.append(str(p))
    return res


def transverse_scaling(cfg: StudyConfig, eps_list=None, level: float = 1.0, write: bool = True) -> dict:
    """Level-set transverse half-widths for several ``eps``.

    The level is scaled with the field amplitude, ``level * eps_ref / eps``
    (``eps_ref`` the figure ``eps``): the plume of ``eps G`` is
    ``eps``-independent up to the transverse variable ``t / sqrt(eps)``.
    Returns half-widths and successive ratios per quartering of ``eps``.
    """
    eps_list = tuple(eps_list or cfg.figure_eps_list)
    widths = []
    for eps in eps_list:
        L = level * cfg.figure_eps / eps
        r = figure_export(cfg, eps, levels=(L,), write=write, tag=f"figure_eps{eps:g}")
        b = r.boxes[0]
        widths.append(float("nan") if b["empty"] else b["transverse2"])
    ratios = [widths[i] / widths[i + 1] for i in range(len(widths) - 1)]
    expected = [math.sqrt(eps_list[i] / eps_list[i + 1]) for i in range(len(eps_list) - 1)]
    return {"eps": list(eps_list), "half_width": widths, "ratio": ratios, "expected_ratio": expected}


# ---------------------------------------------------------------------------
# verdicts
# ---------------------------------------------------------------------------


@dataclass
class VerdictRow:
    """One row of the verdict table."""

    display: str
    model: str
    constants: dict
    r2: float | None
    verdict: str
    note: str = ""


def _row_from_fit(display, f: ScalingFit, r2_min=0.98, band_max=2.0, note=""):
    return VerdictRow(display, f.model.value, dict(f.coefficients, band=f.band), f.r2, judge(f, r2_min, band_max),
                      note)


def verdict_table(tables: dict, lower_eps_max: float = 1e-2, r2_min: float = 0.98) -> list:
    """Pure verdict logic on norm tables.

    Parameters
    ----------
    tables : dict
        ``"main"``: sweep rows at the main point; ``"lower"``: list of
        sweep row lists, one per source point (constant coefficients);
        ``"ball"``: ``(eps, rows)`` of a ball study; ``"residual"``: rows
        with quantity ``phi_bar``; ``"fd"``: discrete-norm rows.  Missing
        keys skip the corresponding displays.
    lower_eps_max : float
        Only ``eps <= lower_eps_max`` enter the lower-bound rows.
    """
    out = []
    main = tables.get("main")
    if main:
        def row(display, q, model=None, beta=None, r2=r2_min):
            if not _select(main, q, any_rho=True):
                return
            out.append(_row_from_fit(display, fit_quantity(main, q, model, beta), r2))

        row("l1-norm-bounded", "G")
        row("crossplane-mass-bounded", "crossplane_sup")
        row("xi1-gradient-log-growth", "dxi1")
        row("xi2-gradient-inverse-sqrt", "dxi2")
        row("xi3-gradient-inverse-sqrt", "dxi3")
        row("x2-gradient-inverse-sqrt", "dx2")
        row("x3-gradient-inverse-sqrt", "dx3")
        row("ball-w11-linear-in-rho", "ball_w11")
        row("xi1-second-derivative-log-ball", "d2xi1")
        row("xi2-second-derivative-log-ball", "d2xi2", r2=0.95)
        row("xi3-second-derivative-log-ball", "d2xi3", r2=0.95)
        if _select(main, "dxi2"):
            good = fit_quantity(main, "dxi2")
            bad = fit_quantity(main, "dxi2", FitModel.POW, 1.0)
            verdict = "consistent" if bad.r2 <= good.r2 - 0.5 else "inconsistent"
            out.append(VerdictRow("control-xi2-gradient-wrong-exponent", "pow(beta=1)",
                                  {"r2_beta_half": good.r2, "r2_beta_one": bad.r2}, bad.r2, verdict,
                                  "a wrong exponent must fit markedly worse"))
    lower = tables.get("lower")
    if lower:
        c_log, c_pow, failed = [], [], 0
        for rows in lower:
            rows = [r for r in rows if r.eps <= lower_eps_max * (1 + 1e-12)]
            f1 = fit_quantity(rows, "dxi1")
            f2 = fit_quantity(rows, "dxi2")
            failed += f1.n_failed + f2.n_failed
            c_log.append(f1.leading)
            c_pow.append(f2.leading)
        for display, cs in (("lower-bound-xi1-gradient-log", c_log), ("lower-bound-xi2-gradient-inverse-sqrt", c_pow)):
            cs = np.asarray(cs, dtype=float)
            pos = bool(np.all(cs > 0))
            spread = float(cs.max() / cs.min()) if pos else float("inf")
            verdict = "inconclusive" if failed else ("consistent" if pos and spread <= 2.0 else "inconsistent")
            out.append(VerdictRow(display, "fitted c per source point", {"c": cs.tolist(), "spread": spread}, None,
                                  verdict, "c > 0 and stable within a factor 2 across source points"))
    ball = tables.get("ball")
    if ball:
        eps, rows = ball
        sel = [r for r in _select(rows, "ball_w11", any_rho=True) if r.ok and r.value > 0]
        try:
            bf = fit_breakpoint(eps, [r.rho for r in sel], [r.value for r in sel])
            ok = 0.5 <= bf.breakpoint / (2.0 * eps) <= 2.0 and bf.c_linear > 0 and bf.r2 >= r2_min
            out.append(VerdictRow("lower-bound-ball-two-regime", "piecewise rho/eps | (rho/eps)^(1/2)",
                                  {"breakpoint": bf.breakpoint, "breakpoint_over_2eps": bf.breakpoint / (2 * eps),
                                   "c_linear": bf.c_linear, "c_sqrt": bf.c_sqrt}, bf.r2,
                                  "consistent" if ok else "inconsistent", "breakpoint within a factor 2 of 2 eps"))
        except ConfigurationError as exc:
            out.append(VerdictRow("lower-bound-ball-two-regime", "piecewise", {}, None, "inconclusive", str(exc)))
        big = [r for r in _select(rows, "d2xi2", any_rho=True) if r.ok and r.rho is not None]
        if big:
            r = max(big, key=lambda r: r.rho)
            c = r.value * eps / abs(math.log(eps))
            out.append(VerdictRow("lower-bound-xi2-second-derivative-large-ball", "c eps^-1 |ln eps|",
                                  {"rho": r.rho, "c": c}, None, "consistent" if c > 0 else "inconsistent"))
    res = tables.get("residual")
    if res:
        sel = [r for r in res if r.quantity == "phi_bar" and r.ok and r.value > 0]
        if len(sel) >= 3:
            f = fit(FitModel.EXP_DECAY, [r.eps for r in sel], [r.value for r in sel], quantity="phi_bar")
            verdict = "consistent" if (f.leading > 0 and f.r2 >= 0.99) else "inconsistent"
            out.append(VerdictRow("residual-exponential-decay", f.model.value, dict(f.coefficients), f.r2, verdict))
        else:
            out.append(VerdictRow("residual-exponential-decay", "exp-decay", {}, None, "inconclusive"))
    fd = tables.get("fd")
    if fd:
        g = [r for r in _select(fd, "G") if r.ok]
        d2 = [r for r in _select(fd, "dxi2") if r.ok]
        if len(g) >= 2:
            v = np.array([r.value for r in g])
            spread = float(v.max() / v.min())
            out.append(VerdictRow("fd-l1-norm-bounded", "const", {"values": v.tolist(), "spread": spread}, None,
                                  "consistent" if spread <= 2.0 else "inconsistent", "numerical reference"))
        if len(d2) >= 2:
            s = np.array([r.value * math.sqrt(r.eps) for r in d2])
            spread = float(s.max() / s.min())
            out.append(VerdictRow("fd-xi2-gradient-inverse-sqrt", "pow(beta=1/2)",
                                  {"scaled": s.tolist(), "spread": spread}, None,
                                  "consistent" if spread <= 2.0 else "inconsistent", "numerical reference"))
    return out


def _load_tables(out_dir: Path, n_points: int):
    tables = {}
    main = out_dir / "sweep_x0.csv"
    if main.exists():
        tables["main"] = read_csv(main)
        lower = [read_csv(out_dir / f"sweep_x{i}.csv") for i in range(n_points) if (out_dir / f"sweep_x{i}.csv").exists()]
        if len(lower) >= 2:
            tables["lower"] = lower
    if (out_dir / "ball.csv").exists():
        rows = read_csv(out_dir / "ball.csv")
        if rows:
            tables["ball"] = (rows[0].eps, rows)
    if (out_dir / "residual.csv").exists():
        tables["residual"] = read_csv(out_dir / "residual.csv")
    if (out_dir / "fd.csv").exists():
        tables["fd"] = read_csv(out_dir / "fd.csv")
    return tables


@dataclass
class VerifyResult:
    rows: list
    exit_code: int
    files: list = field(default_factory=list)


def verify(cfg: StudyConfig, reuse: bool = True, run_fd: bool = True) -> VerifyResult:
    """Produce the verdict table, running the studies whose outputs are missing.

    With ``reuse`` the tables already present in ``out_dir`` are used.
    Exit code 0 iff no row is inconsistent.
    """
    out = Path(cfg.out_dir)
    tables = _load_tables(out, len(cfg.x)) if reuse and out.exists() else {}
    if "main" not in tables:
        sw = sweep(cfg)
        tables["main"] = sw.tables[0]
        if len(cfg.x) >= 2:
            tables["lower"] = [sw.tables[i] for i in range(len(cfg.x))]
    if "ball" not in tables:
        b = ball_study(cfg)
        tables["ball"] = (b.eps, b.rows)
    if "residual" not in tables:
        tables["residual"] = residual_study(cfg)
    if run_fd and "fd" not in tables and cfg.fd_eps_list:
        tables["fd"] = fd_study(cfg)
    if not cfg.lower_bound_applicable:
        tables.pop("lower", None)
        tables.pop("ball", None)
    rows = verdict_table(tables, cfg.lower_bound_eps_max)
    code = 1 if any(r.verdict == "inconsistent" for r in rows) else 0
    out.mkdir(parents=True, exist_ok=True)
    p = out / "verdicts.json"
    p.write_text(json.dumps([asdict(r) for r in rows], indent=2, sort_keys=True) + "\n")
    return VerifyResult(rows, code, [str(p)])


__all__ += ["SweepResult", "BallStudy", "FigureResult", "VerifyResult", "fit_quantity", "figure_field",
            "transverse_scaling", "SWEEP_MODELS"]
