"""Finite-difference reference solutions for the Green's function on the cube.

Two problems are discretised on tensor-product meshes of ``[0, 1]^3``:

* the *adjoint* problem in ``xi`` for a fixed source ``x``,
  ``-eps Laplace_xi G + a(xi) d_xi1 G + b(xi) G = delta(xi - x)``;
* the *primal* problem in ``x`` for a fixed ``xi``,
  ``-eps Laplace_x G - d_x1 (a(x) G) + b(x) G = delta(x - xi)``.

Diffusion uses the standard three-point second difference on nonuniform
meshes, convection first-order upwinding (backward differences for the
adjoint, forward differences of the flux ``a G`` for the primal problem,
since ``a > 0``).  Both choices give M-matrices, so the discrete Green's
function is nonnegative.  Layer-adapted meshes are piecewise uniform with
transition widths ``min(1/4, 2 (eps/alpha) ln N)`` in the flow direction and
``min(1/4, 2 sqrt(eps/alpha) ln N)`` transversally.

Results are a numerical reference: they converge to the true Green's
function only under mesh refinement, and only away from the source node.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import LinearOperator, bicgstab

from .errors import ConfigurationError, MeshBudgetError, SolverError
from .problem import ProblemSpec
from .quadrature import NormReport, QuadResult

__all__ = [
    "Which",
    "Strategy",
    "AxisGrading",
    "TensorMesh",
    "DiscreteOperator",
    "GridFunction",
    "build_mesh",
    "assemble",
    "solve_green",
    "solve_system",
    "discrete_norms",
    "write_vtk_rectilinear",
    "read_grid_function",
    "DEFAULT_MESH_BUDGET",
]

#: Default limit on the number of mesh cells ``N1 N2 N3``.
DEFAULT_MESH_BUDGET = 128**3

#: Shishkin transition parameter sigma.
SHISHKIN_SIGMA = 2.0

#: Magic bytes opening a binary grid-function dump.
DUMP_MAGIC = b"CDGRID01"

#: Stagnation test: relative residual must drop below this factor over a window.
_STAGNATION_FACTOR = 0.99
_STAGNATION_WINDOW = 50

#: Shares of the intervals that an unclamped layer receives: the layer
#: upstream of the source, the outflow layer, each transverse side.
UPSTREAM_SHARE = 0.5
OUTFLOW_SHARE = 0.125
TRANSVERSE_SHARE = 0.25


class Which(enum.Enum):
    """Which Green's function problem is discretised."""

    ADJOINT = "adjoint"  # unknown G(x; .) as a function of xi
    PRIMAL = "primal"  # unknown G(.; xi) as a function of x


class Strategy(enum.Enum):
    UNIFORM = "uniform"
    LAYER = "layer"


@dataclass(frozen=True)
class AxisGrading:
    """How one axis was built.

    ``breaks`` are the segment end points of a piecewise-uniform mesh and
    ``counts`` the number of intervals in each segment.
    """

    kind: str
    breaks: tuple
    counts: tuple
    transition: float | None = None


@dataclass(frozen=True)
class TensorMesh:
    """Tensor-product mesh of the unit cube.

    Attributes
    ----------
    axes : tuple of three ndarrays
        Strictly increasing node vectors starting at 0 and ending at 1.
    grading : tuple of AxisGrading
    """

    axes: tuple
    grading: tuple = ()

    def __post_init__(self):
        if len(self.axes) != 3:
            raise ConfigurationError("a tensor mesh needs three axes")
        for k, ax in enumerate(self.axes):
            ax = np.asarray(ax)
            if ax.ndim != 1 or len(ax) < 2:
                raise ConfigurationError(f"axis {k} must be a 1-D vector of at least two nodes")
            if ax[0] != 0.0 or ax[-1] != 1.0:
                raise ConfigurationError(f"axis {k} must start at 0 and end at 1")
            if not np.all(np.diff(ax) > 0):
                raise ConfigurationError(f"axis {k} is not strictly increasing")

    @property
    def n_intervals(self) -> tuple:
        return tuple(len(a) - 1 for a in self.axes)

    @property
    def shape(self) -> tuple:
        """Number of nodes per axis."""
        return tuple(len(a) for a in self.axes)

    @property
    def interior_shape(self) -> tuple:
        return tuple(len(a) - 2 for a in self.axes)

    @property
    def n_cells(self) -> int:
        n1, n2, n3 = self.n_intervals
        return n1 * n2 * n3

    def spacing(self, k: int) -> np.ndarray:
        return np.diff(self.axes[k])

    def min_spacing(self, k: int | None = None) -> float:
        if k is None:
            return min(self.min_spacing(j) for j in range(3))
        return float(np.min(self.spacing(k)))

    def dual_lengths(self, k: int) -> np.ndarray:
        """Lengths of the dual (control) intervals around every node of axis ``k``."""
        h = self.spacing(k)
        d = np.zeros(len(self.axes[k]))
        d[:-1] += 0.5 * h
        d[1:] += 0.5 * h
        return d

    def node_volumes(self) -> np.ndarray:
        """Dual-cell volumes at all nodes, shape :attr:`shape`; they sum to 1."""
        d1, d2, d3 = (self.dual_lengths(k) for k in range(3))
        return d1[:, None, None] * d2[None, :, None] * d3[None, None, :]

    def nearest_node(self, point) -> tuple:
        """Index of the node nearest to ``point`` (per axis)."""
        p = np.asarray(point, dtype=float)
        return tuple(int(np.argmin(np.abs(ax - p[k]))) for k, ax in enumerate(self.axes))

    def node(self, idx) -> np.ndarray:
        return np.array([self.axes[k][idx[k]] for k in range(3)])

    def points(self) -> np.ndarray:
        """All node coordinates, shape ``shape + (3,)``."""
        g = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(g, axis=-1)


# ---------------------------------------------------------------------------
# mesh construction
# ---------------------------------------------------------------------------


def _piecewise(breaks, counts):
    parts = []
    for (lo, hi), n in zip(zip(breaks[:-1], breaks[1:]), counts):
        parts.append(np.linspace(lo, hi, n + 1)[:-1])
    parts.append(np.array([1.0]))
    nodes = np.concatenate(parts)
    nodes[0] = 0.0
    return nodes


def _split_counts(lengths, spacings, N):
    """Distribute ``N`` intervals over segments.

    Segments with a target spacing ``h`` receive ``ceil(length / h)``
    intervals; segments with spacing None share the remainder in
    proportion to their length.  Every segment receives at least one.
    """
    lengths = np.asarray(lengths, dtype=float)
    fixed = np.array([h is not None for h in spacings])
    counts = np.zeros(len(lengths), dtype=int)
    for i, h in enumerate(spacings):
        if h is not None:
            counts[i] = max(1, math.ceil(lengths[i] / h - 1e-9))
    free = np.flatnonzero(~fixed)
    if len(free) == 0:
        counts[np.argmax(counts)] += N - counts.sum()
        return counts
    n = max(N - counts.sum(), len(free))
    raw = n * lengths[free] / lengths[free].sum()
    c = np.maximum(1, np.floor(raw).astype(int))
    while c.sum() < n:  # remainder by largest fractional part
        c[np.argmax(raw - c)] += 1
    while c.sum() > n:
        c[np.argmax(np.where(c > 1, c - raw, -np.inf))] -= 1
    counts[free] = c
    while counts.sum() > N:  # fixed segments overbook a very small N
        counts[np.argmax(counts)] -= 1
    return counts


def _layer_axis(N, segments):
    """Build a piecewise-uniform axis from ``(lo, hi, spacing)`` segments."""
    segs = [s for s in segments if s[1] - s[0] > 1e-14]
    breaks = [float(segs[0][0])] + [float(s[1]) for s in segs]
    counts = _split_counts([hi - lo for lo, hi, _ in segs], [h for _, _, h in segs], N)
    return _piecewise(breaks, counts), tuple(breaks), tuple(int(c) for c in counts)


def _upstream_axis(s, N, tau_raw):
    """Flow in +direction: layers upstream of the source and at the outflow end.

    Layer spacings are those of the unclamped Shishkin mesh (a share of
    the intervals over the width ``tau_raw``), capped by the uniform
    spacing ``1/N``.  Clamping the width at 1/4 therefore removes intervals
    from the layer instead of coarsening the rest, and for large ``eps``
    the axis becomes uniform.
    """
    tau = min(0.25, tau_raw)
    tau_u = min(tau, s)
    tau_b = min(tau, 0.5 * (1.0 - s))
    h_u = min(tau_raw / (UPSTREAM_SHARE * N), 1.0 / N)
    h_b = min(tau_raw / (OUTFLOW_SHARE * N), 1.0 / N)
    segs = [(0.0, s - tau_u, None), (s - tau_u, s, h_u), (s, 1.0 - tau_b, None), (1.0 - tau_b, 1.0, h_b)]
    nodes, breaks, counts = _layer_axis(N, segs)
    return nodes, AxisGrading("shishkin-upstream", breaks, counts, tau)


def _transverse_axis(s, N, tau_raw):
    t = min(0.25, tau_raw, s, 1.0 - s)
    h = min(tau_raw / (TRANSVERSE_SHARE * N), 1.0 / N)
    segs = [(0.0, s - t, None), (s - t, s, h), (s, s + t, h), (s + t, 1.0, None)]
    nodes, breaks, counts = _layer_axis(N, segs)
    return nodes, AxisGrading("shishkin-transverse", breaks, counts, min(0.25, tau_raw))


def build_mesh(
    spec: ProblemSpec,
    source,
    N,
    strategy=Strategy.LAYER,
    which=Which.ADJOINT,
    budget: int = DEFAULT_MESH_BUDGET,
) -> TensorMesh:
    """Tensor mesh adapted to the layers of ``G`` around ``source``.

    Parameters
    ----------
    spec : ProblemSpec
    source : array_like
        For the adjoint problem the fixed ``x``; for the primal one ``xi``.
    N : int or sequence of three ints
        Intervals per axis, at least 8.
    strategy : Strategy
        ``UNIFORM`` or ``LAYER``.  Layer meshes put the source coordinates
        on nodes; uniform meshes do not, and the solver snaps to the
        nearest node.
    which : Which
        Orientation of the flow-direction layer: the adjoint solution has
        its ``O(eps)`` layer upstream (``xi1 < x1``) and at ``xi1 = 1``, the
        primal one at ``x1 > xi1`` and at ``x1 = 0``.
    budget : int
        Maximum number of cells.

    Raises
    ------
    ConfigurationError
        If some ``N < 8``.
    MeshBudgetError
        If ``N1 N2 N3 > budget``.
    """
    Ns = (int(N),) * 3 if np.isscalar(N) else tuple(int(n) for n in N)
    if len(Ns) != 3 or min(Ns) < 8:
        raise ConfigurationError(f"need at least 8 intervals per axis, got {Ns}")
    if Ns[0] * Ns[1] * Ns[2] > budget:
        raise MeshBudgetError(f"mesh {Ns} has {Ns[0] * Ns[1] * Ns[2]} cells, budget is {budget}")
    strategy = Strategy(strategy)
    which = Which(which)
    if strategy is Strategy.UNIFORM:
        axes = tuple(np.linspace(0.0, 1.0, n + 1) for n in Ns)
        grading = tuple(AxisGrading("uniform", (0.0, 1.0), (n,)) for n in Ns)
        return TensorMesh(axes, grading)
    s = np.asarray(source, dtype=float)
    if not np.all((s > 0) & (s < 1)):
        raise ConfigurationError(f"source {tuple(s)} is not interior")
    eps, alpha = spec.eps, spec.alpha
    axes, grading = [], []
    tau1 = SHISHKIN_SIGMA * (eps / alpha) * math.log(Ns[0])
    if which is Which.ADJOINT:
        nodes, g = _upstream_axis(s[0], Ns[0], tau1)
    else:
        rev, g = _upstream_axis(1.0 - s[0], Ns[0], tau1)
        nodes = (1.0 - rev)[::-1].copy()
        nodes[0], nodes[-1] = 0.0, 1.0
        g = AxisGrading("shishkin-downstream", tuple(1.0 - b for b in g.breaks[::-1]), g.counts[::-1], g.transition)
    axes.append(nodes)
    grading.append(g)
    for k in (1, 2):
        tau = SHISHKIN_SIGMA * math.sqrt(eps / alpha) * math.log(Ns[k])
        nodes, g = _transverse_axis(s[k], Ns[k], tau)
        axes.append(nodes)
        grading.append(g)
    return TensorMesh(tuple(axes), tuple(grading))


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

_NEIGHBOURS = {  # name: (axis, offset)
    "w": (0, -1),
    "e": (0, +1),
    "s": (1, -1),
    "n": (1, +1),
    "d": (2, -1),
    "u": (2, +1),
}


@dataclass
class DiscreteOperator:
    """Seven-point operator on the interior nodes of a tensor mesh.

    Attributes
    ----------
    mesh : TensorMesh
    which : Which
    diag : ndarray, shape ``mesh.interior_shape``
    off : dict of ndarrays
        Coefficients of the neighbours ``w, e`` (axis 1), ``s, n`` (axis 2),
        ``d, u`` (axis 3); entries coupling to boundary nodes are zero.
    m_matrix : bool
        True when the diagonal is positive and all off-diagonals are <= 0.
    min_row_sum : float
    """

    mesh: TensorMesh
    which: Which
    diag: np.ndarray
    off: dict
    m_matrix: bool = True
    min_row_sum: float = 0.0
    _csr: object = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return int(self.diag.size)

    def apply(self, u) -> np.ndarray:
        """Matrix-free product with a vector of interior values (flat or 3-D)."""
        shape = self.diag.shape
        U = np.asarray(u, dtype=float).reshape(shape)
        P = np.zeros(tuple(s + 2 for s in shape))
        P[1:-1, 1:-1, 1:-1] = U
        out = self.diag * U
        for name, (ax, off) in _NEIGHBOURS.items():
            sl = [slice(1, -1)] * 3
            sl[ax] = slice(1 + off, shape[ax] + 1 + off)
            out += self.off[name] * P[tuple(sl)]
        return out.reshape(np.shape(u)) if np.ndim(u) == 1 else out

    def row_sums(self) -> np.ndarray:
        return self.diag + sum(self.off.values())

    def to_sparse(self) -> sp.csr_matrix:
        """Assembled CSR matrix in C (row-major) ordering of the interior nodes."""
        if self._csr is not None:
            return self._csr
        shape = self.diag.shape
        idx = np.arange(self.n).reshape(shape)
        rows = [idx.ravel()]
        cols = [idx.ravel()]
        vals = [self.diag.ravel()]
        for name, (ax, off) in _NEIGHBOURS.items():
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if off < 0:
                src[ax], dst[ax] = slice(1, None), slice(None, -1)
            else:
                src[ax], dst[ax] = slice(None, -1), slice(1, None)
            rows.append(idx[tuple(src)].ravel())
            cols.append(idx[tuple(dst)].ravel())
            vals.append(self.off[name][tuple(src)].ravel())
        A = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.n, self.n)
        )
        A.eliminate_zeros()
        self._csr = A
        return A


def _diffusion_1d(nodes, eps):
    """Coefficients (lower, diag, upper) of ``-eps u''`` at interior nodes."""
    h = np.diff(nodes)
    hm, hp = h[:-1], h[1:]
    hh = 0.5 * (hm + hp)
    lo = -eps / (hh * hm)
    up = -eps / (hh * hp)
    return lo, -(lo + up), up


def _bcast(v, ax):
    shape = [1, 1, 1]
    shape[ax] = -1
    return np.asarray(v).reshape(shape)


def assemble(spec: ProblemSpec, mesh: TensorMesh, which=Which.ADJOINT) -> DiscreteOperator:
    """Assemble the upwind seven-point operator.

    Parameters
    ----------
    spec : ProblemSpec
    mesh : TensorMesh
    which : Which
        ``ADJOINT``: ``-eps Laplace + a d_1 + b`` with backward differences
        ``a_i (u_i - u_{i-1}) / h_{i-1}``.  ``PRIMAL``: ``-eps Laplace - d_1(a .) + b``
        with forward flux differences ``-(a_{i+1} u_{i+1} - a_i u_i) / h_i``.

    Raises
    ------
    AssertionError
        If the M-matrix sign pattern is violated (indicates ``a <= 0``
        somewhere or a bug).
    """
    which = Which(which)
    eps = spec.eps
    pts = mesh.points()
    inner = pts[1:-1, 1:-1, 1:-1]
    shape = inner.shape[:-1]
    a_in = spec.a.value(inner)
    b_in = spec.b.value(inner)
    diag = np.zeros(shape) + b_in
    off = {name: np.zeros(shape) for name in _NEIGHBOURS}
    for ax, (lo_name, hi_name) in enumerate((("w", "e"), ("s", "n"), ("d", "u"))):
        lo, dg, up = _diffusion_1d(mesh.axes[ax], eps)
        diag += _bcast(dg, ax)
        off[lo_name] += _bcast(lo, ax)
        off[hi_name] += _bcast(up, ax)
    h1 = np.diff(mesh.axes[0])
    if which is Which.ADJOINT:
        c = a_in / _bcast(h1[:-1], 0)
        diag += c
        off["w"] -= c
    else:
        a_east = spec.a.value(pts[2:, 1:-1, 1:-1])
        inv_h = 1.0 / _bcast(h1[1:], 0)
        diag += a_in * inv_h
        off["e"] -= a_east * inv_h
    # Dirichlet: drop couplings to boundary nodes
    off["w"][0] = 0.0
    off["e"][-1] = 0.0
    off["s"][:, 0] = 0.0
    off["n"][:, -1] = 0.0
    off["d"][:, :, 0] = 0.0
    off["u"][:, :, -1] = 0.0
    m_ok = bool(np.all(diag > 0) and all(np.all(v <= 0) for v in off.values()))
    assert m_ok, "assembled operator violates the M-matrix sign pattern"
    op = DiscreteOperator(mesh, which, diag, off, m_ok)
    op.min_row_sum = float(np.min(op.row_sums()))
    return op


# ---------------------------------------------------------------------------
# grid functions and I/O
# ---------------------------------------------------------------------------


@dataclass
class GridFunction:
    """Nodal values of a discrete Green's function.

    Attributes
    ----------
    values : ndarray, shape ``mesh.shape``
        Including the (zero) boundary nodes.
    mesh : TensorMesh
    eps : float
    source : tuple
        Requested source point.
    source_node : tuple
        Index of the node carrying the discrete delta.
    snap_offset : float
        Distance between ``source`` and that node.
    which : Which
    problem : str
    residual : float
        Final relative residual of the linear solve.
    iterations : int
    solver : str
    history : list of float
    """

    values: np.ndarray
    mesh: TensorMesh
    eps: float
    source: tuple
    source_node: tuple = (0, 0, 0)
    snap_offset: float = 0.0
    which: Which = Which.ADJOINT
    problem: str = ""
    residual: float = 0.0
    iterations: int = 0
    solver: str = ""
    history: list = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.mesh.shape:
            raise ConfigurationError(f"values have shape {v.shape}, mesh has {self.mesh.shape}")
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("grid function has non-finite values")
        b = np.concatenate([v[0].ravel(), v[-1].ravel(), v[:, 0].ravel(), v[:, -1].ravel(),
                            v[:, :, 0].ravel(), v[:, :, -1].ravel()])
        if np.any(b != 0):
            raise ConfigurationError("grid function must vanish on boundary nodes")
        self.values = v

    def sample(self, points) -> np.ndarray:
        """Trilinear interpolation at ``points`` of shape ``(..., 3)``."""
        f = RegularGridInterpolator(self.mesh.axes, self.values, method="linear")
        return f(np.asarray(points, dtype=float))

    def min_value(self) -> float:
        return float(self.values.min())

    def export_vtk(self, path, name: str = "G"):
        """Write a legacy ASCII rectilinear-grid file for external viewers."""
        write_vtk_rectilinear(path, self.mesh.axes, self.values, name=name,
                              title=f"{self.which.value} Green's function eps={self.eps:g} source={self.source}")

    def save(self, path):
        """Binary dump: magic, sizes, eps, source, node vectors, row-major values."""
        n1, n2, n3 = self.mesh.shape
        with open(path, "wb") as fh:
            fh.write(DUMP_MAGIC)
            fh.write(struct.pack("<3q", n1, n2, n3))
            fh.write(struct.pack("<4d", self.eps, *self.source))
            for ax in self.mesh.axes:
                fh.write(np.asarray(ax, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())


def read_grid_function(path) -> GridFunction:
    """Read a dump written by :meth:`GridFunction.save`."""
    data = Path(path).read_bytes()
    if data[:8] != DUMP_MAGIC:
        raise ConfigurationError(f"{path}: not a grid-function dump")
    n = struct.unpack_from("<3q", data, 8)
    eps, s1, s2, s3 = struct.unpack_from("<4d", data, 32)
    off = 64
    axes = []
    for k in range(3):
        axes.append(np.frombuffer(data, dtype="<f8", count=n[k], offset=off).copy())
        off += 8 * n[k]
    vals = np.frombuffer(data, dtype="<f8", count=n[0] * n[1] * n[2], offset=off).reshape(n).copy()
    mesh = TensorMesh(tuple(axes))
    src = (s1, s2, s3)
    return GridFunction(vals, mesh, eps, src, mesh.nearest_node(src))


def write_vtk_rectilinear(path, axes, values, name: str = "G", title: str = "field"):
    """Legacy VTK ``RECTILINEAR_GRID`` with one point scalar (x fastest)."""
    values = np.asarray(values, dtype=float)
    n1, n2, n3 = (len(a) for a in axes)
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII",
             "DATASET RECTILINEAR_GRID", f"DIMENSIONS {n1} {n2} {n3}"]
    for label, ax in zip("XYZ", axes):
        lines.append(f"{label}_COORDINATES {len(ax)} double")
        lines.append(" ".join(f"{v:.17g}" for v in ax))
    lines.append(f"POINT_DATA {values.size}")
    lines.append(f"SCALARS {name} double 1")
    lines.append("LOOKUP_TABLE default")
    flat = values.transpose(2, 1, 0).ravel()
    lines.extend(" ".join(f"{v:.10e}" for v in flat[i:i + 6]) for i in range(0, flat.size, 6))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# linear solve
# ---------------------------------------------------------------------------


class _Stagnation(Exception):
    def __init__(self, xk):
        self.xk = xk


def _red_black_gs(op: DiscreteOperator, f, u, rtol, max_sweeps, history, omega=1.0):
    """Damped red-black Gauss-Seidel sweeps until the relative residual is below ``rtol``."""
    shape = op.diag.shape
    U = u.reshape(shape).copy()
    F = f.reshape(shape)
    i, j, k = np.indices(shape)
    colours = [((i + j + k) % 2) == c for c in (0, 1)]
    nf = np.linalg.norm(f)
    rel = np.linalg.norm(F - op.apply(U)) / nf
    for sweep in range(1, max_sweeps + 1):
        for mask in colours:
            R = F - op.apply(U)
            U[mask] += omega * R[mask] / op.diag[mask]
        if sweep % 10 == 0 or sweep == max_sweeps:
            rel = np.linalg.norm(F - op.apply(U)) / nf
            history.append(rel)
            if rel <= rtol:
                return U.ravel(), rel, sweep
    raise SolverError(f"Gauss-Seidel fallback stalled at relative residual {rel:.3e}", history)


def solve_system(op: DiscreteOperator, f, rtol: float = 1e-10, maxiter: int = 20000):
    """Solve ``op u = f`` for interior values.

    Parameters
    ----------
    op : DiscreteOperator
    f : ndarray
        Right-hand side on the interior nodes (flat, C order).

    Returns
    -------
    u : ndarray
        Flat solution vector.
    rel : float
        Final relative residual ``|f - A u| / |f|``.
    iterations : int
    solver : str
        ``"bicgstab"`` or ``"bicgstab+gauss-seidel"``.
    history : list of float
        Relative residuals at the checkpoints.

    Raises
    ------
    SolverError
    """
    f = np.asarray(f, dtype=float).ravel()
    A = op.to_sparse()
    inv_d = 1.0 / op.diag.ravel()
    M = LinearOperator(A.shape, matvec=lambda v: inv_d * v, dtype=float)
    nf = float(np.linalg.norm(f))
    history = []
    state = {"it": 0, "ref": 1.0}

    def callback(xk):
        state["it"] += 1
        if state["it"] % _STAGNATION_WINDOW == 0:
            rel = float(np.linalg.norm(f - A @ xk)) / nf
            history.append(rel)
            if rel > _STAGNATION_FACTOR * state["ref"]:
                raise _Stagnation(xk.copy())
            state["ref"] = rel

    u0 = inv_d * f
    try:
        u, info = bicgstab(A, f, x0=u0, rtol=rtol, atol=0.0, maxiter=maxiter, M=M, callback=callback)
    except _Stagnation as st:
        remaining = max(maxiter - state["it"], 1)
        u, rel, sweeps = _red_black_gs(op, f, st.xk, rtol, remaining, history)
        return u, rel, state["it"] + sweeps, "bicgstab+gauss-seidel", history
    rel = float(np.linalg.norm(f - A @ u)) / nf
    history.append(rel)
    if info != 0 or rel > rtol * 1.0001:
        raise SolverError(f"BiCGSTAB stopped (info={info}) at relative residual {rel:.3e}", history)
    return u, rel, state["it"], "bicgstab", history


def solve_green(
    spec: ProblemSpec,
    mesh: TensorMesh,
    source,
    which=Which.ADJOINT,
    rtol: float = 1e-10,
    maxiter: int = 20000,
    operator: DiscreteOperator | None = None,
) -> GridFunction:
    """Discrete Green's function with a nodal delta at ``source``.

    The right-hand side is ``1 / V`` at the node nearest to ``source`` (``V``
    its dual-cell volume) and zero elsewhere.  The system is solved with
    Jacobi-preconditioned BiCGSTAB; when the residual falls by less than 1%
    over 50 iterations the solve continues with red-black Gauss-Seidel.

    Raises
    ------
    ConfigurationError
        If ``source`` is not interior or snaps to a boundary node.
    SolverError
        If the relative residual ``rtol`` is not reached within ``maxiter``.
    """
    which = Which(which)
    s = np.asarray(source, dtype=float)
    if s.shape != (3,) or not np.all((s > 0) & (s < 1)):
        raise ConfigurationError(f"source {tuple(np.ravel(s))} must be strictly interior")
    idx = mesh.nearest_node(s)
    if any(i == 0 or i == n - 1 for i, n in zip(idx, mesh.shape)):
        raise ConfigurationError("source snaps to a boundary node; refine the mesh")
    op = operator if operator is not None else assemble(spec, mesh, which)
    vol = mesh.node_volumes()
    f = np.zeros(mesh.interior_shape)
    inner_idx = tuple(i - 1 for i in idx)
    f[inner_idx] = 1.0 / vol[idx]
    u, rel, its, solver, history = solve_system(op, f.ravel(), rtol, maxiter)
    vals = np.zeros(mesh.shape)
    vals[1:-1, 1:-1, 1:-1] = u.reshape(mesh.interior_shape)
    return GridFunction(
        vals, mesh, spec.eps, tuple(float(v) for v in s), idx,
        float(np.linalg.norm(mesh.node(idx) - s)), which, spec.name, rel, its, solver, history,
    )


# ---------------------------------------------------------------------------
# discrete norms
# ---------------------------------------------------------------------------


def _result(value, cells, eps, rho=None):
    return QuadResult(float(value), float("nan"), int(cells), 0, eps, rho, True)


def _edge_midpoints(mesh, ax):
    mids = [np.asarray(a) for a in mesh.axes]
    mids[ax] = 0.5 * (mids[ax][1:] + mids[ax][:-1])
    g = np.meshgrid(*mids, indexing="ij")
    return np.stack(g, axis=-1)


def _gradient_terms(gf: GridFunction):
    """Per-edge ``|dG/dh| * (h * dual area)`` arrays and their midpoints, per axis."""
    mesh = gf.mesh
    v = gf.values
    duals = [mesh.dual_lengths(k) for k in range(3)]
    out = []
    for ax in range(3):
        diff = np.abs(np.diff(v, axis=ax))
        # |dG/dxi| * volume = |diff| / h * (h * prod of the other dual lengths)
        area = 1.0
        for k in range(3):
            if k != ax:
                area = area * _bcast(duals[k], k)
        out.append((diff * area, _edge_midpoints(mesh, ax)))
    return out


def _second_terms(gf: GridFunction):
    """Per-node ``|d2G/dk2| * V`` at interior nodes, per axis."""
    mesh = gf.mesh
    v = gf.values
    vol = mesh.node_volumes()[1:-1, 1:-1, 1:-1]
    out = []
    for ax in range(3):
        h = np.diff(mesh.axes[ax])
        hm, hp = _bcast(h[:-1], ax), _bcast(h[1:], ax)
        sl = lambda a, b: tuple(slice(a, b) if k == ax else slice(1, -1) for k in range(3))  # noqa: E731
        lo, mid, hi = v[sl(0, -2)], v[sl(1, -1)], v[sl(2, None)]
        d2 = 2.0 * ((hi - mid) / hp - (mid - lo) / hm) / (hm + hp)
        out.append(np.abs(d2) * vol)
    return out


def discrete_norms(gf: GridFunction, rho_list=(), ball_centers=None) -> NormReport:
    """Discrete counterparts of the quadrature norm suite.

    ``G`` uses dual-cell volumes; first derivatives use one-sided
    differences along mesh edges weighted by ``h`` times the dual area;
    second derivatives use three-point differences at interior nodes.  Ball
    restriction and exclusion classify nodes (or edge midpoints) by
    distance to the ball centre.  The variables are ``xi`` for an adjoint
    solution and ``x`` for a primal one; the report keys follow the
    quadrature module (``dxi1`` ... ``d2xi3``, ``ball_w11``).
    """
    mesh = gf.mesh
    eps = gf.eps
    rep = NormReport(tuple(gf.source), eps, f"fd-{gf.which.value}")
    x = np.asarray(gf.source)
    vol = mesh.node_volumes()
    pts = mesh.points()
    cells = mesh.n_cells
    absG = np.abs(gf.values) * vol
    rep.entries[("G", None)] = _result(math.fsum(absG.ravel()), cells, eps)
    grads = _gradient_terms(gf)
    for ax, (terms, _) in enumerate(grads):
        rep.entries[(f"dxi{ax + 1}", None)] = _result(math.fsum(terms.ravel()), cells, eps)
    seconds = _second_terms(gf)
    inner_pts = pts[1:-1, 1:-1, 1:-1]
    centers = [x] if ball_centers is None else [np.asarray(c, dtype=float) for c in ball_centers]
    for rho in rho_list:
        rho = float(rho)
        outside = np.linalg.norm(inner_pts - x, axis=-1) >= rho
        for ax in range(3):
            rep.entries[(f"d2xi{ax + 1}", rho)] = _result(math.fsum(seconds[ax][outside]), cells, eps, rho)
        best = 0.0
        for c in centers:
            total = math.fsum(absG[np.linalg.norm(pts - c, axis=-1) < rho])
            for terms, mids in grads:
                total += math.fsum(terms[np.linalg.norm(mids - c, axis=-1) < rho])
            best = max(best, total)
        rep.entries[("ball_w11", rho)] = _result(best, cells, eps, rho)
    for key in rep.entries:
        rep.wall_ms[key] = 0.0
    return rep
