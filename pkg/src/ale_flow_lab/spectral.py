# src/ale_flow_lab/spectral.py
"""
Spectral analysis of the discretized Lichnerowicz Laplacian.

Every operator is assembled as a symmetric stiffness matrix K = B(-L) with
diagonal mass B over the invariant components at the non-Dirichlet nodes,
node-major. Components tied by smoothness at a collapsed inner node share a
single unknown, so K x = lambda B x is the discrete weak form of -L h = lambda h.
"""
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from ale_flow_lab.geometry import (
    BackgroundMetric,
    RadialGrid,
    TensorField,
    avr_estimate,
    cell_integral,
    check_grid,
)
from ale_flow_lab.operators import (
    TOL_STATIONARY,
    covariant_derivative_norms,
    lie_correction_matrix,
    operator_coefficients,
    stationarity_residual,
    trace_divergence,
)
from ale_flow_lab.utils import AssemblyError, BackgroundError, ConvergenceError, GridError, StationarityError

# --- Configuration ---
SYMMETRY_TOL = 1e-10
DENSE_LIMIT = 800  # Reduced systems up to this size use a dense eigensolver
MAX_ITERATIONS = 20000
EIGEN_TOL = 1e-13
SEED = 1729
TOL_KERN = 1e-3
GAP_RATIO = 10.0
DECAY_WINDOW = (0.2, 0.6)  # Fraction of r_max over which kernel decay is fitted
HARDY_CUTOFFS = 8
AVR_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """
    Discrete -L (or -L_{g,g0}) on invariant fields with Dirichlet data at r_max.

    Unknowns are class values at nodes 0..N-2 (one shared unknown per tie group
    at a collapsed inner node). For a metric g != g0 the unknowns are components
    in the g-orthonormal frame and `lie` holds the gauge term.
    """

    g0: BackgroundMetric
    grid: RadialGrid
    stiffness: sparse.csr_matrix
    mass: np.ndarray
    prolongation: sparse.csr_matrix
    frame_scale: np.ndarray
    node_mass: np.ndarray  # Cell volumes at nodes 0..N-2
    asymmetry: float
    curvature: bool = True
    lie: Optional[sparse.csr_matrix] = None

    @property
    def size(self) -> int:
        return int(self.mass.shape[0])

    @property
    def components(self) -> int:
        return len(self.g0.classes)

    @property
    def bandwidth(self) -> int:
        coo = (self.prolongation @ self.stiffness @ self.prolongation.T).tocoo()
        return int(np.max(np.abs(coo.row - coo.col), initial=0))

    def inner(self, x: np.ndarray, y: np.ndarray) -> float:
        """Weighted L2 inner product of two reduced vectors."""
        return float(np.sum(self.mass * x * y))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """-L (x) as a reduced vector."""
        out = (self.stiffness @ x) / self.mass
        if self.lie is not None:
            out = out - self.lie @ x
        return out

    def to_field(self, x: np.ndarray) -> TensorField:
        """Expands a reduced vector to a field in the g0 frame (zero at r_max)."""
        free = self.grid.size - 1
        values = np.zeros((self.grid.size, self.components))
        values[:free] = (self.prolongation @ x).reshape(free, self.components)
        return TensorField.from_classes(self.grid, values * self.frame_scale, self.g0.classes)

    def from_field(self, h: TensorField) -> np.ndarray:
        """Restricts a field to the unknowns, averaging tied components by multiplicity."""
        free = self.grid.size - 1
        values = (h.class_values(self.g0.classes) / self.frame_scale)[:free].ravel()
        weights = np.outer(self.node_mass, self.g0.multiplicity).ravel()
        return (self.prolongation.T @ (weights * values)) / (self.prolongation.T @ weights)


def _dof_layout(g0: BackgroundMetric, grid: RadialGrid) -> sparse.csr_matrix:
    """Prolongation from reduced unknowns to node-major class values at nodes 0..N-2."""
    m = len(g0.classes)
    free = grid.size - 1
    owner = {}
    for index, group in enumerate(g0.tie_groups(grid.r_min)):
        for column in group:
            owner[column] = index
    first = np.empty(m, dtype=int)
    shared = {}
    counter = 0
    for column in range(m):
        if column in owner:
            if owner[column] not in shared:
                shared[owner[column]] = counter
                counter += 1
            first[column] = shared[owner[column]]
        else:
            first[column] = counter
            counter += 1
    dof = np.concatenate((first, counter + np.arange((free - 1) * m)))
    size = counter + (free - 1) * m
    return sparse.csr_matrix((np.ones(free * m), (np.arange(free * m), dof)), shape=(free * m, size))


def _full_stiffness(coeffs, m: int) -> Tuple[sparse.csr_matrix, np.ndarray]:
    """K_full = B_full (-L) on nodes 0..N-2 with the r_max node eliminated."""
    free = coeffs.grid.size - 1
    mult = coeffs.multiplicity
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []

    node = np.arange(free)
    weight = coeffs.flux[:, None] * mult[None, :]
    left = node[:, None] * m + np.arange(m)[None, :]
    rows.append(left.ravel())
    cols.append(left.ravel())
    vals.append(weight.ravel())
    inner = node[:-1]
    right = (inner + 1)[:, None] * m + np.arange(m)[None, :]
    rows.extend([right.ravel(), left[:-1].ravel(), right.ravel()])
    cols.extend([right.ravel(), right.ravel(), left[:-1].ravel()])
    w = weight[:-1].ravel()
    vals.extend([w, -w, -w])

    s = coeffs.mass[:free, None, None] * mult[None, :, None] * coeffs.coupling[:free]
    index = node[:, None, None] * m
    row_index = np.broadcast_to(index + np.arange(m)[None, :, None], s.shape)
    col_index = np.broadcast_to(index + np.arange(m)[None, None, :], s.shape)
    rows.append(row_index.ravel())
    cols.append(col_index.ravel())
    vals.append(-s.ravel())
    rows.append(left.ravel())
    cols.append(left.ravel())
    vals.append(s.sum(axis=2).ravel())

    stiffness = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(free * m, free * m)
    )
    mass = (coeffs.mass[:free, None] * mult[None, :]).ravel()
    return stiffness, mass


def _assemble(
    g0: BackgroundMetric,
    grid: RadialGrid,
    curvature: bool,
    metric: Optional[TensorField],
) -> OperatorMatrix:
    check_grid(g0, grid)
    if metric is not None:
        residual = stationarity_residual(metric, g0)
        if residual > TOL_STATIONARY:
            raise StationarityError(f"reference metric is not stationary: max |Phi| = {residual:.3e}", residual)
    coeffs = operator_coefficients(g0, grid, curvature=curvature, metric=metric)
    m = len(g0.classes)
    free = grid.size - 1
    full_stiffness, full_mass = _full_stiffness(coeffs, m)
    prolongation = _dof_layout(g0, grid)
    stiffness = (prolongation.T @ full_stiffness @ prolongation).tocsr()
    mass = prolongation.T @ full_mass

    scale = np.max(np.abs(stiffness.data), initial=0.0)
    asymmetry = float(np.max(np.abs((stiffness - stiffness.T).data), initial=0.0))
    if scale > 0.0:
        asymmetry /= scale
    if asymmetry > SYMMETRY_TOL:
        raise AssemblyError(f"assembled operator is not symmetric (relative asymmetry {asymmetry:.3e})", asymmetry)
    stiffness = (0.5 * (stiffness + stiffness.T)).tocsr()

    frame_scale = np.ones((grid.size, m))
    lie = None
    if metric is not None:
        frame_scale = 1.0 + metric.class_values(g0.classes)
        block = lie_correction_matrix(metric, g0)[: free * m, : free * m]
        s = frame_scale[:free].ravel()
        block = sparse.diags(1.0 / s) @ block @ sparse.diags(s)
        restriction = sparse.diags(1.0 / mass) @ prolongation.T @ sparse.diags(full_mass)
        lie = (restriction @ block @ prolongation).tocsr()

    return OperatorMatrix(
        g0=g0,
        grid=grid,
        stiffness=stiffness,
        mass=mass,
        prolongation=prolongation,
        frame_scale=frame_scale,
        node_mass=coeffs.mass[:free],
        asymmetry=asymmetry,
        curvature=curvature,
        lie=lie,
    )


def assemble_operator(
    g0: BackgroundMetric,
    grid: RadialGrid,
    metric: Optional[TensorField] = None,
) -> OperatorMatrix:
    """
    Assembles -L_{g0}, or -L_{g,g0} = -(L_g h - L_{<h, Gamma(g) - Gamma(g0)>} g) for g = g0 + metric.

    Args:
        g0: Background metric
        grid: Radial grid
        metric: Optional stationary perturbation defining g

    Returns:
        OperatorMatrix

    Raises:
        StationarityError: If g is not a stationary point of the flow
        AssemblyError: If the stiffness matrix is not symmetric
    """
    return _assemble(g0, grid, curvature=True, metric=metric)


def assemble_rough_laplacian(
    g0: BackgroundMetric,
    grid: RadialGrid,
    metric: Optional[TensorField] = None,
) -> OperatorMatrix:
    """-Delta with the stencils of assemble_operator()."""
    return _assemble(g0, grid, curvature=False, metric=metric)


@dataclass(frozen=True)
class SpectralResult:
    """Lowest eigenpairs of an OperatorMatrix and, once extracted, its kernel."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # Reduced vectors, orthonormal in the weighted inner product
    residuals: np.ndarray
    kernel: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    kernel_status: str = "not_computed"  # "resolved" or "ambiguous" once extracted
    gap_ratio: float = float("nan")
    trace_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    div_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    decay_slopes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha: Optional[float] = None

    @property
    def kernel_dimension(self) -> Optional[int]:
        """Number of kernel candidates, None when the spectral gap does not separate them."""
        if self.kernel_status != "resolved":
            return None
        return int(self.kernel.shape[1])


def _normalise_signs(vectors: np.ndarray) -> np.ndarray:
    peak = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[peak, np.arange(vectors.shape[1])])
    signs[signs == 0.0] = 1.0
    return vectors * signs[None, :]


def _residuals(op: OperatorMatrix, values: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    out = np.empty(values.shape[0])
    for j in range(values.shape[0]):
        x = vectors[:, j]
        r = op.apply(x) - values[j] * x
        out[j] = np.sqrt(op.inner(r, r) / op.inner(x, x))
    return out


def lowest_eigenpairs(op: OperatorMatrix, count: int = 6) -> SpectralResult:
    """
    Smallest eigenpairs of -L by shift-invert Lanczos (dense for small systems).

    The shift sits just below zero at a tenth of the lowest Dirichlet mode of the
    radial interval, and the start vector is drawn from a fixed seed.

    Args:
        op: Assembled operator
        count: Number of eigenpairs

    Returns:
        SpectralResult with nondecreasing eigenvalues

    Raises:
        ConvergenceError: If the iteration does not converge
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    count = min(count, op.size - 1)
    if op.lie is not None and np.max(np.abs(op.lie.data), initial=0.0) > 0.0:
        dense = (sparse.diags(1.0 / op.mass) @ op.stiffness - op.lie).toarray()
        values, vectors = linalg.eig(dense)
        order = np.argsort(values.real)[:count]
        values = values[order].real
        vectors = vectors[:, order].real
        vectors = vectors / np.sqrt(np.sum(op.mass[:, None] * vectors ** 2, axis=0))[None, :]
    else:
        scale = 1.0 / np.sqrt(op.mass)
        symmetric = sparse.diags(scale) @ op.stiffness @ sparse.diags(scale)
        if op.size <= DENSE_LIMIT:
            values, vectors = linalg.eigh(symmetric.toarray(), subset_by_index=[0, count - 1])
        else:
            width = op.grid.r_max - op.grid.r_min
            shift = -0.1 * (np.pi / width) ** 2
            start = np.random.default_rng(SEED).standard_normal(op.size)
            try:
                values, vectors = eigsh(
                    symmetric.tocsc(), k=count, sigma=shift, which="LM",
                    v0=start, maxiter=MAX_ITERATIONS, tol=EIGEN_TOL,
                )
            except ArpackNoConvergence as e:
                best = float("inf")
                if len(e.eigenvalues):
                    partial = scale[:, None] * e.eigenvectors
                    best = float(np.min(_residuals(op, e.eigenvalues, partial)))
                raise ConvergenceError(f"eigensolver did not converge: {e}", best)
            order = np.argsort(values)
            values, vectors = values[order], vectors[:, order]
        vectors = scale[:, None] * vectors
    vectors = _normalise_signs(vectors)
    return SpectralResult(eigenvalues=values, eigenvectors=vectors, residuals=_residuals(op, values, vectors))


def _field_norm(op: OperatorMatrix, values: np.ndarray) -> float:
    """Lumped weighted L2 norm of a per-node scalar."""
    mass = np.concatenate((op.node_mass, [0.0]))
    return float(np.sqrt(np.sum(mass * values ** 2)))


def kernel_checks(op: OperatorMatrix, x: np.ndarray) -> Tuple[float, float, float]:
    """
    Trace residual, divergence residual and decay slope of a kernel candidate.

    The residuals are ||tr h|| / ||h|| and ||div h|| / ||grad h||; the slope is the
    log-log fit of |h| against r on DECAY_WINDOW.
    """
    h = op.to_field(x)
    g0 = op.g0
    trace, div = trace_divergence(h, g0)
    norm = h.pointwise_norm()
    grad, _ = covariant_derivative_norms(h, g0)
    trace_residual = _field_norm(op, trace) / max(_field_norm(op, norm), np.finfo(float).tiny)
    div_residual = _field_norm(op, div) / max(_field_norm(op, grad), np.finfo(float).tiny)

    r = op.grid.nodes
    lo, hi = DECAY_WINDOW
    window = (r >= lo * op.grid.r_max) & (r <= hi * op.grid.r_max) & (norm > 0.0)
    slope = float("nan")
    if np.count_nonzero(window) >= 3:
        slope = float(np.polyfit(np.log(r[window]), np.log(norm[window]), 1)[0])
    return trace_residual, div_residual, slope


def kernel_basis(result: SpectralResult, op: OperatorMatrix, tol_kern: float = TOL_KERN) -> SpectralResult:
    """
    Separates near-zero eigenvalues from the rest of the computed spectrum.

    Eigenvalues at or below tol_kern form the kernel cluster; the cluster is only
    accepted when the next eigenvalue exceeds its largest member by GAP_RATIO.
    Otherwise the candidates are returned with status "ambiguous".

    Returns:
        Copy of result with the kernel slice and per-candidate checks
    """
    values = result.eigenvalues
    near = int(np.count_nonzero(values <= tol_kern))
    if near == 0:
        return replace(result, kernel=np.zeros((op.size, 0)), kernel_status="resolved", gap_ratio=float("inf"))

    status = "ambiguous"
    ratio = float("nan")
    if near < values.shape[0]:
        cluster = np.max(np.abs(values[:near]))
        ratio = float(values[near] / max(cluster, np.finfo(float).tiny))
        if ratio >= GAP_RATIO:
            status = "resolved"

    candidates = result.eigenvectors[:, :near]
    checks = np.array([kernel_checks(op, candidates[:, j]) for j in range(near)])
    return replace(
        result,
        kernel=candidates,
        kernel_status=status,
        gap_ratio=ratio,
        trace_residuals=checks[:, 0],
        div_residuals=checks[:, 1],
        decay_slopes=checks[:, 2],
    )


def strong_positivity_alpha(
    op: OperatorMatrix,
    kernel: SpectralResult,
    rough: Optional[OperatorMatrix] = None,
) -> float:
    """
    Largest alpha with alpha (-Delta h, h) <= (-L h, h) for h orthogonal to the kernel.

    Computed as the smallest generalized eigenvalue of the two stiffness matrices
    on the weighted orthogonal complement of the kernel. A value <= 0 is an
    instability finding and is returned as is.

    Args:
        op: Assembled -L
        kernel: Result of kernel_basis()
        rough: -Delta on the same unknowns (assembled when omitted)

    Returns:
        alpha
    """
    if rough is None:
        rough = assemble_rough_laplacian(op.g0, op.grid)
    if rough.size != op.size:
        raise ValueError("operator and rough Laplacian have different unknowns")
    K = op.stiffness.toarray()
    R = rough.stiffness.toarray()
    Z = kernel.kernel
    if Z.size:
        complement = linalg.null_space((op.mass[:, None] * Z).T)
        K = complement.T @ K @ complement
        R = complement.T @ R @ complement
    values = linalg.eigh(K, R, eigvals_only=True, subset_by_index=[0, 0])
    return float(values[0])


@dataclass(frozen=True)
class HardyEstimate:
    """Hardy constant extrapolated from truncated Rayleigh problems."""

    constant: float
    limit: float  # Extrapolated smallest eigenvalue of (-Delta, r_x^-2)
    residual: float
    cutoffs: np.ndarray
    eigenvalues: np.ndarray


def hardy_distance_sq(g0: BackgroundMetric, r: np.ndarray) -> np.ndarray:
    """
    Square of the radial comparison function r_x in the Hardy weight.

    r for sphere links; r^2 - 3a^2/4 on Eguchi-Hanson, which is a^2/4 on the
    bolt and asymptotic to r^2.
    """
    r = np.asarray(r, dtype=float)
    if g0.kind == "eguchi_hanson":
        return r ** 2 - 0.75 * g0.bolt ** 2
    return r ** 2


def _hardy_fit(ell: np.ndarray, values: np.ndarray) -> float:
    design = np.column_stack([np.ones_like(ell), ell ** -2, ell ** -3])
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    return float(coef[0])


def hardy_constant(g0: BackgroundMetric, grid: RadialGrid, cutoffs: int = HARDY_CUTOFFS) -> HardyEstimate:
    """
    Best constant C in int r_x^-2 |phi|^2 <= C int |grad phi|^2 for radial phi.

    On leading sub-grids [r_0, R_k] with phi(R_k) = 0 the smallest generalized
    eigenvalue lambda_k of (-Delta, r_x^-2) approaches its limit like
    c/l^2 + d/l^3 in l = log(r_x(R_k)/r_x(r_1)); C is the inverse of the
    extrapolated limit. The residual compares the fit with and without the
    shortest cutoff.

    Raises:
        BackgroundError: If the asymptotic volume ratio is not positive
        GridError: If the grid does not offer enough cutoffs
    """
    check_grid(g0, grid)
    avr = avr_estimate(g0, grid)
    if not avr.value > AVR_FLOOR:
        raise BackgroundError(f"hardy inequality needs a positive asymptotic volume ratio, got {avr.value:.3e}")

    flux = g0.flux_density(grid.midpoints) / grid.spacing
    weight = cell_integral(g0, grid, lambda r: 1.0 / hardy_distance_sq(g0, r))
    r_x = np.sqrt(hardy_distance_sq(g0, grid.nodes))
    ell = np.log(r_x / r_x[1])
    targets = np.linspace(0.5, 1.0, cutoffs) * ell[-1]
    ks = np.unique(np.clip(np.searchsorted(ell, targets), 4, grid.size - 1))
    if ks.shape[0] < 4:
        raise GridError("grid too short for the hardy extrapolation; increase N or r_max")

    values = np.empty(ks.shape[0])
    for j, k in enumerate(ks):
        diagonal = flux[:k].copy()
        diagonal[1:] += flux[: k - 1]
        w = weight[:k]
        off = -flux[: k - 1] / np.sqrt(w[:-1] * w[1:])
        values[j] = linalg.eigh_tridiagonal(
            diagonal / w, off, eigvals_only=True, select="i", select_range=(0, 0)
        )[0]
    lengths = ell[ks]
    limit = _hardy_fit(lengths, values)
    shorter = _hardy_fit(lengths[1:], values[1:])
    return HardyEstimate(
        constant=1.0 / limit,
        limit=limit,
        residual=abs(shorter - limit) / abs(limit),
        cutoffs=grid.nodes[ks],
        eigenvalues=values,
    )
