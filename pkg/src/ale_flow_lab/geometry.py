# src/ale_flow_lab/geometry.py
"""
Radial grids, ALE Ricci-flat backgrounds in a cohomogeneity-one frame and the
weighted norms measured on them.

Every background is written as g0 = f(r)^2 dr^2 + sum_i w_i(r)^2 e_i (x) e_i over an
invariant coframe {e_i} of the link. Internally the coefficients are carried as
P = 1/f^2 and Q_i = w_i^2, which stay smooth through a bolt or the origin.
"""
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple, Union

import numpy as np
from numpy.polynomial import legendre, polynomial
from scipy import integrate, sparse, special

from ale_flow_lab.utils import BackgroundError, FieldError, GridError, check_finite

# --- Types ---
ClassLayout = Tuple[Tuple[int, ...], ...]
Profile = Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]

# --- Configuration ---
MIN_NODES = 16
QUAD_POINTS = 16  # Gauss-Legendre points per cell
FLAT_ALE_ORDER = float("inf")
EH_ALE_ORDER = 4.0
AVR_FLAG_RESIDUAL = 0.10
OUTER_FRACTION = 1.0 / 3.0  # Share of the radial range used by tail fits
KINDS = ("euclidean", "cone", "eguchi_hanson")


@dataclass(frozen=True, eq=False)
class RadialGrid:
    """Strictly increasing radial nodes, geometrically stretched toward r_max."""

    n: int
    r_min: float
    r_max: float
    nodes: np.ndarray
    stretch: float

    @property
    def size(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def spacing(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.nodes[1:] + self.nodes[:-1])

    @cached_property
    def derivative_matrices(self) -> Tuple[sparse.csr_matrix, sparse.csr_matrix]:
        """
        First and second derivative matrices on the nodes.

        Interior rows use the three-point nonuniform stencil; the boundary rows
        are one-sided (three points for d/dr, four points for d^2/dr^2).
        """
        return _derivative_matrix(self.nodes, 1), _derivative_matrix(self.nodes, 2)


def _stencil_weights(offsets: np.ndarray, order: int) -> np.ndarray:
    """Lagrange weights for the given derivative order, one row per stencil."""
    count, width = offsets.shape
    scale = np.max(np.abs(offsets), axis=1)
    scaled = offsets / scale[:, None]
    powers = np.arange(width)
    vandermonde = scaled[:, None, :] ** powers[None, :, None]
    vandermonde = vandermonde / special.factorial(powers)[None, :, None]
    rhs = np.zeros((count, width))
    rhs[:, order] = 1.0
    weights = np.linalg.solve(vandermonde, rhs[:, :, None])[:, :, 0]
    return weights / scale[:, None] ** order


def _derivative_matrix(nodes: np.ndarray, order: int) -> sparse.csr_matrix:
    size = nodes.shape[0]
    rows, cols, vals = [], [], []

    interior = np.arange(1, size - 1)
    stencil = interior[:, None] + np.array([-1, 0, 1])[None, :]
    weights = _stencil_weights(nodes[stencil] - nodes[interior][:, None], order)
    rows.append(np.repeat(interior, 3))
    cols.append(stencil.ravel())
    vals.append(weights.ravel())

    width = 3 if order == 1 else 4
    for node, stencil_nodes in ((0, np.arange(width)), (size - 1, size - 1 - np.arange(width))):
        weights = _stencil_weights((nodes[stencil_nodes] - nodes[node])[None, :], order)[0]
        rows.append(np.full(width, node))
        cols.append(stencil_nodes)
        vals.append(weights)

    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    )


def build_grid(n: int, r_min: float, r_max: float, N: int, stretch: float = 1.0) -> RadialGrid:
    """
    Builds a radial grid whose spacing grows by a constant factor.

    Args:
        n: Ambient dimension
        r_min: Inner radius (0 for the origin, the bolt radius for Eguchi-Hanson)
        r_max: Outer truncation radius
        N: Number of nodes
        stretch: Ratio between consecutive spacings

    Returns:
        RadialGrid with nodes r_min = r_0 < ... < r_{N-1} = r_max

    Raises:
        GridError: If the parameters are not admissible
    """
    if int(n) != n or n < 3:
        raise GridError(f"dimension must be an integer >= 3, got {n}")
    if not (r_min >= 0.0 and r_max > r_min):
        raise GridError(f"need r_max > r_min >= 0, got r_min={r_min}, r_max={r_max}")
    if int(N) != N or N < MIN_NODES:
        raise GridError(f"need at least {MIN_NODES} nodes, got {N}")
    if not stretch >= 1.0:
        raise GridError(f"stretch must be >= 1, got {stretch}")

    N = int(N)
    length = r_max - r_min
    if stretch == 1.0:
        steps = np.full(N - 1, length / (N - 1))
    else:
        growth = stretch ** np.arange(N - 1)
        steps = length * growth / np.sum(growth)
    nodes = r_min + np.concatenate(([0.0], np.cumsum(steps)))
    nodes[-1] = r_max
    if not np.all(np.diff(nodes) > 0.0):
        raise GridError("grid spacing underflows; reduce stretch or N")
    return RadialGrid(n=int(n), r_min=float(r_min), r_max=float(r_max), nodes=nodes, stretch=float(stretch))


@dataclass(frozen=True)
class BackgroundMetric:
    """
    Exact ALE Ricci-flat reference metric in cohomogeneity-one form.

    The link is either a round sphere quotient (warped product, every tangential
    direction alike) or SU(2)/Gamma with a Bianchi-IX coframe normalised so that
    d(sigma_i) = sigma_j ^ sigma_k; flat R^4 is then dr^2 + (r^2/4) sum sigma_i^2.
    """

    kind: str
    n: int
    gamma_order: int
    ale_order: float
    bolt: float = 0.0

    @property
    def link(self) -> str:
        return "su2" if self.kind == "eguchi_hanson" else "sphere"

    @property
    def classes(self) -> ClassLayout:
        """Frame directions grouped into components that stay equal under the symmetry."""
        if self.link == "su2":
            return ((0,), (1,), (2,), (3,))
        return ((0,), tuple(range(1, self.n)))

    @property
    def multiplicity(self) -> np.ndarray:
        return np.array([len(c) for c in self.classes], dtype=float)

    @property
    def representatives(self) -> np.ndarray:
        return np.array([c[0] for c in self.classes])

    @property
    def structure_constants(self) -> np.ndarray:
        """C[i, j, k] = C^i_jk of the link coframe (zero block for sphere links)."""
        size = self.n - 1
        constants = np.zeros((size, size, size))
        if self.link == "su2":
            for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
                constants[i, j, k] = 1.0
                constants[i, k, j] = -1.0
        return constants

    @property
    def link_volume(self) -> float:
        if self.link == "su2":
            return 16.0 * np.pi ** 2 / self.gamma_order
        sphere = 2.0 * np.pi ** (self.n / 2.0) / special.gamma(self.n / 2.0)
        return sphere / self.gamma_order

    @property
    def inner_radius(self) -> float:
        """Smallest radius the manifold reaches (origin or bolt)."""
        return self.bolt if self.kind == "eguchi_hanson" else 0.0

    def collapses_at(self, r: float) -> bool:
        """True when the link degenerates at radius r (origin of R^n or the bolt)."""
        if self.kind == "euclidean":
            return r == 0.0
        if self.kind == "eguchi_hanson":
            return r == self.bolt
        return False

    def tie_groups(self, r: float) -> Tuple[Tuple[int, ...], ...]:
        """Component classes forced equal by smoothness where the link collapses."""
        if not self.collapses_at(r):
            return ()
        if self.kind == "euclidean":
            return (tuple(range(len(self.classes))),)
        return ((0, 3), (1, 2))

    def profile(self, r: np.ndarray) -> Profile:
        """
        P = 1/f^2 and Q_i = w_i^2 with their first two radial derivatives.

        Returns:
            (P, dP, d2P, Q, dQ, d2Q); the Q arrays have one column per link direction
        """
        r = np.asarray(r, dtype=float)
        size = self.n - 1
        if self.kind == "eguchi_hanson":
            a4 = self.bolt ** 4
            P = 1.0 - a4 / r ** 4
            dP = 4.0 * a4 / r ** 5
            d2P = -20.0 * a4 / r ** 6
            Q = np.stack([r ** 2 / 4.0, r ** 2 / 4.0, (r ** 2 - a4 / r ** 2) / 4.0], axis=-1)
            dQ = np.stack([r / 2.0, r / 2.0, (r + a4 / r ** 3) / 2.0], axis=-1)
            d2Q = np.stack(
                [np.full_like(r, 0.5), np.full_like(r, 0.5), (1.0 - 3.0 * a4 / r ** 4) / 2.0], axis=-1
            )
            return P, dP, d2P, Q, dQ, d2Q
        ones = np.ones_like(r)
        Q = np.repeat((r ** 2)[..., None], size, axis=-1)
        dQ = np.repeat((2.0 * r)[..., None], size, axis=-1)
        d2Q = np.full(r.shape + (size,), 2.0)
        return ones, 0.0 * r, 0.0 * r, Q, dQ, d2Q

    def frame_coeffs(self, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Frame coefficients (f(r), w_1(r), ..., w_{n-1}(r)).

        f is infinite at a bolt, where w_3 vanishes.
        """
        P, _, _, Q, _, _ = self.profile(r)
        with np.errstate(divide="ignore"):
            f = 1.0 / np.sqrt(P)
        return f, np.sqrt(np.maximum(Q, 0.0))

    def cone_coeffs(self, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Frame coefficients of the flat cone the background is asymptotic to."""
        r = np.asarray(r, dtype=float)
        scale = 0.5 if self.link == "su2" else 1.0
        return np.ones_like(r), np.repeat((scale * r)[..., None], self.n - 1, axis=-1)

    def volume_density(self, r: np.ndarray) -> np.ndarray:
        """Riemannian volume per unit dr, link volume included."""
        r = np.asarray(r, dtype=float)
        if self.link == "su2":
            return self.link_volume * r ** 3 / 8.0
        return self.link_volume * r ** (self.n - 1)

    def volume_primitive(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.link == "su2":
            return self.link_volume * r ** 4 / 32.0
        return self.link_volume * r ** self.n / self.n

    def flux_density(self, r: np.ndarray) -> np.ndarray:
        """Volume density times P: the radial diffusion coefficient of the Laplacian."""
        r = np.asarray(r, dtype=float)
        P = self.profile(r)[0]
        return self.volume_density(r) * P

    def distance_integrand(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Geodesic-distance integrand in a variable that is smooth at the inner end.

        Returns:
            (r(u), f(r) dr/du); for a bolt r = a + u^2, otherwise r = u
        """
        u = np.asarray(u, dtype=float)
        if self.kind == "eguchi_hanson":
            a = self.bolt
            r = a + u ** 2
            return r, 2.0 * r ** 2 / np.sqrt((r + a) * (r ** 2 + a ** 2))
        return u, np.ones_like(u)

    def to_distance_variable(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.kind == "eguchi_hanson":
            return np.sqrt(np.maximum(r - self.bolt, 0.0))
        return r


def background_euclidean(n: int) -> BackgroundMetric:
    """
    Flat R^n as the warped product dr^2 + r^2 g_{S^{n-1}}.

    Raises:
        BackgroundError: If n < 3
    """
    if int(n) != n or n < 3:
        raise BackgroundError(f"euclidean background needs n >= 3, got {n}")
    return BackgroundMetric(kind="euclidean", n=int(n), gamma_order=1, ale_order=FLAT_ALE_ORDER)


def background_cone(n: int, gamma_order: int) -> BackgroundMetric:
    """
    Flat cone over S^{n-1}/Gamma; grids on it must exclude the apex.

    Raises:
        BackgroundError: If n < 3 or |Gamma| < 2
    """
    if int(n) != n or n < 3:
        raise BackgroundError(f"cone background needs n >= 3, got {n}")
    if int(gamma_order) != gamma_order or gamma_order < 2:
        raise BackgroundError(f"cone background needs gamma_order >= 2, got {gamma_order}")
    return BackgroundMetric(kind="cone", n=int(n), gamma_order=int(gamma_order), ale_order=FLAT_ALE_ORDER)


def background_eguchi_hanson(a: float) -> BackgroundMetric:
    """
    Eguchi-Hanson metric on T*S^2 with bolt radius a, asymptotic to R^4/Z_2.

    f = (1 - (a/r)^4)^(-1/2), w_1 = w_2 = r/2, w_3 = (r/2)(1 - (a/r)^4)^(1/2).

    Raises:
        BackgroundError: If a <= 0
    """
    if not a > 0.0:
        raise BackgroundError(f"bolt parameter must be positive, got {a}")
    return BackgroundMetric(kind="eguchi_hanson", n=4, gamma_order=2, ale_order=EH_ALE_ORDER, bolt=float(a))


def make_background(kind: str, n: int = 4, gamma_order: int = 1, a: float = 1.0) -> BackgroundMetric:
    """Dispatches on the background kind used by configs."""
    if kind == "euclidean":
        return background_euclidean(n)
    if kind == "cone":
        return background_cone(n, gamma_order)
    if kind == "eguchi_hanson":
        if n != 4:
            raise BackgroundError(f"eguchi_hanson is four-dimensional, got n={n}")
        return background_eguchi_hanson(a)
    raise BackgroundError(f"unknown background kind '{kind}', expected one of {', '.join(KINDS)}")


def check_grid(g0: BackgroundMetric, grid: RadialGrid) -> None:
    """
    Verifies that a grid lives on the manifold described by g0.

    Raises:
        BackgroundError: On dimension mismatch, an apex inside the grid, or a
            grid reaching inside the bolt
    """
    if grid.n != g0.n:
        raise BackgroundError(f"grid dimension {grid.n} does not match background dimension {g0.n}")
    if g0.kind == "cone" and grid.r_min <= 0.0:
        raise BackgroundError("cone grids must use r_min > 0 (orbifold apex excluded)")
    if g0.kind == "eguchi_hanson" and grid.r_min < g0.bolt:
        raise BackgroundError(f"eguchi_hanson grids must start at r >= a = {g0.bolt}, got {grid.r_min}")


@dataclass(frozen=True, eq=False)
class TensorField:
    """
    Symmetric 2-tensor in the g0-orthonormal invariant frame.

    diag holds (h_rr, h_11, ..., h_{n-1,n-1}) per node; cross optionally holds
    h_{r,n-1}. Only independent components are stored, so the tensor is
    symmetric by construction.
    """

    grid: RadialGrid
    diag: np.ndarray
    cross: Optional[np.ndarray] = None

    def __post_init__(self):
        diag = np.array(self.diag, dtype=float)
        if diag.shape != (self.grid.size, self.grid.n):
            raise FieldError(f"diag must have shape {(self.grid.size, self.grid.n)}, got {diag.shape}")
        check_finite(diag, "tensor field")
        diag.setflags(write=False)
        object.__setattr__(self, "diag", diag)
        if self.cross is not None:
            cross = np.array(self.cross, dtype=float)
            if cross.shape != (self.grid.size,):
                raise FieldError(f"cross must have shape {(self.grid.size,)}, got {cross.shape}")
            check_finite(cross, "tensor field cross term")
            cross.setflags(write=False)
            object.__setattr__(self, "cross", cross)

    @property
    def includes_cross(self) -> bool:
        return self.cross is not None

    @classmethod
    def zeros(cls, grid: RadialGrid) -> "TensorField":
        return cls(grid=grid, diag=np.zeros((grid.size, grid.n)))

    @classmethod
    def from_classes(cls, grid: RadialGrid, values: np.ndarray, classes: ClassLayout) -> "TensorField":
        """Expands one column per component class to the full frame."""
        values = np.asarray(values, dtype=float)
        diag = np.zeros((grid.size, grid.n))
        for column, members in enumerate(classes):
            diag[:, list(members)] = values[:, column][:, None]
        return cls(grid=grid, diag=diag)

    def class_values(self, classes: ClassLayout) -> np.ndarray:
        """Component classes as columns (mean over the members of each class)."""
        return np.stack([self.diag[:, list(members)].mean(axis=1) for members in classes], axis=1)

    def pointwise_norm(self) -> np.ndarray:
        """|h|_{g0} at every node."""
        squared = np.sum(self.diag ** 2, axis=1)
        if self.cross is not None:
            squared = squared + 2.0 * self.cross ** 2
        return np.sqrt(squared)

    def scaled(self, factor: float) -> "TensorField":
        cross = None if self.cross is None else factor * self.cross
        return TensorField(grid=self.grid, diag=factor * self.diag, cross=cross)

    def plus(self, other: "TensorField") -> "TensorField":
        if self.cross is None and other.cross is None:
            cross = None
        else:
            cross = (0.0 if self.cross is None else self.cross) + (0.0 if other.cross is None else other.cross)
        return TensorField(grid=self.grid, diag=self.diag + other.diag, cross=cross)

    def minus(self, other: "TensorField") -> "TensorField":
        return self.plus(other.scaled(-1.0))


@dataclass(frozen=True)
class WeightSpec:
    """Weighted norm parameters: exponent p, derivative order k and weight delta."""

    p: float
    k: int
    delta: float

    def __post_init__(self):
        if not self.p >= 1.0:
            raise FieldError(f"weighted norm needs p >= 1, got {self.p}")
        if int(self.k) != self.k or self.k < 0:
            raise FieldError(f"derivative order must be an integer >= 0, got {self.k}")


def distance(g0: BackgroundMetric, r: np.ndarray, base: Optional[float] = None) -> np.ndarray:
    """
    g0-geodesic distance along the radial axis from the base radius.

    The base point is the bolt for Eguchi-Hanson and the given (or inner)
    radius otherwise. Cells between consecutive radii are integrated with
    Gauss-Legendre in a variable that removes the bolt singularity.

    Args:
        g0: Background metric
        r: Increasing radii
        base: Base radius for sphere links (defaults to the inner radius)

    Returns:
        Distances, same shape as r
    """
    r = np.asarray(r, dtype=float)
    if g0.link == "sphere":
        start = g0.inner_radius if base is None else base
        return r - start
    u = g0.to_distance_variable(np.concatenate(([g0.bolt], r)))
    points, weights = legendre.leggauss(QUAD_POINTS)
    lo, hi = u[:-1], u[1:]
    half = 0.5 * (hi - lo)
    samples = 0.5 * (hi + lo)[:, None] + half[:, None] * points[None, :]
    _, integrand = g0.distance_integrand(samples)
    cells = half * np.sum(weights[None, :] * integrand, axis=1)
    return np.cumsum(cells)


def grid_distance(g0: BackgroundMetric, grid: RadialGrid) -> np.ndarray:
    """Distance of every node from the base point (grid r_min for cones)."""
    base = grid.r_min if g0.link == "sphere" else None
    return distance(g0, grid.nodes, base=base)


def weight_function(g0: BackgroundMetric, grid: RadialGrid) -> np.ndarray:
    """rho = sqrt(1 + s^2) at every node."""
    s = grid_distance(g0, grid)
    return np.sqrt(1.0 + s ** 2)


def volume(g0: BackgroundMetric, r0: float, r1: float) -> float:
    """Volume of the shell r0 <= r <= r1."""
    return float(g0.volume_primitive(r1) - g0.volume_primitive(r0))


def cell_volumes(g0: BackgroundMetric, grid: RadialGrid) -> np.ndarray:
    """Exact volumes of the dual cells [r_{i-1/2}, r_{i+1/2}] clipped to the grid."""
    edges = np.concatenate(([grid.nodes[0]], grid.midpoints, [grid.nodes[-1]]))
    return np.diff(g0.volume_primitive(edges))


def cell_integral(g0: BackgroundMetric, grid: RadialGrid, density) -> np.ndarray:
    """
    Integrates density(r) * volume_density(r) over every dual cell.

    Args:
        g0: Background metric
        grid: Radial grid
        density: Vectorised callable of r

    Returns:
        One value per node
    """
    edges = np.concatenate(([grid.nodes[0]], grid.midpoints, [grid.nodes[-1]]))
    points, weights = legendre.leggauss(QUAD_POINTS)
    lo, hi = edges[:-1], edges[1:]
    half = 0.5 * (hi - lo)
    samples = 0.5 * (hi + lo)[:, None] + half[:, None] * points[None, :]
    values = density(samples) * g0.volume_density(samples)
    return half * np.sum(weights[None, :] * values, axis=1)


def scalar_derivative_norms(g0: BackgroundMetric, grid: RadialGrid, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    |du| and |Hess u| of a radial function at every node.

    Where the link collapses the node-1 value is reused at node 0.
    """
    d1, d2 = grid.derivative_matrices
    du = d1 @ u
    d2u = d2 @ u
    r = grid.nodes
    regular = _regular_nodes(g0, grid)
    P, dP, _, Q, dQ, _ = g0.profile(r[regular])
    u_s = np.sqrt(P) * du[regular]
    u_ss = P * d2u[regular] + 0.5 * dP * du[regular]
    second_fundamental = np.sqrt(P)[:, None] * dQ / (2.0 * Q)
    grad = np.abs(u_s)
    hess = np.sqrt(u_ss ** 2 + np.sum((second_fundamental * u_s[:, None]) ** 2, axis=1))
    return _fill_inner(regular, grad), _fill_inner(regular, hess)


def _regular_nodes(g0: BackgroundMetric, grid: RadialGrid) -> slice:
    return slice(1, None) if g0.collapses_at(grid.r_min) else slice(0, None)


def _fill_inner(regular: slice, values: np.ndarray) -> np.ndarray:
    if regular.start == 0:
        return values
    return np.concatenate((values[:1], values))


def weighted_norm(
    field: Union[TensorField, np.ndarray],
    spec: WeightSpec,
    g0: BackgroundMetric,
    grid: Optional[RadialGrid] = None,
) -> float:
    """
    Weighted Sobolev/Holder-type norm of a tensor field or radial function.

    For finite p this is sum_{l<=k} (int |rho^{-(delta-l)} grad^l u|^p rho^{-n} dmu)^{1/p}
    with trapezoid quadrature on the grid; for p = inf it is the sup of
    rho^{-delta+l} |grad^l u| over nodes and l <= k (Holder seminorm omitted).

    Args:
        field: TensorField, or per-node values of a radial function
        spec: Exponent, derivative order and weight
        g0: Background metric
        grid: Grid of a plain array (taken from the field otherwise)

    Returns:
        Nonnegative norm value

    Raises:
        FieldError: If the field holds non-finite values or no grid is given
    """
    if isinstance(field, TensorField):
        grid = field.grid
        from ale_flow_lab.operators import covariant_derivative_norms

        magnitudes = [field.pointwise_norm()]
        if spec.k >= 1:
            grad, hess = covariant_derivative_norms(field, g0)
            magnitudes.extend([grad, hess])
    else:
        if grid is None:
            raise FieldError("a grid is required for plain arrays")
        values = np.asarray(field, dtype=float)
        check_finite(values, "radial function")
        magnitudes = [np.abs(values)]
        if spec.k >= 1:
            magnitudes.extend(scalar_derivative_norms(g0, grid, values))
    if spec.k > 2:
        raise FieldError("weighted norms are implemented up to second derivatives")

    rho = weight_function(g0, grid)
    if np.isinf(spec.p):
        return float(max(np.max(rho ** (-spec.delta + l) * magnitudes[l]) for l in range(spec.k + 1)))

    density = g0.volume_density(grid.nodes)
    total = 0.0
    for l in range(spec.k + 1):
        integrand = np.abs(rho ** (-(spec.delta - l)) * magnitudes[l]) ** spec.p * rho ** (-g0.n) * density
        total += integrate.trapezoid(integrand, grid.nodes) ** (1.0 / spec.p)
    return float(total)


@dataclass(frozen=True)
class AvrEstimate:
    """Asymptotic volume ratio with the disagreement between two tail fits."""

    value: float
    residual: float
    flagged: bool


def avr_estimate(g0: BackgroundMetric, grid: RadialGrid) -> AvrEstimate:
    """
    Extrapolates Vol B(x, s) / s^n to s -> infinity.

    The ratio on the outer third of the grid is fitted by polynomials in 1/s of
    degree 2 and 3; the relative difference of their constant terms is the
    reported residual and a residual above 10% flags the result.
    """
    check_grid(g0, grid)
    s = grid_distance(g0, grid)
    outer = s >= s[-1] * (1.0 - OUTER_FRACTION)
    outer &= s > 0.0
    if np.count_nonzero(outer) < 5:
        return AvrEstimate(value=float("nan"), residual=float("inf"), flagged=True)
    enclosed = g0.volume_primitive(grid.nodes[outer]) - g0.volume_primitive(grid.r_min)
    ratio = enclosed / s[outer] ** g0.n
    x = 1.0 / s[outer]
    low = polynomial.polyfit(x, ratio, 2)[0]
    high = polynomial.polyfit(x, ratio, 3)[0]
    residual = abs(high - low) / abs(high) if high != 0.0 else float("inf")
    return AvrEstimate(value=float(high), residual=float(residual), flagged=bool(residual > AVR_FLAG_RESIDUAL))


def ale_order_fit(g0: BackgroundMetric, grid: RadialGrid) -> float:
    """
    Rate tau at which the frame coefficients approach the flat cone.

    Fits log of the largest relative deviation against log r over the outer
    third of the grid; exact cones report infinity.
    """
    r = grid.nodes[grid.nodes >= grid.nodes[-1] * (1.0 - OUTER_FRACTION)]
    f, w = g0.frame_coeffs(r)
    f_cone, w_cone = g0.cone_coeffs(r)
    deviation = np.max(np.abs(np.column_stack([f / f_cone, w / w_cone]) - 1.0), axis=1)
    if np.all(deviation <= 1e-14):
        return FLAT_ALE_ORDER
    keep = deviation > 0.0
    slope = np.polyfit(np.log(r[keep]), np.log(deviation[keep]), 1)[0]
    return float(-slope)
