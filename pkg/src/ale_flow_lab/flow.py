# src/ale_flow_lab/flow.py
"""
Ricci-DeTurck flow of invariant perturbations: Heun time stepping, kernel
modulation, the diagnostic record and the fits made on it.
"""
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, sparse
from scipy.sparse.linalg import spsolve

from ale_flow_lab.config import DEFAULT_SAFETY, RunConfig
from ale_flow_lab.geometry import (
    BackgroundMetric,
    RadialGrid,
    TensorField,
    build_grid,
    cell_volumes,
    check_grid,
    grid_distance,
    make_background,
)
from ale_flow_lab.operators import (
    OperatorCoefficients,
    RhsContext,
    apply_coefficients,
    check_positive,
    close_inner_node,
    covariant_derivative_norms,
    deturck_vector,
    direct_rhs,
    divergence_commutator,
    operator_coefficients,
    rhs_context,
    ricci,
    scaling_mode,
)
from ale_flow_lab.utils import ConfigError, FieldError, MetricError

# --- Configuration ---
MIN_FIT_SAMPLES = 10
DECAY_DECADES = 2.0
SMOOTHING_DECADES = 1.5
MEANVALUE_SLICES = 32  # Snapshots per parabolic window
TRANSIENT_TIME = 1.0  # Monotonicity is checked from this time on

OUTCOMES = ("converged", "exited_ball", "reached_t_max", "blew_up")


@dataclass(frozen=True)
class FlowState:
    """h = g(t) - g0 with its kernel projection h0 at time t."""

    t: float
    h: TensorField
    h0: TensorField
    dt_last: float = 0.0
    step_count: int = 0


@dataclass(frozen=True)
class DiagnosticSample:
    """One row of the diagnostic record, in output column order."""

    t: float
    h_l2: float
    h_linf: float
    h_linf_outside: float
    grad_l2: float
    grad_linf: float
    perp_l2: float
    perp_grad_l2: float
    energy: float
    dh0dt_l2: float
    ric_linf: float
    deturck_linf: float
    grad2_linf: float
    dhdt_l2: float


DIAGNOSTIC_COLUMNS = tuple(f.name for f in fields(DiagnosticSample))


@dataclass(frozen=True)
class MeanValueRow:
    t: float
    r: float
    lhs: float
    rhs: float
    implied_constant: float
    status: str  # "ok", "vacuous" or "skipped"
    note: str = ""


@dataclass
class Diagnostics:
    """Samples on the geometric schedule plus stored snapshots for the mean-value sweep."""

    samples: List[DiagnosticSample] = field(default_factory=list)
    snapshots: List[Tuple[float, np.ndarray]] = field(default_factory=list)
    meanvalue: List[MeanValueRow] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)
    div_commutator: float = float("nan")  # Of the initial data

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.samples], dtype=float)

    def rows(self) -> List[Tuple[float, ...]]:
        return [tuple(getattr(s, name) for name in DIAGNOSTIC_COLUMNS) for s in self.samples]


@dataclass(frozen=True)
class RunOutcome:
    """How a run ended: one of OUTCOMES, with the threshold that ended it."""

    classification: str
    state: FlowState
    reason: str
    exit_time: float
    exit_value: float
    postmortem: Optional[FlowState] = None
    final_ric_inf: float = float("nan")
    final_deturck_inf: float = float("nan")

    def __post_init__(self):
        if self.classification not in OUTCOMES:
            raise ValueError(f"unknown outcome '{self.classification}'")


@dataclass(frozen=True)
class KernelBasis:
    """Kernel fields, orthonormal for the lumped L2 inner product with weights `mass`."""

    fields: Tuple[TensorField, ...]
    mass: np.ndarray

    @classmethod
    def empty(cls, g0: BackgroundMetric, grid: RadialGrid) -> "KernelBasis":
        return cls(fields=(), mass=cell_volumes(g0, grid))

    @classmethod
    def from_spectrum(cls, op, result) -> "KernelBasis":
        """Kernel slice of a SpectralResult as fields, re-orthonormalised on the full grid."""
        mass = cell_volumes(op.g0, op.grid)
        columns = result.kernel.shape[1] if result.kernel.size else 0
        basis: List[TensorField] = []
        for j in range(columns):
            e = op.to_field(result.kernel[:, j])
            for previous in basis:
                e = e.minus(previous.scaled(weighted_inner(e, previous, mass)))
            norm = np.sqrt(weighted_inner(e, e, mass))
            if norm > 0.0:
                basis.append(e.scaled(1.0 / norm))
        return cls(fields=tuple(basis), mass=mass)

    def __len__(self) -> int:
        return len(self.fields)


def weighted_inner(a: TensorField, b: TensorField, mass: np.ndarray) -> float:
    """sum_i mass_i <a, b>_{g0} at node i."""
    pointwise = np.sum(a.diag * b.diag, axis=1)
    if a.cross is not None and b.cross is not None:
        pointwise = pointwise + 2.0 * a.cross * b.cross
    return float(np.sum(mass * pointwise))


def l2_norm(h: TensorField, mass: np.ndarray) -> float:
    return float(np.sqrt(np.sum(mass * h.pointwise_norm() ** 2)))


def project_kernel(h: TensorField, kernel: KernelBasis) -> Tuple[TensorField, TensorField]:
    """
    Splits h into its kernel component and the orthogonal rest.

    Returns:
        (h0, h_perp) with h0 = sum <h, e_i> e_i
    """
    h0 = TensorField.zeros(h.grid)
    for e in kernel.fields:
        h0 = h0.plus(e.scaled(weighted_inner(h, e, kernel.mass)))
    return h0, h.minus(h0)


def cfl_dt(state: FlowState, g0: BackgroundMetric, safety: float = DEFAULT_SAFETY) -> float:
    """
    Explicit step limit: safety * min(dr^2 f^2) / (2 max g^rr).

    f^2 = 1/P is read at cell midpoints, and g^rr = 1/(1 + h_rr) is the radial
    principal symbol in the g0 frame.

    Raises:
        MetricError: If g0 + h is degenerate
    """
    if not 0.0 < safety <= 1.0:
        raise ValueError(f"safety must lie in (0, 1], got {safety}")
    check_positive(state.h)
    grid = state.h.grid
    P = g0.profile(grid.midpoints)[0]
    symbol = np.max(1.0 / (1.0 + state.h.diag[:, 0]))
    return float(safety * np.min(grid.spacing ** 2 / P) / (2.0 * symbol))


def apply_boundary(ctx: RhsContext, H: np.ndarray) -> np.ndarray:
    """Dirichlet at r_max, zero-slope closure (and ties) at the inner node."""
    out = close_inner_node(ctx.g0, ctx.grid, H)
    out[-1] = 0.0
    return out


def _checked(ctx: RhsContext, H: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(H)):
        raise FieldError("flow produced non-finite values")
    bad = np.any(1.0 + H <= 0.0, axis=1)
    if np.any(bad):
        node = int(np.argmax(bad))
        raise MetricError(f"metric lost positivity at node {node}", node)
    return H


def _heun(ctx: RhsContext, H: np.ndarray, dt: float) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        k1 = direct_rhs(ctx, H)
        stage = _checked(ctx, apply_boundary(ctx, H + dt * k1))
        k2 = direct_rhs(ctx, stage)
        return _checked(ctx, apply_boundary(ctx, H + 0.5 * dt * (k1 + k2)))


def step(
    state: FlowState,
    g0: BackgroundMetric,
    dt: float,
    ctx: Optional[RhsContext] = None,
    kernel: Optional[KernelBasis] = None,
) -> FlowState:
    """
    One Heun (RK2) step of dh/dt = -2 Ric(g) + L_V g.

    Raises:
        MetricError: If g0 + h loses positivity
        FieldError: If the update is not finite
    """
    if ctx is None:
        ctx = rhs_context(g0, state.h.grid)
    H = state.h.class_values(g0.classes)
    new = TensorField.from_classes(state.h.grid, _heun(ctx, H, dt), g0.classes)
    h0 = state.h0 if kernel is None else project_kernel(new, kernel)[0]
    return FlowState(t=state.t + dt, h=new, h0=h0, dt_last=dt, step_count=state.step_count + 1)


def heat_kernel_radial(n: int, amplitude: float, width: float, t: float, r: np.ndarray) -> np.ndarray:
    """Solution of u_t = Delta u on R^n with u(0) = amplitude * exp(-r^2 / width^2)."""
    spread = width ** 2 + 4.0 * t
    return amplitude * (width ** 2 / spread) ** (n / 2.0) * np.exp(-np.asarray(r) ** 2 / spread)


def _traceless_profile(g0: BackgroundMetric, u: np.ndarray) -> np.ndarray:
    if g0.link == "su2":
        return np.column_stack([u, -u, -u, u])
    return np.column_stack([(g0.n - 1) * u, -u])


def _divergence_free(g0: BackgroundMetric, grid: RadialGrid, target: np.ndarray) -> np.ndarray:
    """
    Closest field (in the lumped L2 norm) to target that is traceless, has zero
    grid divergence, vanishes at r_max and satisfies the inner ties.
    """
    ctx = rhs_context(g0, grid)
    size, m = target.shape
    mult = g0.multiplicity
    weights = np.outer(cell_volumes(g0, grid), mult).ravel()
    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    count = 0

    def add(entries):
        nonlocal count
        for column, value in entries:
            rows.append(count)
            cols.append(column)
            vals.append(value)
        count += 1

    for i in range(size - 1):
        add([(i * m + b, mult[b]) for b in range(m)])
    for b in range(m):
        add([((size - 1) * m + b, 1.0)])
    for group in g0.tie_groups(grid.r_min):
        for b, c in zip(group[:-1], group[1:]):
            add([(b, 1.0), (c, -1.0)])

    d1 = ctx.d1.tocsr()
    sqrt_p = np.sqrt(ctx.profile[0])
    L = ctx.frame.second_fundamental
    owner = ctx.frame_class[1:]
    for k, i in enumerate(ctx.regular):
        if i == size - 1:
            continue
        entries = []
        start, stop = d1.indptr[i], d1.indptr[i + 1]
        for j, value in zip(d1.indices[start:stop], d1.data[start:stop]):
            entries.append((j * m, sqrt_p[k] * value))
        entries.append((i * m, float(np.sum(L[k]))))
        for direction, column in enumerate(owner):
            entries.append((i * m + column, -L[k, direction]))
        add(entries)

    constraints = sparse.csr_matrix((vals, (rows, cols)), shape=(count, size * m))
    kkt = sparse.bmat([[sparse.diags(weights), constraints.T], [constraints, None]]).tocsc()
    rhs = np.concatenate((weights * target.ravel(), np.zeros(count)))
    solution = spsolve(kkt, rhs)
    return solution[: size * m].reshape(size, m)


def initial_data(
    family: str,
    g0: BackgroundMetric,
    grid: RadialGrid,
    amplitude: float,
    width: float,
) -> TensorField:
    """
    Initial perturbation h(0) of a named family.

    zero; gaussian (conformal A exp(-s^2/w^2) g0); power_tail (conformal
    A (1 + (s/w)^2)^(-n/4)); kink (conformal A max(0, 1 - s/w)); step (conformal
    A [s < w]); tt_bump (traceless A (s/w)^2 exp(-s^2/w^2), divergence-projected
    on Bianchi-IX links); bolt_bump (A exp(-s^2/w^2) times the pattern (1, -1, -1, 1)
    of the scaling mode, centred on the bolt); kernel (A times the normalised
    scaling mode).
    """
    s = grid_distance(g0, grid)
    m = len(g0.classes)
    ones = np.ones((1, m))
    if family == "zero":
        values = np.zeros((grid.size, m))
    elif family == "gaussian":
        values = (amplitude * np.exp(-(s / width) ** 2))[:, None] * ones
    elif family == "power_tail":
        values = (amplitude * (1.0 + (s / width) ** 2) ** (-g0.n / 4.0))[:, None] * ones
    elif family == "kink":
        values = (amplitude * np.maximum(0.0, 1.0 - s / width))[:, None] * ones
    elif family == "step":
        values = (amplitude * (s < width).astype(float))[:, None] * ones
    elif family == "tt_bump":
        u = amplitude * (s / width) ** 2 * np.exp(-(s / width) ** 2)
        values = _traceless_profile(g0, u)
        if g0.link == "su2":
            values = _divergence_free(g0, grid, values)
    elif family == "bolt_bump":
        if g0.kind != "eguchi_hanson":
            raise ValueError(f"bolt_bump needs a bolt, got {g0.kind}")
        values = _traceless_profile(g0, amplitude * np.exp(-(s / width) ** 2))
    elif family == "kernel":
        mode = scaling_mode(g0, grid).class_values(g0.classes)
        values = amplitude * mode / np.max(np.abs(mode))
    else:
        raise ValueError(f"unknown initial data family '{family}'")
    values = np.array(values, dtype=float)
    values[-1] = 0.0
    return TensorField.from_classes(grid, values, g0.classes)


class _Recorder:
    """Evaluates diagnostic samples of a run."""

    def __init__(self, ctx: RhsContext, coeffs: OperatorCoefficients, kernel: KernelBasis):
        self.ctx = ctx
        self.coeffs = coeffs
        self.kernel = kernel
        self.mass = cell_volumes(ctx.g0, ctx.grid)
        self.distance = grid_distance(ctx.g0, ctx.grid)
        self.previous: Optional[Tuple[float, TensorField]] = None

    def _l2(self, values: np.ndarray) -> float:
        return float(np.sqrt(np.sum(self.mass * values ** 2)))

    def energy(self, perp: TensorField) -> float:
        """(-L perp, perp) in the lumped inner product."""
        g0 = self.ctx.g0
        P = perp.class_values(g0.classes)
        LP = apply_coefficients(self.coeffs, P)
        pointwise = np.sum(g0.multiplicity[None, :] * P * LP, axis=1)
        return float(-np.sum(self.mass[:-1] * pointwise[:-1]))

    def sample(self, state: FlowState) -> DiagnosticSample:
        g0 = self.ctx.g0
        h = state.h
        H = h.class_values(g0.classes)
        norm = h.pointwise_norm()
        grad, hess = covariant_derivative_norms(h, g0)
        perp = h.minus(state.h0)
        perp_grad, _ = covariant_derivative_norms(perp, g0)
        outside = self.distance >= np.sqrt(state.t)
        rhs = direct_rhs(self.ctx, H)
        rhs[-1] = 0.0
        rhs_norm = np.sqrt(rhs ** 2 @ g0.multiplicity)
        dh0dt = 0.0
        if self.previous is not None and state.t > self.previous[0]:
            change = state.h0.minus(self.previous[1])
            dh0dt = self._l2(change.pointwise_norm()) / (state.t - self.previous[0])
        self.previous = (state.t, state.h0)
        return DiagnosticSample(
            t=float(state.t),
            h_l2=self._l2(norm),
            h_linf=float(np.max(norm)),
            h_linf_outside=float(np.max(norm[outside], initial=0.0)),
            grad_l2=self._l2(grad),
            grad_linf=float(np.max(grad)),
            perp_l2=self._l2(perp.pointwise_norm()),
            perp_grad_l2=self._l2(perp_grad),
            energy=self.energy(perp),
            dh0dt_l2=float(dh0dt),
            ric_linf=float(np.max(ricci(h, g0).pointwise_norm())),
            deturck_linf=float(np.max(np.abs(deturck_vector(h, g0)))),
            grad2_linf=float(np.max(hess)),
            dhdt_l2=self._l2(rhs_norm),
        )


def sample_schedule(config: RunConfig) -> List[float]:
    """Geometric sample times t0 * factor^k below t_max, plus t_max."""
    times = []
    t = config.t0
    while t < config.t_max:
        times.append(t)
        t *= config.schedule_factor
    if config.t_max > 0.0:
        times.append(config.t_max)
    return times


def meanvalue_pairs(config: RunConfig) -> List[Tuple[float, float]]:
    """
    (t, r) of every mean-value row.

    With meanvalue_ratio > 0 each radius is read at its own time t = ratio * r^2;
    otherwise every radius is read at min(meanvalue_t, t_max).
    """
    if not config.meanvalue_radii:
        return []
    if config.meanvalue_ratio > 0.0:
        return [(config.meanvalue_ratio * r * r, r) for r in config.meanvalue_radii]
    if config.meanvalue_t <= 0.0:
        return []
    t = min(config.meanvalue_t, config.t_max)
    return [(t, r) for r in config.meanvalue_radii]


def snapshot_schedule(config: RunConfig) -> List[float]:
    """Times stored for the mean-value sweep: MEANVALUE_SLICES slices of each (t - r^2, t]."""
    times = set()
    for t, r in meanvalue_pairs(config):
        if r * r >= t or t > config.t_max:
            continue
        times.update(float(x) for x in np.linspace(t - r * r, t, MEANVALUE_SLICES + 1))
    return sorted(times)


def _is_converged(sample: DiagnosticSample, config: RunConfig) -> bool:
    return sample.dhdt_l2 <= config.tol_conv and sample.ric_linf <= config.tol_conv


def run(
    config: RunConfig,
    kernel: Optional[KernelBasis] = None,
    verbose: bool = False,
) -> Tuple[RunOutcome, Diagnostics]:
    """
    Evolves the configured initial data until convergence, ball exit, blow-up or t_max.

    Args:
        config: Validated run configuration
        kernel: Kernel basis used for the modulation h0 (none: h0 = 0)
        verbose: Print progress lines

    Returns:
        (RunOutcome, Diagnostics)

    Raises:
        ConfigError: If sup |h(0)| >= delta_ball
    """
    g0 = make_background(config.background, config.n, config.gamma_order, config.a)
    grid = build_grid(config.n, config.inner_radius, config.r_max, config.nodes, config.stretch)
    check_grid(g0, grid)
    ctx = rhs_context(g0, grid)
    if kernel is None or not config.track_h0:
        kernel = KernelBasis.empty(g0, grid)
    recorder = _Recorder(ctx, operator_coefficients(g0, grid), kernel)
    diagnostics = Diagnostics()

    h = initial_data(config.initial_data, g0, grid, config.amplitude, config.width)
    state = FlowState(t=0.0, h=h, h0=project_kernel(h, kernel)[0])
    if verbose:
        print(f"flow: {config.background} n={config.n} N={grid.size} data={config.initial_data}")

    def finish(classification: str, reason: str, value: float, postmortem: Optional[FlowState] = None):
        final = state if postmortem is None else postmortem
        ric_inf = float("nan")
        deturck_inf = float("nan")
        if classification != "blew_up":
            ric_inf = float(np.max(ricci(final.h, g0).pointwise_norm()))
            deturck_inf = float(np.max(np.abs(deturck_vector(final.h, g0))))
        if verbose:
            print(f"flow finished: {classification} at t={state.t:.6g} ({reason})")
        outcome = RunOutcome(
            classification=classification,
            state=state,
            reason=reason,
            exit_time=float(state.t),
            exit_value=float(value),
            postmortem=postmortem,
            final_ric_inf=ric_inf,
            final_deturck_inf=deturck_inf,
        )
        return outcome, diagnostics

    try:
        check_positive(h)
        first = recorder.sample(state)
    except (MetricError, FieldError) as e:
        return finish("blew_up", str(e), float("nan"), postmortem=state)
    if first.h_linf >= config.delta_ball:
        raise ConfigError(
            f"initial data starts outside the ball: sup |h(0)| = {first.h_linf:.4g} >= delta_ball = {config.delta_ball:g}",
            key="amplitude",
        )
    diagnostics.samples.append(first)
    diagnostics.div_commutator = divergence_commutator(h, g0)
    if _is_converged(first, config):
        return finish("converged", "dhdt_l2 and ric_linf below tol_conv", first.dhdt_l2)

    samples = set(sample_schedule(config))
    snapshots = set(snapshot_schedule(config))
    for target in sorted(samples | snapshots):
        while state.t < target:
            try:
                dt = cfl_dt(state, g0, config.safety)
                clamped = dt >= target - state.t
                new = step(state, g0, min(dt, target - state.t), ctx=ctx, kernel=kernel if len(kernel) else None)
            except (MetricError, FieldError) as e:
                return finish("blew_up", str(e), float("nan"), postmortem=state)
            state = replace(new, t=target) if clamped else new
            linf = float(np.max(state.h.pointwise_norm()))
            if linf >= config.delta_ball:
                diagnostics.samples.append(recorder.sample(state))
                return finish("exited_ball", "h_linf >= delta_ball", linf)
        if target in snapshots:
            diagnostics.snapshots.append((state.t, state.h.class_values(g0.classes)))
        if target in samples:
            current = recorder.sample(state)
            diagnostics.samples.append(current)
            if verbose:
                print(f"t={current.t:.4e} h_linf={current.h_linf:.4e} ric_linf={current.ric_linf:.4e}")
            if _is_converged(current, config):
                return finish("converged", "dhdt_l2 and ric_linf below tol_conv", current.dhdt_l2)

    pairs = meanvalue_pairs(config)
    if pairs:
        diagnostics.meanvalue = meanvalue_check(diagnostics.snapshots, g0, grid, pairs)
    return finish("reached_t_max", "t >= t_max", state.t)


@dataclass(frozen=True)
class FitResult:
    """Least-squares power law value ~ constant * t^exponent."""

    exponent: float
    constant: float
    residual: float
    flagged: bool
    notes: str = ""


def _power_fit(t: np.ndarray, values: np.ndarray, decades: float) -> FitResult:
    keep = (t > 0.0) & (values > 0.0) & np.isfinite(values)
    t, values = t[keep], values[keep]
    if t.shape[0] < MIN_FIT_SAMPLES:
        return FitResult(float("nan"), float("nan"), float("nan"), True, f"need {MIN_FIT_SAMPLES} samples, got {t.shape[0]}")
    span = np.log10(t[-1] / t[0])
    if span < decades:
        return FitResult(float("nan"), float("nan"), float("nan"), True, f"time range spans {span:.2f} decades")
    x, y = np.log(t), np.log(values)
    slope, intercept = np.polyfit(x, y, 1)
    residual = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return FitResult(float(slope), float(np.exp(intercept)), residual, False)


def _window(diag: Diagnostics, window: Tuple[float, float]) -> np.ndarray:
    t = diag.column("t")
    return (t >= window[0]) & (t <= window[1])


def decay_fit(diag: Diagnostics, window: Tuple[float, float], whole_manifold: bool = True) -> FitResult:
    """
    Decay exponent of the sup norm of h on the sample window.

    With whole_manifold the sup is taken over all nodes; otherwise over the
    complement of the ball of radius sqrt(t).
    """
    mask = _window(diag, window)
    column = "h_linf" if whole_manifold else "h_linf_outside"
    return _power_fit(diag.column("t")[mask], diag.column(column)[mask], DECAY_DECADES)


def smoothing_fit(diag: Diagnostics, window: Tuple[float, float]) -> Dict[int, FitResult]:
    """Slopes of sup |grad^k h| against t for k = 1, 2 (compare with -k/2)."""
    mask = _window(diag, window)
    t = diag.column("t")[mask]
    return {
        1: _power_fit(t, diag.column("grad_linf")[mask], SMOOTHING_DECADES),
        2: _power_fit(t, diag.column("grad2_linf")[mask], SMOOTHING_DECADES),
    }


def spatial_decay_slope(h: TensorField, g0: BackgroundMetric) -> float:
    """log-log slope of |h| against r over the outer third (r_max node excluded)."""
    r = h.grid.nodes
    norm = h.pointwise_norm()
    keep = (r >= r[-1] * 2.0 / 3.0) & (norm > 0.0)
    keep[-1] = False
    if np.count_nonzero(keep) < 3:
        return float("nan")
    return float(np.polyfit(np.log(r[keep]), np.log(norm[keep]), 1)[0])


def meanvalue_check(
    snapshots: Sequence[Tuple[float, np.ndarray]],
    g0: BackgroundMetric,
    grid: RadialGrid,
    pairs: Sequence[Tuple[float, float]],
) -> List[MeanValueRow]:
    """
    Implied constants of the exterior parabolic mean-value inequality.

    For each (t, r): LHS = sup |h|^2 over (s >= r/2) x (t - r^2/4, t], RHS = the
    space-time integral of |h|^2 over (s >= r) x (t - r^2, t], C = LHS r^(n+2) / RHS.
    Pairs with r^2 >= t or with t past the last snapshot are skipped; an
    identically zero integral is reported as vacuous.
    """
    mass = cell_volumes(g0, grid)
    s = grid_distance(g0, grid)
    times = np.array([snap[0] for snap in snapshots])
    last = float(np.max(times, initial=float("-inf")))
    squared = [np.sum(g0.multiplicity[None, :] * values ** 2, axis=1) for _, values in snapshots]
    rows = []
    for t, r in pairs:
        if r * r >= t or t > last + 1e-12:
            note = f"needs r < sqrt(t) = {np.sqrt(t):.4g}" if r * r >= t else f"no snapshots up to t = {t:.4g}"
            rows.append(MeanValueRow(t, r, float("nan"), float("nan"), float("nan"), "skipped", note))
            continue
        inner = (times > t - 0.25 * r * r - 1e-12) & (times <= t + 1e-12)
        lhs = max((float(np.max(squared[k][s >= 0.5 * r], initial=0.0)) for k in np.flatnonzero(inner)), default=0.0)
        window = (times >= t - r * r - 1e-12) & (times <= t + 1e-12)
        slices = np.flatnonzero(window)
        if slices.shape[0] >= 2:
            spatial = np.array([np.sum(mass[s >= r] * squared[k][s >= r]) for k in slices])
            rhs = float(integrate.trapezoid(spatial, times[slices]))
        else:
            rhs = 0.0
        if rhs <= 0.0:
            rows.append(MeanValueRow(t, r, lhs, rhs, float("nan"), "vacuous"))
        else:
            rows.append(MeanValueRow(t, r, lhs, rhs, lhs * r ** (g0.n + 2) / rhs, "ok"))
    return rows


def meanvalue_spread(rows: Sequence[MeanValueRow]) -> Tuple[float, float]:
    """(max C, max C / min C) over the rows with status "ok"; NaN when there are none."""
    constants = np.array([row.implied_constant for row in rows if row.status == "ok"])
    if constants.size == 0:
        return float("nan"), float("nan")
    return float(np.max(constants)), float(np.max(constants) / np.min(constants))


@dataclass(frozen=True)
class MonotonicityReport:
    """Energy inequality, modulation bound and L2 growth findings of a run."""

    max_excursion: float  # Largest d/dt ||h - h0||^2, relative to ||h - h0||^2 at the transient time
    excursion_time: float
    modulation_constant: float  # max ||dh0/dt|| / ||grad(h - h0)||^2
    modulation_spread: float  # max / median of that ratio
    growth_constant: float  # Smallest C >= 0 with ||h(t)|| <= e^{Ct} ||h(0)||
    flagged: bool
    partial: bool
    notes: str = ""


def l2_growth_constant(diag: Diagnostics) -> float:
    """Smallest C >= 0 with ||h(t)||_L2 <= e^{Ct} ||h(0)||_L2 on the samples."""
    t = diag.column("t")
    norms = diag.column("h_l2")
    if t.shape[0] < 2 or norms[0] <= 0.0:
        return 0.0
    later = t > 0.0
    with np.errstate(divide="ignore"):
        rates = np.log(norms[later] / norms[0]) / t[later]
    return float(max(0.0, np.max(rates, initial=0.0)))


def monotonicity_report(
    diag: Diagnostics,
    tol_mono: float,
    tracked: bool = True,
    transient: float = TRANSIENT_TIME,
) -> MonotonicityReport:
    """
    Checks that ||h - h0||^2 does not grow after the transient, measures the
    quadratic modulation bound and fits the L2 growth constant.
    """
    t = diag.column("t")
    perp_sq = diag.column("perp_l2") ** 2
    notes = []
    excursion, when = float("-inf"), float("nan")
    after = np.flatnonzero(t >= transient)
    if after.shape[0] >= 2:
        reference = max(perp_sq[after[0]], np.finfo(float).tiny)
        rates = np.diff(perp_sq[after]) / np.diff(t[after]) / reference
        k = int(np.argmax(rates))
        excursion, when = float(rates[k]), float(t[after][k + 1])
    else:
        notes.append("too few samples after the transient")

    constant, spread = float("nan"), float("nan")
    partial = not tracked
    if tracked:
        grad_sq = diag.column("perp_grad_l2") ** 2
        rate = diag.column("dh0dt_l2")
        usable = (grad_sq > 0.0) & (t > 0.0)
        ratios = rate[usable] / grad_sq[usable]
        positive = ratios[ratios > 0.0]
        if positive.size:
            constant = float(np.max(positive))
            spread = float(constant / np.median(positive))
    else:
        notes.append("h0 tracking disabled: modulation bound not measured")

    flagged = bool(excursion > tol_mono)
    return MonotonicityReport(
        max_excursion=excursion,
        excursion_time=when,
        modulation_constant=constant,
        modulation_spread=spread,
        growth_constant=l2_growth_constant(diag),
        flagged=flagged,
        partial=partial,
        notes="; ".join(notes),
    )
