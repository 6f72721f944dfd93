# src/ale_flow_lab/cli.py
"""
Scenario orchestration and report emission, plus the `ale-flow-lab` command.
"""
import argparse
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from ale_flow_lab import __version__
from ale_flow_lab.config import (
    SCENARIOS,
    RunConfig,
    config_hash,
    parse_config,
    render_config,
    scenario_config,
)
from ale_flow_lab.flow import (
    DIAGNOSTIC_COLUMNS,
    Diagnostics,
    KernelBasis,
    RunOutcome,
    decay_fit,
    meanvalue_check,
    meanvalue_pairs,
    meanvalue_spread,
    monotonicity_report,
    run,
    smoothing_fit,
    spatial_decay_slope,
    weighted_inner,
)
from ale_flow_lab.geometry import (
    TensorField,
    ale_order_fit,
    avr_estimate,
    build_grid,
    cell_volumes,
    check_grid,
    make_background,
)
from ale_flow_lab.operators import ricci, scaling_mode
from ale_flow_lab.spectral import (
    SpectralResult,
    assemble_operator,
    hardy_constant,
    kernel_basis,
    lowest_eigenpairs,
    strong_positivity_alpha,
)
from ale_flow_lab.utils import (
    ConfigError,
    LabError,
    format_float,
    read_text,
    render_csv,
    setup_output_directory,
    write_text_atomic,
)

# --- Types ---
Summary = Dict[str, str]
ReportPaths = Dict[str, str]

# --- Configuration ---
HARDY_R_MAX = 1e6
HARDY_NODES = 600
HARDY_STRETCH = 1.05
EXIT_OK = 0
EXIT_BLEW_UP = 1
EXIT_CONFIG = 2

SPECTRUM_COLUMNS = ("index", "eigenvalue", "residual", "kernel", "trace_residual", "div_residual", "decay_slope")
MEANVALUE_COLUMNS = ("t", "r", "lhs", "rhs", "implied_constant", "status")


@dataclass
class Report:
    """Summary keys, the data behind the CSV files and where they were written."""

    config: RunConfig
    summary: Summary = field(default_factory=dict)
    outcome: Optional[RunOutcome] = None
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    spectrum: Optional[SpectralResult] = None
    paths: ReportPaths = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        if self.outcome is not None and self.outcome.classification == "blew_up":
            return EXIT_BLEW_UP
        return EXIT_OK

    def put(self, key: str, value: object) -> None:
        if isinstance(value, (float, np.floating)):
            self.summary[key] = format_float(value)
        elif isinstance(value, (bool, np.bool_)):
            self.summary[key] = "true" if value else "false"
        elif value is None:
            self.summary[key] = "none"
        else:
            self.summary[key] = str(value)


class ScenarioRunner:
    """Runs one configured experiment: spectral preflight, flow, fits and report."""

    def __init__(self, config: RunConfig, verbose: bool = False):
        """
        Initialize the runner.

        Args:
            config: Validated run configuration
            verbose: Print phase banners and progress lines
        """
        self.config = config
        self.verbose = verbose
        self.g0 = make_background(config.background, config.n, config.gamma_order, config.a)
        self.grid = build_grid(config.n, config.inner_radius, config.r_max, config.nodes, config.stretch)
        check_grid(self.g0, self.grid)
        self.report = Report(config=config)

    def _log(self, message: str) -> None:
        if self.verbose:
            print(message)

    def run(self) -> Report:
        """
        Executes every phase and writes the report, also when a phase fails.

        Returns:
            The emitted Report

        Raises:
            LabError: From any phase, after the partial report is written
        """
        self._log(f"--- ale flow lab: {self.config.scenario} ---")
        self._phase_0_header()
        try:
            kernel = self._phase_1_spectral_preflight()
            self._phase_2_hardy()
            self._phase_3_flow(kernel)
            self._phase_4_fits()
            self._phase_5_truncation_check(kernel)
        except LabError as e:
            self._log("\n--- run stopped by an error ---")
            self.report.put("error", f"{type(e).__name__}: {e}")
            emit_report(self.report, self.config.output_dir)
            raise
        emit_report(self.report, self.config.output_dir)
        self._log(f"report written to {self.config.output_dir}")
        return self.report

    def _phase_0_header(self) -> None:
        report = self.report
        report.put("version", __version__)
        report.put("config_hash", config_hash(self.config))
        report.put("scenario", self.config.scenario)
        report.put("background", self.config.background)
        report.put("n", self.config.n)
        report.put("nodes", self.grid.size)
        avr = avr_estimate(self.g0, self.grid)
        report.put("avr", avr.value)
        report.put("avr_flagged", avr.flagged)
        report.put("ale_order", ale_order_fit(self.g0, self.grid))
        background_ric = ricci(TensorField.zeros(self.grid), self.g0).pointwise_norm()
        report.put("background_ric_max", float(np.max(background_ric)))

    def _phase_1_spectral_preflight(self) -> Optional[KernelBasis]:
        if not self.config.spectral_preflight:
            return None
        self._log("\n--- phase 1: spectral preflight ---")
        op = assemble_operator(self.g0, self.grid)
        result = lowest_eigenpairs(op, count=min(self.config.eigenpairs, op.size))
        result = kernel_basis(result, op, self.config.tol_kern)
        alpha = strong_positivity_alpha(op, result) if result.kernel_status == "resolved" else None
        result = replace(result, alpha=alpha)
        self.report.spectrum = result

        report = self.report
        report.put("lambda_min", float(result.eigenvalues[0]))
        report.put("kernel_status", result.kernel_status)
        report.put("kernel_dim", result.kernel_dimension)
        report.put("kernel_gap_ratio", result.gap_ratio)
        report.put("alpha", alpha)
        report.put("stable", bool(result.eigenvalues[0] >= -self.config.tol_kern))
        self._log(f"spectral preflight: lambda_min={result.eigenvalues[0]:.6e} kernel={result.kernel_status}")

        basis = KernelBasis.from_spectrum(op, result)
        if self.g0.kind == "eguchi_hanson":
            mode = scaling_mode(self.g0, self.grid)
            mass = cell_volumes(self.g0, self.grid)
            mode = mode.scaled(1.0 / np.sqrt(weighted_inner(mode, mode, mass)))
            overlap = float(np.sqrt(sum(weighted_inner(mode, e, mass) ** 2 for e in basis.fields)))
            report.put("kernel_scaling_overlap", overlap)
        return basis if result.kernel_status == "resolved" else None

    def _phase_2_hardy(self) -> None:
        if not self.config.hardy:
            return
        self._log("\n--- phase 2: hardy constant ---")
        grid = build_grid(self.config.n, self.config.inner_radius, HARDY_R_MAX, HARDY_NODES, HARDY_STRETCH)
        estimate = hardy_constant(self.g0, grid)
        self.report.put("hardy_constant", estimate.constant)
        self.report.put("hardy_residual", estimate.residual)
        self._log(f"hardy: C={estimate.constant:.6f} (residual {estimate.residual:.2e})")

    def _phase_3_flow(self, kernel: Optional[KernelBasis]) -> None:
        self._log("\n--- phase 3: flow ---")
        outcome, diagnostics = run(self.config, kernel=kernel, verbose=self.verbose)
        self.report.outcome = outcome
        self.report.diagnostics = diagnostics
        report = self.report
        report.put("outcome", outcome.classification)
        report.put("exit_reason", outcome.reason)
        report.put("exit_time", outcome.exit_time)
        report.put("exit_value", outcome.exit_value)
        report.put("steps", outcome.state.step_count)
        report.put("final_ric_inf", outcome.final_ric_inf)
        report.put("final_deturck_inf", outcome.final_deturck_inf)
        report.put("final_h_linf", float(np.max(outcome.state.h.pointwise_norm())))
        report.put("spatial_decay_slope", spatial_decay_slope(outcome.state.h, self.g0))
        report.put("div_commutator_residual", diagnostics.div_commutator)

    def _phase_4_fits(self) -> None:
        diagnostics = self.report.diagnostics
        if len(diagnostics.samples) < 2:
            return
        self._log("\n--- phase 4: fits ---")
        report = self.report
        config = self.config
        for key, whole in (("decay_exponent", True), ("decay_exponent_outside", False)):
            fit = decay_fit(diagnostics, config.decay_window, whole_manifold=whole)
            report.put(key, fit.exponent)
            report.put(f"{key}_residual", fit.residual)
            report.put(f"{key}_flagged", fit.flagged)
            if fit.notes:
                report.put(f"{key}_notes", fit.notes)
        for k, fit in smoothing_fit(diagnostics, config.smoothing_window).items():
            report.put(f"smoothing_slope_k{k}", fit.exponent)
            report.put(f"smoothing_slope_k{k}_flagged", fit.flagged)

        mono = monotonicity_report(diagnostics, config.tol_mono, tracked=config.track_h0)
        report.put("monotonicity_max_excursion", mono.max_excursion)
        report.put("monotonicity_flagged", mono.flagged)
        report.put("monotonicity_partial", mono.partial)
        report.put("modulation_constant", mono.modulation_constant)
        report.put("modulation_spread", mono.modulation_spread)
        report.put("l2_growth_constant", mono.growth_constant)

        if not diagnostics.meanvalue and diagnostics.snapshots:
            diagnostics.meanvalue = meanvalue_check(diagnostics.snapshots, self.g0, self.grid, meanvalue_pairs(config))
        for row in diagnostics.meanvalue:
            if row.status == "skipped":
                self._log(f"meanvalue: skipping r={row.r:g} at t={row.t:g} ({row.note})")
            report.put(f"meanvalue_constant_r{row.r:g}", row.implied_constant)
        if diagnostics.meanvalue:
            largest, spread = meanvalue_spread(diagnostics.meanvalue)
            report.put("meanvalue_constant_max", largest)
            report.put("meanvalue_constant_spread", spread)

    def _phase_5_truncation_check(self, kernel: Optional[KernelBasis]) -> None:
        if not self.config.truncation_check or self.report.outcome is None:
            return
        self._log("\n--- phase 5: truncation check ---")
        wide = replace(self.config, r_max=2.0 * self.config.r_max, nodes=2 * self.config.nodes - 1)
        outcome, _ = run(wide, kernel=None, verbose=False)
        base = self.report.outcome.state.h.pointwise_norm()
        reference = float(np.max(base))
        wide_value = float(np.max(outcome.state.h.pointwise_norm()))
        change = abs(wide_value - reference) / max(reference, np.finfo(float).tiny)
        self.report.put("truncation_change", change)
        self.report.put("truncation_outcome", outcome.classification)


def run_scenario(config: RunConfig, verbose: bool = False) -> Report:
    """Runs a validated config end to end and writes its report to config.output_dir."""
    return ScenarioRunner(config, verbose=verbose).run()


def _spectrum_rows(result: Optional[SpectralResult]) -> List[Sequence[object]]:
    if result is None:
        return []
    near = result.kernel.shape[1] if result.kernel.ndim == 2 else 0
    rows = []
    for j, value in enumerate(result.eigenvalues):
        in_kernel = j < near
        rows.append(
            (
                j,
                float(value),
                float(result.residuals[j]),
                "true" if in_kernel else "false",
                float(result.trace_residuals[j]) if in_kernel else float("nan"),
                float(result.div_residuals[j]) if in_kernel else float("nan"),
                float(result.decay_slopes[j]) if in_kernel else float("nan"),
            )
        )
    return rows


def emit_report(report: Report, out_dir: str) -> ReportPaths:
    """
    Writes summary.txt, config.txt and the CSV files of a report.

    Every file is written next to its destination and renamed into place.

    Args:
        report: Report to write
        out_dir: Output directory

    Returns:
        Paths keyed by file role

    Raises:
        ReportError: If a file cannot be written
    """
    setup_output_directory(out_dir)
    paths: ReportPaths = {}

    def save(role: str, name: str, text: str) -> None:
        paths[role] = write_text_atomic(text, os.path.join(out_dir, name))

    diagnostics = report.diagnostics
    save("config", "config.txt", render_config(report.config))
    save("diagnostics", "diagnostics.csv", render_csv(DIAGNOSTIC_COLUMNS, diagnostics.rows()))
    save("spectrum", "spectrum.csv", render_csv(SPECTRUM_COLUMNS, _spectrum_rows(report.spectrum)))
    meanvalue_rows = [
        (row.t, row.r, row.lhs, row.rhs, row.implied_constant, row.status) for row in diagnostics.meanvalue
    ]
    save("meanvalue", "meanvalue.csv", render_csv(MEANVALUE_COLUMNS, meanvalue_rows))

    outcome = report.outcome
    if outcome is not None and outcome.postmortem is not None:
        state = outcome.postmortem
        values = state.h.class_values(_classes(report.config))
        header = ["r"] + [f"h_{j}" for j in range(values.shape[1])]
        rows = [(float(r), *map(float, v)) for r, v in zip(state.h.grid.nodes, values)]
        save("postmortem", "postmortem.csv", render_csv(header, rows))
        report.put("postmortem_time", state.t)
        report.put("postmortem_path", paths["postmortem"])

    for role in ("diagnostics", "spectrum", "meanvalue"):
        report.put(f"{role}_csv", os.path.basename(paths[role]))
    summary = "".join(f"{key} = {value}\n" for key, value in report.summary.items())
    save("summary", "summary.txt", summary)
    report.paths = paths
    return paths


def _classes(config: RunConfig):
    return make_background(config.background, config.n, config.gamma_order, config.a).classes


def _add_out(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", default=None, help="Output directory (overrides the config).")


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="ale-flow-lab",
        description="Ricci-DeTurck flow and spectral stability experiments on ALE backgrounds.",
    )
    parser.add_argument("--quiet", action="store_true", help="Suppress progress output.")
    commands = parser.add_subparsers(dest="command", required=True)
    run_parser = commands.add_parser("run", help="Run an experiment from a key = value config file.")
    run_parser.add_argument("--config", required=True, help="Path to the config file.")
    _add_out(run_parser)
    scenario_parser = commands.add_parser("scenario", help="Run a named preset experiment.")
    scenario_parser.add_argument("name", help="Scenario name (see list-scenarios).")
    _add_out(scenario_parser)
    commands.add_parser("list-scenarios", help="Print the preset experiment names.")
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    if args.command == "list-scenarios":
        for name in sorted(SCENARIOS):
            print(name)
        return EXIT_OK

    try:
        if args.command == "run":
            config = parse_config(read_text(args.config))
            if args.out is not None:
                config = replace(config, output_dir=args.out)
        else:
            config = scenario_config(args.name, output_dir=args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        report = run_scenario(config, verbose=not args.quiet)
    except LabError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if report.exit_code == EXIT_BLEW_UP:
        print(f"run blew up; post-mortem at {report.paths.get('postmortem')}", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
