# src/ale_flow_lab/config.py
"""
Run configuration: the `key = value` grammar, validation and scenario presets.
"""
import hashlib
from dataclasses import dataclass, fields, replace
from typing import Callable, Dict, Optional, Tuple

from ale_flow_lab.geometry import KINDS, build_grid, check_grid, make_background
from ale_flow_lab.utils import BackgroundError, ConfigError, GridError

# --- Configuration ---
CONE_DEFAULT_R_MIN = 1.0
INITIAL_DATA_FAMILIES = ("zero", "gaussian", "power_tail", "kink", "step", "tt_bump", "bolt_bump", "kernel")
BOLT_FAMILIES = ("bolt_bump", "kernel")
AUTO = "auto"
DEFAULT_SAFETY = 0.25
SCHEDULE_FACTOR = 1.3


@dataclass(frozen=True)
class RunConfig:
    """
    Every knob of a run. Omitted keys take these defaults.

    Grid: r_min = None picks the inner radius of the background (origin, bolt,
    or CONE_DEFAULT_R_MIN for cones). Times are in units of length^2.
    """

    background: str = "euclidean"
    n: int = 4
    gamma_order: int = 1
    a: float = 1.0
    r_min: Optional[float] = None
    r_max: float = 20.0
    nodes: int = 201
    stretch: float = 1.0
    initial_data: str = "gaussian"
    amplitude: float = 1e-2
    width: float = 2.0
    delta_ball: float = 0.1
    t_max: float = 10.0
    tol_conv: float = 1e-8
    tol_mono: float = 1e-8
    safety: float = DEFAULT_SAFETY
    t0: float = 1e-2
    schedule_factor: float = SCHEDULE_FACTOR
    track_h0: bool = True
    spectral_preflight: bool = True
    eigenpairs: int = 6
    tol_kern: float = 1e-3
    hardy: bool = False
    decay_window: Tuple[float, float] = (1.0, 1000.0)
    smoothing_window: Tuple[float, float] = (1e-4, 1e-2)
    meanvalue_t: float = 0.0
    meanvalue_radii: Tuple[float, ...] = ()
    meanvalue_ratio: float = 0.0
    truncation_check: bool = False
    scenario: str = "custom"
    output_dir: str = "results"

    @property
    def inner_radius(self) -> float:
        """r_min with the background default filled in."""
        if self.r_min is not None:
            return self.r_min
        if self.background == "eguchi_hanson":
            return self.a
        if self.background == "cone":
            return CONE_DEFAULT_R_MIN
        return 0.0


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true or false, got '{text}'")


def _parse_int(text: str) -> int:
    return int(text)


def _parse_optional_float(text: str) -> Optional[float]:
    return None if text.lower() in (AUTO, "none") else float(text)


def _parse_floats(text: str) -> Tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


def _parse_pair(text: str) -> Tuple[float, float]:
    values = _parse_floats(text)
    if len(values) != 2:
        raise ValueError(f"expected two comma-separated numbers, got '{text}'")
    return values


PARSERS: Dict[str, Callable[[str], object]] = {
    "background": str,
    "n": _parse_int,
    "gamma_order": _parse_int,
    "a": float,
    "r_min": _parse_optional_float,
    "r_max": float,
    "nodes": _parse_int,
    "stretch": float,
    "initial_data": str,
    "amplitude": float,
    "width": float,
    "delta_ball": float,
    "t_max": float,
    "tol_conv": float,
    "tol_mono": float,
    "safety": float,
    "t0": float,
    "schedule_factor": float,
    "track_h0": _parse_bool,
    "spectral_preflight": _parse_bool,
    "eigenpairs": _parse_int,
    "tol_kern": float,
    "hardy": _parse_bool,
    "decay_window": _parse_pair,
    "smoothing_window": _parse_pair,
    "meanvalue_t": float,
    "meanvalue_radii": _parse_floats,
    "meanvalue_ratio": float,
    "truncation_check": _parse_bool,
    "scenario": str,
    "output_dir": str,
}


def _render_value(value: object) -> str:
    if value is None:
        return AUTO
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def render_config(config: RunConfig) -> str:
    """Writes a config back as `key = value` lines in field order."""
    return "".join(f"{f.name} = {_render_value(getattr(config, f.name))}\n" for f in fields(config))


def config_hash(config: RunConfig) -> str:
    """sha256 of the rendered config."""
    return hashlib.sha256(render_config(config).encode("utf-8")).hexdigest()


def validate_config(config: RunConfig, lines: Optional[Dict[str, int]] = None) -> RunConfig:
    """
    Checks every precondition the run will rely on before any compute.

    Args:
        config: Config to check
        lines: Line number of each key in the source text, for error messages

    Returns:
        The config unchanged

    Raises:
        ConfigError: Naming the offending key
    """
    lines = lines or {}

    def fail(key: str, message: str):
        raise ConfigError(message, key=key, line=lines.get(key))

    if config.background not in KINDS:
        fail("background", f"unknown background '{config.background}', expected one of {', '.join(KINDS)}")
    if config.initial_data not in INITIAL_DATA_FAMILIES:
        fail("initial_data", f"unknown family '{config.initial_data}', expected one of {', '.join(INITIAL_DATA_FAMILIES)}")
    if config.n < 3:
        fail("n", f"dimension must be >= 3, got {config.n}")
    if not 0.0 < config.safety <= 1.0:
        fail("safety", f"safety must lie in (0, 1], got {config.safety}")
    if not config.delta_ball > 0.0:
        fail("delta_ball", f"delta_ball must be positive, got {config.delta_ball}")
    if not config.t_max >= 0.0:
        fail("t_max", f"t_max must be >= 0, got {config.t_max}")
    if not config.t0 > 0.0:
        fail("t0", f"t0 must be positive, got {config.t0}")
    if not config.schedule_factor > 1.0:
        fail("schedule_factor", f"schedule_factor must exceed 1, got {config.schedule_factor}")
    if not config.width > 0.0:
        fail("width", f"width must be positive, got {config.width}")
    if config.eigenpairs < 1:
        fail("eigenpairs", f"eigenpairs must be >= 1, got {config.eigenpairs}")
    for key in ("decay_window", "smoothing_window"):
        lo, hi = getattr(config, key)
        if not 0.0 < lo < hi:
            fail(key, f"window must satisfy 0 < lo < hi, got ({lo}, {hi})")
    if any(r <= 0.0 for r in config.meanvalue_radii):
        fail("meanvalue_radii", "radii must be positive")
    if config.meanvalue_ratio != 0.0 and not config.meanvalue_ratio > 1.0:
        fail("meanvalue_ratio", f"meanvalue_ratio must be 0 (fixed time) or exceed 1, got {config.meanvalue_ratio}")

    try:
        g0 = make_background(config.background, config.n, config.gamma_order, config.a)
    except BackgroundError as e:
        key = "a" if config.background == "eguchi_hanson" and config.n == 4 else "n"
        if config.background == "cone" and config.n >= 3:
            key = "gamma_order"
        fail(key, str(e))
    try:
        grid = build_grid(config.n, config.inner_radius, config.r_max, config.nodes, config.stretch)
    except GridError as e:
        fail("nodes" if "nodes" in str(e) else "r_max", str(e))
    try:
        check_grid(g0, grid)
    except BackgroundError as e:
        fail("r_min", str(e))
    if config.initial_data in BOLT_FAMILIES and config.background != "eguchi_hanson":
        fail("initial_data", f"{config.initial_data} initial data needs the eguchi_hanson background")
    return config


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """
    Parses `key = value` lines; `#` starts a comment.

    Args:
        text: Config text
        base: Defaults for omitted keys (RunConfig() when not given)

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: On unknown or repeated keys, bad values or violated preconditions
    """
    values: Dict[str, object] = {}
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=number)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in PARSERS:
            raise ConfigError("unknown key", key=key, line=number)
        if key in values:
            raise ConfigError("key given twice", key=key, line=number)
        try:
            values[key] = PARSERS[key](value)
        except ValueError as e:
            raise ConfigError(f"cannot parse '{value}': {e}", key=key, line=number)
        lines[key] = number
    config = replace(base or RunConfig(), **values)
    return validate_config(config, lines)


SCENARIOS: Dict[str, Dict[str, object]] = {
    "flat-decay-n4": dict(
        background="euclidean", n=4, r_max=400.0, nodes=401, initial_data="power_tail",
        amplitude=1e-2, width=1.0, t_max=1000.0, t0=1.0, decay_window=(8.0, 1000.0),
        spectral_preflight=False, track_h0=False,
    ),
    "flat-decay-n3": dict(
        background="euclidean", n=3, r_max=400.0, nodes=401, initial_data="power_tail",
        amplitude=1e-2, width=1.0, t_max=1000.0, t0=1.0, decay_window=(8.0, 1000.0),
        spectral_preflight=False, track_h0=False,
    ),
    "cone-orbifold": dict(
        background="cone", n=4, gamma_order=2, r_min=1.0, r_max=60.0, nodes=237,
        initial_data="gaussian", amplitude=1e-2, width=4.0, t_max=100.0, decay_window=(1.0, 100.0),
    ),
    "eh-stability": dict(
        background="eguchi_hanson", a=1.0, r_max=20.0, nodes=400, stretch=1.01,
        initial_data="zero", t_max=0.0, eigenpairs=8, hardy=True,
    ),
    "eh-flow": dict(
        background="eguchi_hanson", a=1.0, r_max=20.0, nodes=240, stretch=1.01,
        initial_data="tt_bump", amplitude=1e-2, width=2.0, t_max=30.0, decay_window=(1.0, 30.0),
        truncation_check=True,
    ),
    "smoothing-kink": dict(
        background="euclidean", n=4, r_max=4.0, nodes=801, initial_data="step",
        amplitude=1e-2, width=1.0, t_max=1e-2, t0=1e-5, smoothing_window=(1e-4, 1e-2),
        spectral_preflight=False, track_h0=False,
    ),
    "meanvalue-sweep": dict(
        background="euclidean", n=4, r_max=160.0, nodes=321, initial_data="gaussian",
        amplitude=1e-2, width=2.0, t_max=256.0, meanvalue_ratio=4.0, meanvalue_radii=(2.0, 4.0, 8.0),
        spectral_preflight=False, track_h0=False,
    ),
    "eh-exit": dict(
        background="eguchi_hanson", a=1.0, r_max=20.0, nodes=200, stretch=1.01,
        initial_data="bolt_bump", amplitude=0.03, width=4.0, delta_ball=0.1, t_max=10.0,
        spectral_preflight=False, track_h0=False,
    ),
}


def scenario_config(name: str, output_dir: Optional[str] = None) -> RunConfig:
    """
    Builds the config of a named scenario.

    Raises:
        ConfigError: If the scenario is unknown
    """
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario '{name}', expected one of {', '.join(sorted(SCENARIOS))}", key="scenario")
    overrides = dict(SCENARIOS[name], scenario=name)
    if output_dir is not None:
        overrides["output_dir"] = output_dir
    return validate_config(replace(RunConfig(), **overrides))
