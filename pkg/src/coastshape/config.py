"""Run configuration: INI-style files with strict keys, defaults mirroring the
half-circle experiment, and a resolved-config echo for reproducibility."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .expressions import Expression


class ConfigError(ValueError):
    pass


@dataclass
class MeshConfig:
    source: str = "half_circle"            # half_circle | interval | msh
    path: str = ""
    radius: float = 2.5
    obstacle_x: float = 2.5
    obstacle_y: float = 0.5
    obstacle_radius: float = 0.25
    target_h: float = 0.25
    gamma3_refine: float = 2.0
    n_cells: int = 200                     # interval source
    length: float = 1.0


@dataclass
class PhysicsConfig:
    g: float = 9.81
    phi1: float = 1.0
    phi2: float = 0.4
    mu_f: float = 1e-2
    h1: float = 1.0
    open_sea_mode: str = "surface"         # surface | depth
    open_sea_as_wall: bool = False
    z_expr: str = "0.5 - 0.25*y"
    eta0_expr: str = "1 + exp(-15*(x-2.5)^2 - 15*(y-1)^2)"
    qx0_expr: str = "0"
    qy0_expr: str = "0"
    detector: bool = True
    detector_s0: float = float("nan")      # nan -> -4*log10(p+1)
    detector_kappa: float = 1.0
    detector_mu_max: float = 1.0


@dataclass
class DiscretizationConfig:
    p_dg: int = 1
    c_ip: float = 20.0
    theta: float = 1.0
    dt: float = 2e-3
    t_end: float = 2.0
    store_stride: int = 1
    newton_rtol: float = 1e-10
    newton_atol: float = 1e-12


@dataclass
class ObjectiveConfig:
    n11: float = 1.0
    n22: float = 1.0
    n33: float = 1.0
    eta_bar: float = 1.0
    qx_bar: float = 0.0
    qy_bar: float = 0.0
    nu2: float = 1e-4
    nu3: float = 1e-4
    nu4: float = 1e-2
    d_min: float = 0.125


@dataclass
class OptimizerConfig:
    rho0: float = 1.5
    shrink: float = 0.5
    max_iterations: int = 25
    tol: float = 1e-6
    max_trials: int = 20
    mu_min: float = 10.0
    mu_max: float = 100.0


@dataclass
class OutputConfig:
    out_dir: str = "out"
    vtk_stride: int = 0                    # 0 disables field dumps
    csv_stride: int = 1


@dataclass
class WellBalanceConfig:
    rest_level: float = 1.5
    dim: int = 1                           # the scenario runs 1 then 2 if dim=0
    n_cells: int = 200
    t_end: float = 0.4
    dt: float = 1e-3
    z_step: float = 0.2
    z_step_at: float = 0.5
    phi_low: float = 0.4
    phi_from: float = 0.3
    phi_to: float = 0.6
    tol: float = 1e-10


@dataclass
class SmoothingConfig:
    alphas: str = "0.06,0.04,0.03,0.02,0.01,0.005,0.001"
    n_cells: int = 1000
    t_end: float = 0.4
    dt: float = 1e-3
    x0: float = 0.038
    x1: float = 0.18
    phi2: float = 0.4


@dataclass
class GradientCheckConfig:
    t_end: float = 0.2
    dt: float = 4e-3
    target_h: float = 0.4
    gamma3_refine: float = 3.0
    amplitude: float = 0.1
    center_y: float = 0.35
    mu_f: float = 0.05
    n_directions: int = 3
    seed: int = 11
    eps_list: str = "1e-3,1e-4"
    tol: float = 2e-2


@dataclass
class RunConfig:
    scenario: str = "forward"
    mesh: MeshConfig = field(default_factory=MeshConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    discretization: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    wellbalance: WellBalanceConfig = field(default_factory=WellBalanceConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    gradient_check: GradientCheckConfig = field(default_factory=GradientCheckConfig)

    def validate(self):
        d = self.discretization
        if d.dt <= 0.0 or d.t_end <= 0.0:
            raise ConfigError("discretization.dt and t_end must be positive")
        n = d.t_end / d.dt
        if abs(n - round(n)) > 1e-12 * max(1.0, n):
            raise ConfigError("discretization.dt must divide t_end")
        if d.p_dg < 0:
            raise ConfigError("discretization.p_dg must be nonnegative")
        if not 0.0 <= d.theta <= 1.0:
            raise ConfigError("discretization.theta must lie in [0, 1]")
        if self.mesh.source not in ("half_circle", "interval", "msh"):
            raise ConfigError(f"unknown mesh.source {self.mesh.source!r}")
        if self.mesh.source == "msh" and not self.mesh.path:
            raise ConfigError("mesh.path required for mesh.source = msh")
        if not 0.0 < self.physics.phi2 <= 1.0 or not 0.0 < self.physics.phi1 <= 1.0:
            raise ConfigError("porosities must lie in (0, 1]")
        for name in ("z_expr", "eta0_expr", "qx0_expr", "qy0_expr"):
            try:
                Expression(getattr(self.physics, name))
            except Exception as exc:
                raise ConfigError(f"physics.{name}: {exc}") from exc
        return self


_SECTIONS = {
    "run": None,
    "mesh": ("mesh", MeshConfig),
    "physics": ("physics", PhysicsConfig),
    "discretization": ("discretization", DiscretizationConfig),
    "objective": ("objective", ObjectiveConfig),
    "optimizer": ("optimizer", OptimizerConfig),
    "output": ("output", OutputConfig),
    "wellbalance": ("wellbalance", WellBalanceConfig),
    "smoothing": ("smoothing", SmoothingConfig),
    "gradient_check": ("gradient_check", GradientCheckConfig),
}


def _coerce(section, key, raw, kind):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from exc


def parse_config(path_or_text, scenario: str | None = None) -> RunConfig:
    """Parse and validate an INI config; unknown sections/keys are rejected."""
    cfg = RunConfig()
    parser = configparser.ConfigParser()
    try:
        if hasattr(path_or_text, "read"):
            parser.read_file(path_or_text)
        elif "\n" in str(path_or_text) or "=" in str(path_or_text):
            parser.read_file(io.StringIO(str(path_or_text)))
        else:
            with open(path_or_text, "r") as fh:
                parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        if section == "run":
            for key, raw in parser.items(section):
                if key == "scenario":
                    cfg.scenario = raw.strip()
                else:
                    raise ConfigError(f"unknown key run.{key}")
            continue
        attr, klass = _SECTIONS[section]
        target = getattr(cfg, attr)
        known = {f.name: f.type for f in fields(klass)}
        types = {f.name: type(getattr(target, f.name)) for f in fields(klass)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _coerce(section, key, raw, types[key]))
    if scenario is not None:
        cfg.scenario = scenario
    return cfg.validate()


def echo_config(cfg: RunConfig) -> str:
    """Render every effective parameter as INI text."""
    out = ["[run]", f"scenario = {cfg.scenario}", ""]
    for section, spec in _SECTIONS.items():
        if spec is None:
            continue
        attr, klass = spec
        target = getattr(cfg, attr)
        out.append(f"[{section}]")
        for f in fields(klass):
            v = getattr(target, f.name)
            if isinstance(v, float):
                out.append(f"{f.name} = {v:.17g}")
            else:
                out.append(f"{f.name} = {v}")
        out.append("")
    return "\n".join(out)
