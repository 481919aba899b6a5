"""TOML run configuration with exhaustive validation."""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .fields import ForcingFields, Grid, RheologyParams
from .thermo import GrowthRate

PARAM_KEYS = (
    "rho_ice", "e", "delta", "p_star", "c_bullet", "kappa", "c_cor", "g",
    "rho_atm", "C_atm", "rho_ocn", "C_ocn", "theta_atm", "theta_ocn",
)

SCENARIOS = ("default", "constant", "zero-velocity", "adversarial")
GROWTH_KINDS = ("none", "constant", "tanh", "table")


@dataclass
class SolverConfig:
    scheme: str = "backward-euler"
    T: float = 0.1
    dt: float = 1e-3
    tol: float = 1e-8
    kmax: int = 40
    max_halvings: int = 6
    p: float = 8.0
    q: float = 8.0
    omega_policy: str = "auto"
    omega: float = 1.0
    det_floor: float = 0.25


@dataclass
class OutputConfig:
    snapshot_stride: int = 10


@dataclass
class RunConfig:
    grid_n: int = 32
    extent: float = 1.0
    params: RheologyParams = field(default_factory=RheologyParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    scenario: str = "default"
    scenario_options: dict = field(default_factory=dict)
    forcing_spec: dict = field(default_factory=dict)
    seed: int = 42

    def grid(self):
        n = self.grid_n
        return Grid(n, n, self.extent / (n - 1), self.extent / (n - 1))

    def growth_rate(self):
        kind = self.forcing_spec.get("growth", "tanh")
        if kind == "none":
            return None
        if kind == "constant":
            return GrowthRate.constant(self.forcing_spec.get("g0", 1e-4))
        if kind == "tanh":
            return GrowthRate.tanh_profile(self.forcing_spec.get("g0", 1e-4))
        if kind == "table":
            return GrowthRate.from_table(
                self.forcing_spec["table_x"], self.forcing_spec["table_y"]
            )
        raise ConfigError([f"unknown growth kind {kind!r}"])

    def forcing(self, grid):
        def vec(key):
            val = self.forcing_spec.get(key)
            if val is None:
                return None
            return [float(val[0]), float(val[1])]

        return ForcingFields(
            grid,
            v_atm=vec("v_atm"),
            v_ocn=vec("v_ocn"),
            grad_h_surf=vec("grad_h_surf"),
            f_gr=self.growth_rate(),
        )

    def canonical(self):
        """Deterministic flat description used for the manifest hash."""
        items = {
            "grid_n": self.grid_n,
            "extent": self.extent,
            "scenario": self.scenario,
            "seed": self.seed,
        }
        for k in PARAM_KEYS:
            items[f"params.{k}"] = getattr(self.params, k)
        for k, v in sorted(vars(self.solver).items()):
            items[f"solver.{k}"] = v
        for k, v in sorted(self.scenario_options.items()):
            items[f"scenario.{k}"] = v
        for k, v in sorted(self.forcing_spec.items()):
            items[f"forcing.{k}"] = v
        items["output.snapshot_stride"] = self.output.snapshot_stride
        return "\n".join(f"{k}={v!r}" for k, v in sorted(items.items()))

    def config_hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def _collect_solver(raw, problems):
    sc = SolverConfig()
    for k, v in raw.items():
        if not hasattr(sc, k):
            problems.append(f"[solver] unknown key {k!r}")
            continue
        setattr(sc, k, type(getattr(sc, k))(v) if not isinstance(v, bool) else v)
    if sc.scheme not in ("backward-euler", "trapezoidal"):
        problems.append(f"[solver] scheme must be backward-euler or trapezoidal, got {sc.scheme!r}")
    if sc.dt <= 0:
        problems.append(f"[solver] violates 'dt > 0': dt = {sc.dt}")
    if sc.T <= 0:
        problems.append(f"[solver] violates 'T > 0': T = {sc.T}")
    if sc.q <= 2:
        problems.append(f"[solver] violates 'q in (2, oo)': q = {sc.q}")
    elif 1.0 / sc.p + 1.0 / sc.q >= 0.5:
        problems.append(
            f"[solver] violates '1/p + 1/q < 1/2': 1/{sc.p} + 1/{sc.q} = {1.0/sc.p + 1.0/sc.q:.4g}"
        )
    if sc.tol <= 0:
        problems.append(f"[solver] tol must be positive, got {sc.tol}")
    if sc.kmax < 1:
        problems.append(f"[solver] kmax must be >= 1, got {sc.kmax}")
    if sc.omega_policy not in ("auto", "fixed"):
        problems.append(f"[solver] omega_policy must be auto or fixed, got {sc.omega_policy!r}")
    if not (0 < sc.det_floor < 1):
        problems.append(f"[solver] det_floor must lie in (0, 1), got {sc.det_floor}")
    return sc


def load_config(data):
    """Validate a parsed TOML mapping; raises ConfigError listing every violation."""
    problems = []
    cfg = RunConfig()

    graw = data.get("grid", {})
    cfg.grid_n = int(graw.get("n", cfg.grid_n))
    cfg.extent = float(graw.get("extent", cfg.extent))
    if cfg.grid_n < 4:
        problems.append(f"[grid] violates 'nx, ny >= 4': n = {cfg.grid_n}")
    if cfg.extent <= 0:
        problems.append(f"[grid] extent must be positive, got {cfg.extent}")

    praw = data.get("params", {})
    kwargs = {}
    for k, v in praw.items():
        if k not in PARAM_KEYS:
            problems.append(f"[params] unknown key {k!r}")
        else:
            kwargs[k] = float(v)
    try:
        cfg.params = RheologyParams(**kwargs)
    except ValueError as exc:
        problems.append(f"[params] {exc}")

    cfg.solver = _collect_solver(data.get("solver", {}), problems)

    sraw = data.get("scenario", {})
    cfg.scenario = sraw.get("name", cfg.scenario)
    if cfg.scenario not in SCENARIOS:
        problems.append(f"[scenario] unknown scenario {cfg.scenario!r}; choose from {SCENARIOS}")
    cfg.scenario_options = {k: v for k, v in sraw.items() if k != "name"}

    fraw = data.get("forcing", {})
    growth = fraw.get("growth", "tanh")
    if growth not in GROWTH_KINDS:
        problems.append(f"[forcing] unknown growth kind {growth!r}; choose from {GROWTH_KINDS}")
    for key in ("v_atm", "v_ocn", "grad_h_surf"):
        if key in fraw and (not isinstance(fraw[key], list) or len(fraw[key]) != 2):
            problems.append(f"[forcing] {key} must be a 2-vector")
    if growth == "table" and ("table_x" not in fraw or "table_y" not in fraw):
        problems.append("[forcing] growth = 'table' needs table_x and table_y")
    cfg.forcing_spec = dict(fraw)

    oraw = data.get("output", {})
    cfg.output = OutputConfig(snapshot_stride=int(oraw.get("snapshot_stride", 10)))
    if cfg.output.snapshot_stride < 1:
        problems.append(f"[output] snapshot_stride must be >= 1")

    cfg.seed = int(data.get("run", {}).get("seed", cfg.seed))

    if problems:
        raise ConfigError(problems)
    return cfg


def parse_config(path):
    """Read and validate a TOML run configuration."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return load_config(data)
