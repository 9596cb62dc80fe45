"""Run configuration: TOML parsing, validation and defaults.

Lengths are parametrized relative to the structure scale L (mm) the way
the reference parameter set is written: gradient and phase-field length
scales in units of L, boundary flexibilities in units of 1/(H_g l_g^2),
the loading rate in units of L/t* and the initial time step in t*.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

try:
    import tomllib
except ModuleNotFoundError:                      # Python 3.10
    import tomli as tomllib

from .materials import MaterialParams
from .slip import ROTATION_CONVENTIONS, RODRIGUES_2D_10GRAIN, RODRIGUES_3D_4GRAIN


class ConfigError(ValueError):
    """Invalid configuration; the message names key and constraint."""


_MATERIAL_KEYS = (
    "bulk_modulus", "shear_modulus", "yield_stress", "iso_hardening",
    "grad_hardening", "relax_time", "drag_stress", "rate_exponent",
    "fracture_energy_ratio", "crit_plastic_strain", "degradation_exponent",
)

_BC_KINDS = ("micro_free", "micro_hard", "micro_flexible")


@dataclass
class SimulationConfig:
    mesh: str = ""
    length_scale: float = 1.0
    preset: str = "2d"                   # "2d" | "3d" length-scale defaults
    end_time: float = 2.0

    material: dict = field(default_factory=dict)
    grad_length_rel: float | None = None     # l_g / L;  default per preset
    pf_length_rel: float | None = None       # l0 / L
    penalty_factor: float = 200.0            # alpha = factor * G0d/l0

    rodrigues: list = field(default_factory=list)
    convention: str = "axis_angle_degrees"

    bc_inner: str = "micro_flexible"
    bc_outer: str = "micro_hard"
    bc_void: str = "micro_free"
    c_gamma0_rel: float = 1.0                # x 1/(H_g l_g^2)
    c_gamma_d_rel: float = 20.0

    shear_rate_rel: float = 0.05             # x L/t*
    load_path: list | None = None            # optional (t, u) waypoints

    dt_initial_rel: float = 0.1              # x t*
    solver: dict = field(default_factory=dict)

    output_dir: str = "out"
    output_every: int = 1
    checkpoint_every: int = 0
    regions: dict = field(default_factory=dict)   # name -> list of grain ids (1-based)

    # -- derived -------------------------------------------------------
    def material_params(self) -> MaterialParams:
        base = MaterialParams()
        try:
            base = replace(base, **{k: float(v) for k, v in self.material.items()})
        except TypeError as exc:
            raise ConfigError(f"material: unknown key ({exc})") from exc
        lg_rel, l0_rel = (0.1333, 0.08) if self.preset == "3d" else (0.0533, 0.02)
        if self.grad_length_rel is not None:
            lg_rel = self.grad_length_rel
        if self.pf_length_rel is not None:
            l0_rel = self.pf_length_rel
        try:
            return replace(
                base,
                grad_length=lg_rel * self.length_scale,
                pf_length=l0_rel * self.length_scale,
                penalty=self.penalty_factor * base.fracture_energy_ratio,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def dt_initial(self) -> float:
        params = self.material_params()
        return self.dt_initial_rel * params.relax_time

    @property
    def shear_rate(self) -> float:
        params = self.material_params()
        return self.shear_rate_rel * self.length_scale / params.relax_time

    def validate(self):
        if self.preset not in ("2d", "3d"):
            raise ConfigError(f"simulation.preset: must be 2d or 3d, got {self.preset!r}")
        if not self.end_time > 0:
            raise ConfigError("simulation.end_time: must be positive")
        if not self.length_scale > 0:
            raise ConfigError("simulation.length_scale: must be positive")
        for key, kind in (
            ("boundaries.inner", self.bc_inner),
            ("boundaries.outer", self.bc_outer),
            ("boundaries.void", self.bc_void),
        ):
            if kind not in _BC_KINDS:
                raise ConfigError(f"{key}: unknown variant {kind!r}")
        if self.c_gamma0_rel <= 0:
            raise ConfigError("boundaries.c_gamma0_rel: must be positive")
        if self.c_gamma_d_rel < 0:
            raise ConfigError("boundaries.c_gamma_d_rel: must be non-negative")
        if self.convention not in ROTATION_CONVENTIONS:
            raise ConfigError(f"grains.convention: unknown {self.convention!r}")
        if self.output_every < 1:
            raise ConfigError("output.every: must be >= 1")
        if self.dt_initial_rel <= 0:
            raise ConfigError("solver.dt_initial_rel: must be positive")
        for name, grains in self.regions.items():
            if not grains:
                raise ConfigError(f"output.regions.{name}: empty grain list")
        self.material_params()      # runs MaterialParams invariants
        return self


def parse_config(text: str) -> SimulationConfig:
    """Parse and validate a TOML configuration document."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"not valid TOML: {exc}") from exc

    cfg = SimulationConfig()
    sim = doc.get("simulation", {})
    cfg.mesh = sim.get("mesh", cfg.mesh)
    cfg.length_scale = float(sim.get("length_scale", cfg.length_scale))
    cfg.preset = sim.get("preset", cfg.preset)
    cfg.end_time = float(sim.get("end_time", cfg.end_time))

    mat = dict(doc.get("material", {}))
    cfg.grad_length_rel = mat.pop("grad_length_rel", None)
    cfg.pf_length_rel = mat.pop("pf_length_rel", None)
    cfg.penalty_factor = float(mat.pop("penalty_factor", cfg.penalty_factor))
    unknown = set(mat) - set(_MATERIAL_KEYS)
    if unknown:
        raise ConfigError(f"material: unknown key(s) {sorted(unknown)}")
    cfg.material = mat

    grains = doc.get("grains", {})
    rod = grains.get("rodrigues", "preset")
    if rod == "preset":
        cfg.rodrigues = list(
            RODRIGUES_3D_4GRAIN if cfg.preset == "3d" else RODRIGUES_2D_10GRAIN
        )
    else:
        cfg.rodrigues = [tuple(float(v) for v in row) for row in rod]
    cfg.convention = grains.get("convention", cfg.convention)

    bnd = doc.get("boundaries", {})
    cfg.bc_inner = bnd.get("inner", cfg.bc_inner)
    cfg.bc_outer = bnd.get("outer", cfg.bc_outer)
    cfg.bc_void = bnd.get("void", cfg.bc_void)
    cfg.c_gamma0_rel = float(bnd.get("c_gamma0_rel", cfg.c_gamma0_rel))
    cfg.c_gamma_d_rel = float(bnd.get("c_gamma_d_rel", cfg.c_gamma_d_rel))

    load = doc.get("loading", {})
    cfg.shear_rate_rel = float(load.get("shear_rate_rel", cfg.shear_rate_rel))
    if "path" in load:
        cfg.load_path = [(float(t), float(u)) for t, u in load["path"]]

    sol = dict(doc.get("solver", {}))
    cfg.dt_initial_rel = float(sol.pop("dt_initial_rel", cfg.dt_initial_rel))
    cfg.solver = sol

    out = doc.get("output", {})
    cfg.output_dir = out.get("directory", cfg.output_dir)
    cfg.output_every = int(out.get("every", cfg.output_every))
    cfg.checkpoint_every = int(out.get("checkpoint_every", cfg.checkpoint_every))
    cfg.regions = {
        name: [int(g) for g in ids]
        for name, ids in out.get("regions", {}).items()
    }
    return cfg.validate()


def serialize_config(cfg: SimulationConfig) -> str:
    """Emit a TOML document that parses back to an equivalent config."""
    out = io.StringIO()
    w = out.write
    w("[simulation]\n")
    w(f'mesh = "{cfg.mesh}"\n')
    w(f"length_scale = {cfg.length_scale!r}\n")
    w(f'preset = "{cfg.preset}"\n')
    w(f"end_time = {cfg.end_time!r}\n\n")
    w("[material]\n")
    for k, v in cfg.material.items():
        w(f"{k} = {float(v)!r}\n")
    if cfg.grad_length_rel is not None:
        w(f"grad_length_rel = {cfg.grad_length_rel!r}\n")
    if cfg.pf_length_rel is not None:
        w(f"pf_length_rel = {cfg.pf_length_rel!r}\n")
    w(f"penalty_factor = {cfg.penalty_factor!r}\n\n")
    w("[grains]\n")
    rows = ", ".join(
        "[" + ", ".join(repr(float(v)) for v in row) + "]" for row in cfg.rodrigues
    )
    w(f"rodrigues = [{rows}]\n")
    w(f'convention = "{cfg.convention}"\n\n')
    w("[boundaries]\n")
    w(f'inner = "{cfg.bc_inner}"\nouter = "{cfg.bc_outer}"\nvoid = "{cfg.bc_void}"\n')
    w(f"c_gamma0_rel = {cfg.c_gamma0_rel!r}\nc_gamma_d_rel = {cfg.c_gamma_d_rel!r}\n\n")
    w("[loading]\n")
    w(f"shear_rate_rel = {cfg.shear_rate_rel!r}\n")
    if cfg.load_path:
        pts = ", ".join(f"[{t!r}, {u!r}]" for t, u in cfg.load_path)
        w(f"path = [{pts}]\n")
    w("\n[solver]\n")
    w(f"dt_initial_rel = {cfg.dt_initial_rel!r}\n")
    for k, v in cfg.solver.items():
        w(f"{k} = {v!r}\n")
    w("\n[output]\n")
    w(f'directory = "{cfg.output_dir}"\n')
    w(f"every = {cfg.output_every}\n")
    w(f"checkpoint_every = {cfg.checkpoint_every}\n")
    if cfg.regions:
        w("\n[output.regions]\n")
        for name, ids in cfg.regions.items():
            w(f"{name} = [{', '.join(str(i) for i in ids)}]\n")
    return out.getvalue()
