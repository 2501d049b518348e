"""Run configuration: the SimConfig dataclass and its INI-style file format.

    [physics]         nu, lid_velocity, length, forcing_x/y/z
    [numerics]        nx, ny, nz, dt, t_end, spin_up, cg_tol, cg_maxiter,
                      pressure_solver, threads, energy_slack, bound_factor
    [ensemble]        members, perturbation_amplitude, perturbation_modes, seed
    [eddy_viscosity]  mu, mu_beta, tau, re_eff_estimate, cap_length
    [output]          diag_every, checkpoint_every

Every key is optional; omitted keys take the dataclass defaults below.
``tau`` and ``re_eff_estimate`` accept the word ``auto`` (tau = dt,
Re_eff estimate = Re).
"""
from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, fields, replace

SECTIONS: dict[str, tuple[str, ...]] = {
    "physics": ("nu", "lid_velocity", "length", "forcing_x", "forcing_y", "forcing_z"),
    "numerics": (
        "nx", "ny", "nz", "dt", "t_end", "spin_up", "cg_tol", "cg_maxiter",
        "pressure_solver", "threads", "energy_slack", "bound_factor",
    ),
    "ensemble": ("members", "perturbation_amplitude", "perturbation_modes", "seed"),
    "eddy_viscosity": ("mu", "mu_beta", "tau", "re_eff_estimate", "cap_length"),
    "output": ("diag_every", "checkpoint_every"),
}

# the final dissipation theorem needs mu_beta <= MU_BETA_THRESHOLD / Re
MU_BETA_THRESHOLD = 0.27064


class ConfigError(ValueError):
    def __init__(self, key: str, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key}: {message}")
        self.key = key
        self.line = line


@dataclass(frozen=True)
class SimConfig:
    # physics
    nu: float = 0.002
    lid_velocity: float = 1.0
    length: float = 1.0
    forcing_x: float = 0.0
    forcing_y: float = 0.0
    forcing_z: float = 0.0
    # numerics
    nx: int = 32
    ny: int = 32
    nz: int = 64
    dt: float = 0.0025
    t_end: float = 5.0
    spin_up: float = 1.0
    cg_tol: float = 1e-10
    cg_maxiter: int = 500
    pressure_solver: str = "fft"
    threads: int = 1
    energy_slack: float = 1.0
    bound_factor: float = 10.0
    # ensemble
    members: int = 8
    perturbation_amplitude: float = 0.05
    perturbation_modes: int = 4
    seed: int = 0
    # eddy viscosity
    mu: float = 0.5
    mu_beta: float = 5.0e-4
    tau: float | None = None
    re_eff_estimate: float | None = None
    cap_length: str = "off"
    # output
    diag_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    # derived scales
    @property
    def reynolds(self) -> float:
        return self.lid_velocity * self.length / self.nu

    @property
    def turnover_time(self) -> float:
        return self.length / self.lid_velocity if self.lid_velocity > 0 else math.inf

    @property
    def tau_value(self) -> float:
        return self.dt if self.tau is None else self.tau

    @property
    def beta_prior(self) -> float:
        """Slab fraction for mu_beta, frozen from the a-priori Re_eff estimate."""
        re_eff = self.reynolds if self.re_eff_estimate is None else self.re_eff_estimate
        return 1.0 if re_eff <= 0.125 else 0.125 / re_eff

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def forcing(self) -> tuple[float, float, float]:
        return (self.forcing_x, self.forcing_y, self.forcing_z)

    @property
    def mu_beta_hypothesis(self) -> bool:
        """Whether the closed-bound hypothesis mu_beta <= 0.27064/Re holds."""
        return self.reynolds == 0 or self.mu_beta <= MU_BETA_THRESHOLD / self.reynolds

    def validate(self) -> None:
        positive = ("nu", "length", "dt", "mu", "mu_beta", "cg_tol", "energy_slack", "bound_factor")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError(key, f"must be positive, got {getattr(self, key)}")
        for key in ("nx", "ny", "nz"):
            if getattr(self, key) < 4:
                raise ConfigError(key, f"need at least 4 cells, got {getattr(self, key)}")
        for key in ("members", "cg_maxiter", "threads", "perturbation_modes", "diag_every"):
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be >= 1, got {getattr(self, key)}")
        if self.lid_velocity < 0:
            raise ConfigError("lid_velocity", "must be non-negative")
        if self.perturbation_amplitude < 0:
            raise ConfigError("perturbation_amplitude", "must be non-negative")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", "must be non-negative")
        if not self.spin_up >= 0:
            raise ConfigError("spin_up", "must be non-negative")
        if not self.t_end >= self.spin_up:
            raise ConfigError("t_end", f"must not precede spin_up = {self.spin_up}")
        if abs(self.n_steps * self.dt - self.t_end) > 1e-9 * max(1.0, self.t_end):
            raise ConfigError("t_end", f"must be a whole number of steps of dt = {self.dt}")
        if self.tau is not None:
            if not self.tau > 0:
                raise ConfigError("tau", "must be positive")
            if self.tau > self.turnover_time:
                raise ConfigError("tau", f"tau exceeds T* = L/U = {self.turnover_time:g} (need tau <= T*)")
        if self.re_eff_estimate is not None and not self.re_eff_estimate > 0:
            raise ConfigError("re_eff_estimate", "must be positive")
        if self.pressure_solver not in ("fft", "cg"):
            raise ConfigError("pressure_solver", "must be 'fft' or 'cg'")
        if self.cap_length not in ("off", "box", "wall"):
            raise ConfigError("cap_length", "must be 'off', 'box' or 'wall'")
        h = self.length / max(self.nx, self.ny, self.nz)
        cfl = self.lid_velocity * self.dt / h
        if cfl > 0.5:
            raise ConfigError("dt", f"CFL number U*dt/h = {cfl:.3g} exceeds 0.5")
        if self.tau is None and self.dt > self.turnover_time:
            raise ConfigError("tau", f"default tau = dt exceeds T* = {self.turnover_time:g}")


_FIELD_TYPES = {f.name: f.type for f in fields(SimConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "float | None":
        if raw.lower() in ("auto", ""):
            return None
        kind = "float"
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"expected {kind}, got {raw!r}") from None
    return raw


def _locate(text: str, section: str | None, key: str) -> int | None:
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            continue
        m = re.match(r"\s*([A-Za-z_][\w]*)\s*[=:]", line)
        if m and m.group(1) == key and (section is None or current == section):
            return lineno
    return None


def parse_config(text: str) -> SimConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"[{section}]", "unknown section", _locate_section(text, section))
        for key, raw in cp.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{section}.{key}", "unknown key", _locate(text, section, key))
            try:
                values[key] = _convert(key, raw)
            except ConfigError as exc:
                raise ConfigError(f"{section}.{key}", str(exc).split(": ", 1)[1], _locate(text, section, key)) from None
    try:
        return SimConfig(**values)
    except ConfigError as exc:
        section = next((s for s, keys in SECTIONS.items() if exc.key in keys), None)
        line = _locate(text, section, exc.key)
        qual = f"{section}.{exc.key}" if section else exc.key
        raise ConfigError(qual, str(exc).split(": ", 1)[1], line) from None


def _locate_section(text: str, section: str) -> int | None:
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip() == f"[{section}]":
            return lineno
    return None


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: SimConfig) -> str:
    """Every key written out; parse_config(format_config(cfg)) == cfg."""
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_fmt(getattr(cfg, key))}" for key in keys)
        lines.append("")
    return "\n".join(lines)


def config_dict(cfg: SimConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(SimConfig)}


def with_overrides(cfg: SimConfig, **kw) -> SimConfig:
    return replace(cfg, **kw)
