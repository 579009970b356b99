"""Experiment configuration: TOML parsing, validation and the built-in preset.

Every knob of the pipeline lives here as a dataclass field with its default;
the diffusion-reaction benchmark is the default configuration, so an empty
TOML file reproduces it.  Parsing fails loudly: TOML syntax errors carry line
numbers from the parser, semantic errors carry the offending key path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from koopctrl.observables import SamplingConfig
from koopctrl.pde import ParabolicPlant, SpatialGrid

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "config_to_toml"]


class ConfigError(ValueError):
    """Configuration file failed to parse or validate."""


@dataclass
class PlantBlock:
    rho: float = 1.0
    a_poly: list[float] = field(default_factory=lambda: [5.0, 8.0, -8.0])
    a_table: str | None = None
    q0: float = 2.0
    q1: float = 1.0

    def build(self, base_dir: Path) -> ParabolicPlant:
        if self.a_table is not None:
            from scipy.interpolate import CubicSpline

            table = np.loadtxt(base_dir / self.a_table, delimiter=",", ndmin=2)
            spline = CubicSpline(table[:, 0], table[:, 1])
            return ParabolicPlant(rho=self.rho, a=spline, q0=self.q0, q1=self.q1)
        return ParabolicPlant.from_poly(self.rho, self.a_poly, self.q0, self.q1)


@dataclass
class GridBlock:
    n: int = 2001

    def build(self) -> SpatialGrid:
        return SpatialGrid(self.n)


@dataclass
class SamplingBlock:
    m: int = 500
    epsilon: float = 0.0
    t_s: float = 0.004
    delays: int = 1

    def build(self) -> SamplingConfig:
        return SamplingConfig.equispaced(self.m, self.t_s, self.epsilon)


@dataclass
class IcBlock:
    """Initial-condition preparation: a rectangular input pulse at z = 0."""

    amplitude: float = 10.0
    duration: float = 0.1
    dt: float = 1e-4


@dataclass
class DataBlock:
    dt: float = 1e-5
    snapshots: int = 14


@dataclass
class DmdBlock:
    n: int = 11
    auto_select: bool = False
    tol: float = 1e-8
    n_max: int = 12
    with_oracle: bool = True


@dataclass
class SynthesisBlock:
    targets: list[float] = field(default_factory=lambda: [-7.0034, -10.771, -52.729])
    n: int = 3
    box_bound: float = 1.0
    n_starts: int = 50
    seed: int = 20240101
    rho_known: bool = True


@dataclass
class VerificationBlock:
    n_tail: int = 50
    n_check: int = 10
    tail_source: str = "oracle"
    zero_bounds: bool = False
    t_final: float = 1.0
    dt: float = 1e-4
    fit_start: float = 0.25


@dataclass
class OutputBlock:
    dir: str = "out"
    traj_stride: int = 50


@dataclass
class ExperimentConfig:
    plant: PlantBlock = field(default_factory=PlantBlock)
    grid: GridBlock = field(default_factory=GridBlock)
    sampling: SamplingBlock = field(default_factory=SamplingBlock)
    ic: IcBlock = field(default_factory=IcBlock)
    data: DataBlock = field(default_factory=DataBlock)
    dmd: DmdBlock = field(default_factory=DmdBlock)
    synthesis: SynthesisBlock = field(default_factory=SynthesisBlock)
    verification: VerificationBlock = field(default_factory=VerificationBlock)
    output: OutputBlock = field(default_factory=OutputBlock)
    base_dir: Path = field(default_factory=Path)

    def validate(self) -> None:
        ratio = self.sampling.t_s / self.data.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError(
                f"[sampling].t_s = {self.sampling.t_s} must be an integer multiple of "
                f"[data].dt = {self.data.dt}"
            )
        needed = self.dmd.n + self.sampling.delays
        if self.data.snapshots < needed:
            raise ConfigError(
                f"[data].snapshots = {self.data.snapshots} too small: order {self.dmd.n} "
                f"with {self.sampling.delays} delays needs {needed}"
            )
        if self.synthesis.n > self.dmd.n:
            raise ConfigError("[synthesis].n cannot exceed [dmd].n")
        if self.verification.tail_source not in ("oracle", "dmd"):
            raise ConfigError("[verification].tail_source must be 'oracle' or 'dmd'")


_BLOCKS = {
    "plant": PlantBlock,
    "grid": GridBlock,
    "sampling": SamplingBlock,
    "ic": IcBlock,
    "data": DataBlock,
    "dmd": DmdBlock,
    "synthesis": SynthesisBlock,
    "verification": VerificationBlock,
    "output": OutputBlock,
}


def _coerce(block_name: str, cls, raw: dict):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"[{block_name}].{key}: unknown key")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{block_name}]: {exc}") from exc


def load_config(path: str | Path | None = None, text: str | None = None) -> ExperimentConfig:
    """Parse a TOML experiment file; omitted blocks and keys take defaults."""
    base_dir = Path()
    if text is None:
        if path is None:
            return ExperimentConfig()
        path = Path(path)
        base_dir = path.parent
        text = path.read_text()
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error: {exc}") from exc

    kwargs = {}
    for name, raw in doc.items():
        if name not in _BLOCKS:
            raise ConfigError(f"[{name}]: unknown configuration block")
        if not isinstance(raw, dict):
            raise ConfigError(f"[{name}]: expected a table")
        kwargs[name] = _coerce(name, _BLOCKS[name], raw)
    cfg = ExperimentConfig(base_dir=base_dir, **kwargs)
    cfg.validate()
    return cfg


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value)} to TOML")


def config_to_toml(cfg: ExperimentConfig) -> str:
    """Serialize the effective configuration (defaults resolved) back to TOML."""
    lines = []
    for block_name, cls in _BLOCKS.items():
        block = getattr(cfg, block_name)
        lines.append(f"[{block_name}]")
        for f in fields(cls):
            value = getattr(block, f.name)
            if value is None:
                continue
            lines.append(f"{f.name} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)
