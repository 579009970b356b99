"""Sensor model and snapshot-matrix assembly.

Turns simulated (or externally supplied) trajectories into the channel-by-
snapshot data matrices consumed by the spectral identification, including the
Hankel-style delay embedding used when only a handful of sensors exist.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from koopctrl.pde import SpatialGrid, StateProfile, Trajectory

__all__ = [
    "SamplingConfig",
    "DataMatrix",
    "sample_output",
    "build_data_matrix",
    "delay_embed",
    "data_matrix_to_csv",
    "data_matrix_from_csv",
]


@dataclass(frozen=True)
class SamplingConfig:
    """Sensor layout and temporal sampling.

    ``centers`` are the sensor positions in (0, 1); ``epsilon`` the half-width
    of the rectangular averaging window (0 means point evaluation); ``t_s``
    the sampling period.
    """

    centers: np.ndarray
    epsilon: float
    t_s: float

    def __post_init__(self) -> None:
        centers = np.asarray(self.centers, dtype=float)
        object.__setattr__(self, "centers", centers)
        if self.t_s <= 0:
            raise ValueError("sampling period must be positive")
        if self.epsilon < 0:
            raise ValueError("sensor half-width must be nonnegative")
        if len(np.unique(centers)) != len(centers):
            raise ValueError("sensor centers must be distinct")
        lo = centers - self.epsilon
        hi = centers + self.epsilon
        if self.epsilon > 0:
            if np.any(lo <= 0) or np.any(hi >= 1):
                raise ValueError("sensor support must stay inside (0, 1)")
        elif np.any(centers <= 0) or np.any(centers >= 1):
            raise ValueError("sensor centers must lie inside (0, 1)")

    @classmethod
    def equispaced(cls, m: int, t_s: float, epsilon: float = 0.0) -> "SamplingConfig":
        """m sensors at i/(m+1), i = 1..m."""
        return cls(centers=np.arange(1, m + 1) / (m + 1), epsilon=epsilon, t_s=t_s)

    @property
    def m(self) -> int:
        return len(self.centers)


@dataclass(frozen=True)
class DataMatrix:
    """Channel-by-snapshot matrix; column k holds the outputs at time k*t_s.

    ``n`` is the number of one-step transitions (columns minus one).  After a
    delay embedding ``delays`` > 1 and the rows hold ``delays`` stacked copies
    of the physical channels.
    """

    values: np.ndarray
    config: SamplingConfig
    n: int
    delays: int = 1
    open_loop: bool = True

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 2 or vals.shape[1] < 2:
            raise ValueError("data matrix needs at least two snapshot columns")
        if vals.shape[1] != self.n + 1:
            raise ValueError("column count must equal n + 1")
        if vals.shape[0] != self.config.m * self.delays:
            raise ValueError("row count must equal channels * delays")
        if not np.all(np.isfinite(vals)):
            raise ValueError("data matrix contains non-finite entries")

    @property
    def history(self) -> np.ndarray:
        """First n columns (the regressor block)."""
        return self.values[:, :-1]

    @property
    def last_snapshot(self) -> np.ndarray:
        return self.values[:, -1]


def sample_output(state: StateProfile, config: SamplingConfig, grid: SpatialGrid) -> np.ndarray:
    """Evaluate the sensor functionals on one state profile.

    Point sensors (epsilon = 0) use linear interpolation of the grid samples;
    finite-width sensors integrate the piecewise-linear interpolant against
    the rectangular weight by exact trapezoid quadrature on the union of grid
    nodes and window endpoints.
    """
    x = np.asarray(state.values, dtype=float)
    if len(x) != grid.n:
        raise ValueError("state profile not on the supplied grid")
    if config.epsilon == 0.0:
        return np.interp(config.centers, grid.z, x)
    out = np.empty(config.m)
    for i, zc in enumerate(config.centers):
        lo, hi = zc - config.epsilon, zc + config.epsilon
        inside = grid.z[(grid.z > lo) & (grid.z < hi)]
        nodes = np.concatenate(([lo], inside, [hi]))
        vals = np.interp(nodes, grid.z, x)
        out[i] = np.trapezoid(vals, nodes) / (2.0 * config.epsilon)
    return out


def build_data_matrix(
    traj: Trajectory,
    config: SamplingConfig,
    n: int,
    expect_zero_input: bool = True,
) -> DataMatrix:
    """Sample a trajectory into the n+1 snapshot columns at spacing t_s.

    The sampling period must be an integer multiple of the trajectory step
    (checked to 1e-12 relative) so that no temporal interpolation enters the
    data path.
    """
    if n < 1:
        raise ValueError("need at least one transition")
    dt = traj.dt
    ratio = config.t_s / dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-12 * ratio:
        raise ValueError(f"t_s = {config.t_s} is not an integer multiple of dt = {dt}")
    if n * stride > len(traj.t) - 1:
        raise ValueError(
            f"trajectory spans {len(traj.t) - 1} steps, need {n * stride} for n = {n}"
        )

    idx = stride * np.arange(n + 1)
    cols = [sample_output(traj.profile(int(k)), config, traj.grid) for k in idx]
    open_loop = bool(np.all(traj.u1[idx] == 0.0) and np.all(traj.u2[idx] == 0.0))
    if expect_zero_input and not open_loop:
        warnings.warn("trajectory was recorded with nonzero inputs; data flagged", stacklevel=2)
    return DataMatrix(
        values=np.column_stack(cols), config=config, n=n, delays=1, open_loop=open_loop
    )


def delay_embed(data: DataMatrix, d: int) -> DataMatrix:
    """Row-stacked Hankel lift: column k becomes columns k..k+d-1 concatenated.

    Keeps the one-step recursion (and its coefficients) intact while raising
    the row count from m to m*d; the snapshot count shrinks by d - 1.
    """
    if d < 1:
        raise ValueError("delay count must be at least 1")
    if d == 1:
        return data
    if data.values.shape[1] < d + 1:
        raise ValueError(f"need at least {d + 1} snapshots for {d} delays")
    cols = data.values.shape[1] - d + 1
    stacked = np.vstack([data.values[:, j : j + cols] for j in range(d)])
    return DataMatrix(
        values=stacked,
        config=data.config,
        n=cols - 1,
        delays=d * data.delays,
        open_loop=data.open_loop,
    )


def data_matrix_to_csv(data: DataMatrix, path: str | Path) -> None:
    """One row per channel; the header row lists the sensor positions.

    Sampling metadata rides along in comment lines so the file round-trips,
    which also lets externally measured data enter the pipeline.
    """
    with open(path, "w") as fh:
        fh.write(f"# epsilon = {data.config.epsilon!r}\n")
        fh.write(f"# t_s = {data.config.t_s!r}\n")
        fh.write(f"# delays = {data.delays}\n")
        fh.write(f"# open_loop = {int(data.open_loop)}\n")
        fh.write(",".join(repr(float(z)) for z in data.config.centers) + "\n")
        for row in data.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def data_matrix_from_csv(path: str | Path) -> DataMatrix:
    meta: dict[str, str] = {}
    rows: list[list[float]] = []
    centers: np.ndarray | None = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition("=")
                meta[key.strip()] = val.strip()
            elif centers is None:
                centers = np.array([float(v) for v in line.split(",")])
            else:
                rows.append([float(v) for v in line.split(",")])
    if centers is None or not rows:
        raise ValueError(f"{path} does not contain a data matrix")
    config = SamplingConfig(
        centers=centers, epsilon=float(meta.get("epsilon", 0.0)), t_s=float(meta["t_s"])
    )
    values = np.array(rows)
    return DataMatrix(
        values=values,
        config=config,
        n=values.shape[1] - 1,
        delays=int(meta.get("delays", 1)),
        open_loop=bool(int(meta.get("open_loop", 1))),
    )
