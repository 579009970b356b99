#!/usr/bin/env python3
"""Sweep sampling period and model order; report the equation-error landscape.

For each sampling period the script records the relative residual of the
one-step fit as the order grows, which is the practical way to decide how
many modes a data set supports before running the full pipeline.

Usage: python scripts/order_sweep.py [--out sweep.csv]
"""

import argparse

import numpy as np

from koopctrl.dmd import select_order
from koopctrl.observables import SamplingConfig
from koopctrl.pde import ParabolicPlant, SpatialGrid, StateProfile, simulate

SAMPLING_PERIODS = (0.002, 0.004, 0.008)
N_MAX = 12


def pulse_ic(plant, grid):
    pulse = lambda t: 10.0 if (t + 0.1 >= 0 and t < 0) else 0.0  # noqa: E731
    prep = simulate(
        plant, grid, StateProfile(np.zeros(grid.n), -0.1), pulse, None, 0.1, 1e-4, t0=-0.1
    )
    return prep.final_profile


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="order_sweep.csv")
    args = parser.parse_args()

    plant = ParabolicPlant.from_poly(1.0, [5.0, 8.0, -8.0], 2.0, 1.0)
    grid = SpatialGrid(2001)
    ic = pulse_ic(plant, grid)

    rows = []
    for t_s in SAMPLING_PERIODS:
        span = (N_MAX + 1) * t_s
        traj = simulate(plant, grid, StateProfile(ic.values, 0.0), None, None, span, t_s / 400)
        config = SamplingConfig.equispaced(500, t_s)
        selection = select_order(traj, config, tol=1e-8, n_max=N_MAX)
        flag = "" if selection.met_tolerance else " (tolerance not met)"
        print(f"t_s = {t_s}: selected order {selection.n}{flag}")
        for n in sorted(selection.rel_residuals):
            rows.append((t_s, n, selection.residuals[n], selection.rel_residuals[n]))

    with open(args.out, "w") as fh:
        fh.write("t_s,order,residual_norm,rel_residual\n")
        for t_s, n, res, rel in rows:
            fh.write(f"{t_s!r},{n},{res!r},{rel!r}\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
