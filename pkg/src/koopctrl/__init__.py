"""Data-driven Koopman identification and boundary feedback for 1-D parabolic systems."""

from koopctrl.pde import (
    Eigenpair,
    ParabolicPlant,
    SpatialGrid,
    StateProfile,
    Trajectory,
    assemble_operator,
    closed_loop_simulate,
    eigensolve_reference,
    simulate,
)

__version__ = "0.1.0"
