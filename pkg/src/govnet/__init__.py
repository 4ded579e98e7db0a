"""Distributed reference governor stack for constrained mobile robot networks.

Layers, bottom to top:

- ``graph``: communication topology and Laplacian utilities.
- ``plant``: the PI-consensus pre-stabilized robot network.
- ``constraints``: per-agent constraint sets and the governor's
  objective / inequality / equality functions.
- ``solver``: the distributed primal-dual flow that computes the
  governed reference.
- ``oracle``: centralized brute-force projection, the ground truth the
  distributed solver is tested against.
- ``scenario``: closed-loop simulation, scenario files, trajectory logs.
- ``teleop``: live socket service for operator control.
"""

from govnet.graph import NetworkTopology, LaplacianMatrix, build_laplacian
from govnet.plant import PlantParams, PlantState
from govnet.constraints import HalfSpace, InputPolytope, LocalConstraintSet, LocalProblem
from govnet.solver import SolverParams, SolverState
from govnet.scenario import ScenarioConfig, TrajectoryLog, run_scenario

__all__ = [
    "NetworkTopology",
    "LaplacianMatrix",
    "build_laplacian",
    "PlantParams",
    "PlantState",
    "HalfSpace",
    "InputPolytope",
    "LocalConstraintSet",
    "LocalProblem",
    "SolverParams",
    "SolverState",
    "ScenarioConfig",
    "TrajectoryLog",
    "run_scenario",
]

__version__ = "0.1.0"
