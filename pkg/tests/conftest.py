import numpy as np
import pytest

from govnet.constraints import HalfSpace, LocalConstraintSet, build_local_problems
from govnet.graph import NetworkTopology
from govnet.oracle import grid_project
from govnet.plant import PlantState
from govnet.scenario import ScenarioConfig, run_scenario
from govnet.solver import SolverParams, SolverState, static_solve

from pathlib import Path

SCENARIO_DIR = Path(__file__).resolve().parents[1] / "scenarios"

RING_ADJACENCY = np.array(
    [
        [0, 1, 0, 0, 1],
        [1, 0, 1, 0, 0],
        [0, 1, 0, 1, 0],
        [0, 0, 1, 0, 1],
        [1, 0, 0, 1, 0],
    ],
    dtype=float,
)
RING_LEADER = 4
RING_Q0 = np.array([-2.0, 0.7, -1.4, -1.0, 0.2, -1.4, 1.2, -3.0, -1.2, -2.0])
RING_BIAS = np.array([-1.0, 1.0, -1.0, -1.0, 0.0, -1.0, 1.0, -1.0, 0.0, 0.0])
LINE = HalfSpace(np.array([1.0, 1.0]), 3.0)
R_ADMISSIBLE = np.array([1.0, 2.0])
R_INADMISSIBLE = np.array([2.0, 3.0])


@pytest.fixture(scope="session")
def ring_topology():
    return NetworkTopology(adjacency=RING_ADJACENCY, leaders=(RING_LEADER,))


@pytest.fixture(scope="session")
def ring_constraint_sets(ring_topology):
    return [
        LocalConstraintSet.assemble(
            [LINE] if i == RING_LEADER else [], None, i, ring_topology, 1.0
        )
        for i in range(5)
    ]


@pytest.fixture(scope="session")
def ring_problems(ring_topology, ring_constraint_sets):
    return build_local_problems(
        RING_Q0, np.zeros(10), R_ADMISSIBLE, ring_topology, ring_constraint_sets
    )


@pytest.fixture(scope="session")
def ring_params():
    return SolverParams(alpha=2.0)


@pytest.fixture(scope="session")
def oracle_t0(ring_topology, ring_constraint_sets):
    """Centralized projection at the initial ring state, r = [1, 2]."""
    return grid_project(
        R_ADMISSIBLE, PlantState(RING_Q0, np.zeros(10)), ring_constraint_sets, ring_topology
    )


@pytest.fixture(scope="session")
def static_result(ring_problems, ring_topology, ring_params):
    """Converged distributed solve of the frozen ring problem."""
    init = SolverState.initial(ring_problems, ring_topology, "zeros")
    return static_solve(init, ring_problems, ring_topology, ring_params)


@pytest.fixture(scope="session")
def admissible_config():
    return ScenarioConfig.from_yaml(SCENARIO_DIR / "ring5_line_admissible.yaml")


@pytest.fixture(scope="session")
def inadmissible_config():
    return ScenarioConfig.from_yaml(SCENARIO_DIR / "ring5_line_inadmissible.yaml")


@pytest.fixture(scope="session")
def admissible_log(admissible_config):
    return run_scenario(admissible_config)


@pytest.fixture(scope="session")
def inadmissible_log(inadmissible_config):
    return run_scenario(inadmissible_config)


@pytest.fixture(scope="session")
def unconstrained_config(admissible_config):
    """Ring and formation of the shipped scenario with no obstacles, 50 s."""
    data = admissible_config.to_dict()
    data["name"] = "ring5_unconstrained"
    data["sensing"] = {}
    data["duration"] = 50.0
    # Without constraint rows the agreed reference converges fast, and the
    # smooth linear plant tolerates a coarser integrator step; both keep the
    # 50 s run well inside its runtime budget.
    data["plant"]["dt"] = 0.002
    data["solver"]["substeps"] = 2
    return ScenarioConfig.from_dict(data)


def final_state(log, n):
    cols = log.columns
    final = log.rows[-1]
    q = np.array([final[cols.index(f"q{i}{ax}")] for i in range(n) for ax in "xy"])
    xi = np.array([final[cols.index(f"xi{i}{ax}")] for i in range(n) for ax in "xy"])
    m = np.array([final[cols.index("ref_x")], final[cols.index("ref_y")]])
    raw = np.array([final[cols.index("raw_x")], final[cols.index("raw_y")]])
    return q, xi, m, raw
