"""Regenerate the golden oracle projections stored next to the scenario files.

Run from the repository root:

    python scripts/make_golden.py
"""

import json
from pathlib import Path

import numpy as np

from govnet.oracle import grid_project
from govnet.plant import PlantState
from govnet.scenario import ScenarioConfig

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"
GOLDEN = SCENARIOS / "golden"


def project_at_start(config: ScenarioConfig) -> dict:
    state = PlantState(config.initial_q, config.initial_xi)
    r = config.reference_at(0.0)
    result = grid_project(r, state, config.constraint_sets(), config.topology())
    return {
        "scenario": config.name,
        "config_hash": config.config_hash(),
        "t": 0.0,
        "r": [float(v) for v in r],
        "m_star": [float(v) for v in result.m_star],
        "objective": result.objective,
        "feasible": result.feasible,
        "level_objectives": list(result.level_objectives),
    }


def main() -> None:
    GOLDEN.mkdir(exist_ok=True)
    for name in ("ring5_line_admissible", "ring5_line_inadmissible"):
        config = ScenarioConfig.from_yaml(SCENARIOS / f"{name}.yaml")
        record = project_at_start(config)
        out = GOLDEN / f"{name}_t0.json"
        with open(out, "w") as fh:
            json.dump(record, fh, indent=2)
        print(f"{out}: m* = {record['m_star']} objective = {record['objective']:.8f}")


if __name__ == "__main__":
    main()
