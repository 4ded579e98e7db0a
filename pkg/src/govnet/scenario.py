"""Closed-loop orchestration: scenario files, simulation runs, trajectory logs.

A scenario couples the pre-stabilized plant with the distributed governor in
lockstep: at every plant step boundary each agent rebuilds its local problem
from its current measurement, the solver flow advances a configured number
of substeps, the leaders' mean m estimate becomes the reference driving the
next plant step. Runs are deterministic: identical configs give bit-identical
logs, which replay_check exploits as a regression gate.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from govnet.constraints import (
    HalfSpace,
    InputPolytope,
    LocalConstraintSet,
    build_local_problems,
)
from govnet.graph import NetworkTopology
from govnet.plant import PlantParams, PlantState, integrate_step
from govnet.solver import (
    FlowEngine,
    SolverParams,
    SolverState,
    consensus_disagreement,
    governed_reference,
)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Scenario configuration failed validation."""


@dataclass(eq=False)
class ScenarioConfig:
    """Everything needed to reproduce one closed-loop run.

    Geometry (sensed half-spaces, input polytopes) is fixed for the run;
    the per-agent problems are still rebuilt every control period so the
    pinned measurements track the plant. reference_schedule is
    piecewise-constant (start_time, r) pairs and must cover t = 0.
    """

    name: str
    adjacency: np.ndarray
    leaders: tuple[int, ...]
    formation_bias: np.ndarray
    initial_q: np.ndarray
    initial_xi: np.ndarray
    duration: float
    reference_schedule: tuple[tuple[float, np.ndarray], ...]
    alpha_r: float = 1.0
    plant_dt: float = 1e-3
    alpha: float = 2.0
    solver_substeps: int = 1
    tol_consensus: float = 1e-3
    tol_kkt: float = 1e-3
    solver_max_time: float = 600.0
    multiplier_bound: float = 1e6
    halfspaces: dict = field(default_factory=dict)
    input_polytopes: dict = field(default_factory=dict)
    bias_aware_constraints: bool = False
    solver_init: str = "zeros"

    def __post_init__(self):
        adjacency = np.asarray(self.adjacency, dtype=float)
        n = adjacency.shape[0] if adjacency.ndim == 2 else 0
        self.adjacency = adjacency
        self.formation_bias = np.asarray(self.formation_bias, dtype=float).reshape(-1)
        self.initial_q = np.asarray(self.initial_q, dtype=float).reshape(-1)
        self.initial_xi = np.asarray(self.initial_xi, dtype=float).reshape(-1)
        if self.initial_q.size != 2 * n or self.initial_xi.size != 2 * n:
            raise ConfigError(
                f"initial state needs {2 * n} entries, got q:{self.initial_q.size} xi:{self.initial_xi.size}"
            )
        if self.formation_bias.size != 2 * n:
            raise ConfigError(f"formation_bias needs {2 * n} entries, got {self.formation_bias.size}")
        if self.duration < 0:
            raise ConfigError("duration must be nonnegative")
        if self.plant_dt <= 0 or self.solver_substeps < 1:
            raise ConfigError("plant_dt must be positive and solver_substeps >= 1")
        schedule = []
        for t_start, r in self.reference_schedule:
            r = np.asarray(r, dtype=float).reshape(-1)
            if r.size != 2 or not np.all(np.isfinite(r)):
                raise ConfigError(f"reference entries must be finite 2-vectors, got {r}")
            schedule.append((float(t_start), r))
        schedule.sort(key=lambda e: e[0])
        if not schedule or schedule[0][0] > 0.0:
            raise ConfigError("reference schedule must cover t = 0")
        self.reference_schedule = tuple(schedule)
        self.halfspaces = {int(k): tuple(v) for k, v in self.halfspaces.items()}
        self.input_polytopes = {int(k): v for k, v in self.input_polytopes.items()}
        if self.solver_init not in ("zeros", "measurements"):
            raise ConfigError(f"unknown solver_init {self.solver_init!r}")
        try:
            self.topology()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    def topology(self) -> NetworkTopology:
        return NetworkTopology(adjacency=self.adjacency, leaders=self.leaders)

    def plant_params(self) -> PlantParams:
        return PlantParams(alpha_r=self.alpha_r, formation_bias=self.formation_bias, dt=self.plant_dt)

    def solver_params(self, lockstep: bool = True) -> SolverParams:
        """Solver parameters; in lockstep mode each flow substep spans one plant step.

        Running solver_substeps > 1 substeps per plant step advances the
        governor that many times faster than the plant, emulating a faster
        optimization timescale.
        """
        dt = self.plant_dt if lockstep else None
        return SolverParams(
            alpha=self.alpha,
            dt_solver=dt,
            tol_consensus=self.tol_consensus,
            tol_kkt=self.tol_kkt,
            max_time=self.solver_max_time,
            multiplier_bound=self.multiplier_bound,
        )

    def constraint_sets(self, topology: NetworkTopology | None = None) -> list[LocalConstraintSet]:
        topology = topology or self.topology()
        offset = self.formation_bias if self.bias_aware_constraints else None
        return [
            LocalConstraintSet.assemble(
                halfspaces=list(self.halfspaces.get(i, ())),
                polytope=self.input_polytopes.get(i),
                agent=i,
                topology=topology,
                alpha_r=self.alpha_r,
                formation_bias=self.formation_bias,
                center_offset=offset,
            )
            for i in range(self.n)
        ]

    def reference_at(self, t: float) -> np.ndarray:
        r = self.reference_schedule[0][1]
        for t_start, value in self.reference_schedule:
            if t_start <= t + 1e-12:
                r = value
            else:
                break
        return r

    def to_dict(self) -> dict:
        def pairs(flat):
            return [[float(a), float(b)] for a, b in np.asarray(flat).reshape(-1, 2)]

        return {
            "name": self.name,
            "adjacency": self.adjacency.astype(int).tolist(),
            "leaders": list(self.leaders),
            "formation_bias": pairs(self.formation_bias),
            "initial_q": pairs(self.initial_q),
            "initial_xi": pairs(self.initial_xi),
            "duration": self.duration,
            "reference": [{"t": t, "r": [float(r[0]), float(r[1])]} for t, r in self.reference_schedule],
            "plant": {"alpha_r": self.alpha_r, "dt": self.plant_dt},
            "solver": {
                "alpha": self.alpha,
                "substeps": self.solver_substeps,
                "tol_consensus": self.tol_consensus,
                "tol_kkt": self.tol_kkt,
                "max_time": self.solver_max_time,
                "multiplier_bound": self.multiplier_bound,
                "init": self.solver_init,
            },
            "sensing": {
                str(i): [{"normal": hs.normal.tolist(), "offset": hs.offset} for hs in hss]
                for i, hss in sorted(self.halfspaces.items())
            },
            "input_constraints": {
                str(i): {"A": p.a_u.tolist(), "b": p.b_u.tolist()}
                for i, p in sorted(self.input_polytopes.items())
            },
            "bias_aware_constraints": self.bias_aware_constraints,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        try:
            plant = data.get("plant", {})
            solver = data.get("solver", {})
            sensing = {
                int(i): tuple(HalfSpace(np.array(h["normal"], dtype=float), float(h["offset"])) for h in hss)
                for i, hss in data.get("sensing", {}).items()
            }
            polytopes = {
                int(i): InputPolytope(np.array(p["A"], dtype=float), np.array(p["b"], dtype=float))
                for i, p in data.get("input_constraints", {}).items()
            }
            return cls(
                name=str(data["name"]),
                adjacency=np.array(data["adjacency"], dtype=float),
                leaders=tuple(int(i) for i in data["leaders"]),
                formation_bias=np.array(data["formation_bias"], dtype=float).reshape(-1),
                initial_q=np.array(data["initial_q"], dtype=float).reshape(-1),
                initial_xi=np.array(data["initial_xi"], dtype=float).reshape(-1),
                duration=float(data["duration"]),
                reference_schedule=tuple(
                    (float(e["t"]), np.array(e["r"], dtype=float)) for e in data["reference"]
                ),
                alpha_r=float(plant.get("alpha_r", 1.0)),
                plant_dt=float(plant.get("dt", 1e-3)),
                alpha=float(solver.get("alpha", 2.0)),
                solver_substeps=int(solver.get("substeps", 1)),
                tol_consensus=float(solver.get("tol_consensus", 1e-3)),
                tol_kkt=float(solver.get("tol_kkt", 1e-3)),
                solver_max_time=float(solver.get("max_time", 600.0)),
                multiplier_bound=float(solver.get("multiplier_bound", 1e6)),
                halfspaces=sensing,
                input_polytopes=polytopes,
                bias_aware_constraints=bool(data.get("bias_aware_constraints", False)),
                solver_init=str(solver.get("init", "zeros")),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed scenario data: {exc}") from exc

    @classmethod
    def from_yaml(cls, path) -> "ScenarioConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"scenario file not found: {path}")
        with open(path) as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ConfigError(f"scenario file {path} did not parse to a mapping")
        return cls.from_dict(data)

    def to_yaml(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(eq=False)
class TrajectoryLog:
    """Fixed-schema per-step records of one run.

    Rows are float vectors matching `columns`. CSV serialization uses
    repr() so values round-trip bit-exactly.
    """

    columns: list[str]
    rows: list[np.ndarray]
    config_hash: str
    schema_version: int = SCHEMA_VERSION

    def as_array(self) -> np.ndarray:
        return np.array(self.rows) if self.rows else np.zeros((0, len(self.columns)))

    def column(self, name: str) -> np.ndarray:
        return self.as_array()[:, self.columns.index(name)]

    def __len__(self) -> int:
        return len(self.rows)

    def write(self, out_dir, name: str) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{name}.csv"
        meta_path = out_dir / f"{name}.meta.json"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([repr(float(v)) for v in row])
        with open(meta_path, "w") as fh:
            json.dump(
                {"schema_version": self.schema_version, "config_hash": self.config_hash,
                 "columns": self.columns},
                fh,
                indent=2,
            )
        return csv_path, meta_path

    @classmethod
    def read(cls, csv_path, meta_path=None) -> "TrajectoryLog":
        csv_path = Path(csv_path)
        meta_path = Path(meta_path) if meta_path else csv_path.with_suffix("").with_suffix(".meta.json")
        with open(meta_path) as fh:
            meta = json.load(fh)
        rows = []
        with open(csv_path, newline="") as fh:
            reader = csv.reader(fh)
            columns = next(reader)
            for row in reader:
                rows.append(np.array([float(v) for v in row]))
        return cls(
            columns=columns,
            rows=rows,
            config_hash=meta["config_hash"],
            schema_version=meta["schema_version"],
        )


def _log_columns(n: int) -> list[str]:
    cols = ["t"]
    cols += [f"q{i}{ax}" for i in range(n) for ax in ("x", "y")]
    cols += [f"xi{i}{ax}" for i in range(n) for ax in ("x", "y")]
    cols += [f"m{i}{ax}" for i in range(n) for ax in ("x", "y")]
    cols += ["ref_x", "ref_y", "raw_x", "raw_y", "lam_norm", "nu_norm", "consensus", "kkt"]
    cols += [f"margin{i}" for i in range(n)]
    cols += [f"pos_margin{i}" for i in range(n)]
    cols += ["feasible"]
    return cols


class ClosedLoopSim:
    """Stepwise plant-plus-governor loop, shared by batch runs and the teleop service.

    One step() = rebuild local problems at the current measurement, advance
    the solver substeps, pick the applied reference (holding the last good
    one if the multipliers signal infeasibility), record, then advance the
    plant. Reference changes injected via set_reference take effect at the
    next step boundary.
    """

    def __init__(self, config: ScenarioConfig, keep_log: bool = True):
        self.config = config
        self.topology = config.topology()
        self.plant_params = config.plant_params()
        self.solver_params = config.solver_params(lockstep=True)
        self.constraint_sets = config.constraint_sets(self.topology)
        self.state = PlantState(config.initial_q.copy(), config.initial_xi.copy())
        problems = self._problems(config.reference_at(0.0))
        self.solver_state = SolverState.initial(problems, self.topology, config.solver_init)
        self.engine = FlowEngine(problems, self.topology, self.solver_params)
        self.t = 0.0
        self.step_index = 0
        self.keep_log = keep_log
        self.columns = _log_columns(config.n)
        self.rows: list[np.ndarray] = []
        self.last_row: np.ndarray | None = None
        self.feasible = True
        self._held_ref: np.ndarray | None = None
        self._ref_override: np.ndarray | None = None
        self.applied_ref = config.reference_at(0.0).copy()

    def _problems(self, raw_ref):
        return build_local_problems(
            self.state.q, self.state.xi, raw_ref, self.topology, self.constraint_sets
        )

    def set_reference(self, r) -> None:
        """Override the schedule from the next step boundary on."""
        r = np.asarray(r, dtype=float).reshape(-1)
        if r.size != 2 or not np.all(np.isfinite(r)):
            raise ValueError(f"reference must be a finite 2-vector, got {r}")
        self._ref_override = r

    def reset(self) -> None:
        self.__init__(self.config, keep_log=self.keep_log)

    def raw_reference(self) -> np.ndarray:
        if self._ref_override is not None:
            return self._ref_override
        return self.config.reference_at(self.t)

    def _boundary(self) -> None:
        """Advance the governor at the current boundary and record the step."""
        raw = self.raw_reference()
        self.engine.update_pins(self.state.q, self.state.xi, raw)
        self.solver_state = self.engine.run_steps(
            self.solver_state, self.config.solver_substeps, self.t
        )
        m_gov = governed_reference(self.solver_state, self.topology)
        lam_max = max(
            (float(np.abs(l).max()) if l.size else 0.0) for l in self.solver_state.lam
        )
        self.feasible = lam_max <= self.config.multiplier_bound
        if self.feasible or self._held_ref is None:
            self.applied_ref = m_gov
            self._held_ref = m_gov
        else:
            self.applied_ref = self._held_ref
        self._record(raw)

    def _record(self, raw) -> None:
        n = self.config.n
        margins = self.engine.margins(self.applied_ref, self.state.q, self.state.xi)
        pos_margins = np.full(n, np.inf)
        for agent, hss in self.config.halfspaces.items():
            for hs in hss:
                for j in range(n):
                    pos_margins[j] = min(pos_margins[j], hs.margin(self.state.position(j)))
        lam_norm = float(np.sqrt(sum(float(l @ l) for l in self.solver_state.lam)))
        nu_norm = float(np.linalg.norm(self.solver_state.nu))
        row = np.concatenate(
            [
                [self.t],
                self.state.q,
                self.state.xi,
                self.solver_state.z[:, :2].ravel(),
                self.applied_ref,
                raw,
                [
                    lam_norm,
                    nu_norm,
                    consensus_disagreement(self.solver_state, self.topology),
                    self.engine.kkt_residual(self.solver_state),
                ],
                margins,
                pos_margins,
                [1.0 if self.feasible else 0.0],
            ]
        )
        self.last_row = row
        if self.keep_log:
            self.rows.append(row)

    def step(self) -> None:
        """One full control period: governor boundary, then one plant step."""
        self._boundary()
        self.state = integrate_step(
            self.state, self.applied_ref, self.topology, self.plant_params, self.t
        )
        self.t = round(self.t + self.config.plant_dt, 12)
        self.step_index += 1

    def finalize(self) -> None:
        """Record the terminal boundary without advancing the plant."""
        self._boundary()

    def log(self) -> TrajectoryLog:
        return TrajectoryLog(
            columns=self.columns,
            rows=self.rows,
            config_hash=self.config.config_hash(),
        )


def run_scenario(config: ScenarioConfig) -> TrajectoryLog:
    """Simulate the full closed loop; deterministic for identical configs."""
    sim = ClosedLoopSim(config, keep_log=True)
    steps = int(round(config.duration / config.plant_dt))
    for _ in range(steps):
        sim.step()
    sim.finalize()
    return sim.log()


@dataclass
class ReplayResult:
    """Truthy iff a re-simulation reproduced the log bit-exactly."""

    ok: bool
    first_divergence: int | None = None

    def __bool__(self) -> bool:
        return self.ok


def replay_check(log: TrajectoryLog, config: ScenarioConfig) -> ReplayResult:
    """Re-simulate and compare every record bit-exactly."""
    fresh = run_scenario(config)
    if len(fresh) != len(log):
        return ReplayResult(False, min(len(fresh), len(log)))
    for idx, (a, b) in enumerate(zip(log.rows, fresh.rows)):
        if a.shape != b.shape or not np.array_equal(a, b):
            return ReplayResult(False, idx)
    return ReplayResult(True, None)
