"""Command-line entry points.

Exit codes: 0 success, 1 validation or usage failure, 2 runtime failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from govnet.oracle import grid_project
from govnet.plant import IntegrationBlowupError, PlantState
from govnet.scenario import (
    ClosedLoopSim,
    ConfigError,
    ScenarioConfig,
    replay_check,
    run_scenario,
)
from govnet.solver import FlowDivergenceError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3

POSITION_SLACK = 1e-6
ORACLE_MATCH_TOL = 1e-2


def _load(path: str) -> ScenarioConfig:
    return ScenarioConfig.from_yaml(path)


def _state_at(config: ScenarioConfig, t: float) -> tuple[PlantState, np.ndarray]:
    """Plant state and raw reference after simulating the closed loop to time t."""
    sim = ClosedLoopSim(config, keep_log=False)
    steps = int(round(t / config.plant_dt))
    for _ in range(steps):
        sim.step()
    return sim.state, sim.raw_reference()


def cmd_run(args) -> int:
    config = _load(args.scenario)
    log = run_scenario(config)
    out_dir = Path(args.out) if args.out else Path.cwd()
    csv_path, meta_path = log.write(out_dir, config.name)
    arr = log.as_array()
    final = log.rows[-1]
    cols = log.columns
    print(f"scenario {config.name}: {len(log)} records over {config.duration}s")
    print(f"log: {csv_path}")
    print(f"meta: {meta_path}")
    print(f"final governed reference: [{final[cols.index('ref_x')]:.6f}, {final[cols.index('ref_y')]:.6f}]")
    pos_cols = [i for i, c in enumerate(cols) if c.startswith("pos_margin")]
    worst = arr[:, pos_cols].min() if pos_cols else np.inf
    print(f"worst position margin over run: {worst:.6g}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    config = _load(args.scenario)
    state, raw = _state_at(config, args.at)
    result = grid_project(
        raw, state, config.constraint_sets(), config.topology(), resolution=args.resolution
    )
    print(f"t={args.at}: raw reference [{raw[0]:.6f}, {raw[1]:.6f}]")
    if result.feasible:
        print(f"projected reference: [{result.m_star[0]:.6f}, {result.m_star[1]:.6f}]")
        print(f"objective: {result.objective:.8f}")
        print(f"active rows: {list(result.active_rows)}")
    else:
        print(f"problem infeasible at t={args.at}: {result.message}")
    return EXIT_OK if result.feasible else EXIT_RUNTIME


def cmd_verify(args) -> int:
    config = _load(args.scenario)
    failures = []

    log = run_scenario(config)
    arr = log.as_array()
    cols = log.columns

    pos_cols = [i for i, c in enumerate(cols) if c.startswith("pos_margin")]
    worst = float(arr[:, pos_cols].min()) if pos_cols else np.inf
    ok = worst >= -POSITION_SLACK
    print(f"[{'PASS' if ok else 'FAIL'}] half-space satisfaction: worst margin {worst:.3e}")
    if not ok:
        failures.append("position margins")

    any_rows = any(len(v) for v in config.halfspaces.values()) or any(
        p.gamma for p in config.input_polytopes.values()
    )
    final = log.rows[-1]
    m_final = np.array([final[cols.index("ref_x")], final[cols.index("ref_y")]])
    state = PlantState(
        np.array([final[cols.index(f"q{i}{ax}")] for i in range(config.n) for ax in "xy"]),
        np.array([final[cols.index(f"xi{i}{ax}")] for i in range(config.n) for ax in "xy"]),
    )
    raw = np.array([final[cols.index("raw_x")], final[cols.index("raw_y")]])
    if any_rows:
        result = grid_project(raw, state, config.constraint_sets(), config.topology())
        gap = float(np.abs(result.m_star - m_final).max()) if result.feasible else np.inf
        ok = result.feasible and gap <= ORACLE_MATCH_TOL
        print(f"[{'PASS' if ok else 'FAIL'}] governed reference matches oracle: gap {gap:.3e}")
    else:
        gap = float(np.abs(raw - m_final).max())
        ok = gap <= ORACLE_MATCH_TOL
        print(f"[{'PASS' if ok else 'FAIL'}] unconstrained reference tracking: gap {gap:.3e}")
    if not ok:
        failures.append("oracle match")

    replay = replay_check(log, config)
    print(f"[{'PASS' if replay.ok else 'FAIL'}] deterministic replay"
          + ("" if replay.ok else f" (first divergence at record {replay.first_divergence})"))
    if not replay.ok:
        failures.append("replay")

    if failures:
        print(f"verification failed: {', '.join(failures)}")
        return EXIT_VERIFY
    print("verification passed")
    return EXIT_OK


def cmd_serve(args) -> int:
    from govnet.teleop import serve

    config = _load(args.scenario)
    scenario_dir = Path(args.scenario).resolve().parent
    server = serve(
        config,
        host=args.host,
        port=args.port,
        speed=args.speed,
        snapshot_rate=args.rate,
        scenario_dir=scenario_dir,
        ws_port=args.ws_port,
    )
    print(f"teleop service on tcp://{server.address[0]}:{server.address[1]}"
          + (f" ws://{args.host}:{args.ws_port}" if args.ws_port else ""))
    print("ctrl-c to stop")
    try:
        while True:
            import time

            time.sleep(0.5)
    except KeyboardInterrupt:
        server.stop()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="govnet",
        description="Distributed reference governor for constrained robot networks",
    )
    parser.add_argument(
        "--seed", type=int, default=None,
        help="accepted for reproducibility tooling; only randomized property tests use it",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a scenario and write its trajectory log")
    p.add_argument("scenario", help="scenario YAML file")
    p.add_argument("--out", default=None, help="output directory (default: cwd)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle", help="centralized projection of the reference at time t")
    p.add_argument("scenario")
    p.add_argument("--at", type=float, default=0.0, help="simulated time of the measurement")
    p.add_argument("--resolution", type=float, default=1e-5)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("verify", help="run the scenario's acceptance checks")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("serve", help="start the teleoperation service")
    p.add_argument("--scenario", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8750)
    p.add_argument("--ws-port", type=int, default=None, help="optional WebSocket bridge port")
    p.add_argument("--speed", type=float, default=1.0, help="simulated seconds per wall second")
    p.add_argument("--rate", type=float, default=30.0, help="snapshot broadcast rate (Hz)")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConfigError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (IntegrationBlowupError, FlowDivergenceError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
