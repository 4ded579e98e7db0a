"""Live bridge between the closed-loop simulation and an operator console.

The service runs one simulation loop in its own thread with real-time
pacing and talks to any number of clients over a TCP socket. Frames are
newline-delimited JSON, one frame per line, versioned with "v": 1; the
exact field layout is documented in docs/protocol.md. Snapshots flow
server-to-client at a fixed wall-clock rate; commands flow client-to-server
and are drained once per step so a reference change never lands mid-step.
Slow consumers lose oldest frames first and never stall the loop.

An optional WebSocket bridge (same frames, one per message) serves browser
clients when the `websockets` package is importable.
"""

from __future__ import annotations

import json
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from govnet.scenario import ClosedLoopSim, ScenarioConfig

PROTOCOL_VERSION = 1
COMMAND_KINDS = ("set_reference", "pause", "resume", "reset", "load_scenario")


@dataclass(eq=False)
class StateSnapshot:
    """One rendered view of the loop, serializable to the wire schema."""

    time: float
    positions: np.ndarray  # (n, 2)
    m_estimates: np.ndarray  # (n, 2)
    applied_ref: np.ndarray  # (2,)
    raw_ref: np.ndarray  # (2,)
    lines: tuple  # ((agent, normal_xy, offset), ...)
    margins: np.ndarray  # (n,)
    feasible: bool
    leaders: tuple = ()
    paused: bool = False
    seq: int = 0
    drops: int = 0


@dataclass(frozen=True)
class OperatorCommand:
    """Operator request; payload is a 2-vector for set_reference, an id for load_scenario."""

    kind: str
    payload: object = None

    def __post_init__(self):
        if self.kind not in COMMAND_KINDS:
            raise ValueError(f"unknown command kind {self.kind!r}")
        if self.kind == "set_reference":
            r = np.asarray(self.payload, dtype=float).reshape(-1)
            if r.size != 2 or not np.all(np.isfinite(r)):
                raise ValueError(f"set_reference payload must be a finite 2-vector, got {self.payload}")
            object.__setattr__(self, "payload", (float(r[0]), float(r[1])))
        if self.kind == "load_scenario" and not isinstance(self.payload, str):
            raise ValueError("load_scenario payload must be a scenario id string")


def encode_snapshot(snapshot: StateSnapshot) -> str:
    """Snapshot frame: one JSON object terminated by a newline."""
    frame = {
        "v": PROTOCOL_VERSION,
        "kind": "snapshot",
        "t": snapshot.time,
        "q": np.asarray(snapshot.positions, dtype=float).tolist(),
        "m": np.asarray(snapshot.m_estimates, dtype=float).tolist(),
        "applied_ref": np.asarray(snapshot.applied_ref, dtype=float).tolist(),
        "raw_ref": np.asarray(snapshot.raw_ref, dtype=float).tolist(),
        "lines": [
            {"agent": int(agent), "normal": [float(nx), float(ny)], "offset": float(off)}
            for agent, (nx, ny), off in snapshot.lines
        ],
        "margins": [None if not np.isfinite(v) else float(v) for v in snapshot.margins],
        "feasible": bool(snapshot.feasible),
        "leaders": [int(i) for i in snapshot.leaders],
        "paused": bool(snapshot.paused),
        "seq": int(snapshot.seq),
        "drops": int(snapshot.drops),
    }
    return json.dumps(frame) + "\n"


def decode_snapshot(line: str) -> StateSnapshot:
    """Parse a snapshot frame, ignoring unknown fields for forward compatibility."""
    data = json.loads(line)
    if data.get("kind") != "snapshot":
        raise ValueError(f"not a snapshot frame: kind={data.get('kind')!r}")
    margins = np.array(
        [np.inf if v is None else float(v) for v in data.get("margins", [])], dtype=float
    )
    return StateSnapshot(
        time=float(data["t"]),
        positions=np.array(data["q"], dtype=float).reshape(-1, 2),
        m_estimates=np.array(data["m"], dtype=float).reshape(-1, 2),
        applied_ref=np.array(data["applied_ref"], dtype=float),
        raw_ref=np.array(data["raw_ref"], dtype=float),
        lines=tuple(
            (int(l["agent"]), (float(l["normal"][0]), float(l["normal"][1])), float(l["offset"]))
            for l in data.get("lines", [])
        ),
        margins=margins,
        feasible=bool(data.get("feasible", True)),
        leaders=tuple(int(i) for i in data.get("leaders", [])),
        paused=bool(data.get("paused", False)),
        seq=int(data.get("seq", 0)),
        drops=int(data.get("drops", 0)),
    )


def encode_command(command: OperatorCommand) -> str:
    frame = {"v": PROTOCOL_VERSION, "kind": "command", "name": command.kind}
    if command.payload is not None:
        frame["payload"] = list(command.payload) if command.kind == "set_reference" else command.payload
    return json.dumps(frame) + "\n"


def decode_command(line: str) -> OperatorCommand:
    data = json.loads(line)
    if data.get("kind") != "command":
        raise ValueError(f"not a command frame: kind={data.get('kind')!r}")
    return OperatorCommand(kind=str(data.get("name")), payload=data.get("payload"))


def encode_error(message: str) -> str:
    return json.dumps({"v": PROTOCOL_VERSION, "kind": "error", "message": message}) + "\n"


class _Client:
    """Per-connection outbound queue with oldest-first drop accounting."""

    def __init__(self, send_line, max_pending: int = 64):
        self.send_line = send_line
        self.pending: deque[str] = deque()
        self.max_pending = max_pending
        self.drops = 0
        self.lock = threading.Condition()
        self.alive = True

    def push(self, line: str) -> None:
        with self.lock:
            if len(self.pending) >= self.max_pending:
                self.pending.popleft()
                self.drops += 1
            self.pending.append(line)
            self.lock.notify()

    def writer_loop(self) -> None:
        while True:
            with self.lock:
                while self.alive and not self.pending:
                    self.lock.wait(timeout=0.5)
                if not self.alive:
                    return
                line = self.pending.popleft()
            try:
                self.send_line(line)
            except OSError:
                self.alive = False
                return

    def close(self) -> None:
        with self.lock:
            self.alive = False
            self.lock.notify()


class TeleopServer:
    """Real-time closed-loop runner with a newline-delimited JSON TCP endpoint.

    speed scales simulated time against wall time; snapshot_rate is the
    wall-clock broadcast frequency. Commands are queued and drained once per
    plant step so their effect always lands on a step boundary.
    """

    def __init__(
        self,
        config: ScenarioConfig,
        host: str = "127.0.0.1",
        port: int = 0,
        speed: float = 1.0,
        snapshot_rate: float = 30.0,
        scenario_dir=None,
    ):
        if speed <= 0 or snapshot_rate <= 0:
            raise ValueError("speed and snapshot_rate must be positive")
        self.config = config
        self.host = host
        self.port = port
        self.speed = speed
        self.snapshot_rate = snapshot_rate
        self.scenario_dir = scenario_dir
        self.sim = ClosedLoopSim(config, keep_log=False)
        self.paused = False
        self.seq = 0
        self._commands: deque[OperatorCommand] = deque()
        self._commands_lock = threading.Lock()
        self._clients: list[_Client] = []
        self._clients_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._listener: socket.socket | None = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        self._listener = socket.create_server((self.host, self.port))
        self._listener.settimeout(0.2)
        self.port = self._listener.getsockname()[1]
        for target in (self._accept_loop, self._sim_loop):
            th = threading.Thread(target=target, daemon=True)
            th.start()
            self._threads.append(th)

    def stop(self) -> None:
        self._stop.set()
        for th in self._threads:
            th.join(timeout=2.0)
        with self._clients_lock:
            for client in self._clients:
                client.close()
            self._clients.clear()
        if self._listener is not None:
            self._listener.close()

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)

    # -- client handling ---------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            self._register_stream_client(conn)

    def _register_stream_client(self, conn: socket.socket) -> None:
        conn_lock = threading.Lock()

        def send_line(line: str) -> None:
            with conn_lock:
                conn.sendall(line.encode())

        client = _Client(send_line)
        with self._clients_lock:
            self._clients.append(client)
        threading.Thread(target=client.writer_loop, daemon=True).start()
        threading.Thread(target=self._reader_loop, args=(conn, client), daemon=True).start()

    def _reader_loop(self, conn: socket.socket, client: _Client) -> None:
        buffer = b""
        while not self._stop.is_set() and client.alive:
            try:
                chunk = conn.recv(4096)
            except OSError:
                break
            if not chunk:
                break
            buffer += chunk
            while b"\n" in buffer:
                line, buffer = buffer.split(b"\n", 1)
                if line.strip():
                    self._handle_command_line(line.decode(errors="replace"), client)
        client.close()
        with self._clients_lock:
            if client in self._clients:
                self._clients.remove(client)
        conn.close()

    def _handle_command_line(self, line: str, client: _Client) -> None:
        try:
            command = decode_command(line)
        except (ValueError, KeyError, TypeError) as exc:
            client.push(encode_error(f"rejected command: {exc}"))
            return
        with self._commands_lock:
            self._commands.append(command)

    # -- simulation loop ---------------------------------------------------

    def _drain_commands(self) -> None:
        with self._commands_lock:
            commands = list(self._commands)
            self._commands.clear()
        for command in commands:
            self._apply(command)

    def _apply(self, command: OperatorCommand) -> None:
        if command.kind == "set_reference":
            self.sim.set_reference(np.array(command.payload))
        elif command.kind == "pause":
            self.paused = True
        elif command.kind == "resume":
            self.paused = False
        elif command.kind == "reset":
            self.sim.reset()
        elif command.kind == "load_scenario":
            self._load_scenario(command.payload)

    def _load_scenario(self, scenario_id: str) -> None:
        if self.scenario_dir is None:
            self._broadcast_line(encode_error("no scenario directory configured"))
            return
        name = Path(str(scenario_id)).name
        path = Path(self.scenario_dir) / f"{name}.yaml"
        try:
            config = ScenarioConfig.from_yaml(path)
        except (OSError, ValueError) as exc:
            self._broadcast_line(encode_error(f"load_scenario failed: {exc}"))
            return
        self.config = config
        self.sim = ClosedLoopSim(config, keep_log=False)

    def snapshot(self) -> StateSnapshot:
        sim = self.sim
        n = sim.config.n
        if sim.last_row is None:
            sim.finalize()  # produce the initial boundary record
        cols = sim.columns
        row = sim.last_row
        get = lambda name: row[cols.index(name)]
        lines = tuple(
            (agent, (float(hs.normal[0]), float(hs.normal[1])), float(hs.offset))
            for agent, hss in sorted(sim.config.halfspaces.items())
            for hs in hss
        )
        margins = np.array([get(f"margin{i}") for i in range(n)])
        self.seq += 1
        return StateSnapshot(
            time=float(get("t")),
            positions=sim.state.q.reshape(n, 2).copy(),
            m_estimates=sim.solver_state.m_estimates(),
            applied_ref=np.asarray(sim.applied_ref, dtype=float).copy(),
            raw_ref=sim.raw_reference().copy(),
            lines=lines,
            margins=margins,
            feasible=bool(get("feasible")),
            leaders=sim.topology.leaders,
            paused=self.paused,
            seq=self.seq,
        )

    def _broadcast_line(self, line: str) -> None:
        with self._clients_lock:
            clients = list(self._clients)
        for client in clients:
            client.push(line)

    def _broadcast_snapshot(self) -> None:
        snap = self.snapshot()
        with self._clients_lock:
            clients = list(self._clients)
        for client in clients:
            snap_for_client = encode_snapshot(
                StateSnapshot(
                    time=snap.time,
                    positions=snap.positions,
                    m_estimates=snap.m_estimates,
                    applied_ref=snap.applied_ref,
                    raw_ref=snap.raw_ref,
                    lines=snap.lines,
                    margins=snap.margins,
                    feasible=snap.feasible,
                    leaders=snap.leaders,
                    paused=snap.paused,
                    seq=snap.seq,
                    drops=client.drops,
                )
            )
            client.push(snap_for_client)

    def _sim_loop(self) -> None:
        dt = self.config.plant_dt
        wall_start = time.monotonic()
        sim_ahead = 0.0  # simulated seconds already run, in wall units
        snapshot_period = 1.0 / self.snapshot_rate
        next_snapshot = time.monotonic() + snapshot_period
        while not self._stop.is_set():
            now = time.monotonic()
            self._drain_commands()
            if not self.paused:
                target = (now - wall_start) * self.speed
                burst = 0
                while sim_ahead < target and burst < 100:
                    self.sim.step()
                    sim_ahead += dt
                    burst += 1
            else:
                wall_start = now - sim_ahead / self.speed
            now = time.monotonic()
            if now >= next_snapshot:
                self._broadcast_snapshot()
                # Fixed-rate schedule so loop jitter does not accumulate;
                # resynchronize only after long stalls.
                next_snapshot += snapshot_period
                if now - next_snapshot > 5.0 * snapshot_period:
                    next_snapshot = now + snapshot_period
            time.sleep(0.0005)


def serve(
    config: ScenarioConfig,
    host: str = "127.0.0.1",
    port: int = 8750,
    speed: float = 1.0,
    snapshot_rate: float = 30.0,
    scenario_dir=None,
    ws_port: int | None = None,
) -> TeleopServer:
    """Start the service and return the running server object."""
    server = TeleopServer(
        config,
        host=host,
        port=port,
        speed=speed,
        snapshot_rate=snapshot_rate,
        scenario_dir=scenario_dir,
    )
    server.start()
    if ws_port is not None:
        start_websocket_bridge(server, host, ws_port)
    return server


def start_websocket_bridge(server: TeleopServer, host: str, ws_port: int) -> threading.Thread:
    """Optional browser entry point: same frames, one JSON object per WS message."""
    import asyncio

    try:
        import websockets
    except ImportError as exc:  # pragma: no cover - depends on extras
        raise RuntimeError("websocket bridge requires the 'websockets' package") from exc

    async def handler(ws):
        loop = asyncio.get_running_loop()
        client = _Client(lambda line: asyncio.run_coroutine_threadsafe(ws.send(line), loop).result())
        with server._clients_lock:
            server._clients.append(client)
        writer = threading.Thread(target=client.writer_loop, daemon=True)
        writer.start()
        try:
            async for message in ws:
                server._handle_command_line(str(message), client)
        finally:
            client.close()
            with server._clients_lock:
                if client in server._clients:
                    server._clients.remove(client)

    async def main():
        async with websockets.serve(handler, host, ws_port):
            while not server._stop.is_set():
                await asyncio.sleep(0.2)

    thread = threading.Thread(target=lambda: asyncio.run(main()), daemon=True)
    thread.start()
    return thread
