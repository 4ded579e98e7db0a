import json
import socket
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from govnet.scenario import ScenarioConfig
from govnet.teleop import (
    OperatorCommand,
    StateSnapshot,
    TeleopServer,
    decode_command,
    decode_snapshot,
    encode_command,
    encode_error,
    encode_snapshot,
)

from conftest import SCENARIO_DIR

finite = st.floats(allow_nan=False, allow_infinity=False, width=32)


def make_snapshot(n, values, seq=0, feasible=True, paused=False):
    vals = np.array(values[: 4 * n + 4], dtype=float)
    need = 4 * n + 4 - len(vals)
    if need > 0:
        vals = np.concatenate([vals, np.zeros(need)])
    return StateSnapshot(
        time=abs(float(vals[0])),
        positions=vals[: 2 * n].reshape(n, 2),
        m_estimates=vals[2 * n : 4 * n].reshape(n, 2),
        applied_ref=vals[4 * n : 4 * n + 2],
        raw_ref=vals[4 * n + 2 : 4 * n + 4],
        lines=((0, (1.0, 1.0), 3.0),),
        margins=np.array([0.5] * (n - 1) + [np.inf]),
        feasible=feasible,
        paused=paused,
        seq=seq,
    )


@given(st.lists(finite, min_size=12, max_size=12), st.integers(0, 10**6), st.booleans())
@settings(max_examples=100, deadline=None)
def test_snapshot_round_trip(values, seq, feasible):
    snap = make_snapshot(2, values, seq=seq, feasible=feasible)
    decoded = decode_snapshot(encode_snapshot(snap))
    assert decoded.time == snap.time
    assert np.array_equal(decoded.positions, snap.positions)
    assert np.array_equal(decoded.m_estimates, snap.m_estimates)
    assert np.array_equal(decoded.applied_ref, snap.applied_ref)
    assert np.array_equal(decoded.raw_ref, snap.raw_ref)
    assert decoded.lines == snap.lines
    assert np.array_equal(decoded.margins, snap.margins)
    assert decoded.feasible == snap.feasible
    assert decoded.seq == snap.seq


def test_decode_ignores_unknown_fields():
    snap = make_snapshot(1, list(range(8)))
    frame = json.loads(encode_snapshot(snap))
    frame["future_field"] = {"nested": [1, 2, 3]}
    decoded = decode_snapshot(json.dumps(frame))
    assert decoded.time == snap.time


def test_snapshot_frame_size_bound():
    n = 50
    rng = np.random.default_rng(1)
    snap = StateSnapshot(
        time=123.456,
        positions=rng.normal(size=(n, 2)) * 100,
        m_estimates=rng.normal(size=(n, 2)) * 100,
        applied_ref=rng.normal(size=2),
        raw_ref=rng.normal(size=2),
        lines=tuple((i, (1.0, -1.0), float(i)) for i in range(n)),
        margins=rng.normal(size=n),
        feasible=True,
    )
    assert len(encode_snapshot(snap).encode()) < 64 * 1024


def test_command_round_trip_and_validation():
    cmd = decode_command(encode_command(OperatorCommand("set_reference", (2.0, 3.0))))
    assert cmd.kind == "set_reference"
    assert cmd.payload == (2.0, 3.0)
    for kind in ("pause", "resume", "reset"):
        assert decode_command(encode_command(OperatorCommand(kind))).kind == kind
    with pytest.raises(ValueError):
        OperatorCommand("warp")
    with pytest.raises(ValueError):
        OperatorCommand("set_reference", (np.nan, 0.0))
    with pytest.raises(ValueError):
        decode_command(encode_error("nope"))


class Client:
    def __init__(self, address, timeout=5.0):
        self.sock = socket.create_connection(address, timeout=timeout)
        self.buffer = b""

    def frames(self, count=1, timeout=5.0):
        out = []
        deadline = time.monotonic() + timeout
        while len(out) < count:
            if time.monotonic() > deadline:
                raise TimeoutError(f"got {len(out)}/{count} frames")
            while b"\n" in self.buffer:
                line, self.buffer = self.buffer.split(b"\n", 1)
                if line.strip():
                    out.append(json.loads(line))
                if len(out) == count:
                    return out
            self.sock.settimeout(max(deadline - time.monotonic(), 0.01))
            self.buffer += self.sock.recv(65536)
        return out

    def send(self, text):
        self.sock.sendall(text.encode())

    def close(self):
        self.sock.close()


@pytest.fixture
def server():
    config = ScenarioConfig.from_yaml(SCENARIO_DIR / "ring5_line_inadmissible.yaml")
    srv = TeleopServer(config, port=0, speed=2.0, snapshot_rate=30.0,
                       scenario_dir=SCENARIO_DIR)
    srv.start()
    yield srv
    srv.stop()


def test_stream_rate_and_governed_reference(server):
    client = Client(server.address)
    try:
        frames = client.frames(count=8)
        assert all(f["kind"] == "snapshot" for f in frames)

        t0 = time.monotonic()
        count = 45
        frames = client.frames(count=count, timeout=10.0)
        elapsed = time.monotonic() - t0
        rate = count / elapsed
        assert 28.0 <= rate <= 32.0

        client.send(encode_command(OperatorCommand("set_reference", (2.0, 3.0))))
        deadline = time.monotonic() + 2.0
        governed_ok = False
        while time.monotonic() < deadline:
            frame = client.frames(count=1)[0]
            raw = frame["raw_ref"]
            m = frame["applied_ref"]
            if raw == [2.0, 3.0] and m[0] + m[1] <= 3.0:
                governed_ok = True
                break
        assert governed_ok, "governed reference did not reflect the new raw reference in time"
    finally:
        client.close()


def test_malformed_command_rejected_stream_continues(server):
    client = Client(server.address)
    try:
        client.frames(count=2)
        client.send('{"v": 1, "kind": "command", "name": "warp"}\n')
        client.send("this is not json\n")
        deadline = time.monotonic() + 5.0
        saw_error = 0
        while time.monotonic() < deadline and saw_error < 2:
            for frame in client.frames(count=3):
                if frame["kind"] == "error":
                    saw_error += 1
        assert saw_error >= 2
        # stream still alive
        assert client.frames(count=3)[-1]["kind"] == "snapshot"
    finally:
        client.close()


def test_pause_resume_monotone_time(server):
    client = Client(server.address)
    try:
        client.send(encode_command(OperatorCommand("pause")))
        time.sleep(0.3)
        paused_frames = client.frames(count=6)
        paused_times = [f["t"] for f in paused_frames if f["paused"]]
        assert len(paused_times) >= 2
        assert max(paused_times) == min(paused_times)

        client.send(encode_command(OperatorCommand("resume")))
        frames = client.frames(count=30, timeout=10.0)
        times = [f["t"] for f in frames]
        assert all(b >= a for a, b in zip(times, times[1:]))
        assert times[-1] > min(paused_times)
    finally:
        client.close()


def test_reset_restarts_clock(server):
    client = Client(server.address)
    try:
        while client.frames(count=1)[0]["t"] < 0.05:
            pass
        client.send(encode_command(OperatorCommand("reset")))
        deadline = time.monotonic() + 5.0
        reset_seen = False
        prev_t = np.inf
        while time.monotonic() < deadline:
            t = client.frames(count=1)[0]["t"]
            if t < prev_t:
                reset_seen = True
                break
            prev_t = t
        assert reset_seen
    finally:
        client.close()


def test_rapid_reference_commands_last_wins(server):
    client = Client(server.address)
    try:
        client.frames(count=1)
        client.send(encode_command(OperatorCommand("set_reference", (9.0, 9.0))))
        client.send(encode_command(OperatorCommand("set_reference", (-1.0, -4.0))))
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:
            frame = client.frames(count=1)[0]
            if frame["raw_ref"] == [-1.0, -4.0]:
                break
        else:
            raise AssertionError("second command never took effect")
        # the earlier command must not surface afterwards
        for frame in client.frames(count=5):
            assert frame["raw_ref"] == [-1.0, -4.0]
    finally:
        client.close()


def test_snapshot_carries_constraint_lines(server):
    client = Client(server.address)
    try:
        frame = client.frames(count=1)[0]
        assert frame["lines"] == [{"agent": 4, "normal": [1.0, 1.0], "offset": 3.0}]
        assert frame["v"] == 1
        assert len(frame["q"]) == 5
        assert len(frame["m"]) == 5
    finally:
        client.close()
