// Wire protocol of the teleoperation service: newline-delimited JSON frames,
// one object per line. Field layout is documented in ../../docs/protocol.md.
// Unknown fields are ignored for forward compatibility; `v` gates breaking
// changes.

export const PROTOCOL_VERSION = 1;

export type Vec2 = [number, number];

export interface ConstraintLine {
  agent: number;
  normal: Vec2;
  offset: number; // half-space is {p : normal . p <= offset}
}

export interface Snapshot {
  v: number;
  t: number;
  positions: Vec2[];
  estimates: Vec2[];
  appliedRef: Vec2;
  rawRef: Vec2;
  lines: ConstraintLine[];
  margins: (number | null)[];
  feasible: boolean;
  leaders: number[];
  paused: boolean;
  seq: number;
  drops: number;
}

export type ServerFrame =
  | { kind: "snapshot"; snapshot: Snapshot }
  | { kind: "error"; message: string };

export type Command =
  | { name: "set_reference"; payload: Vec2 }
  | { name: "pause" }
  | { name: "resume" }
  | { name: "reset" }
  | { name: "load_scenario"; payload: string };

function asVec2(value: unknown, what: string): Vec2 {
  if (!Array.isArray(value) || value.length !== 2) {
    throw new Error(`${what} is not a 2-vector`);
  }
  const x = Number(value[0]);
  const y = Number(value[1]);
  if (!Number.isFinite(x) || !Number.isFinite(y)) {
    throw new Error(`${what} has non-finite entries`);
  }
  return [x, y];
}

function asVec2List(value: unknown, what: string): Vec2[] {
  if (!Array.isArray(value)) throw new Error(`${what} is not a list`);
  return value.map((entry, i) => asVec2(entry, `${what}[${i}]`));
}

export function decodeFrame(line: string): ServerFrame {
  const data = JSON.parse(line) as Record<string, unknown>;
  if (data.kind === "error") {
    return { kind: "error", message: String(data.message ?? "unknown error") };
  }
  if (data.kind !== "snapshot") {
    throw new Error(`unexpected frame kind ${String(data.kind)}`);
  }
  const rawLines = Array.isArray(data.lines) ? data.lines : [];
  const rawMargins = Array.isArray(data.margins) ? data.margins : [];
  const snapshot: Snapshot = {
    v: Number(data.v ?? 0),
    t: Number(data.t),
    positions: asVec2List(data.q, "q"),
    estimates: asVec2List(data.m, "m"),
    appliedRef: asVec2(data.applied_ref, "applied_ref"),
    rawRef: asVec2(data.raw_ref, "raw_ref"),
    lines: rawLines.map((entry) => {
      const l = entry as Record<string, unknown>;
      return {
        agent: Number(l.agent),
        normal: asVec2(l.normal, "line normal"),
        offset: Number(l.offset),
      };
    }),
    margins: rawMargins.map((m) => (m === null ? null : Number(m))),
    feasible: Boolean(data.feasible ?? true),
    leaders: Array.isArray(data.leaders) ? data.leaders.map(Number) : [],
    paused: Boolean(data.paused ?? false),
    seq: Number(data.seq ?? 0),
    drops: Number(data.drops ?? 0),
  };
  if (!Number.isFinite(snapshot.t)) throw new Error("snapshot has no time");
  return { kind: "snapshot", snapshot };
}

export function encodeCommand(command: Command): string {
  const frame: Record<string, unknown> = {
    v: PROTOCOL_VERSION,
    kind: "command",
    name: command.name,
  };
  if ("payload" in command) frame.payload = command.payload;
  return JSON.stringify(frame) + "\n";
}
