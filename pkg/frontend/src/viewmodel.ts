// State behind the console: the last decoded snapshot, bounded position
// trails, camera, connection status, and the operator's pending intent.
// The view model renders only data it has received; it never extrapolates.

import { Camera, fitCamera, sceneFromScreen } from "./camera.js";
import type { FrameTransport } from "./connection.js";
import { Command, Snapshot, Vec2, decodeFrame, encodeCommand } from "./protocol.js";

export const MAX_TRAIL_POINTS = 2000;
export const STALE_AFTER_MS = 1500;

export class SceneViewModel {
  snapshot: Snapshot | null = null;
  trails: Vec2[][] = [];
  camera: Camera | null = null;
  width = 800;
  height = 600;
  lastFrameAt: number | null = null;
  decodeErrors = 0;
  lastError: string | null = null;
  serverErrors: string[] = [];
  selectedScenario: string | null = null;

  constructor(private transport: FrameTransport) {
    transport.onLine = (line) => this.ingestLine(line, Date.now());
  }

  get status() {
    return this.transport.status;
  }

  ingestLine(line: string, nowMs: number): void {
    let frame;
    try {
      frame = decodeFrame(line);
    } catch (err) {
      this.decodeErrors += 1;
      this.lastError = err instanceof Error ? err.message : String(err);
      return; // banner only; the stream continues
    }
    if (frame.kind === "error") {
      this.serverErrors.push(frame.message);
      if (this.serverErrors.length > 20) this.serverErrors.shift();
      return;
    }
    const snapshot = frame.snapshot;
    const restarted =
      this.snapshot !== null && snapshot.t < this.snapshot.t - 1e-9;
    if (restarted || this.trails.length !== snapshot.positions.length) {
      this.trails = snapshot.positions.map(() => []);
    }
    snapshot.positions.forEach((p, i) => {
      const trail = this.trails[i];
      const last = trail[trail.length - 1];
      if (!last || last[0] !== p[0] || last[1] !== p[1]) {
        trail.push(p);
        if (trail.length > MAX_TRAIL_POINTS) trail.shift();
      }
    });
    this.snapshot = snapshot;
    this.lastFrameAt = nowMs;
    if (this.camera === null) {
      const interest: Vec2[] = [
        ...snapshot.positions,
        snapshot.rawRef,
        snapshot.appliedRef,
      ];
      this.camera = fitCamera(interest, this.width, this.height);
    }
  }

  isStale(nowMs: number): boolean {
    return this.lastFrameAt === null || nowMs - this.lastFrameAt > STALE_AFTER_MS;
  }

  /** Map a click to a set-reference command and send it; null if offline. */
  handleClick(screenX: number, screenY: number): Command | null {
    if (this.status !== "connected" || this.camera === null) return null;
    const scene = sceneFromScreen(this.camera, this.width, this.height, [
      screenX,
      screenY,
    ]);
    const command: Command = { name: "set_reference", payload: scene };
    this.transport.send(encodeCommand(command));
    return command;
  }

  sendCommand(command: Command): boolean {
    if (this.status !== "connected") return false;
    this.transport.send(encodeCommand(command));
    return true;
  }

  loadScenario(id: string): boolean {
    this.selectedScenario = id;
    return this.sendCommand({ name: "load_scenario", payload: id });
  }
}
