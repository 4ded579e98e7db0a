import { describe, expect, it } from "vitest";

import { screenFromScene } from "../src/camera";
import { MAX_TRAIL_POINTS, SceneViewModel } from "../src/viewmodel";
import { FakeTransport, snapshotLine } from "./fakes";

function connected(): { view: SceneViewModel; transport: FakeTransport } {
  const transport = new FakeTransport();
  const view = new SceneViewModel(transport);
  return { view, transport };
}

describe("SceneViewModel", () => {
  it("ingests snapshots and fits a camera on the first frame", () => {
    const { view, transport } = connected();
    expect(view.snapshot).toBeNull();
    transport.feed(snapshotLine());
    expect(view.snapshot?.t).toBe(1.0);
    expect(view.camera).not.toBeNull();
    expect(view.trails.length).toBe(2);
  });

  it("bounds trails and skips repeated positions", () => {
    const { view, transport } = connected();
    for (let k = 0; k < MAX_TRAIL_POINTS + 50; k++) {
      transport.feed(
        snapshotLine({ t: k * 0.01, q: [[k * 1e-3, 0], [0, 0]] }),
      );
    }
    expect(view.trails[0].length).toBe(MAX_TRAIL_POINTS);
    expect(view.trails[1].length).toBe(1); // the second robot never moved
  });

  it("resets trails when the scenario restarts", () => {
    const { view, transport } = connected();
    transport.feed(snapshotLine({ t: 5.0 }));
    transport.feed(snapshotLine({ t: 5.1, q: [[0, 0], [1, 1]] }));
    expect(view.trails[0].length).toBe(2);
    transport.feed(snapshotLine({ t: 0.0 }));
    expect(view.trails[0].length).toBe(1);
  });

  it("keeps the stream alive across decode failures and shows a banner", () => {
    const { view, transport } = connected();
    transport.feed(snapshotLine());
    transport.feed("garbage that is not json");
    expect(view.decodeErrors).toBe(1);
    expect(view.lastError).toBeTruthy();
    transport.feed(snapshotLine({ t: 2.0 }));
    expect(view.snapshot?.t).toBe(2.0);
  });

  it("records server error frames", () => {
    const { view, transport } = connected();
    transport.feed('{"v": 1, "kind": "error", "message": "rejected command: bad"}');
    expect(view.serverErrors).toEqual(["rejected command: bad"]);
  });

  it("maps clicks to scene coordinates on the wire", () => {
    const { view, transport } = connected();
    view.width = 800;
    view.height = 600;
    transport.feed(snapshotLine());
    view.camera = { centerX: 0, centerY: 0, scale: 50 };
    const target: [number, number] = [2.0, 3.0];
    const [sx, sy] = screenFromScene(view.camera, view.width, view.height, target);
    const command = view.handleClick(sx, sy);
    expect(command).not.toBeNull();
    expect(transport.sent.length).toBe(1);
    const parsed = JSON.parse(transport.sent[0]);
    expect(parsed.name).toBe("set_reference");
    expect(parsed.payload[0]).toBeCloseTo(2.0, 9);
    expect(parsed.payload[1]).toBeCloseTo(3.0, 9);
  });

  it("suppresses clicks while disconnected", () => {
    const { view, transport } = connected();
    transport.feed(snapshotLine());
    transport.status = "disconnected";
    expect(view.handleClick(100, 100)).toBeNull();
    expect(transport.sent.length).toBe(0);
  });

  it("marks the view stale when frames stop", () => {
    const { view, transport } = connected();
    transport.feed(snapshotLine());
    const now = Date.now();
    expect(view.isStale(now)).toBe(false);
    expect(view.isStale(now + 10000)).toBe(true);
  });

  it("sends lifecycle and scenario commands only while connected", () => {
    const { view, transport } = connected();
    expect(view.sendCommand({ name: "pause" })).toBe(true);
    expect(view.loadScenario("ring5_line_admissible")).toBe(true);
    expect(view.selectedScenario).toBe("ring5_line_admissible");
    transport.status = "disconnected";
    expect(view.sendCommand({ name: "resume" })).toBe(false);
    expect(transport.sent.length).toBe(2);
  });
});
