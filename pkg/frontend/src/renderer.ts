// Canvas drawing. Everything renders from the view model's last snapshot;
// a stale indicator appears when frames stop arriving. The renderer only
// needs a small subset of CanvasRenderingContext2D so tests can drive it
// with a recording fake.

import { screenFromScene } from "./camera.js";
import type { SceneViewModel } from "./viewmodel.js";
import type { Vec2 } from "./protocol.js";

export interface Draw2D {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
  globalAlpha: number;
  textAlign: CanvasTextAlign;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  closePath(): void;
  stroke(): void;
  fill(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  fillText(text: string, x: number, y: number): void;
  setLineDash(segments: number[]): void;
}

export const COLORS = {
  background: "#10141a",
  robot: "#7ecbff",
  leader: "#ffd166",
  trail: "#3a5b77",
  line: "#ff6b6b",
  rawRef: "#ff9f1c",
  governedRef: "#2ec4b6",
  text: "#d7e3ee",
  banner: "#e63946",
};

export function renderFrame(ctx: Draw2D, view: SceneViewModel, nowMs: number): void {
  const { width: w, height: h } = view;
  ctx.globalAlpha = 1;
  ctx.setLineDash([]);
  ctx.fillStyle = COLORS.background;
  ctx.fillRect(0, 0, w, h);

  const snap = view.snapshot;
  const cam = view.camera;
  if (!snap || !cam) {
    ctx.fillStyle = COLORS.text;
    ctx.font = "16px sans-serif";
    ctx.textAlign = "center";
    ctx.fillText(
      view.status === "disconnected" ? "disconnected; reconnect to resume" : "waiting for telemetry...",
      w / 2,
      h / 2,
    );
    return;
  }
  const toScreen = (p: Vec2) => screenFromScene(cam, w, h, p);

  // Constraint boundary lines, drawn across the whole viewport.
  const span = Math.max(w, h) / cam.scale + Math.abs(cam.centerX) + Math.abs(cam.centerY);
  for (const line of snap.lines) {
    const norm = Math.hypot(line.normal[0], line.normal[1]);
    const foot: Vec2 = [
      (line.normal[0] * line.offset) / (norm * norm),
      (line.normal[1] * line.offset) / (norm * norm),
    ];
    const dir: Vec2 = [-line.normal[1] / norm, line.normal[0] / norm];
    const a = toScreen([foot[0] - span * dir[0], foot[1] - span * dir[1]]);
    const b = toScreen([foot[0] + span * dir[0], foot[1] + span * dir[1]]);
    ctx.strokeStyle = COLORS.line;
    ctx.lineWidth = 2;
    ctx.setLineDash([8, 6]);
    ctx.beginPath();
    ctx.moveTo(a[0], a[1]);
    ctx.lineTo(b[0], b[1]);
    ctx.stroke();
    ctx.setLineDash([]);
  }

  // Trails.
  ctx.strokeStyle = COLORS.trail;
  ctx.lineWidth = 1;
  ctx.globalAlpha = 0.7;
  for (const trail of view.trails) {
    if (trail.length < 2) continue;
    ctx.beginPath();
    const first = toScreen(trail[0]);
    ctx.moveTo(first[0], first[1]);
    for (let i = 1; i < trail.length; i++) {
      const p = toScreen(trail[i]);
      ctx.lineTo(p[0], p[1]);
    }
    ctx.stroke();
  }
  ctx.globalAlpha = 1;

  // Robots with indices; leaders get a halo.
  ctx.font = "12px sans-serif";
  ctx.textAlign = "center";
  snap.positions.forEach((p, i) => {
    const s = toScreen(p);
    const leader = snap.leaders.includes(i);
    if (leader) {
      ctx.strokeStyle = COLORS.leader;
      ctx.lineWidth = 2;
      ctx.beginPath();
      ctx.arc(s[0], s[1], 10, 0, 2 * Math.PI);
      ctx.stroke();
    }
    ctx.fillStyle = leader ? COLORS.leader : COLORS.robot;
    ctx.beginPath();
    ctx.arc(s[0], s[1], 6, 0, 2 * Math.PI);
    ctx.fill();
    ctx.fillStyle = COLORS.text;
    ctx.fillText(String(i), s[0], s[1] - 12);
  });

  // Raw operator reference: cross.
  const raw = toScreen(snap.rawRef);
  ctx.strokeStyle = COLORS.rawRef;
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.moveTo(raw[0] - 8, raw[1] - 8);
  ctx.lineTo(raw[0] + 8, raw[1] + 8);
  ctx.moveTo(raw[0] - 8, raw[1] + 8);
  ctx.lineTo(raw[0] + 8, raw[1] - 8);
  ctx.stroke();

  // Governed reference: diamond.
  const gov = toScreen(snap.appliedRef);
  ctx.fillStyle = COLORS.governedRef;
  ctx.strokeStyle = COLORS.governedRef;
  ctx.beginPath();
  ctx.moveTo(gov[0], gov[1] - 8);
  ctx.lineTo(gov[0] + 8, gov[1]);
  ctx.lineTo(gov[0], gov[1] + 8);
  ctx.lineTo(gov[0] - 8, gov[1]);
  ctx.closePath();
  ctx.fill();

  // Status line and banners.
  ctx.textAlign = "left";
  ctx.fillStyle = COLORS.text;
  ctx.font = "12px monospace";
  const finiteMargins = snap.margins.filter((m): m is number => m !== null);
  const worst = finiteMargins.length ? Math.min(...finiteMargins).toFixed(3) : "n/a";
  ctx.fillText(
    `t=${snap.t.toFixed(2)}s  raw=(${snap.rawRef[0].toFixed(2)}, ${snap.rawRef[1].toFixed(2)})  ` +
      `governed=(${snap.appliedRef[0].toFixed(2)}, ${snap.appliedRef[1].toFixed(2)})  margin=${worst}` +
      (snap.paused ? "  [PAUSED]" : "") + (snap.drops ? `  dropped=${snap.drops}` : ""),
    8,
    h - 10,
  );

  ctx.textAlign = "center";
  ctx.font = "14px sans-serif";
  if (!snap.feasible) {
    ctx.fillStyle = COLORS.banner;
    ctx.fillText("governor infeasible; holding last admissible reference", w / 2, 22);
  }
  if (view.isStale(nowMs)) {
    ctx.fillStyle = COLORS.banner;
    ctx.fillText("telemetry stale", w / 2, 42);
  }
  if (view.lastError) {
    ctx.fillStyle = COLORS.banner;
    ctx.fillText(`decode error: ${view.lastError}`, w / 2, h - 30);
  }
}
