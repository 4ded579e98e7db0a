// Browser bootstrap: connect to the service's WebSocket bridge, render at
// the display rate, translate clicks and buttons into operator commands.
//
// Query parameters:
//   ?ws=ws://127.0.0.1:8751   bridge URL (default shown)

import { WebSocketTransport } from "./connection.js";
import { renderFrame } from "./renderer.js";
import { SceneViewModel } from "./viewmodel.js";

function param(name: string, fallback: string): string {
  return new URLSearchParams(window.location.search).get(name) ?? fallback;
}

function start(): void {
  const canvas = document.getElementById("scene") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("2d canvas context unavailable");

  const transport = new WebSocketTransport(param("ws", "ws://127.0.0.1:8751"));
  const view = new SceneViewModel(transport);

  const resize = () => {
    canvas.width = canvas.clientWidth * devicePixelRatio;
    canvas.height = canvas.clientHeight * devicePixelRatio;
    view.width = canvas.width;
    view.height = canvas.height;
  };
  window.addEventListener("resize", resize);
  resize();

  canvas.addEventListener("click", (event: MouseEvent) => {
    const rect = canvas.getBoundingClientRect();
    const x = (event.clientX - rect.left) * devicePixelRatio;
    const y = (event.clientY - rect.top) * devicePixelRatio;
    view.handleClick(x, y);
  });

  const bind = (id: string, action: () => void) => {
    const el = document.getElementById(id);
    if (el) el.addEventListener("click", action);
  };
  bind("pause", () => view.sendCommand({ name: "pause" }));
  bind("resume", () => view.sendCommand({ name: "resume" }));
  bind("reset", () => view.sendCommand({ name: "reset" }));
  bind("load", () => {
    const select = document.getElementById("scenario") as HTMLSelectElement | null;
    if (select && select.value) view.loadScenario(select.value);
  });

  const status = document.getElementById("status");
  const tick = () => {
    renderFrame(ctx, view, Date.now());
    if (status) {
      status.textContent =
        view.status + (view.snapshot ? ` | t=${view.snapshot.t.toFixed(1)}s` : "");
    }
    requestAnimationFrame(tick);
  };
  requestAnimationFrame(tick);
}

window.addEventListener("DOMContentLoaded", start);
