// Scene <-> screen mapping. Scene coordinates are meters with y up; screen
// coordinates are CSS pixels with y down and the origin at the top left.

import type { Vec2 } from "./protocol.js";

export interface Camera {
  centerX: number;
  centerY: number;
  scale: number; // pixels per meter
}

export function screenFromScene(
  camera: Camera,
  width: number,
  height: number,
  p: Vec2,
): Vec2 {
  return [
    width / 2 + (p[0] - camera.centerX) * camera.scale,
    height / 2 - (p[1] - camera.centerY) * camera.scale,
  ];
}

export function sceneFromScreen(
  camera: Camera,
  width: number,
  height: number,
  s: Vec2,
): Vec2 {
  return [
    camera.centerX + (s[0] - width / 2) / camera.scale,
    camera.centerY - (s[1] - height / 2) / camera.scale,
  ];
}

/** Camera that fits all given scene points with a fractional margin. */
export function fitCamera(
  points: Vec2[],
  width: number,
  height: number,
  margin = 0.15,
): Camera {
  if (points.length === 0) return { centerX: 0, centerY: 0, scale: 50 };
  let minX = Infinity;
  let maxX = -Infinity;
  let minY = Infinity;
  let maxY = -Infinity;
  for (const [x, y] of points) {
    minX = Math.min(minX, x);
    maxX = Math.max(maxX, x);
    minY = Math.min(minY, y);
    maxY = Math.max(maxY, y);
  }
  const spanX = Math.max(maxX - minX, 1e-6);
  const spanY = Math.max(maxY - minY, 1e-6);
  const scale = Math.min(
    width / (spanX * (1 + 2 * margin)),
    height / (spanY * (1 + 2 * margin)),
  );
  return {
    centerX: (minX + maxX) / 2,
    centerY: (minY + maxY) / 2,
    scale: Math.max(scale, 1e-3),
  };
}
