/** Ellipse edit geometry: handle layout, drag updates, canonical form. */

import type { EllipseParams } from "./types";

export type HandleKind = "center" | "major" | "minor" | "rotate";

export interface Bounds {
  width: number;
  height: number;
}

const MIN_AXIS = 0.5;
const ROTATE_HANDLE_OFFSET = 14; // px beyond the major endpoint

export function normalizeTheta(theta: number): number {
  const pi = Math.PI;
  let t = theta % pi;
  if (t < 0) t += pi;
  return t;
}

/** Enforce a >= b > 0 and theta in [0, pi); swapping axes rotates by 90 deg. */
export function canonicalize(p: EllipseParams): EllipseParams {
  let { cx, cy, a, b, theta } = p;
  a = Math.max(a, MIN_AXIS);
  b = Math.max(b, MIN_AXIS);
  if (b > a) {
    [a, b] = [b, a];
    theta += Math.PI / 2;
  }
  return { cx, cy, a, b, theta: normalizeTheta(theta) };
}

export function ellipsesEqual(p: EllipseParams, q: EllipseParams, tol = 1e-9): boolean {
  return (
    Math.abs(p.cx - q.cx) <= tol &&
    Math.abs(p.cy - q.cy) <= tol &&
    Math.abs(p.a - q.a) <= tol &&
    Math.abs(p.b - q.b) <= tol &&
    Math.abs(normalizeTheta(p.theta) - normalizeTheta(q.theta)) <= tol
  );
}

export interface HandleLayout {
  center: [number, number];
  major: [number, number];
  minor: [number, number];
  rotate: [number, number];
}

export function handlePositions(p: EllipseParams): HandleLayout {
  const ct = Math.cos(p.theta);
  const st = Math.sin(p.theta);
  return {
    center: [p.cx, p.cy],
    major: [p.cx + p.a * ct, p.cy + p.a * st],
    minor: [p.cx - p.b * st, p.cy + p.b * ct],
    rotate: [p.cx + (p.a + ROTATE_HANDLE_OFFSET) * ct, p.cy + (p.a + ROTATE_HANDLE_OFFSET) * st],
  };
}

export function nearestHandle(
  p: EllipseParams,
  x: number,
  y: number,
  grabRadius = 8,
): HandleKind | null {
  const layout = handlePositions(p);
  const order: HandleKind[] = ["center", "major", "minor", "rotate"];
  let best: HandleKind | null = null;
  let bestDist = grabRadius;
  for (const kind of order) {
    const [hx, hy] = layout[kind];
    const d = Math.hypot(x - hx, y - hy);
    if (d <= bestDist) {
      best = kind;
      bestDist = d;
    }
  }
  return best;
}

function clampCenter(p: EllipseParams, bounds: Bounds): EllipseParams {
  return {
    ...p,
    cx: Math.min(Math.max(p.cx, 0), bounds.width - 1),
    cy: Math.min(Math.max(p.cy, 0), bounds.height - 1),
  };
}

/**
 * Apply a drag of one handle to the pointer position (image coordinates).
 * Invalid drags are clamped, never rejected; the result is canonical.
 */
export function dragHandle(
  p: EllipseParams,
  handle: HandleKind,
  x: number,
  y: number,
  bounds: Bounds,
): EllipseParams {
  switch (handle) {
    case "center":
      return canonicalize(clampCenter({ ...p, cx: x, cy: y }, bounds));
    case "major": {
      const vx = x - p.cx;
      const vy = y - p.cy;
      const len = Math.hypot(vx, vy);
      if (len < 1e-6) return canonicalize(p);
      return canonicalize({ ...p, a: len, theta: Math.atan2(vy, vx) });
    }
    case "minor": {
      const len = Math.hypot(x - p.cx, y - p.cy);
      return canonicalize({ ...p, b: len });
    }
    case "rotate": {
      const vx = x - p.cx;
      const vy = y - p.cy;
      if (Math.hypot(vx, vy) < 1e-6) return canonicalize(p);
      return canonicalize({ ...p, theta: Math.atan2(vy, vx) });
    }
  }
}

/** Points of the ellipse outline for canvas rendering. */
export function outlinePoints(p: EllipseParams, segments = 72): Array<[number, number]> {
  const ct = Math.cos(p.theta);
  const st = Math.sin(p.theta);
  const pts: Array<[number, number]> = [];
  for (let i = 0; i <= segments; i++) {
    const t = (i / segments) * 2 * Math.PI;
    const ex = p.a * Math.cos(t);
    const ey = p.b * Math.sin(t);
    pts.push([p.cx + ex * ct - ey * st, p.cy + ex * st + ey * ct]);
  }
  return pts;
}
