import { describe, expect, it } from "vitest";

import {
  canonicalize,
  dragHandle,
  ellipsesEqual,
  handlePositions,
  nearestHandle,
  normalizeTheta,
  outlinePoints,
} from "../src/ellipse";
import type { EllipseParams } from "../src/types";

const BOUNDS = { width: 128, height: 128 };

function base(): EllipseParams {
  return { cx: 64, cy: 60, a: 20, b: 12, theta: 0.4 };
}

describe("canonicalize", () => {
  it("keeps valid params unchanged", () => {
    expect(canonicalize(base())).toEqual(base());
  });

  it("swaps axes and rotates by 90 deg when b exceeds a", () => {
    const out = canonicalize({ cx: 10, cy: 10, a: 5, b: 9, theta: 0.3 });
    expect(out.a).toBe(9);
    expect(out.b).toBe(5);
    expect(out.theta).toBeCloseTo(normalizeTheta(0.3 + Math.PI / 2), 12);
  });

  it("folds theta into [0, pi)", () => {
    expect(canonicalize({ ...base(), theta: Math.PI + 0.25 }).theta).toBeCloseTo(0.25, 12);
    expect(canonicalize({ ...base(), theta: -0.25 }).theta).toBeCloseTo(Math.PI - 0.25, 12);
  });

  it("enforces a minimum axis length", () => {
    const out = canonicalize({ ...base(), a: 0, b: 0 });
    expect(out.a).toBeGreaterThan(0);
    expect(out.b).toBeGreaterThan(0);
  });
});

describe("dragHandle", () => {
  it("moves the center by the pointer delta", () => {
    const out = dragHandle(base(), "center", 64 + 5, 60 + 3, BOUNDS);
    expect(out.cx).toBe(69);
    expect(out.cy).toBe(63);
    expect(out.a).toBe(base().a);
  });

  it("clamps the center to image bounds", () => {
    const out = dragHandle(base(), "center", -40, 4000, BOUNDS);
    expect(out.cx).toBe(0);
    expect(out.cy).toBe(BOUNDS.height - 1);
  });

  it("major drag sets axis length and rotation", () => {
    const p = base();
    const out = dragHandle(p, "major", p.cx + 30, p.cy, BOUNDS);
    expect(out.a).toBeCloseTo(30, 9);
    expect(out.theta).toBeCloseTo(0, 9);
  });

  it("dragging minor beyond major swaps axes and shifts theta by 90 deg", () => {
    const p = base(); // a=20, b=12
    const minorDir: [number, number] = [-Math.sin(p.theta), Math.cos(p.theta)];
    const out = dragHandle(p, "minor", p.cx + 25 * minorDir[0], p.cy + 25 * minorDir[1],
      BOUNDS);
    expect(out.a).toBeCloseTo(25, 6);
    expect(out.b).toBeCloseTo(20, 6);
    expect(out.theta).toBeCloseTo(normalizeTheta(p.theta + Math.PI / 2), 6);
    expect(out.a).toBeGreaterThanOrEqual(out.b);
  });

  it("rotate drag keeps axes", () => {
    const p = base();
    const out = dragHandle(p, "rotate", p.cx, p.cy + 40, BOUNDS);
    expect(out.a).toBe(p.a);
    expect(out.b).toBe(p.b);
    expect(out.theta).toBeCloseTo(Math.PI / 2, 9);
  });

  it("degenerate zero-length drags are no-ops", () => {
    const p = base();
    expect(ellipsesEqual(dragHandle(p, "major", p.cx, p.cy, BOUNDS), p)).toBe(true);
  });
});

describe("handles and outline", () => {
  it("major handle sits on the ellipse boundary", () => {
    const p = base();
    const { major } = handlePositions(p);
    const dx = major[0] - p.cx;
    const dy = major[1] - p.cy;
    expect(Math.hypot(dx, dy)).toBeCloseTo(p.a, 9);
  });

  it("nearestHandle picks the closest within the grab radius", () => {
    const p = base();
    const { minor } = handlePositions(p);
    expect(nearestHandle(p, minor[0] + 2, minor[1], 8)).toBe("minor");
    expect(nearestHandle(p, 0, 0, 8)).toBeNull();
  });

  it("outline points satisfy the ellipse equation", () => {
    const p = base();
    for (const [x, y] of outlinePoints(p, 16)) {
      const dx = x - p.cx;
      const dy = y - p.cy;
      const u = dx * Math.cos(p.theta) + dy * Math.sin(p.theta);
      const v = -dx * Math.sin(p.theta) + dy * Math.cos(p.theta);
      expect((u / p.a) ** 2 + (v / p.b) ** 2).toBeCloseTo(1, 9);
    }
  });
});
