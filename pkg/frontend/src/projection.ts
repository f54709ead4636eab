// Orthographic two-view geometry: the frontal view looks down the z axis onto
// the x-y plane, the sagittal view looks along x onto the y-z plane.  Both
// share the world y coordinate, which is what makes two-view steering of a
// single 3D goal coherent.

import type { Vec3 } from "./protocol.js";

export type View = "frontal" | "sagittal";

export interface Pt {
  x: number;
  y: number;
}

export const FORCE_PX_PER_N = 24;
export const FORCE_MAX_N = 3.3;

export function projectPoint(view: View, p: Vec3): Pt {
  return view === "frontal" ? { x: p[0], y: p[1] } : { x: p[1], y: p[2] };
}

/** Inverse of projectPoint for steering: the two displayed axes come from the
 * drag, the hidden one keeps its current value. */
export function liftDrag(view: View, pt: Pt, current: Vec3): Vec3 {
  return view === "frontal" ? [pt.x, pt.y, current[2]] : [current[0], pt.x, pt.y];
}

function cross(o: Pt, a: Pt, b: Pt): number {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

/** 2D convex hull (monotone chain), counter-clockwise, first point not
 * repeated.  Collinear boundary points are dropped. */
export function convexOutline(pts: Pt[]): Pt[] {
  const s = [...pts].sort((p, q) => p.x - q.x || p.y - q.y);
  if (s.length <= 2) return s;
  const lower: Pt[] = [];
  for (const p of s) {
    while (lower.length >= 2 && cross(lower[lower.length - 2]!, lower[lower.length - 1]!, p) <= 0)
      lower.pop();
    lower.push(p);
  }
  const upper: Pt[] = [];
  for (let i = s.length - 1; i >= 0; i--) {
    const p = s[i]!;
    while (upper.length >= 2 && cross(upper[upper.length - 2]!, upper[upper.length - 1]!, p) <= 0)
      upper.pop();
    upper.push(p);
  }
  lower.pop();
  upper.pop();
  return lower.concat(upper);
}

/** Aspect-preserving map from a world rectangle onto a canvas, second axis up. */
export class ViewTransform {
  readonly scale: number;
  private readonly cx: number;
  private readonly cy: number;

  constructor(
    readonly view: View,
    worldPts: Pt[],
    readonly width: number,
    readonly height: number,
    padFrac = 0.12,
  ) {
    if (worldPts.length === 0) throw new Error("cannot fit an empty point set");
    let xmin = Infinity,
      xmax = -Infinity,
      ymin = Infinity,
      ymax = -Infinity;
    for (const p of worldPts) {
      xmin = Math.min(xmin, p.x);
      xmax = Math.max(xmax, p.x);
      ymin = Math.min(ymin, p.y);
      ymax = Math.max(ymax, p.y);
    }
    const spanX = Math.max(xmax - xmin, 1e-9);
    const spanY = Math.max(ymax - ymin, 1e-9);
    this.scale = (1 - 2 * padFrac) * Math.min(width / spanX, height / spanY);
    this.cx = (xmin + xmax) / 2;
    this.cy = (ymin + ymax) / 2;
  }

  toCanvas(p: Pt): Pt {
    return {
      x: this.width / 2 + (p.x - this.cx) * this.scale,
      y: this.height / 2 - (p.y - this.cy) * this.scale,
    };
  }

  toWorld(px: Pt): Pt {
    return {
      x: this.cx + (px.x - this.width / 2) / this.scale,
      y: this.cy - (px.y - this.height / 2) / this.scale,
    };
  }
}

export function fitTransform(
  view: View,
  vertices: Vec3[],
  width: number,
  height: number,
): ViewTransform {
  return new ViewTransform(view, vertices.map((v) => projectPoint(view, v)), width, height);
}

/** Projected force arrow in canvas pixels, clamped so the 3.3 N cap is the
 * maximum arrow length regardless of the configured px-per-newton scale. */
export function forceArrowPx(view: View, force: Vec3, pxPerN = FORCE_PX_PER_N): Pt {
  const f = projectPoint(view, force);
  const len = Math.hypot(f.x, f.y);
  const clamped = Math.min(len, FORCE_MAX_N);
  const k = len > 1e-12 ? (clamped * pxPerN) / len : 0;
  // canvas y points down
  return { x: f.x * k, y: -f.y * k };
}
