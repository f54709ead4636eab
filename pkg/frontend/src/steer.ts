// Pointer steering: drags map canvas pixels back to world goals, and a
// coalescer caps the outbound rate so a 240 Hz mouse never floods the bridge.
// Dropped intermediates are fine; the engine only honors the latest goal.

import type { Vec3 } from "./protocol.js";
import { liftDrag, type Pt, type View, type ViewTransform } from "./projection.js";

export function dragGoal(
  view: View,
  canvasPt: Pt,
  transform: ViewTransform,
  current: Vec3,
): Vec3 {
  return liftDrag(view, transform.toWorld(canvasPt), current);
}

export class GoalCoalescer {
  private pending: Vec3 | null = null;
  private lastSent: Vec3 | null = null;
  private lastFlushMs = -Infinity;
  private readonly minIntervalMs: number;

  constructor(maxHz = 60) {
    if (maxHz <= 0) throw new Error("maxHz must be positive");
    this.minIntervalMs = 1000 / maxHz;
  }

  offer(goal: Vec3): void {
    this.pending = goal;
  }

  /** The goal to send now, or null (nothing new, or inside the rate window).
   * Coalesces: only the latest offer since the previous flush survives. */
  flush(nowMs: number): Vec3 | null {
    if (this.pending === null) return null;
    if (nowMs - this.lastFlushMs < this.minIntervalMs - 1e-9) return null;
    const out = this.pending;
    if (
      this.lastSent !== null &&
      out[0] === this.lastSent[0] &&
      out[1] === this.lastSent[1] &&
      out[2] === this.lastSent[2]
    ) {
      this.pending = null;
      return null;
    }
    this.pending = null;
    this.lastSent = out;
    this.lastFlushMs = nowMs;
    return out;
  }
}
