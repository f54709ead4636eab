// Canvas drawing.  buildViewModel reduces a snapshot to plain pixel-space
// primitives (pure, unit-tested); drawView replays them onto a 2D context.

import {
  convexOutline,
  forceArrowPx,
  projectPoint,
  type Pt,
  type View,
  type ViewTransform,
} from "./projection.js";
import type { Snapshot } from "./snapshot.js";

export const COLORS = {
  background: "#10151c",
  grid: "#1c2430",
  hull: "#4da3ff",
  hullFill: "rgba(77,163,255,0.10)",
  hullContact: "#ff5f56",
  hullContactFill: "rgba(255,95,86,0.16)",
  goal: "#ffd166",
  proxy: "#9ef01a",
  force: "#ff5f56",
  text: "#c9d4e3",
  stale: "#f4a261",
};

export interface ViewModel {
  outline: Pt[]; // hull boundary, canvas px
  goal: Pt | null;
  proxy: Pt | null;
  arrow: { from: Pt; dx: number; dy: number } | null;
  inContact: boolean;
  stale: boolean;
  vfEnabled: boolean;
  connected: boolean;
}

export function buildViewModel(view: View, snap: Snapshot, t: ViewTransform): ViewModel {
  const outline =
    snap.mesh === null
      ? []
      : convexOutline(snap.mesh.vertices.map((v) => projectPoint(view, v))).map((p) =>
          t.toCanvas(p),
        );
  const s = snap.state;
  let goal: Pt | null = null;
  let proxy: Pt | null = null;
  let arrow: ViewModel["arrow"] = null;
  if (s !== null) {
    goal = t.toCanvas(projectPoint(view, s.goal));
    proxy = t.toCanvas(projectPoint(view, s.proxy));
    const a = forceArrowPx(view, s.force);
    if (Math.hypot(a.x, a.y) > 0.5) arrow = { from: proxy, dx: a.x, dy: a.y };
  }
  return {
    outline,
    goal,
    proxy,
    arrow,
    inContact: s?.in_contact ?? false,
    stale: s?.stale ?? false,
    vfEnabled: s?.vf_enabled ?? true,
    connected: snap.connection === "open",
  };
}

/** Structural subset of CanvasRenderingContext2D so tests can record calls. */
export interface Ctx2D {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
  globalAlpha: number;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  closePath(): void;
  stroke(): void;
  fill(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  setLineDash(segments: number[]): void;
  fillText(text: string, x: number, y: number): void;
  save(): void;
  restore(): void;
}

function tracePolygon(ctx: Ctx2D, pts: Pt[]): void {
  ctx.beginPath();
  ctx.moveTo(pts[0]!.x, pts[0]!.y);
  for (let i = 1; i < pts.length; i++) ctx.lineTo(pts[i]!.x, pts[i]!.y);
  ctx.closePath();
}

function dot(ctx: Ctx2D, p: Pt, r: number, color: string): void {
  ctx.fillStyle = color;
  ctx.beginPath();
  ctx.arc(p.x, p.y, r, 0, 2 * Math.PI);
  ctx.fill();
}

export function drawView(ctx: Ctx2D, w: number, h: number, vm: ViewModel, label: string): void {
  ctx.save();
  ctx.globalAlpha = 1;
  ctx.fillStyle = COLORS.background;
  ctx.clearRect(0, 0, w, h);
  ctx.fillRect(0, 0, w, h);

  if (!vm.connected) ctx.globalAlpha = 0.35;

  if (vm.outline.length >= 3) {
    tracePolygon(ctx, vm.outline);
    ctx.fillStyle = vm.inContact ? COLORS.hullContactFill : COLORS.hullFill;
    ctx.fill();
    tracePolygon(ctx, vm.outline);
    ctx.strokeStyle = vm.inContact ? COLORS.hullContact : COLORS.hull;
    ctx.lineWidth = vm.inContact ? 3 : 2;
    ctx.setLineDash(vm.vfEnabled ? [] : [6, 5]);
    ctx.stroke();
    ctx.setLineDash([]);
  }

  if (vm.arrow !== null) {
    const { from, dx, dy } = vm.arrow;
    ctx.strokeStyle = COLORS.force;
    ctx.lineWidth = 2.5;
    ctx.beginPath();
    ctx.moveTo(from.x, from.y);
    ctx.lineTo(from.x + dx, from.y + dy);
    ctx.stroke();
    const ang = Math.atan2(dy, dx);
    ctx.beginPath();
    ctx.moveTo(from.x + dx, from.y + dy);
    ctx.lineTo(from.x + dx - 9 * Math.cos(ang - 0.45), from.y + dy - 9 * Math.sin(ang - 0.45));
    ctx.moveTo(from.x + dx, from.y + dy);
    ctx.lineTo(from.x + dx - 9 * Math.cos(ang + 0.45), from.y + dy - 9 * Math.sin(ang + 0.45));
    ctx.stroke();
  }

  if (vm.proxy !== null) dot(ctx, vm.proxy, 4, COLORS.proxy);
  if (vm.goal !== null) dot(ctx, vm.goal, 5, vm.stale ? COLORS.stale : COLORS.goal);

  ctx.globalAlpha = 1;
  ctx.fillStyle = COLORS.text;
  ctx.font = "12px system-ui, sans-serif";
  ctx.fillText(label, 10, 18);

  if (!vm.connected) {
    ctx.fillStyle = COLORS.hullContact;
    ctx.font = "14px system-ui, sans-serif";
    ctx.fillText("disconnected - reconnecting...", 10, h - 14);
  }
  ctx.restore();
}
