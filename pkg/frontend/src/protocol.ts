// Message schema of the JSON-over-WebSocket bridge (docs/ui-bridge.md).
// Parsing is defensive: anything that does not match the schema becomes null
// rather than an exception in the message loop.

export type Vec3 = [number, number, number];

export interface StateMsg {
  type: "state";
  t_ns: number;
  proxy: Vec3;
  goal: Vec3;
  force: Vec3;
  in_contact: boolean;
  stale: boolean;
  depth_mm: number;
  vf_enabled: boolean;
  cutting: boolean;
}

export interface MeshMsg {
  type: "mesh";
  vertices: Vec3[];
  triangles: [number, number, number][];
}

export interface FramesMsg {
  type: "frames";
  tip: Vec3;
  anchor_r: number[]; // row-major 3x3
  anchor_t: Vec3;
}

export interface StatsMsg {
  type: "stats";
  vf_enabled: boolean;
  min_margin_mm: number | null;
  tick_count?: number;
  mean_period_ns?: number;
  p99_period_ns?: number;
  max_period_ns?: number;
  mean_compute_ns?: number;
  overrun_count?: number;
  stale_tick_count?: number;
}

export interface ErrorMsg {
  type: "error";
  message: string;
}

export type ServerMsg = StateMsg | MeshMsg | FramesMsg | StatsMsg | ErrorMsg;

function isFiniteNumber(x: unknown): x is number {
  return typeof x === "number" && Number.isFinite(x);
}

function isVec3(v: unknown): v is Vec3 {
  return Array.isArray(v) && v.length === 3 && v.every(isFiniteNumber);
}

function isIndexTriple(v: unknown): v is [number, number, number] {
  return (
    Array.isArray(v) &&
    v.length === 3 &&
    v.every((x) => typeof x === "number" && Number.isInteger(x) && x >= 0)
  );
}

function parseState(m: Record<string, unknown>): StateMsg | null {
  if (
    !isFiniteNumber(m.t_ns) ||
    !isVec3(m.proxy) ||
    !isVec3(m.goal) ||
    !isVec3(m.force) ||
    typeof m.in_contact !== "boolean" ||
    typeof m.stale !== "boolean" ||
    !isFiniteNumber(m.depth_mm) ||
    typeof m.vf_enabled !== "boolean" ||
    typeof m.cutting !== "boolean"
  ) {
    return null;
  }
  return {
    type: "state",
    t_ns: m.t_ns,
    proxy: m.proxy,
    goal: m.goal,
    force: m.force,
    in_contact: m.in_contact,
    stale: m.stale,
    depth_mm: m.depth_mm,
    vf_enabled: m.vf_enabled,
    cutting: m.cutting,
  };
}

function parseMesh(m: Record<string, unknown>): MeshMsg | null {
  const { vertices, triangles } = m;
  if (!Array.isArray(vertices) || vertices.length < 4 || !vertices.every(isVec3)) return null;
  if (!Array.isArray(triangles) || !triangles.every(isIndexTriple)) return null;
  const n = vertices.length;
  if (!triangles.every((t) => t[0] < n && t[1] < n && t[2] < n)) return null;
  return { type: "mesh", vertices, triangles };
}

function parseFrames(m: Record<string, unknown>): FramesMsg | null {
  if (!isVec3(m.tip) || !isVec3(m.anchor_t)) return null;
  const r = m.anchor_r;
  if (!Array.isArray(r) || r.length !== 9 || !r.every(isFiniteNumber)) return null;
  return { type: "frames", tip: m.tip, anchor_r: r, anchor_t: m.anchor_t };
}

function parseStats(m: Record<string, unknown>): StatsMsg | null {
  if (typeof m.vf_enabled !== "boolean") return null;
  if (m.min_margin_mm !== null && !isFiniteNumber(m.min_margin_mm)) return null;
  const out: StatsMsg = { type: "stats", vf_enabled: m.vf_enabled, min_margin_mm: m.min_margin_mm };
  for (const k of [
    "tick_count",
    "mean_period_ns",
    "p99_period_ns",
    "max_period_ns",
    "mean_compute_ns",
    "overrun_count",
    "stale_tick_count",
  ] as const) {
    const v = m[k];
    if (v !== undefined) {
      if (!isFiniteNumber(v)) return null;
      out[k] = v;
    }
  }
  return out;
}

export function parseServerMessage(raw: string): ServerMsg | null {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof data !== "object" || data === null) return null;
  const m = data as Record<string, unknown>;
  switch (m.type) {
    case "state":
      return parseState(m);
    case "mesh":
      return parseMesh(m);
    case "frames":
      return parseFrames(m);
    case "stats":
      return parseStats(m);
    case "error":
      return typeof m.message === "string" ? { type: "error", message: m.message } : null;
    default:
      return null;
  }
}

export function goalCommand(p: Vec3): string {
  return JSON.stringify({ type: "goal", p });
}

export function vfCommand(enabled: boolean): string {
  return JSON.stringify({ type: "vf", enabled });
}

export function cutCommand(active: boolean): string {
  return JSON.stringify({ type: "cut", active });
}
