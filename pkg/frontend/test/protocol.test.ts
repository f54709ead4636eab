import { describe, expect, it } from "vitest";

import {
  cutCommand,
  goalCommand,
  parseServerMessage,
  vfCommand,
} from "../src/protocol.js";

const state = {
  type: "state",
  t_ns: 123,
  proxy: [1, 2, 3],
  goal: [1, 2, 4],
  force: [0, 0, -1],
  in_contact: true,
  stale: false,
  depth_mm: 1,
  vf_enabled: true,
  cutting: false,
};

describe("parseServerMessage", () => {
  it("accepts a full state snapshot", () => {
    const msg = parseServerMessage(JSON.stringify(state));
    expect(msg).not.toBeNull();
    if (msg?.type !== "state") throw new Error("wrong type");
    expect(msg.goal).toEqual([1, 2, 4]);
    expect(msg.in_contact).toBe(true);
  });

  it("accepts mesh, frames, stats and error", () => {
    const mesh = parseServerMessage(
      JSON.stringify({
        type: "mesh",
        vertices: [
          [0, 0, 0],
          [1, 0, 0],
          [0, 1, 0],
          [0, 0, 1],
        ],
        triangles: [
          [0, 1, 2],
          [0, 1, 3],
        ],
      }),
    );
    expect(mesh?.type).toBe("mesh");

    const frames = parseServerMessage(
      JSON.stringify({
        type: "frames",
        tip: [1, 2, 3],
        anchor_r: [1, 0, 0, 0, 1, 0, 0, 0, 1],
        anchor_t: [0, 0, 0],
      }),
    );
    expect(frames?.type).toBe("frames");

    const stats = parseServerMessage(
      JSON.stringify({ type: "stats", vf_enabled: true, min_margin_mm: null, tick_count: 42 }),
    );
    expect(stats?.type).toBe("stats");
    if (stats?.type === "stats") expect(stats.tick_count).toBe(42);

    const err = parseServerMessage(JSON.stringify({ type: "error", message: "nope" }));
    expect(err).toEqual({ type: "error", message: "nope" });
  });

  it.each([
    "not json",
    "42",
    "null",
    JSON.stringify({ type: "nope" }),
    JSON.stringify({ ...state, goal: [1, 2] }),
    JSON.stringify({ ...state, force: [1, 2, "x"] }),
    JSON.stringify({ ...state, in_contact: 1 }),
    JSON.stringify({ ...state, t_ns: "soon" }),
    JSON.stringify({ type: "mesh", vertices: [[0, 0, 0]], triangles: [] }),
    JSON.stringify({
      type: "mesh",
      vertices: [
        [0, 0, 0],
        [1, 0, 0],
        [0, 1, 0],
        [0, 0, 1],
      ],
      triangles: [[0, 1, 9]],
    }),
    JSON.stringify({ type: "frames", tip: [0, 0, 0], anchor_r: [1, 0, 0], anchor_t: [0, 0, 0] }),
    JSON.stringify({ type: "stats", vf_enabled: "yes", min_margin_mm: null }),
    JSON.stringify({ type: "error", message: 7 }),
  ])("rejects malformed payload %#", (raw) => {
    expect(parseServerMessage(raw)).toBeNull();
  });

  it("rejects non-finite numbers", () => {
    expect(parseServerMessage(JSON.stringify({ ...state, depth_mm: null }))).toBeNull();
  });
});

describe("outbound commands", () => {
  it("serializes the bridge's exact schema", () => {
    expect(JSON.parse(goalCommand([1, -2, 3.5]))).toEqual({ type: "goal", p: [1, -2, 3.5] });
    expect(JSON.parse(vfCommand(false))).toEqual({ type: "vf", enabled: false });
    expect(JSON.parse(cutCommand(true))).toEqual({ type: "cut", active: true });
  });
});
