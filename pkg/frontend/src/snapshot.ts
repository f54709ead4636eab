// Latest-value session snapshot.  Rendering reads this at its own cadence;
// message arrival only replaces fields, so a slow tab never backpressures the
// bridge and a refresh rebuilds the exact current state from the stream.

import type { FramesMsg, MeshMsg, ServerMsg, StateMsg, StatsMsg } from "./protocol.js";

export type Connection = "connecting" | "open" | "closed";

export interface Snapshot {
  connection: Connection;
  state: StateMsg | null;
  mesh: MeshMsg | null;
  meshRev: number; // bumps per mesh message so outline caches can key on it
  frames: FramesMsg | null;
  stats: StatsMsg | null;
  lastError: string | null;
}

export class SnapshotStore {
  readonly snap: Snapshot = {
    connection: "connecting",
    state: null,
    mesh: null,
    meshRev: 0,
    frames: null,
    stats: null,
    lastError: null,
  };

  apply(msg: ServerMsg): void {
    switch (msg.type) {
      case "state":
        this.snap.state = msg;
        break;
      case "mesh":
        this.snap.mesh = msg;
        this.snap.meshRev += 1;
        break;
      case "frames":
        this.snap.frames = msg;
        break;
      case "stats":
        this.snap.stats = msg;
        break;
      case "error":
        this.snap.lastError = msg.message;
        break;
    }
  }

  setConnection(c: Connection): void {
    this.snap.connection = c;
  }

  /** Engine-confirmed toggle positions; null until the first message lands. */
  vfEnabled(): boolean | null {
    if (this.snap.state) return this.snap.state.vf_enabled;
    if (this.snap.stats) return this.snap.stats.vf_enabled;
    return null;
  }

  cutting(): boolean | null {
    return this.snap.state ? this.snap.state.cutting : null;
  }
}
