// Browser wiring: one SnapshotStore fed by the bridge client, two canvases
// rendered from it on animation frames, pointer drags coalesced into goal
// commands, and checkbox toggles that mirror the engine's confirmed state.

import { BridgeClient } from "./client.js";
import { fitTransform, type View, type ViewTransform } from "./projection.js";
import { cutCommand, goalCommand, vfCommand } from "./protocol.js";
import { buildViewModel, drawView } from "./render.js";
import { SnapshotStore } from "./snapshot.js";
import { formatStats } from "./stats.js";
import { dragGoal, GoalCoalescer } from "./steer.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing #${id}`);
  return node as T;
}

const canvases: Record<View, HTMLCanvasElement> = {
  frontal: el<HTMLCanvasElement>("frontal"),
  sagittal: el<HTMLCanvasElement>("sagittal"),
};
const vfToggle = el<HTMLInputElement>("vf");
const cutToggle = el<HTMLInputElement>("cut");
const statsPane = el<HTMLPreElement>("stats");
const statusLine = el<HTMLElement>("status");

const store = new SnapshotStore();
const url = location.protocol.startsWith("http")
  ? `ws://${location.host}`
  : "ws://127.0.0.1:8080";
const client = new BridgeClient(url, {
  onMessage: (msg) => store.apply(msg),
  onConnection: (c) => store.setConnection(c),
});
client.connect();

const transforms: Partial<Record<View, ViewTransform>> = {};
let transformsRev = -1;

function transformFor(view: View): ViewTransform | null {
  const mesh = store.snap.mesh;
  if (mesh === null) return null;
  if (transformsRev !== store.snap.meshRev) {
    for (const v of ["frontal", "sagittal"] as View[]) {
      transforms[v] = fitTransform(v, mesh.vertices, canvases[v].width, canvases[v].height);
    }
    transformsRev = store.snap.meshRev;
  }
  return transforms[view] ?? null;
}

// -- steering --------------------------------------------------------------

const coalescer = new GoalCoalescer(60);

for (const view of ["frontal", "sagittal"] as View[]) {
  const canvas = canvases[view];
  let dragging = false;

  const offer = (ev: PointerEvent) => {
    const t = transformFor(view);
    const current = store.snap.state?.goal;
    if (t === null || current === undefined) return;
    const rect = canvas.getBoundingClientRect();
    const pt = { x: ev.clientX - rect.left, y: ev.clientY - rect.top };
    coalescer.offer(dragGoal(view, pt, t, current));
  };

  canvas.addEventListener("pointerdown", (ev) => {
    dragging = true;
    canvas.setPointerCapture(ev.pointerId);
    offer(ev);
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (dragging) offer(ev);
  });
  const stop = (ev: PointerEvent) => {
    if (dragging) offer(ev);
    dragging = false;
  };
  canvas.addEventListener("pointerup", stop);
  canvas.addEventListener("pointercancel", stop);
}

setInterval(() => {
  const goal = coalescer.flush(performance.now());
  if (goal !== null) client.send(goalCommand(goal));
}, 1000 / 60);

// -- toggles ----------------------------------------------------------------

vfToggle.addEventListener("change", () => {
  client.send(vfCommand(vfToggle.checked));
});
cutToggle.addEventListener("change", () => {
  client.send(cutCommand(cutToggle.checked));
});

// -- render loop --------------------------------------------------------------

const labels: Record<View, string> = {
  frontal: "frontal (x-y)",
  sagittal: "sagittal (y-z)",
};

function frame(): void {
  for (const view of ["frontal", "sagittal"] as View[]) {
    const canvas = canvases[view];
    const ctx = canvas.getContext("2d");
    const t = transformFor(view);
    if (ctx === null) continue;
    if (t === null) {
      ctx.fillStyle = "#10151c";
      ctx.fillRect(0, 0, canvas.width, canvas.height);
      ctx.fillStyle = "#c9d4e3";
      ctx.font = "13px system-ui, sans-serif";
      ctx.fillText("waiting for fixture mesh...", 10, 20);
      continue;
    }
    drawView(ctx, canvas.width, canvas.height, buildViewModel(view, store.snap, t), labels[view]);
  }

  // toggles follow the engine's confirmed state, not local hopes
  const vf = store.vfEnabled();
  if (vf !== null && !vfToggle.matches(":active")) vfToggle.checked = vf;
  const cut = store.cutting();
  if (cut !== null && !cutToggle.matches(":active")) cutToggle.checked = cut;

  statsPane.textContent = formatStats(store.snap).join("\n");
  const s = store.snap;
  statusLine.textContent =
    s.connection === "open"
      ? s.lastError !== null
        ? `rejected: ${s.lastError}`
        : "connected"
      : s.connection;
  statusLine.className = s.connection === "open" && s.lastError === null ? "ok" : "warn";

  requestAnimationFrame(frame);
}

requestAnimationFrame(frame);
