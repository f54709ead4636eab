// Stats panel lines, pure so the formatting is testable.

import type { Snapshot } from "./snapshot.js";

function ms(ns: number): string {
  return (ns / 1e6).toFixed(3) + " ms";
}

export function formatStats(snap: Snapshot): string[] {
  const lines: string[] = [];
  const st = snap.stats;
  if (st === null) return ["waiting for stats..."];
  if (st.mean_period_ns !== undefined && st.mean_period_ns > 0) {
    lines.push(`servo rate ${(1e9 / st.mean_period_ns).toFixed(0)} Hz`);
  }
  if (st.p99_period_ns !== undefined) lines.push(`p99 period ${ms(st.p99_period_ns)}`);
  if (st.max_period_ns !== undefined) lines.push(`max period ${ms(st.max_period_ns)}`);
  if (st.mean_compute_ns !== undefined) {
    lines.push(`mean compute ${(st.mean_compute_ns / 1e3).toFixed(0)} us`);
  }
  if (st.tick_count !== undefined) lines.push(`ticks ${st.tick_count}`);
  if (st.overrun_count !== undefined) lines.push(`overruns ${st.overrun_count}`);
  if (st.stale_tick_count !== undefined) lines.push(`stale ticks ${st.stale_tick_count}`);
  lines.push(
    st.min_margin_mm === null
      ? "min margin --"
      : `min margin ${st.min_margin_mm.toFixed(2)} mm`,
  );
  lines.push(`guidance ${st.vf_enabled ? "on" : "off"}`);
  return lines;
}
