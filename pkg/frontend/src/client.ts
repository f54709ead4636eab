// WebSocket client with automatic reconnect.  The socket and timer are
// injectable so the backoff schedule is unit-testable without a server.

import { parseServerMessage, type ServerMsg } from "./protocol.js";
import type { Connection } from "./snapshot.js";

export interface SocketLike {
  readyState: number;
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;
export type Scheduler = (fn: () => void, ms: number) => void;

const OPEN = 1;
const BACKOFF_MS = [500, 1000, 2000, 4000];

export interface BridgeHandlers {
  onMessage(msg: ServerMsg): void;
  onConnection(c: Connection): void;
}

export class BridgeClient {
  private socket: SocketLike | null = null;
  private attempts = 0;
  private stopped = false;

  constructor(
    private readonly url: string,
    private readonly handlers: BridgeHandlers,
    private readonly factory: SocketFactory = (u) => new WebSocket(u) as unknown as SocketLike,
    private readonly schedule: Scheduler = (fn, ms) => {
      setTimeout(fn, ms);
    },
  ) {}

  connect(): void {
    if (this.stopped) return;
    this.handlers.onConnection("connecting");
    const ws = this.factory(this.url);
    this.socket = ws;
    ws.onopen = () => {
      this.attempts = 0;
      this.handlers.onConnection("open");
    };
    ws.onmessage = (ev) => {
      if (typeof ev.data !== "string") return;
      const msg = parseServerMessage(ev.data);
      if (msg) this.handlers.onMessage(msg);
    };
    ws.onerror = () => {
      // onclose follows; the handler there owns the retry
    };
    ws.onclose = () => {
      if (this.socket !== ws) return; // superseded by a newer attempt
      this.socket = null;
      this.handlers.onConnection("closed");
      if (this.stopped) return;
      const delay = BACKOFF_MS[Math.min(this.attempts, BACKOFF_MS.length - 1)]!;
      this.attempts += 1;
      this.schedule(() => this.connect(), delay);
    };
  }

  /** Returns false (and drops the payload) unless the socket is open. */
  send(text: string): boolean {
    if (this.socket === null || this.socket.readyState !== OPEN) return false;
    this.socket.send(text);
    return true;
  }

  close(): void {
    this.stopped = true;
    this.socket?.close();
    this.socket = null;
  }
}
