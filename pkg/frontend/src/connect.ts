/** Gateway connection: one WS carrying events down and command/ack pairs up.
 *
 * The socket implementation is injected so the browser passes its native
 * WebSocket and node tests pass the `ws` package; both satisfy SocketLike.
 */

import type { Ack, Command, TelemetryEvent } from "./protocol.js";
import { encodeCommand, parseRunsListing, parseServerMessage } from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  addEventListener(type: "message", listener: (event: { data: unknown }) => void): void;
  addEventListener(type: "open" | "close" | "error", listener: () => void): void;
}

export type SocketFactory = (url: string) => SocketLike;

/** http(s)://host:port -> ws(s)://host:port/ws[?kinds=a,b] */
export function wsUrl(baseHttpUrl: string, kinds?: string[]): string {
  const base = baseHttpUrl.replace(/\/+$/, "").replace(/^http/, "ws");
  const query = kinds && kinds.length ? `?kinds=${kinds.join(",")}` : "";
  return `${base}/ws${query}`;
}

interface Waiter {
  resolve: (ack: Ack) => void;
  reject: (err: Error) => void;
}

export class GatewayClient {
  onEvent: (ev: TelemetryEvent) => void = () => {};
  onClose: () => void = () => {};
  onError: (err: Error) => void = () => {};

  private socket: SocketLike | null = null;
  private closed = false;
  // The gateway answers commands in arrival order on this connection, so a
  // FIFO queue pairs each ack with its command even with events interleaved.
  private waiters: Waiter[] = [];

  constructor(
    private readonly baseHttpUrl: string,
    private readonly token: string,
    private readonly factory: SocketFactory,
    private readonly kinds?: string[],
  ) {}

  connect(): Promise<void> {
    const socket = this.factory(wsUrl(this.baseHttpUrl, this.kinds));
    this.socket = socket;
    socket.addEventListener("message", (msg) => this.handleFrame(String(msg.data)));
    socket.addEventListener("close", () => {
      this.closed = true;
      this.drainWaiters(new Error("connection closed"));
      this.onClose();
    });
    return new Promise((resolve, reject) => {
      let settled = false;
      socket.addEventListener("open", () => {
        settled = true;
        resolve();
      });
      socket.addEventListener("error", () => {
        const err = new Error("websocket error");
        if (!settled) {
          settled = true;
          reject(err);
        } else {
          this.onError(err);
        }
      });
    });
  }

  /** Send one command; resolves with its ack (ok or error — never throws on error acks). */
  send(cmd: Command): Promise<Ack> {
    if (this.closed || this.socket === null) {
      return Promise.reject(new Error("not connected"));
    }
    const frame = encodeCommand(cmd, this.token);
    return new Promise<Ack>((resolve, reject) => {
      this.waiters.push({ resolve, reject });
      this.socket!.send(frame);
    });
  }

  close(): void {
    this.closed = true;
    this.socket?.close();
  }

  private handleFrame(text: string): void {
    let message;
    try {
      message = parseServerMessage(text);
    } catch (exc) {
      this.onError(exc as Error);
      return;
    }
    if (message.type === "ack") {
      const waiter = this.waiters.shift();
      if (waiter) waiter.resolve(message.ack);
      else this.onError(new Error("ack with no pending command"));
    } else {
      this.onEvent(message.event);
    }
  }

  private drainWaiters(err: Error): void {
    for (const waiter of this.waiters.splice(0)) waiter.reject(err);
  }
}

/** GET /runs -> filenames; GET /runs/{file} -> raw JSONL text. */
export async function fetchRuns(
  baseHttpUrl: string,
  fetchImpl: typeof fetch = fetch,
): Promise<string[]> {
  const res = await fetchImpl(`${baseHttpUrl.replace(/\/+$/, "")}/runs`);
  if (!res.ok) throw new Error(`GET /runs: ${res.status}`);
  return parseRunsListing(await res.json());
}

export async function fetchRunText(
  baseHttpUrl: string,
  name: string,
  fetchImpl: typeof fetch = fetch,
): Promise<string> {
  const url = `${baseHttpUrl.replace(/\/+$/, "")}/runs/${encodeURIComponent(name)}`;
  const res = await fetchImpl(url);
  if (!res.ok) throw new Error(`GET /runs/${name}: ${res.status}`);
  return res.text();
}
