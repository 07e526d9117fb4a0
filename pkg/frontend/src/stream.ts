import type { FetchLike } from "./api.js";
import type { StreamEvent } from "./types.js";

export type ConnectionState = "connecting" | "live" | "stale";

export interface StreamOptions {
  /** Latest event sequence already held; reconnects resume after it. */
  sinceProvider: () => number;
  onEvent: (event: StreamEvent) => void;
  onStatus?: (status: ConnectionState) => void;
  poll?: number;
  keepalive?: number;
  reconnectDelayMs?: number;
  fetchImpl?: FetchLike;
}

/**
 * Line-delimited JSON reader over the session event feed. The server
 * pushes one JSON object per line: committed events, keepalives, and a
 * snapshot when the resume point was unusable. On any drop the reader
 * reports a stale view and reconnects from the caller's latest
 * sequence, so missed events replay instead of vanishing.
 */
export class EventStream {
  private controller: AbortController | null = null;
  private stopped = false;

  constructor(
    private readonly baseUrl: string,
    private readonly sessionId: string,
    private readonly options: StreamOptions,
  ) {}

  start(): void {
    this.stopped = false;
    void this.loop();
  }

  stop(): void {
    this.stopped = true;
    this.controller?.abort();
  }

  private url(): string {
    const poll = this.options.poll ?? 0.2;
    const keepalive = this.options.keepalive ?? 2.0;
    const since = this.options.sinceProvider();
    return (
      `${this.baseUrl}/sessions/${this.sessionId}/events` +
      `?since=${since}&poll=${poll}&keepalive=${keepalive}`
    );
  }

  private async loop(): Promise<void> {
    const fetchImpl =
      this.options.fetchImpl ?? ((url, init) => fetch(url, init));
    const delay = this.options.reconnectDelayMs ?? 1000;
    while (!this.stopped) {
      this.controller = new AbortController();
      try {
        this.options.onStatus?.("connecting");
        const response = await fetchImpl(this.url(), {
          signal: this.controller.signal,
        });
        if (!response.ok || !response.body) {
          throw new Error(`stream rejected: ${response.status}`);
        }
        this.options.onStatus?.("live");
        await this.consume(response.body);
      } catch {
        // fall through to reconnect
      }
      if (this.stopped) return;
      this.options.onStatus?.("stale");
      await new Promise((resolve) => setTimeout(resolve, delay));
    }
  }

  private async consume(body: ReadableStream<Uint8Array>): Promise<void> {
    const reader = body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (done) return;
      buffer += decoder.decode(value, { stream: true });
      let newline = buffer.indexOf("\n");
      while (newline >= 0) {
        const line = buffer.slice(0, newline).trim();
        buffer = buffer.slice(newline + 1);
        newline = buffer.indexOf("\n");
        if (!line) continue;
        let event: StreamEvent;
        try {
          event = JSON.parse(line) as StreamEvent;
        } catch {
          continue; // a malformed line is dropped, never fatal
        }
        this.options.onEvent(event);
      }
    }
  }
}
