/**
 * Polling client for the session endpoint.
 *
 * Keeps a cursor into the server's append-only message log; the server
 * replays everything from any cursor, so a reconnect (or a fresh page)
 * simply resumes polling and rebuilds state from the replayed messages.
 */

import {
  ControlCommand,
  ServerMessage,
  encodeControl,
  encodeFeedback,
  parseServerMessage,
} from "./protocol.js";

export type FetchLike = (
  url: string,
  init?: { method?: string; body?: string; headers?: Record<string, string> },
) => Promise<{ ok: boolean; status: number; json(): Promise<unknown> }>;

export interface ClientEvents {
  onMessage: (message: ServerMessage) => void;
  onMalformed?: (raw: unknown) => void;
  onConnectionChange?: (connected: boolean) => void;
}

export interface FeedbackResult {
  ok: boolean;
  error?: string;
}

export class SessionClient {
  private since = 0;
  private stopped = false;
  private connected = false;

  constructor(
    private readonly baseUrl: string,
    private readonly events: ClientEvents,
    private readonly fetchImpl: FetchLike,
    private readonly pollIntervalMs = 250,
  ) {}

  get cursor(): number {
    return this.since;
  }

  /** Poll until stop(); resolves when stopped. */
  async run(sleep: (ms: number) => Promise<void> = defaultSleep): Promise<void> {
    while (!this.stopped) {
      const gotAny = await this.pollOnce();
      if (!gotAny) {
        await sleep(this.pollIntervalMs);
      }
    }
  }

  stop(): void {
    this.stopped = true;
  }

  /** One poll round; returns whether any message arrived. */
  async pollOnce(): Promise<boolean> {
    let payload: unknown;
    try {
      const response = await this.fetchImpl(
        `${this.baseUrl}/api/messages?since=${this.since}`,
      );
      if (!response.ok) throw new Error(`status ${response.status}`);
      payload = await response.json();
    } catch {
      this.setConnected(false);
      return false;
    }
    this.setConnected(true);
    const body = payload as { messages?: unknown[]; next?: number };
    const messages = Array.isArray(body.messages) ? body.messages : [];
    for (const raw of messages) {
      const message = parseServerMessage(raw);
      if (message === null) {
        this.events.onMalformed?.(raw);
        continue;
      }
      this.events.onMessage(message);
    }
    if (typeof body.next === "number" && body.next > this.since) {
      this.since = body.next;
      return true;
    }
    return false;
  }

  async submitFeedback(sampleId: string, correct: boolean): Promise<FeedbackResult> {
    try {
      const response = await this.fetchImpl(`${this.baseUrl}/api/feedback`, {
        method: "POST",
        body: encodeFeedback(sampleId, correct),
        headers: { "Content-Type": "application/json" },
      });
      const body = (await response.json()) as FeedbackResult;
      return { ok: Boolean(body.ok), error: body.error };
    } catch {
      return { ok: false, error: "connection_failed" };
    }
  }

  async sendControl(command: ControlCommand): Promise<boolean> {
    try {
      const response = await this.fetchImpl(`${this.baseUrl}/api/control`, {
        method: "POST",
        body: encodeControl(command),
        headers: { "Content-Type": "application/json" },
      });
      return response.ok;
    } catch {
      return false;
    }
  }

  private setConnected(connected: boolean): void {
    if (connected !== this.connected) {
      this.connected = connected;
      this.events.onConnectionChange?.(connected);
    }
  }
}

function defaultSleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
