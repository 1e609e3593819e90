/**
 * Console wiring: one session connection, one event queue.
 *
 * Every state change flows through handleMessage, so a reconnect that
 * replays the server log rebuilds the entire view deterministically.
 */

import { CardDeck } from "./cards.js";
import { SessionClient } from "./client.js";
import { Dashboard } from "./dashboard.js";
import { EventLog } from "./log.js";
import { ServerMessage, SessionHello } from "./protocol.js";

export class ConsoleApp {
  readonly root: HTMLElement;
  private readonly banner: HTMLElement;
  private readonly deck: CardDeck;
  private readonly dashboard: Dashboard;
  private readonly log: EventLog;
  private readonly client: SessionClient;
  private hello: SessionHello | null = null;
  private paused = false;

  constructor(root: HTMLElement, baseUrl: string,
              fetchImpl: typeof fetch = fetch.bind(globalThis)) {
    this.root = root;
    this.banner = document.createElement("div");
    this.banner.className = "banner";
    this.banner.textContent = "connecting...";
    root.appendChild(this.banner);

    const controls = document.createElement("div");
    controls.className = "controls";
    for (const command of ["pause", "resume", "snapshot"] as const) {
      const button = document.createElement("button");
      button.textContent = command;
      button.addEventListener("click", () => {
        void this.client.sendControl(command).then((ok) => {
          this.log.append(ok ? "info" : "error",
            `${command} ${ok ? "sent" : "failed"}`);
          if (ok && command === "pause") this.setPaused(true);
          if (ok && command === "resume") this.setPaused(false);
        });
      });
      controls.appendChild(button);
    }
    root.appendChild(controls);

    const cardsHost = document.createElement("section");
    cardsHost.className = "cards";
    root.appendChild(cardsHost);
    this.deck = new CardDeck(cardsHost, (sampleId) => {
      this.log.append("warning", `duplicate query for sample ${sampleId} ignored`);
    });

    this.log = new EventLog();
    this.dashboard = new Dashboard((message) =>
      this.log.append("warning", message));
    root.appendChild(this.dashboard.element);
    root.appendChild(this.log.element);

    this.client = new SessionClient(baseUrl, {
      onMessage: (message) => this.handleMessage(message),
      onMalformed: (raw) => {
        this.log.append("error",
          `malformed message skipped: ${JSON.stringify(raw).slice(0, 120)}`);
      },
      onConnectionChange: (connected) => {
        this.banner.classList.toggle("disconnected", !connected);
        if (!connected) {
          this.banner.textContent = "connection lost; retrying...";
          this.log.append("error", "connection lost");
        } else {
          this.refreshBanner();
          this.log.append("info", "connected");
        }
      },
    }, fetchImpl);
  }

  start(): Promise<void> {
    return this.client.run();
  }

  stop(): void {
    this.client.stop();
  }

  handleMessage(message: ServerMessage): void {
    switch (message.type) {
      case "session_hello":
        this.hello = message;
        this.dashboard.setMemoryCapacity(message.batch_size);
        this.refreshBanner();
        this.log.append("info",
          `session: ${message.n_classes} classes, ` +
          `${message.n_batches} batches of ${message.batch_size}`);
        break;
      case "query_batch": {
        if (this.hello === null) {
          this.log.append("error", "query before hello; skipped");
          return;
        }
        this.deck.showBatch(message.queries, this.hello, message.deadline_ms,
          async (sampleId, correct) => {
            const result = await this.client.submitFeedback(sampleId, correct);
            this.log.append(result.ok ? "info" : "error",
              result.ok
                ? `answered ${sampleId}: ${correct ? "correct" : "incorrect"}`
                : `answer for ${sampleId} rejected: ${result.error}`);
            return result;
          });
        this.log.append("info",
          `batch ${message.batch_index}: ${message.queries.length} queries`);
        break;
      }
      case "batch_result":
        this.dashboard.update(message);
        this.refreshBanner(message.batch_index + 1);
        break;
      case "snapshot_saved":
        this.log.append("info", `snapshot saved: ${message.path}`);
        break;
      case "session_done":
        this.banner.textContent =
          `session finished after ${message.n_batches} batches`;
        this.log.append("info", "session finished");
        this.client.stop();
        break;
    }
  }

  private setPaused(paused: boolean): void {
    this.paused = paused;
    this.refreshBanner();
    this.root.classList.toggle("paused", paused);
  }

  private refreshBanner(progress?: number): void {
    if (this.hello === null) return;
    const state = this.paused ? "paused" : "live";
    const upto = progress !== undefined
      ? ` batch ${progress}/${this.hello.n_batches}`
      : "";
    this.banner.textContent =
      `${state}: ${this.hello.method ?? "session"}${upto}`;
  }
}

declare global {
  interface Window {
    fbttaConsole?: ConsoleApp;
  }
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  const app = new ConsoleApp(document.getElementById("app")!, "");
  window.fbttaConsole = app;
  void app.start();
}
