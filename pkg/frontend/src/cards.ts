/**
 * Interactive query cards: one per sample awaiting binary feedback.
 *
 * Each card shows where the sample lands in the fixed 2-D projection
 * (against the class-prototype landmarks), a bar glyph of the raw
 * feature values, the predicted class with its confidence, and the two
 * feedback actions. Cards disable themselves once answered or when the
 * deadline passes; deadline-expired cards are marked as auto-answered
 * by the server-side fallback.
 */

import { Query, SessionHello } from "./protocol.js";

export type AnswerHandler = (
  sampleId: string,
  correct: boolean,
) => Promise<{ ok: boolean; error?: string }>;

const SVG_NS = "http://www.w3.org/2000/svg";

export class QueryCard {
  readonly element: HTMLElement;
  readonly sampleId: string;
  private answered = false;
  private expired = false;
  private readonly buttons: HTMLButtonElement[] = [];
  private readonly noticeEl: HTMLElement;
  private readonly countdownEl: HTMLElement;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    query: Query,
    hello: SessionHello,
    deadlineMs: number,
    private readonly onAnswer: AnswerHandler,
    now: () => number = () => Date.now(),
  ) {
    this.sampleId = query.sample_id;
    this.element = document.createElement("article");
    this.element.className = "query-card";
    this.element.dataset.sampleId = query.sample_id;

    const title = document.createElement("header");
    title.textContent = `sample ${query.sample_id}`;
    this.element.appendChild(title);

    this.element.appendChild(renderProjection(query, hello));
    this.element.appendChild(renderGlyph(query.rendering.glyph));

    const prediction = document.createElement("p");
    prediction.className = "prediction";
    prediction.textContent =
      `predicted ${query.predicted_class} ` +
      `(confidence ${query.confidence.toFixed(2)})`;
    this.element.appendChild(prediction);

    const actions = document.createElement("div");
    actions.className = "actions";
    for (const [label, correct] of [
      ["correct", true],
      ["incorrect", false],
    ] as const) {
      const button = document.createElement("button");
      button.textContent = label;
      button.className = correct ? "correct" : "incorrect";
      button.addEventListener("click", () => void this.submit(correct));
      actions.appendChild(button);
      this.buttons.push(button);
    }
    this.element.appendChild(actions);

    this.countdownEl = document.createElement("p");
    this.countdownEl.className = "countdown";
    this.element.appendChild(this.countdownEl);

    this.noticeEl = document.createElement("p");
    this.noticeEl.className = "notice";
    this.element.appendChild(this.noticeEl);

    const expiry = now() + deadlineMs;
    const tick = () => {
      const left = expiry - now();
      if (left <= 0) {
        this.expire();
      } else {
        this.countdownEl.textContent = `${(left / 1000).toFixed(1)}s left`;
      }
    };
    tick();
    if (!this.expired) {
      this.timer = setInterval(tick, 100);
    }
  }

  get isAnswered(): boolean {
    return this.answered;
  }

  get isExpired(): boolean {
    return this.expired;
  }

  private async submit(correct: boolean): Promise<void> {
    if (this.answered) return;
    if (this.expired) {
      this.noticeEl.textContent = "deadline passed; answer not sent";
      return;
    }
    this.answered = true;
    this.setEnabled(false); // optimistic disable
    const result = await this.onAnswer(this.sampleId, correct);
    if (!result.ok) {
      this.answered = false;
      if (!this.expired) this.setEnabled(true); // rollback on rejection
      this.noticeEl.textContent = `rejected: ${result.error ?? "unknown error"}`;
      return;
    }
    this.noticeEl.textContent = `answered ${correct ? "correct" : "incorrect"}`;
    this.stopTimer();
    this.countdownEl.textContent = "";
  }

  private expire(): void {
    if (this.expired) return;
    this.expired = true;
    this.stopTimer();
    this.countdownEl.textContent = "";
    if (!this.answered) {
      this.setEnabled(false);
      this.element.classList.add("expired");
      this.noticeEl.textContent = "auto-answered (fallback)";
    }
  }

  private setEnabled(enabled: boolean): void {
    for (const button of this.buttons) button.disabled = !enabled;
  }

  private stopTimer(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  dispose(): void {
    this.stopTimer();
  }
}

/** Mini-map of the sample against the class-prototype landmarks. */
function renderProjection(query: Query, hello: SessionHello): SVGSVGElement {
  const size = 120;
  const svg = document.createElementNS(SVG_NS, "svg");
  svg.setAttribute("class", "projection");
  svg.setAttribute("viewBox", `0 0 ${size} ${size}`);
  svg.setAttribute("width", String(size));
  svg.setAttribute("height", String(size));

  const points = hello.landmarks.concat([[query.rendering.x, query.rendering.y]]);
  const xs = points.map((p) => p[0]);
  const ys = points.map((p) => p[1]);
  const pad = 0.5;
  const lo = [Math.min(...xs) - pad, Math.min(...ys) - pad];
  const hi = [Math.max(...xs) + pad, Math.max(...ys) + pad];
  const sx = (x: number) => ((x - lo[0]!) / (hi[0]! - lo[0]!)) * size;
  const sy = (y: number) => size - ((y - lo[1]!) / (hi[1]! - lo[1]!)) * size;

  hello.landmarks.forEach(([x, y], label) => {
    const dot = document.createElementNS(SVG_NS, "circle");
    dot.setAttribute("cx", String(sx(x)));
    dot.setAttribute("cy", String(sy(y)));
    dot.setAttribute("r", "3");
    dot.setAttribute("class", label === query.predicted_label
      ? "landmark predicted"
      : "landmark");
    const name = hello.class_names[label] ?? `class-${label}`;
    const titleEl = document.createElementNS(SVG_NS, "title");
    titleEl.textContent = name;
    dot.appendChild(titleEl);
    svg.appendChild(dot);
  });

  const sample = document.createElementNS(SVG_NS, "circle");
  sample.setAttribute("cx", String(sx(query.rendering.x)));
  sample.setAttribute("cy", String(sy(query.rendering.y)));
  sample.setAttribute("r", "5");
  sample.setAttribute("class", "sample-point");
  svg.appendChild(sample);
  return svg;
}

/** Horizontal bar glyph of raw feature values. */
function renderGlyph(values: number[]): SVGSVGElement {
  const width = 120;
  const rowH = 4;
  const svg = document.createElementNS(SVG_NS, "svg");
  svg.setAttribute("class", "glyph");
  svg.setAttribute("viewBox", `0 0 ${width} ${values.length * rowH}`);
  svg.setAttribute("width", String(width));
  svg.setAttribute("height", String(values.length * rowH));
  const scale = Math.max(1e-9, ...values.map((v) => Math.abs(v)));
  values.forEach((value, row) => {
    const bar = document.createElementNS(SVG_NS, "rect");
    const half = width / 2;
    const span = (Math.abs(value) / scale) * half;
    bar.setAttribute("x", String(value < 0 ? half - span : half));
    bar.setAttribute("y", String(row * rowH + 0.5));
    bar.setAttribute("width", String(span));
    bar.setAttribute("height", String(rowH - 1));
    bar.setAttribute("class", value < 0 ? "bar negative" : "bar positive");
    svg.appendChild(bar);
  });
  return svg;
}

/** The set of cards for one query batch; duplicate sample ids are ignored. */
export class CardDeck {
  private cards = new Map<string, QueryCard>();

  constructor(
    private readonly container: HTMLElement,
    private readonly onDuplicate?: (sampleId: string) => void,
  ) {}

  showBatch(
    queries: Query[],
    hello: SessionHello,
    deadlineMs: number,
    onAnswer: AnswerHandler,
    now?: () => number,
  ): void {
    this.clear();
    for (const query of queries) {
      if (this.cards.has(query.sample_id)) {
        this.onDuplicate?.(query.sample_id);
        continue;
      }
      const card = new QueryCard(query, hello, deadlineMs, onAnswer, now);
      this.cards.set(query.sample_id, card);
      this.container.appendChild(card.element);
    }
  }

  get(sampleId: string): QueryCard | undefined {
    return this.cards.get(sampleId);
  }

  get size(): number {
    return this.cards.size;
  }

  clear(): void {
    for (const card of this.cards.values()) card.dispose();
    this.cards.clear();
    this.container.replaceChildren();
  }
}
