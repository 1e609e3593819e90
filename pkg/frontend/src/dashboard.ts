/**
 * Rolling session charts: cumulative accuracy, agreement rate, and
 * memory fill levels, each rebuilt from the ordered batch results.
 * Out-of-order results are dropped with a warning so replays and
 * reconnects stay idempotent.
 */

import { BatchResult } from "./protocol.js";

const SVG_NS = "http://www.w3.org/2000/svg";

interface SeriesPoint {
  batch: number;
  value: number;
}

class LineChart {
  readonly element: HTMLElement;
  private readonly svg: SVGSVGElement;
  private readonly path: SVGPathElement;
  private readonly label: HTMLElement;
  private points: SeriesPoint[] = [];

  constructor(title: string, private readonly width = 260,
              private readonly height = 80) {
    this.element = document.createElement("figure");
    this.element.className = "chart";
    const caption = document.createElement("figcaption");
    caption.textContent = title;
    this.element.appendChild(caption);
    this.svg = document.createElementNS(SVG_NS, "svg");
    this.svg.setAttribute("viewBox", `0 0 ${width} ${height}`);
    this.svg.setAttribute("width", String(width));
    this.svg.setAttribute("height", String(height));
    this.path = document.createElementNS(SVG_NS, "path");
    this.path.setAttribute("class", "series");
    this.path.setAttribute("fill", "none");
    this.svg.appendChild(this.path);
    this.element.appendChild(this.svg);
    this.label = document.createElement("span");
    this.label.className = "latest";
    this.element.appendChild(this.label);
  }

  get pointCount(): number {
    return this.points.length;
  }

  append(batch: number, value: number): void {
    this.points.push({ batch, value });
    this.redraw();
    this.label.textContent = value.toFixed(3);
  }

  reset(): void {
    this.points = [];
    this.path.setAttribute("d", "");
    this.label.textContent = "";
  }

  private redraw(): void {
    if (this.points.length === 0) return;
    const maxBatch = Math.max(1, this.points[this.points.length - 1]!.batch);
    const sx = (b: number) => (b / maxBatch) * (this.width - 4) + 2;
    const sy = (v: number) => this.height - 4 - v * (this.height - 8);
    const d = this.points
      .map((p, i) => `${i === 0 ? "M" : "L"}${sx(p.batch).toFixed(1)},${sy(p.value).toFixed(1)}`)
      .join(" ");
    this.path.setAttribute("d", d);
  }
}

export class Dashboard {
  readonly element: HTMLElement;
  private readonly accuracy: LineChart;
  private readonly agreement: LineChart;
  private readonly memory: HTMLElement;
  private readonly memoryBars: { correct: HTMLElement; incorrect: HTMLElement };
  private lastBatch = -1;
  private memoryCapacity = 64;

  constructor(private readonly onWarning?: (message: string) => void) {
    this.element = document.createElement("section");
    this.element.className = "dashboard";
    this.accuracy = new LineChart("cumulative accuracy");
    this.agreement = new LineChart("agreement rate");
    this.element.appendChild(this.accuracy.element);
    this.element.appendChild(this.agreement.element);

    this.memory = document.createElement("figure");
    this.memory.className = "chart memory";
    const caption = document.createElement("figcaption");
    caption.textContent = "memory fill";
    this.memory.appendChild(caption);
    this.memoryBars = {
      correct: makeBar("correct", this.memory),
      incorrect: makeBar("incorrect", this.memory),
    };
    this.element.appendChild(this.memory);
  }

  setMemoryCapacity(capacity: number): void {
    this.memoryCapacity = Math.max(1, capacity);
  }

  get pointCount(): number {
    return this.accuracy.pointCount;
  }

  get latestBatch(): number {
    return this.lastBatch;
  }

  update(result: BatchResult): void {
    if (result.batch_index <= this.lastBatch) {
      this.onWarning?.(
        `dropped out-of-order batch_result ${result.batch_index} ` +
        `(latest ${this.lastBatch})`);
      return;
    }
    this.lastBatch = result.batch_index;
    this.accuracy.append(result.batch_index, result.cumulative_acc);
    this.agreement.append(result.batch_index, result.agreement_rate);
    if (typeof result.mem_correct === "number") {
      setBar(this.memoryBars.correct, result.mem_correct, this.memoryCapacity);
    }
    if (typeof result.mem_incorrect === "number") {
      setBar(this.memoryBars.incorrect, result.mem_incorrect, this.memoryCapacity);
    }
  }

  reset(): void {
    this.lastBatch = -1;
    this.accuracy.reset();
    this.agreement.reset();
    setBar(this.memoryBars.correct, 0, this.memoryCapacity);
    setBar(this.memoryBars.incorrect, 0, this.memoryCapacity);
  }
}

function makeBar(name: string, parent: HTMLElement): HTMLElement {
  const wrap = document.createElement("div");
  wrap.className = "memory-row";
  const label = document.createElement("span");
  label.textContent = name;
  wrap.appendChild(label);
  const track = document.createElement("div");
  track.className = "memory-track";
  const fill = document.createElement("div");
  fill.className = `memory-fill ${name}`;
  fill.style.width = "0%";
  track.appendChild(fill);
  wrap.appendChild(track);
  const value = document.createElement("span");
  value.className = "memory-value";
  value.textContent = "0";
  wrap.appendChild(value);
  parent.appendChild(wrap);
  return wrap;
}

function setBar(row: HTMLElement, value: number, capacity: number): void {
  const fill = row.querySelector(".memory-fill") as HTMLElement;
  const label = row.querySelector(".memory-value") as HTMLElement;
  fill.style.width = `${Math.min(100, (value / capacity) * 100)}%`;
  label.textContent = String(value);
}
