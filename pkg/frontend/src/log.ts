/** Bounded, newest-first event log panel. */

export class EventLog {
  readonly element: HTMLElement;
  private readonly list: HTMLUListElement;

  constructor(private readonly capacity = 200) {
    this.element = document.createElement("section");
    this.element.className = "event-log";
    const title = document.createElement("h2");
    title.textContent = "events";
    this.element.appendChild(title);
    this.list = document.createElement("ul");
    this.element.appendChild(this.list);
  }

  append(kind: string, text: string): void {
    const item = document.createElement("li");
    item.className = `event ${kind}`;
    item.textContent = text;
    this.list.prepend(item);
    while (this.list.children.length > this.capacity) {
      this.list.lastChild?.remove();
    }
  }

  get entries(): string[] {
    return Array.from(this.list.children, (li) => li.textContent ?? "");
  }
}
