/** Live constraint panel: the verdict table exactly as the server sent it. */

import { VerdictRow } from "./types.js";

function formatLimit(limit: number | number[]): string {
  if (Array.isArray(limit)) return `${limit[0]}–${limit[1]}`;
  return String(limit);
}

export class VerdictPanel {
  readonly element: HTMLTableElement;
  private tbody: HTMLTableSectionElement;

  constructor(doc: Document = document) {
    this.element = doc.createElement("table");
    this.element.className = "verdict-panel";
    const head = doc.createElement("thead");
    head.innerHTML =
      "<tr><th>structure</th><th>metric</th><th>total (Gy)</th>" +
      "<th>limit (Gy)</th><th>verdict</th></tr>";
    this.element.appendChild(head);
    this.tbody = doc.createElement("tbody");
    this.element.appendChild(this.tbody);
  }

  render(verdicts: VerdictRow[]): void {
    const doc = this.element.ownerDocument;
    this.tbody.textContent = "";
    for (const row of verdicts) {
      const tr = doc.createElement("tr");
      tr.className = `verdict-${row.verdict.replace(" ", "-")}`;
      const cells = [
        row.structure,
        row.metric,
        row.value_gy === null ? "—" : row.value_gy.toFixed(2),
        formatLimit(row.limit_gy),
        row.verdict,
      ];
      for (const text of cells) {
        const td = doc.createElement("td");
        td.textContent = text;
        tr.appendChild(td);
      }
      this.tbody.appendChild(tr);
    }
  }
}
