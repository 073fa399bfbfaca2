/** Interstitial planning sheet: one row per template hole.
 *
 * Depth entry and the active toggle fire plan edits; rows show a pending
 * marker while their edit is in flight and surface server errors inline.
 * Row status comes from the feasibility report (reaches target / OAR
 * transit / idle) — never computed here.
 */

import { FeasibilityReport, MAX_DEPTH_MM, NeedleRow, PlanEdit } from "./types.js";

export type EditListener = (edit: PlanEdit) => void;

function clampDepth(value: number): number {
  if (Number.isNaN(value)) return 0;
  return Math.min(Math.max(value, 0), MAX_DEPTH_MM);
}

export class PlanningSheet {
  readonly element: HTMLTableElement;
  private tbody: HTMLTableSectionElement;
  private listener: EditListener | null = null;
  private rows = new Map<string, HTMLTableRowElement>();

  constructor(doc: Document = document) {
    this.element = doc.createElement("table");
    this.element.className = "planning-sheet";
    const head = doc.createElement("thead");
    head.innerHTML =
      "<tr><th>hole</th><th>active</th><th>depth (mm)</th><th>status</th></tr>";
    this.element.appendChild(head);
    this.tbody = doc.createElement("tbody");
    this.element.appendChild(this.tbody);
  }

  onEdit(listener: EditListener): void {
    this.listener = listener;
  }

  /** Rebuild all rows from the authoritative plan (GET or PATCH response). */
  render(needles: NeedleRow[]): void {
    const doc = this.element.ownerDocument;
    this.tbody.textContent = "";
    this.rows.clear();
    for (const needle of needles) {
      const tr = doc.createElement("tr");
      tr.dataset.holeId = needle.hole_id;

      const nameCell = doc.createElement("td");
      nameCell.textContent = needle.hole_id;
      tr.appendChild(nameCell);

      const activeCell = doc.createElement("td");
      const toggle = doc.createElement("input");
      toggle.type = "checkbox";
      toggle.checked = needle.active;
      toggle.className = "active-toggle";
      toggle.addEventListener("change", () => {
        this.emit({ hole_id: needle.hole_id, active: toggle.checked });
      });
      activeCell.appendChild(toggle);
      tr.appendChild(activeCell);

      const depthCell = doc.createElement("td");
      const depth = doc.createElement("input");
      depth.type = "number";
      depth.min = "0";
      depth.max = String(MAX_DEPTH_MM);
      depth.step = "1";
      depth.value = String(needle.depth_mm);
      depth.className = "depth-input";
      depth.addEventListener("change", () => {
        const clamped = clampDepth(Number(depth.value));
        depth.value = String(clamped);
        this.emit({ hole_id: needle.hole_id, depth_mm: clamped });
      });
      depthCell.appendChild(depth);
      tr.appendChild(depthCell);

      const statusCell = doc.createElement("td");
      statusCell.className = "needle-status";
      statusCell.textContent = needle.active ? "" : "idle";
      tr.appendChild(statusCell);

      this.tbody.appendChild(tr);
      this.rows.set(needle.hole_id, tr);
    }
  }

  applyFeasibility(report: FeasibilityReport): void {
    for (const row of report.rows) {
      const tr = this.rows.get(row.hole_id);
      if (!tr) continue;
      const cell = tr.querySelector(".needle-status") as HTMLElement;
      const toggle = tr.querySelector(".active-toggle") as HTMLInputElement;
      if (!toggle.checked) {
        cell.textContent = "idle";
        cell.className = "needle-status idle";
      } else if (row.feasible) {
        cell.textContent = "reaches target";
        cell.className = "needle-status reaches";
      } else if (row.oar_hits.length > 0) {
        cell.textContent = `OAR transit (${row.oar_hits[0][0]})`;
        cell.className = "needle-status oar-transit";
      } else {
        cell.textContent = "no target reach";
        cell.className = "needle-status miss";
      }
    }
  }

  setPending(holeId: string, pending: boolean): void {
    const tr = this.rows.get(holeId);
    if (!tr) return;
    tr.classList.toggle("pending", pending);
  }

  setRowError(holeId: string, message: string | null): void {
    const tr = this.rows.get(holeId);
    if (!tr) return;
    tr.classList.toggle("error", message !== null);
    tr.title = message ?? "";
  }

  private emit(edit: PlanEdit): void {
    if (this.listener) this.listener(edit);
  }
}
