/** Cumulative DVH chart drawn from server-provided curve points. */

import { StructureReport } from "./types.js";

const COLORS = ["#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d35400", "#16a085"];

export class DvhChart {
  readonly element: HTMLCanvasElement;

  constructor(doc: Document = document, width = 420, height = 260) {
    this.element = doc.createElement("canvas");
    this.element.width = width;
    this.element.height = height;
    this.element.className = "dvh-chart";
  }

  render(structures: StructureReport[]): void {
    const ctx = this.element.getContext("2d");
    if (!ctx) return; // headless test environments have no 2D context
    const { width, height } = this.element;
    ctx.clearRect(0, 0, width, height);
    const pad = 32;
    const maxDose = Math.max(
      1e-9,
      ...structures.flatMap((s) => s.dvh.map((p) => p[0])),
    );
    ctx.strokeStyle = "#888";
    ctx.strokeRect(pad, pad / 2, width - pad * 1.5, height - pad * 1.5);
    structures.forEach((s, i) => {
      ctx.strokeStyle = COLORS[i % COLORS.length];
      ctx.beginPath();
      s.dvh.forEach(([dose, , pct], k) => {
        const x = pad + (dose / maxDose) * (width - pad * 1.5);
        const y = pad / 2 + (1 - pct / 100) * (height - pad * 1.5);
        if (k === 0) ctx.moveTo(x, y);
        else ctx.lineTo(x, y);
      });
      ctx.stroke();
      ctx.fillStyle = COLORS[i % COLORS.length];
      ctx.fillText(s.structure, width - pad * 4, pad + 14 * i);
    });
    ctx.fillStyle = "#444";
    ctx.fillText("dose (Gy)", width / 2 - 20, height - 4);
  }
}
