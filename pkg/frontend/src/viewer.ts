/** 2D slice viewer with needle, label, and isodose overlays.
 *
 * The image, label codes, dose values, and needle projections all come
 * from one slice response; this module only rasterizes them. The isodose
 * overlay marks threshold-boundary pixels: a pixel at or above the level
 * with a 4-neighbor (or edge) below it.
 */

import { NeedleProjection, SliceData } from "./types.js";

export interface ViewerState {
  orientation: "axial" | "sagittal" | "coronal";
  index: number | null;
  showNeedles: boolean;
  showLabels: boolean;
  showIsodose: boolean;
  isodoseLevelGy: number;
}

export const DEFAULT_VIEWER_STATE: ViewerState = {
  orientation: "axial",
  index: null,
  showNeedles: true,
  showLabels: true,
  showIsodose: false,
  isodoseLevelGy: 7.0,
};

const LABEL_COLORS: Record<number, [number, number, number]> = {
  1: [255, 80, 80],
  2: [255, 160, 40],
  3: [80, 120, 255],
  4: [80, 200, 120],
  5: [200, 120, 255],
};

/** Boundary pixels of {dose >= level}; exact threshold contract. */
export function isodoseContourMask(dose: number[][], level: number): boolean[][] {
  const nu = dose.length;
  const nv = nu > 0 ? dose[0].length : 0;
  const inside = dose.map((row) => row.map((v) => v >= level));
  const contour: boolean[][] = [];
  for (let i = 0; i < nu; i++) {
    contour.push(new Array<boolean>(nv).fill(false));
    for (let j = 0; j < nv; j++) {
      if (!inside[i][j]) continue;
      const edge =
        i === 0 || j === 0 || i === nu - 1 || j === nv - 1 ||
        !inside[i - 1][j] || !inside[i + 1][j] ||
        !inside[i][j - 1] || !inside[i][j + 1];
      contour[i][j] = edge;
    }
  }
  return contour;
}

/** True when a needle crosses the plane close to perpendicular: its
 * projected segment is shorter than one pixel, so draw a point marker. */
export function isPointMarker(needle: NeedleProjection): boolean {
  const du = needle.tip_px[0] - needle.entry_px[0];
  const dv = needle.tip_px[1] - needle.entry_px[1];
  return Math.hypot(du, dv) < 1.0;
}

export class SliceViewer {
  readonly element: HTMLCanvasElement;
  private scale = 4;

  constructor(doc: Document = document) {
    this.element = doc.createElement("canvas");
    this.element.className = "slice-viewer";
  }

  render(slice: SliceData, state: ViewerState): void {
    const [nu, nv] = slice.shape;
    this.element.width = nu * this.scale;
    this.element.height = nv * this.scale;
    const ctx = this.element.getContext("2d");
    if (!ctx) return;

    let lo = Infinity;
    let hi = -Infinity;
    for (const row of slice.image) {
      for (const v of row) {
        if (v < lo) lo = v;
        if (v > hi) hi = v;
      }
    }
    const span = hi > lo ? hi - lo : 1;
    const s = this.scale;
    for (let i = 0; i < nu; i++) {
      for (let j = 0; j < nv; j++) {
        const g = Math.round(((slice.image[i][j] - lo) / span) * 255);
        ctx.fillStyle = `rgb(${g},${g},${g})`;
        ctx.fillRect(i * s, j * s, s, s);
        if (state.showLabels && slice.labels) {
          const code = slice.labels[i][j];
          const color = LABEL_COLORS[code];
          if (color) {
            ctx.fillStyle = `rgba(${color[0]},${color[1]},${color[2]},0.35)`;
            ctx.fillRect(i * s, j * s, s, s);
          }
        }
      }
    }

    if (state.showIsodose && slice.dose) {
      const contour = isodoseContourMask(slice.dose, state.isodoseLevelGy);
      ctx.fillStyle = "rgba(255,255,0,0.9)";
      for (let i = 0; i < nu; i++) {
        for (let j = 0; j < nv; j++) {
          if (contour[i][j]) ctx.fillRect(i * s, j * s, s, s);
        }
      }
    }

    if (state.showNeedles) {
      for (const needle of slice.needles) {
        ctx.strokeStyle = "#00e5ff";
        ctx.fillStyle = "#00e5ff";
        if (isPointMarker(needle)) {
          ctx.beginPath();
          ctx.arc(needle.tip_px[0] * s, needle.tip_px[1] * s, s, 0, 2 * Math.PI);
          ctx.fill();
        } else {
          ctx.beginPath();
          ctx.moveTo(needle.entry_px[0] * s, needle.entry_px[1] * s);
          ctx.lineTo(needle.tip_px[0] * s, needle.tip_px[1] * s);
          ctx.stroke();
        }
      }
    }
  }
}
