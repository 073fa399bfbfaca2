/** Registration landmark picker: three corresponding point pairs.
 *
 * The model pane represents the template face (clicks map to device-frame
 * mm); the image pane represents the current slice (clicks map to patient
 * mm through the slice plane geometry). The register button stays disabled
 * until exactly three complete pairs exist; server rejections (for example
 * collinear picks) surface as an inline message and the picks stay
 * editable.
 */

import { RegistrationResult, SlicePlane } from "./types.js";

export type RegisterHandler = (
  modelPoints: number[][],
  imagePoints: number[][],
) => Promise<RegistrationResult>;

export const REQUIRED_PAIRS = 3;

export class LandmarkPicker {
  readonly element: HTMLElement;
  readonly modelPane: HTMLElement;
  readonly imagePane: HTMLElement;
  readonly registerButton: HTMLButtonElement;
  readonly statusLine: HTMLElement;
  readonly icpToggle: HTMLInputElement;

  private modelPoints: number[][] = [];
  private imagePoints: number[][] = [];
  private handler: RegisterHandler | null = null;
  private plane: SlicePlane | null = null;
  private faceZ: number;

  constructor(doc: Document = document, faceZMm = 5.0) {
    this.faceZ = faceZMm;
    this.element = doc.createElement("div");
    this.element.className = "landmark-picker";

    this.modelPane = doc.createElement("div");
    this.modelPane.className = "pick-pane model-pane";
    this.imagePane = doc.createElement("div");
    this.imagePane.className = "pick-pane image-pane";
    this.element.appendChild(this.modelPane);
    this.element.appendChild(this.imagePane);

    const controls = doc.createElement("div");
    this.icpToggle = doc.createElement("input");
    this.icpToggle.type = "checkbox";
    this.icpToggle.id = "icp-toggle";
    const icpLabel = doc.createElement("label");
    icpLabel.htmlFor = "icp-toggle";
    icpLabel.textContent = "refine with ICP";
    this.registerButton = doc.createElement("button");
    this.registerButton.textContent = "register";
    this.registerButton.disabled = true;
    this.statusLine = doc.createElement("span");
    this.statusLine.className = "landmark-status";
    controls.appendChild(this.icpToggle);
    controls.appendChild(icpLabel);
    controls.appendChild(this.registerButton);
    controls.appendChild(this.statusLine);
    this.element.appendChild(controls);

    this.registerButton.addEventListener("click", () => void this.fire());
    this.updateButton();
  }

  onRegister(handler: RegisterHandler): void {
    this.handler = handler;
  }

  setImagePlane(plane: SlicePlane): void {
    this.plane = plane;
  }

  /** Model-pane click in template-face millimetres. */
  pickModel(xMm: number, yMm: number): void {
    if (this.modelPoints.length >= REQUIRED_PAIRS) return;
    this.modelPoints.push([xMm, yMm, this.faceZ]);
    this.updateButton();
  }

  /** Image-pane click in slice pixel coordinates. */
  pickImage(iPx: number, jPx: number): void {
    if (!this.plane || this.imagePoints.length >= REQUIRED_PAIRS) return;
    const { origin_mm, u, v, pixel_mm } = this.plane;
    const point = [0, 1, 2].map(
      (k) => origin_mm[k] + u[k] * pixel_mm[0] * iPx + v[k] * pixel_mm[1] * jPx,
    );
    this.imagePoints.push(point);
    this.updateButton();
  }

  pairCount(): number {
    return Math.min(this.modelPoints.length, this.imagePoints.length);
  }

  get complete(): boolean {
    return (
      this.modelPoints.length === REQUIRED_PAIRS &&
      this.imagePoints.length === REQUIRED_PAIRS
    );
  }

  clearPicks(): void {
    this.modelPoints = [];
    this.imagePoints = [];
    this.updateButton();
  }

  private updateButton(): void {
    this.registerButton.disabled = !this.complete;
    this.statusLine.textContent = `${this.pairCount()}/${REQUIRED_PAIRS} pairs`;
  }

  private async fire(): Promise<void> {
    if (!this.handler || !this.complete) return;
    this.registerButton.disabled = true;
    this.statusLine.textContent = "registering…";
    try {
      const result = await this.handler(this.modelPoints, this.imagePoints);
      const icp = result.icp
        ? `, ICP rms ${result.icp.final_rms_mm.toExponential(2)} mm`
        : "";
      this.statusLine.textContent =
        `residual ${result.landmark_residual_mm.toExponential(2)} mm${icp}`;
      this.statusLine.className = "landmark-status ok";
    } catch (error) {
      // picks remain editable after a rejection (e.g. collinear points)
      this.statusLine.textContent = `registration failed: ${String(
        (error as Error).message ?? error,
      )} — re-pick and retry`;
      this.statusLine.className = "landmark-status error";
      this.registerButton.disabled = !this.complete;
    }
  }
}
