/** Workflow stage strip: current stage plus the legal next moves. */

import { CaseState } from "./types.js";

const ORDER = [
  "ARRIVAL",
  "DIAGNOSIS",
  "DEVICE_SELECTION",
  "PREPLAN",
  "INTRAOP",
  "POSTOP",
  "CLOSED",
];

// targets reachable through the generic advance endpoint
const ADVANCE_TARGETS: Record<string, string[]> = {
  ARRIVAL: ["DIAGNOSIS"],
  PREPLAN: ["INTRAOP"],
  INTRAOP: ["POSTOP"],
  POSTOP: ["CLOSED"],
};

export type AdvanceHandler = (target: string) => void;
export type EligibilityHandler = (eligible: boolean) => void;

export class StageControls {
  readonly element: HTMLElement;
  private onAdvance: AdvanceHandler | null = null;
  private onEligibility: EligibilityHandler | null = null;

  constructor(doc: Document = document) {
    this.element = doc.createElement("div");
    this.element.className = "stage-controls";
  }

  advanceHandler(handler: AdvanceHandler): void {
    this.onAdvance = handler;
  }

  eligibilityHandler(handler: EligibilityHandler): void {
    this.onEligibility = handler;
  }

  render(state: CaseState): void {
    const doc = this.element.ownerDocument;
    this.element.textContent = "";
    const strip = doc.createElement("div");
    strip.className = "stage-strip";
    for (const stage of ORDER) {
      const chip = doc.createElement("span");
      chip.textContent = stage;
      chip.className = stage === state.stage ? "stage current" : "stage";
      strip.appendChild(chip);
    }
    this.element.appendChild(strip);

    if (state.stage === "DIAGNOSIS" && state.eligibility === "undecided") {
      for (const [label, eligible] of [["eligible", true], ["ineligible", false]] as const) {
        const button = doc.createElement("button");
        button.textContent = label;
        button.className = "eligibility-button";
        button.addEventListener("click", () => this.onEligibility?.(eligible));
        this.element.appendChild(button);
      }
    }
    for (const target of ADVANCE_TARGETS[state.stage] ?? []) {
      const button = doc.createElement("button");
      button.textContent = `advance to ${target}`;
      button.className = "advance-button";
      button.dataset.target = target;
      button.addEventListener("click", () => this.onAdvance?.(target));
      this.element.appendChild(button);
    }
  }
}
