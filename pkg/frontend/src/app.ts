/** Console wiring: load state from the server, route edits through the
 * serialized queue, fan responses out to the sheet, verdicts, and chart.
 *
 * All displayed numbers originate from server responses; a page refresh
 * rebuilds everything from GET /cases/{id} alone.
 */

import { ApiClient, ApiError } from "./api.js";
import { DvhChart } from "./dvh.js";
import { LandmarkPicker } from "./landmarks.js";
import { EditQueue } from "./queue.js";
import { PlanningSheet } from "./sheet.js";
import { StageControls } from "./stages.js";
import { DEFAULT_VIEWER_STATE, SliceViewer, ViewerState } from "./viewer.js";
import { VerdictPanel } from "./verdicts.js";
import { CaseState, DoseReport, PlanEdit } from "./types.js";

export class PlanningConsole {
  readonly root: HTMLElement;
  readonly sheet: PlanningSheet;
  readonly verdicts: VerdictPanel;
  readonly chart: DvhChart;
  readonly viewer: SliceViewer;
  readonly stages: StageControls;
  readonly picker: LandmarkPicker;
  viewerState: ViewerState = { ...DEFAULT_VIEWER_STATE };

  private queue: EditQueue<PlanEdit, DoseReport>;
  private state: CaseState | null = null;

  constructor(
    private api: ApiClient,
    private caseId: string,
    doc: Document = document,
  ) {
    this.root = doc.createElement("div");
    this.root.className = "planning-console";
    this.stages = new StageControls(doc);
    this.sheet = new PlanningSheet(doc);
    this.verdicts = new VerdictPanel(doc);
    this.chart = new DvhChart(doc);
    this.viewer = new SliceViewer(doc);
    this.picker = new LandmarkPicker(doc);
    for (const el of [
      this.stages.element,
      this.sheet.element,
      this.verdicts.element,
      this.chart.element,
      this.viewer.element,
      this.picker.element,
    ]) {
      this.root.appendChild(el);
    }

    this.queue = new EditQueue<PlanEdit, DoseReport>(
      (edit) => this.api.patchPlan(this.caseId, edit),
      (outcome) => {
        this.sheet.setPending(outcome.edit.hole_id, false);
        if (outcome.error !== undefined) {
          const message =
            outcome.error instanceof ApiError
              ? outcome.error.detail
              : String(outcome.error);
          this.sheet.setRowError(outcome.edit.hole_id, message);
          return;
        }
        this.sheet.setRowError(outcome.edit.hole_id, null);
        this.applyReport(outcome.result as DoseReport);
      },
    );

    this.sheet.onEdit((edit) => {
      this.sheet.setPending(edit.hole_id, true);
      this.queue.submit(edit.hole_id, edit);
    });
    this.stages.advanceHandler((target) => void this.advance(target));
    this.stages.eligibilityHandler((eligible) => void this.decide(eligible));
    this.picker.onRegister((model, image) =>
      this.api.postRegistration(this.caseId, model, image, {
        enabled: this.picker.icpToggle.checked,
        structure: "HR_CTV",
      }),
    );
  }

  /** Full rebuild from the server; the only state source on (re)load. */
  async load(): Promise<CaseState> {
    const state = await this.api.getCase(this.caseId);
    this.state = state;
    this.stages.render(state);
    if (state.plan) {
      this.sheet.render(state.plan.needles);
      void this.refreshFeasibility();
    }
    if (state.verdicts) {
      this.verdicts.render(state.verdicts);
    }
    await this.refreshSlice().catch(() => undefined); // no volume yet is fine
    return state;
  }

  private applyReport(report: DoseReport): void {
    this.sheet.render(report.plan.needles);
    this.verdicts.render(report.verdicts);
    this.chart.render(report.structures);
    void this.refreshFeasibility();
    void this.refreshSlice().catch(() => undefined);
  }

  async refreshFeasibility(): Promise<void> {
    try {
      const report = await this.api.getFeasibility(this.caseId);
      this.sheet.applyFeasibility(report);
    } catch {
      // feasibility needs labels + device; silently skip until then
    }
  }

  async refreshSlice(): Promise<void> {
    const slice = await this.api.getSlice(this.caseId, {
      orientation: this.viewerState.orientation,
      index: this.viewerState.index ?? undefined,
      dose: this.viewerState.showIsodose,
      labels: this.viewerState.showLabels,
    });
    this.picker.setImagePlane(slice.plane);
    this.viewer.render(slice, this.viewerState);
  }

  private async advance(target: string): Promise<void> {
    this.state = await this.api.advance(this.caseId, target);
    this.stages.render(this.state);
  }

  private async decide(eligible: boolean): Promise<void> {
    this.state = await this.api.setEligibility(this.caseId, eligible);
    this.stages.render(this.state);
  }

  get currentState(): CaseState | null {
    return this.state;
  }

  get editsInFlight(): boolean {
    return this.queue.busy;
  }
}
