/** Thin typed client for the planning service.
 *
 * Every number shown in the console comes from these responses; nothing is
 * recomputed locally.
 */

import {
  CaseState,
  DoseReport,
  FeasibilityReport,
  PlanEdit,
  RegistrationResult,
  SliceData,
} from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method, headers: {} };
    if (body !== undefined) {
      init.headers = { "content-type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchFn(this.baseUrl + path, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const parsed = await response.json();
        if (parsed && typeof parsed.detail === "string") detail = parsed.detail;
      } catch {
        // keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  getCase(caseId: string): Promise<CaseState> {
    return this.request("GET", `/cases/${caseId}`);
  }

  patchPlan(caseId: string, edit: PlanEdit): Promise<DoseReport> {
    return this.request("PATCH", `/cases/${caseId}/plan`, edit);
  }

  getFeasibility(caseId: string): Promise<FeasibilityReport> {
    return this.request("GET", `/cases/${caseId}/feasibility`);
  }

  getSlice(
    caseId: string,
    opts: { orientation: string; index?: number; dose?: boolean; labels?: boolean },
  ): Promise<SliceData> {
    const params = new URLSearchParams({ orientation: opts.orientation });
    if (opts.index !== undefined) params.set("index", String(opts.index));
    if (opts.dose) params.set("dose", "true");
    if (opts.labels) params.set("labels", "true");
    return this.request("GET", `/cases/${caseId}/slice?${params.toString()}`);
  }

  postRegistration(
    caseId: string,
    modelPoints: number[][],
    imagePoints: number[][],
    icp?: { enabled: boolean; structure?: string },
  ): Promise<RegistrationResult> {
    return this.request("POST", `/cases/${caseId}/registration`, {
      model_points: modelPoints,
      image_points: imagePoints,
      icp,
    });
  }

  advance(caseId: string, target: string): Promise<CaseState> {
    return this.request("POST", `/cases/${caseId}/advance`, { target });
  }

  setEligibility(caseId: string, eligible: boolean): Promise<CaseState> {
    return this.request("POST", `/cases/${caseId}/eligibility`, { eligible });
  }

  getReport(caseId: string): Promise<DoseReport> {
    return this.request("GET", `/cases/${caseId}/report`);
  }
}
