/** Mock server for the typed client: canned JSON routes + a request log. */

import { ApiClient, FetchLike } from "../src/api.js";
import { CaseState, DoseReport, NeedleRow, VerdictRow } from "../src/types.js";

export function makeNeedles(): NeedleRow[] {
  return ["A1", "A2", "B1", "B2"].map((hole_id) => ({
    hole_id,
    depth_mm: 0,
    active: false,
    dwell_step_mm: 5,
  }));
}

export function makeVerdicts(): VerdictRow[] {
  return [
    {
      structure: "HR_CTV",
      metric: "D90",
      value_gy: 84.25,
      per_fraction_gy: 9.8125,
      limit_gy: [80, 90],
      verdict: "pass",
    },
    {
      structure: "OAR_BLADDER",
      metric: "D2cc",
      value_gy: 91.5,
      per_fraction_gy: 11.625,
      limit_gy: 90,
      verdict: "fail",
    },
    {
      structure: "OAR_RECTUM_SIGMOID",
      metric: "D2cc",
      value_gy: 61.0,
      per_fraction_gy: 4.0,
      limit_gy: 70,
      verdict: "pass",
    },
    {
      structure: "OAR_SMALL_BOWEL",
      metric: "D2cc",
      value_gy: null,
      per_fraction_gy: null,
      limit_gy: 55,
      verdict: "not evaluable",
    },
  ];
}

export function makeCaseState(overrides: Partial<CaseState> = {}): CaseState {
  return {
    case_id: "c1",
    stage: "PREPLAN",
    eligibility: "eligible",
    ebrt_gy: 45,
    n_fractions: 4,
    candidates: ["template-6x6-10mm"],
    device_id: "template-6x6-10mm",
    registration_rows: [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0],
    devices_available: ["template-6x6-10mm"],
    plan: {
      schema: 1,
      device: "template-6x6-10mm",
      registration: [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0],
      stage: "PRE",
      needles: makeNeedles(),
    },
    verdicts: makeVerdicts(),
    ...overrides,
  };
}

export function makeReport(needles: NeedleRow[], verdicts: VerdictRow[]): DoseReport {
  return {
    schema: 1,
    ebrt_gy: 45,
    n_fractions: 4,
    structures: [
      {
        structure: "HR_CTV",
        volume_cc: 30,
        d90_gy: 9.8125,
        d2cc_gy: 12.0,
        d2cc_undersized: false,
        d01cc_gy: 14.0,
        d01cc_undersized: false,
        dvh: [
          [0, 30, 100],
          [10, 15, 50],
          [20, 0, 0],
        ],
      },
    ],
    verdicts,
    plan: {
      schema: 1,
      device: "template-6x6-10mm",
      registration: [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0],
      stage: "PRE",
      needles,
    },
  };
}

export interface LoggedRequest {
  method: string;
  path: string;
  body: unknown;
}

type Route = (req: LoggedRequest) => { status: number; body: unknown } | undefined;

export class MockServer {
  requests: LoggedRequest[] = [];
  private routes: Route[] = [];
  /** Pending deferred responses, oldest first (for latency simulation). */
  private deferred: Array<{
    req: LoggedRequest;
    resolve: (value: { status: number; body: unknown }) => void;
  }> = [];
  deferPatch = false;

  route(handler: Route): void {
    this.routes.push(handler);
  }

  get fetchLike(): FetchLike {
    return async (input, init) => {
      const req: LoggedRequest = {
        method: init?.method ?? "GET",
        path: input,
        body: init?.body ? JSON.parse(String(init.body)) : undefined,
      };
      this.requests.push(req);
      let result: { status: number; body: unknown } | undefined;
      if (this.deferPatch && req.method === "PATCH") {
        result = await new Promise((resolve) => {
          this.deferred.push({ req, resolve });
        });
      } else {
        result = this.dispatch(req);
      }
      if (!result) result = { status: 404, body: { detail: "no route" } };
      return new Response(JSON.stringify(result.body), {
        status: result.status,
        headers: { "content-type": "application/json" },
      });
    };
  }

  private dispatch(req: LoggedRequest): { status: number; body: unknown } | undefined {
    for (const route of this.routes) {
      const hit = route(req);
      if (hit) return hit;
    }
    return undefined;
  }

  get pendingCount(): number {
    return this.deferred.length;
  }

  /** Release the oldest deferred request through the normal routes. */
  releaseOne(): void {
    const next = this.deferred.shift();
    if (!next) throw new Error("no deferred request to release");
    const result = this.dispatch(next.req) ?? {
      status: 404,
      body: { detail: "no route" },
    };
    next.resolve(result);
  }

  client(): ApiClient {
    return new ApiClient("", this.fetchLike);
  }

  patchRequests(): LoggedRequest[] {
    return this.requests.filter((r) => r.method === "PATCH");
  }
}

export function flushMicrotasks(times = 10): Promise<void> {
  let p = Promise.resolve();
  for (let i = 0; i < times; i++) p = p.then(() => undefined);
  return p;
}
