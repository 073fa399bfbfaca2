/** Payload shapes of the planning service JSON API. */

export interface NeedleRow {
  hole_id: string;
  depth_mm: number;
  active: boolean;
  dwell_step_mm: number;
}

export interface PlanPayload {
  schema: number;
  device: string;
  registration: number[];
  stage: string;
  needles: NeedleRow[];
}

export interface VerdictRow {
  structure: string;
  metric: string;
  value_gy: number | null;
  per_fraction_gy: number | null;
  limit_gy: number | number[];
  verdict: "pass" | "fail" | "not evaluable";
}

export interface StructureReport {
  structure: string;
  volume_cc: number;
  d90_gy: number;
  d2cc_gy: number;
  d2cc_undersized: boolean;
  d01cc_gy: number;
  d01cc_undersized: boolean;
  dvh: [number, number, number][]; // dose Gy, volume cc, volume %
}

export interface DoseReport {
  schema: number;
  ebrt_gy: number;
  n_fractions: number;
  structures: StructureReport[];
  verdicts: VerdictRow[];
  plan: PlanPayload;
}

export interface CaseState {
  case_id: string;
  stage: string;
  eligibility: string;
  ebrt_gy: number;
  n_fractions: number;
  candidates: string[];
  device_id: string | null;
  registration_rows: number[] | null;
  devices_available: string[];
  plan: PlanPayload | null;
  verdicts: VerdictRow[] | null;
}

export interface FeasibilityRow {
  hole_id: string;
  min_depth_to_target: number | null;
  max_useful_depth: number | null;
  target_path_length: number;
  oar_hits: [string, number][];
  feasible: boolean;
}

export interface FeasibilityReport {
  feasible_hole_count: number;
  rows: FeasibilityRow[];
}

export interface SlicePlane {
  origin_mm: number[];
  u: number[];
  v: number[];
  pixel_mm: [number, number];
}

export interface NeedleProjection {
  hole_id: string;
  entry_px: [number, number];
  tip_px: [number, number];
  tip_plane_distance_mm: number;
}

export interface SliceData {
  orientation: string;
  index: number;
  shape: [number, number];
  plane: SlicePlane;
  image: number[][];
  labels?: number[][];
  dose?: number[][];
  needles: NeedleProjection[];
}

export interface RegistrationResult {
  landmark_residual_mm: number;
  registration: number[];
  icp?: {
    iterations_used: number;
    final_rms_mm: number;
    converged: boolean;
    rms_history: number[];
  };
}

export interface PlanEdit {
  hole_id: string;
  depth_mm?: number;
  active?: boolean;
}

export const MAX_DEPTH_MM = 200;
