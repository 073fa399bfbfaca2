"""HTTP API and case state machine tying the modules into one workflow.

Cases move ARRIVAL → DIAGNOSIS → DEVICE_SELECTION → PREPLAN → INTRAOP →
POSTOP → CLOSED (DIAGNOSIS can close directly when the patient is
ineligible). Every mutating endpoint either performs a legal transition or
returns a 409; per-case mutations are serialized behind a lock, and every
plan edit synchronously recomputes dose, DVH metrics, and the constraint
verdict table.

While a case is in INTRAOP the wire-protocol listener is armed for it:
an incoming TRANSFORM whose device name equals the case id replaces the
active registration and triggers the same replan path.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from fastapi import Body, FastAPI, HTTPException, Query, Request, Response

from . import archive, dosimetry, igtlink, planning, registration, segmentation, volume
from .archive import ArtifactKind, ArtifactStore
from .mesh import TemplateModel, dump_stl, make_template, sample_surface
from .registration import IcpConfig, LandmarkPairs, RigidTransform
from .volume import LabelMap, ScalarVolume, StructureKind
from .workflow import (
    STAGE_PHASE,
    IllegalTransitionError,
    TreatmentPhase,
    WorkflowStage,
    check_transition,
)

log = logging.getLogger(__name__)

DEFAULT_DEVICES = {
    "template-6x6-10mm": dict(rows=6, cols=6, pitch=10.0),
    "template-4x4-15mm": dict(rows=4, cols=4, pitch=15.0),
}


def build_device_catalog(specs: dict[str, dict] | None = None) -> dict[str, TemplateModel]:
    specs = DEFAULT_DEVICES if specs is None else specs
    return {dev_id: make_template(name=dev_id, **params) for dev_id, params in specs.items()}


@dataclass
class ServiceConfig:
    data_dir: str = "./brachyplan-data"
    igtl_port: int | None = None  # None disables the intraoperative listener
    igtl_host: str = "127.0.0.1"
    device_specs: dict[str, dict] | None = None
    icp_sample_count: int = 2000
    icp_seed: int = 20130821
    dose_cutoff_mm: float = 150.0
    ui_dir: str | None = None  # built frontend to mount at /ui


@dataclass
class CaseRuntime:
    """In-memory working set of one case; persisted bits live in state.json."""

    case_id: str
    stage: WorkflowStage = WorkflowStage.ARRIVAL
    eligibility: str = "undecided"
    ebrt_gy: float = 45.0
    n_fractions: int = 4
    candidates: list[str] = field(default_factory=list)
    device_id: str | None = None
    inventory_requests: list[dict] = field(default_factory=list)
    volume_ref: dict | None = None
    labels_ref: dict | None = None
    registration_rows: list[float] | None = None
    lock: threading.RLock = field(default_factory=threading.RLock)
    # caches, rebuilt lazily after restart
    volume: ScalarVolume | None = None
    labels: LabelMap | None = None
    device: TemplateModel | None = None
    plan: planning.NeedlePlan | None = None
    dose: ScalarVolume | None = None
    report: dict | None = None
    comparison: dict | None = None

    def persistable(self) -> dict:
        return {
            "case_id": self.case_id,
            "stage": self.stage.value,
            "eligibility": self.eligibility,
            "ebrt_gy": self.ebrt_gy,
            "n_fractions": self.n_fractions,
            "candidates": self.candidates,
            "device_id": self.device_id,
            "inventory_requests": self.inventory_requests,
            "volume_ref": self.volume_ref,
            "labels_ref": self.labels_ref,
            "registration_rows": self.registration_rows,
        }


class CaseManager:
    """Owns the artifact store, the case registry, and the replan loop."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.store = ArtifactStore(config.data_dir)
        self.devices = build_device_catalog(config.device_specs)
        self._cases: dict[str, CaseRuntime] = {}
        self._registry_lock = threading.Lock()
        self._load_existing_cases()

    # -- persistence -------------------------------------------------------

    def _state_path(self, case_id: str) -> Path:
        return Path(self.config.data_dir) / "cases" / case_id / "state.json"

    def _persist(self, case: CaseRuntime) -> None:
        path = self._state_path(case.case_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name("state.json.tmp")
        tmp.write_text(json.dumps(case.persistable(), indent=1, sort_keys=True))
        tmp.replace(path)

    def _load_existing_cases(self) -> None:
        cases_dir = Path(self.config.data_dir) / "cases"
        if not cases_dir.is_dir():
            return
        for state_file in sorted(cases_dir.glob("*/state.json")):
            data = json.loads(state_file.read_text())
            case = CaseRuntime(
                case_id=data["case_id"],
                stage=WorkflowStage(data["stage"]),
                eligibility=data["eligibility"],
                ebrt_gy=data["ebrt_gy"],
                n_fractions=data["n_fractions"],
                candidates=data["candidates"],
                device_id=data["device_id"],
                inventory_requests=data["inventory_requests"],
                volume_ref=data["volume_ref"],
                labels_ref=data["labels_ref"],
                registration_rows=data["registration_rows"],
            )
            self._cases[case.case_id] = case

    # -- registry ----------------------------------------------------------

    def create_case(self, case_id: str) -> CaseRuntime:
        if not case_id or "/" in case_id or case_id.startswith("."):
            raise ValueError(f"invalid case id {case_id!r}")
        with self._registry_lock:
            if case_id in self._cases:
                raise FileExistsError(case_id)
            case = CaseRuntime(case_id=case_id)
            self._cases[case_id] = case
        self._persist(case)
        return case

    def get(self, case_id: str) -> CaseRuntime:
        try:
            return self._cases[case_id]
        except KeyError:
            raise KeyError(f"unknown case {case_id!r}") from None

    def case_ids(self) -> list[str]:
        return sorted(self._cases)

    # -- lazy artifact hydration --------------------------------------------

    def _hydrate_volume(self, case: CaseRuntime) -> ScalarVolume:
        if case.volume is None:
            if case.volume_ref is None:
                raise LookupError("no volume uploaded for this case")
            data = self.store.fetch(archive.ArtifactRef.from_dict(case.volume_ref))
            case.volume = volume.load_volume_bytes(data)
        return case.volume

    def _hydrate_labels(self, case: CaseRuntime) -> LabelMap:
        if case.labels is None:
            if case.labels_ref is None:
                raise LookupError("no label map uploaded for this case")
            data = self.store.fetch(archive.ArtifactRef.from_dict(case.labels_ref))
            labels = volume.load_volume_bytes(data)
            if not isinstance(labels, LabelMap):
                raise LookupError("stored labels artifact is not a label map")
            case.labels = labels
        return case.labels

    def _hydrate_device(self, case: CaseRuntime) -> TemplateModel:
        if case.device is None:
            if case.device_id is None:
                raise LookupError("no device selected for this case")
            case.device = self.devices[case.device_id]
        return case.device

    def _hydrate_plan(self, case: CaseRuntime) -> planning.NeedlePlan:
        if case.plan is None:
            device = self._hydrate_device(case)
            try:
                ref = self.store.latest_any_phase(case.case_id, ArtifactKind.PLAN)
                data = json.loads(self.store.fetch(ref))
                case.plan = planning.plan_from_dict(data, device)
            except archive.MissingArtifactError:
                case.plan = planning.new_plan(device, self._registration(case))
        return case.plan

    def _registration(self, case: CaseRuntime) -> RigidTransform:
        if case.registration_rows is None:
            return RigidTransform.identity()
        return RigidTransform.from_matrix_rows(case.registration_rows)

    def _hydrate_report(self, case: CaseRuntime) -> dict | None:
        if case.report is None:
            try:
                ref = self.store.latest_any_phase(case.case_id, ArtifactKind.REPORT)
                case.report = json.loads(self.store.fetch(ref))
            except archive.MissingArtifactError:
                return None
        return case.report

    # -- workflow operations -------------------------------------------------

    def advance(self, case: CaseRuntime, target: WorkflowStage) -> None:
        with case.lock:
            if target in (WorkflowStage.DEVICE_SELECTION, WorkflowStage.PREPLAN):
                raise IllegalTransitionError(case.stage, target)
            if target == WorkflowStage.CLOSED and case.stage == WorkflowStage.DIAGNOSIS:
                raise IllegalTransitionError(case.stage, target)
            check_transition(case.stage, target)
            case.stage = target
            self._persist(case)

    def set_eligibility(self, case: CaseRuntime, eligible: bool) -> None:
        with case.lock:
            target = (
                WorkflowStage.DEVICE_SELECTION if eligible else WorkflowStage.CLOSED
            )
            check_transition(case.stage, target)
            case.eligibility = "eligible" if eligible else "ineligible"
            case.stage = target
            self._persist(case)

    def upload_volume(self, case: CaseRuntime, data: bytes, protocol: str | None) -> dict:
        with case.lock:
            if case.stage in (WorkflowStage.ARRIVAL, WorkflowStage.CLOSED):
                raise IllegalTransitionError(case.stage, case.stage)
            vol = volume.load_volume_bytes(data)
            phase = STAGE_PHASE[case.stage]
            if isinstance(vol, LabelMap):
                ref = self.store.store(case.case_id, phase, ArtifactKind.LABELS, data)
                case.labels_ref = ref.to_dict()
                case.labels = vol
                advisories: list[str] = []
            else:
                ref = self.store.store(case.case_id, phase, ArtifactKind.VOLUME, data)
                case.volume_ref = ref.to_dict()
                case.volume = vol
                advisories = (
                    volume.validate_protocol(vol, protocol) if protocol else []
                )
            case.dose = None
            case.report = None
            self._persist(case)
            return {"ref": ref.to_dict(), "advisories": advisories, "kind": ref.kind}

    def _feasibility_payload(self, device: TemplateModel, reg: RigidTransform,
                             labels: LabelMap) -> dict:
        report = planning.evaluate_feasibility(device, reg, labels)
        return {
            "feasible_hole_count": report.feasible_hole_count,
            "rows": [
                {
                    "hole_id": r.hole_id,
                    "min_depth_to_target": r.min_depth_to_target,
                    "max_useful_depth": r.max_useful_depth,
                    "target_path_length": r.target_path_length,
                    "oar_hits": [[k.name, d] for k, d in r.oar_hits],
                    "feasible": r.feasible,
                }
                for r in report.rows
            ],
        }

    def feasibility(self, case: CaseRuntime) -> dict:
        """Per-hole report for the selected device under the live registration."""
        with case.lock:
            device = self._hydrate_device(case)
            labels = self._hydrate_labels(case)
            return self._feasibility_payload(device, self._registration(case), labels)

    def compare_devices(self, case: CaseRuntime, candidates: list[str]) -> dict:
        with case.lock:
            if case.stage != WorkflowStage.DEVICE_SELECTION:
                raise IllegalTransitionError(case.stage, WorkflowStage.DEVICE_SELECTION)
            if not candidates:
                raise ValueError("candidate list must not be empty")
            unknown = [c for c in candidates if c not in self.devices]
            if unknown:
                raise KeyError(f"unknown device ids: {unknown}")
            labels = self._hydrate_labels(case)
            reg = self._registration(case)
            reports = {}
            for dev_id in candidates:
                reports[dev_id] = self._feasibility_payload(
                    self.devices[dev_id], reg, labels
                )
            request = {
                "kind": "inventory-availability",
                "case_id": case.case_id,
                "devices": list(candidates),
                "response": {"available": True, "lead_time_days": 0},
            }
            case.inventory_requests.append(request)
            case.candidates = list(candidates)
            case.comparison = {"candidates": list(candidates), "reports": reports,
                               "selected": case.device_id}
            self._persist(case)
            return {**case.comparison, "inventory": request["response"]}

    def select_device(self, case: CaseRuntime, device_id: str) -> None:
        with case.lock:
            check_transition(case.stage, WorkflowStage.PREPLAN)
            if device_id not in self.devices:
                raise KeyError(f"unknown device id {device_id!r}")
            if device_id not in case.candidates:
                raise ValueError(f"device {device_id!r} was not among the compared candidates")
            case.device_id = device_id
            case.device = self.devices[device_id]
            case.stage = WorkflowStage.PREPLAN
            stl = dump_stl(case.device.mesh)
            self.store.store(case.case_id, TreatmentPhase.PRE, ArtifactKind.DEVICE, stl)
            case.plan = planning.new_plan(case.device, self._registration(case))
            self._archive_plan(case)
            self._persist(case)

    def set_prescription(self, case: CaseRuntime, ebrt_gy: float, n_fractions: int) -> None:
        with case.lock:
            if case.stage == WorkflowStage.CLOSED:
                raise IllegalTransitionError(case.stage, case.stage)
            if ebrt_gy < 0 or n_fractions < 0:
                raise ValueError("prescription components must be nonnegative")
            case.ebrt_gy = float(ebrt_gy)
            case.n_fractions = int(n_fractions)
            self._persist(case)

    def register(self, case: CaseRuntime, model_points, image_points,
                 icp: dict | None) -> dict:
        with case.lock:
            if case.device_id is None:
                raise IllegalTransitionError(case.stage, WorkflowStage.PREPLAN)
            pairs = LandmarkPairs(np.asarray(model_points), np.asarray(image_points))
            fit = registration.fit_landmarks(pairs)
            result: dict[str, Any] = {
                "landmark_residual_mm": registration.landmark_residual_rms(fit, pairs),
            }
            final = fit
            if icp and icp.get("enabled"):
                device = self._hydrate_device(case)
                labels = self._hydrate_labels(case)
                kind = StructureKind(icp.get("structure", "HR_CTV"))
                target = segmentation.surface_cloud(labels, kind)
                cloud = sample_surface(
                    device.mesh,
                    int(icp.get("sample_count", self.config.icp_sample_count)),
                    seed=int(icp.get("seed", self.config.icp_seed)),
                )
                cfg = IcpConfig(
                    max_iterations=int(icp.get("max_iterations", 100)),
                    rms_change_tol=float(icp.get("rms_change_tol", 1e-4)),
                    outlier_trim_fraction=float(icp.get("outlier_trim_fraction", 0.0)),
                )
                report = registration.icp_refine(cloud, target, fit, cfg)
                final = report.transform
                result["icp"] = {
                    "iterations_used": report.iterations_used,
                    "final_rms_mm": report.final_rms,
                    "converged": report.converged,
                    "rms_history": report.rms_history,
                }
            self._apply_registration(case, final)
            result["registration"] = case.registration_rows
            return result

    def _apply_registration(self, case: CaseRuntime, transform: RigidTransform) -> None:
        case.registration_rows = transform.matrix_rows()
        phase = STAGE_PHASE[case.stage]
        payload = json.dumps(
            {"schema": 1, "rows": case.registration_rows}, sort_keys=True
        ).encode()
        self.store.store(case.case_id, phase, ArtifactKind.TRANSFORM, payload)
        if case.plan is not None or case.device_id is not None:
            plan = self._hydrate_plan(case)
            case.plan = planning.NeedlePlan(
                device=plan.device,
                registration=transform,
                needles=plan.needles,
                stage=plan.stage,
            )
        case.dose = None
        case.report = None
        self._persist(case)

    def edit_plan(self, case: CaseRuntime, hole_id: str,
                  depth: float | None, active: bool | None) -> dict:
        with case.lock:
            if case.stage not in (WorkflowStage.PREPLAN, WorkflowStage.INTRAOP):
                raise IllegalTransitionError(case.stage, case.stage)
            plan = self._hydrate_plan(case)
            case.plan = planning.edit_needle(plan, hole_id, depth=depth, active=active)
            self._archive_plan(case)
            return self._replan(case)

    def _archive_plan(self, case: CaseRuntime) -> None:
        phase = STAGE_PHASE[case.stage]
        payload = json.dumps(
            planning.plan_to_dict(case.plan, case.device_id or ""), sort_keys=True
        ).encode()
        self.store.store(case.case_id, phase, ArtifactKind.PLAN, payload)

    def _replan(self, case: CaseRuntime) -> dict:
        """Recompute dose, DVH metrics, and verdicts for the current plan."""
        vol = self._hydrate_volume(case)
        labels = self._hydrate_labels(case)
        plan = self._hydrate_plan(case)
        sources = []
        for needle in plan.active_needles():
            for pos in planning.dwell_positions(plan, needle.hole_id):
                sources.append(dosimetry.DwellSource(position=pos, strength=1.0, time=1.0))
        rx = dosimetry.ConstraintSet()
        dose = dosimetry.accumulate_dose(sources, vol, cutoff_radius=self.config.dose_cutoff_mm)
        report = dosimetry.dose_report(dose, labels, rx, case.ebrt_gy, case.n_fractions)
        report["plan"] = planning.plan_to_dict(plan, case.device_id or "")
        case.dose = dose
        case.report = report
        phase = STAGE_PHASE[case.stage]
        self.store.store(
            case.case_id, phase, ArtifactKind.REPORT,
            json.dumps(report, sort_keys=True).encode(),
        )
        self._persist(case)
        return report

    def replan(self, case: CaseRuntime) -> dict:
        with case.lock:
            return self._replan(case)

    def apply_intraop_transform(self, case_id: str, rows: list[float]) -> bool:
        """Registration update from the intraoperative listener."""
        try:
            case = self.get(case_id)
        except KeyError:
            return False
        with case.lock:
            if case.stage != WorkflowStage.INTRAOP:
                return False
            transform = RigidTransform.from_matrix_rows(rows)
            self._apply_registration(case, transform)
            try:
                self._replan(case)
            except LookupError:
                pass  # no volume/labels yet; registration still applied
            return True

    def store_intraop_image(self, case_id: str, image: igtlink.Image) -> bool:
        try:
            case = self.get(case_id)
        except KeyError:
            return False
        with case.lock:
            if case.stage != WorkflowStage.INTRAOP:
                return False
            vol = igtlink.volume_from_image(image)
            data = volume.dump_volume(vol)
            ref = self.store.store(case.case_id, TreatmentPhase.INTRA, ArtifactKind.VOLUME, data)
            case.volume_ref = ref.to_dict()
            case.volume = vol
            self._persist(case)
            return True

    def followup(self, case: CaseRuntime) -> dict:
        return self.store.followup_overlay(case.case_id)

    # -- views ---------------------------------------------------------------

    def case_view(self, case: CaseRuntime) -> dict:
        with case.lock:
            view = case.persistable()
            view["devices_available"] = sorted(self.devices)
            report = self._hydrate_report(case)
            view["verdicts"] = report["verdicts"] if report else None
            if case.device_id is not None:
                plan = self._hydrate_plan(case)
                view["plan"] = planning.plan_to_dict(plan, case.device_id)
            else:
                view["plan"] = None
            return view

    def slice_view(self, case: CaseRuntime, orientation: str, index: int | None,
                   with_dose: bool, with_labels: bool) -> dict:
        with case.lock:
            vol = self._hydrate_volume(case)
            axis = {"sagittal": 0, "coronal": 1, "axial": 2}.get(orientation)
            if axis is None:
                raise ValueError(f"unknown orientation {orientation!r}")
            if index is None:
                index = vol.dims[axis] // 2
            if not 0 <= index < vol.dims[axis]:
                raise ValueError(f"slice index {index} outside [0, {vol.dims[axis]})")
            plane = volume.axis_aligned_plane(vol, axis, index)
            out: dict[str, Any] = {
                "orientation": orientation,
                "index": index,
                "shape": list(plane.resolution),
                "plane": {
                    "origin_mm": list(plane.origin),
                    "u": plane.in_plane_u.tolist(),
                    "v": plane.in_plane_v.tolist(),
                    "pixel_mm": [
                        plane.extent[0] / plane.resolution[0],
                        plane.extent[1] / plane.resolution[1],
                    ],
                },
                "image": volume.extract_slice(vol, plane, "nearest").tolist(),
            }
            if with_labels and case.labels_ref is not None:
                labels = self._hydrate_labels(case)
                out["labels"] = volume.extract_slice(labels, plane, "nearest").tolist()
            if with_dose and case.dose is not None:
                out["dose"] = volume.extract_slice(case.dose, plane, "trilinear").tolist()
            out["needles"] = self._needle_projections(case, plane)
            return out

    def _needle_projections(self, case: CaseRuntime, plane) -> list[dict]:
        if case.device_id is None:
            return []
        plan = self._hydrate_plan(case)
        u, v = plane.in_plane_u, plane.in_plane_v
        su = plane.extent[0] / plane.resolution[0]
        sv = plane.extent[1] / plane.resolution[1]
        origin = np.asarray(plane.origin)
        rows = []
        for needle in plan.active_needles():
            seg = planning.trajectory(plan, needle.hole_id)
            pts = []
            for p in (seg.entry, seg.tip):
                rel = np.asarray(p) - origin
                pts.append([float(rel @ u / su), float(rel @ v / sv)])
            normal_dist = float((np.asarray(seg.tip) - origin) @ plane.normal)
            rows.append({
                "hole_id": needle.hole_id,
                "entry_px": pts[0],
                "tip_px": pts[1],
                "tip_plane_distance_mm": normal_dist,
            })
        return rows


# --- HTTP layer --------------------------------------------------------------


def _http_error(exc: Exception) -> HTTPException:
    if isinstance(exc, IllegalTransitionError):
        return HTTPException(status_code=409, detail=str(exc))
    if isinstance(exc, FileExistsError):
        return HTTPException(status_code=409, detail=f"case {exc} already exists")
    if isinstance(exc, KeyError):
        return HTTPException(status_code=404, detail=str(exc.args[0]) if exc.args else "not found")
    if isinstance(exc, LookupError):
        return HTTPException(status_code=409, detail=str(exc))
    if isinstance(exc, (ValueError, volume.VolumeFormatError)):
        return HTTPException(status_code=422, detail=str(exc))
    raise exc


def create_app(config: ServiceConfig | None = None,
               manager: CaseManager | None = None) -> FastAPI:
    from contextlib import asynccontextmanager

    config = config or ServiceConfig()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        if app.state.igtl_server is not None:
            app.state.igtl_server.stop()

    app = FastAPI(title="brachyplan", version="0.1.0", lifespan=lifespan)
    mgr = manager or CaseManager(config)
    app.state.manager = mgr
    app.state.igtl_server = None

    if config.igtl_port is not None:
        def handler(peer, message):
            body = message.body
            if isinstance(body, igtlink.Transform):
                mgr.apply_intraop_transform(
                    message.header.device_name, list(body.matrix_rows)
                )
            elif isinstance(body, igtlink.Image):
                mgr.store_intraop_image(message.header.device_name, body)
            # STATUS and Unknown are tolerated and dropped

        app.state.igtl_server = igtlink.serve(
            handler, host=config.igtl_host, port=config.igtl_port
        )

    def case_or_404(case_id: str) -> CaseRuntime:
        try:
            return mgr.get(case_id)
        except KeyError as e:
            raise _http_error(e)

    @app.post("/cases", status_code=201)
    def create_case(payload: dict = Body(...)):
        case_id = payload.get("case_id", "")
        try:
            case = mgr.create_case(case_id)
        except (FileExistsError, ValueError) as e:
            raise _http_error(e)
        return mgr.case_view(case)

    @app.get("/cases")
    def list_cases():
        return {"cases": mgr.case_ids()}

    @app.get("/cases/{case_id}")
    def get_case(case_id: str):
        return mgr.case_view(case_or_404(case_id))

    @app.post("/cases/{case_id}/advance")
    def advance(case_id: str, payload: dict = Body(...)):
        case = case_or_404(case_id)
        try:
            target = WorkflowStage(payload.get("target", ""))
        except ValueError as e:
            raise _http_error(e)
        try:
            mgr.advance(case, target)
        except IllegalTransitionError as e:
            raise _http_error(e)
        return mgr.case_view(case)

    @app.post("/cases/{case_id}/volumes")
    async def upload_volume(case_id: str, request: Request,
                            protocol: str | None = Query(default=None)):
        case = case_or_404(case_id)
        data = await request.body()
        try:
            return mgr.upload_volume(case, data, protocol)
        except (IllegalTransitionError, volume.VolumeFormatError, ValueError) as e:
            raise _http_error(e)

    @app.post("/cases/{case_id}/eligibility")
    def set_eligibility(case_id: str, payload: dict = Body(...)):
        case = case_or_404(case_id)
        if "eligible" not in payload:
            raise HTTPException(status_code=422, detail="missing field 'eligible'")
        try:
            mgr.set_eligibility(case, bool(payload["eligible"]))
        except IllegalTransitionError as e:
            raise _http_error(e)
        return mgr.case_view(case)

    @app.get("/devices")
    def list_devices():
        out = []
        for dev_id, model in sorted(mgr.devices.items()):
            out.append({
                "device_id": dev_id,
                "holes": model.hole_ids(),
                "plate_thickness_mm": model.plate_thickness,
            })
        return {"devices": out}

    @app.post("/cases/{case_id}/device-comparison")
    def device_comparison(case_id: str, payload: dict = Body(...)):
        case = case_or_404(case_id)
        try:
            return mgr.compare_devices(case, list(payload.get("candidates", [])))
        except (IllegalTransitionError, KeyError, ValueError, LookupError) as e:
            raise _http_error(e)

    @app.post("/cases/{case_id}/device-selection")
    def device_selection(case_id: str, payload: dict = Body(...)):
        case = case_or_404(case_id)
        try:
            mgr.select_device(case, payload.get("device_id", ""))
        except (IllegalTransitionError, KeyError, ValueError) as e:
            raise _http_error(e)
        return mgr.case_view(case)

    @app.post("/cases/{case_id}/prescription")
    def set_prescription(case_id: str, payload: dict = Body(...)):
        case = case_or_404(case_id)
        try:
            mgr.set_prescription(
                case, float(payload.get("ebrt_gy", case.ebrt_gy)),
                int(payload.get("n_fractions", case.n_fractions)),
            )
        except (IllegalTransitionError, ValueError) as e:
            raise _http_error(e)
        return mgr.case_view(case)

    @app.post("/cases/{case_id}/registration")
    def register(case_id: str, payload: dict = Body(...)):
        case = case_or_404(case_id)
        try:
            return mgr.register(
                case,
                payload.get("model_points"),
                payload.get("image_points"),
                payload.get("icp"),
            )
        except (IllegalTransitionError, ValueError, LookupError) as e:
            raise _http_error(e)

    @app.patch("/cases/{case_id}/plan")
    def edit_plan(case_id: str, payload: dict = Body(...)):
        case = case_or_404(case_id)
        hole_id = payload.get("hole_id", "")
        depth = payload.get("depth_mm")
        active = payload.get("active")
        try:
            return mgr.edit_plan(
                case, hole_id,
                None if depth is None else float(depth),
                None if active is None else bool(active),
            )
        except (IllegalTransitionError, KeyError, ValueError, LookupError) as e:
            raise _http_error(e)

    @app.get("/cases/{case_id}/report")
    def get_report(case_id: str):
        case = case_or_404(case_id)
        with case.lock:
            report = mgr._hydrate_report(case)
        if report is None:
            raise HTTPException(status_code=404, detail="no dose report computed yet")
        return report

    @app.get("/cases/{case_id}/slice")
    def get_slice(case_id: str, orientation: str = Query(default="axial"),
                  index: int | None = Query(default=None),
                  dose: bool = Query(default=False),
                  labels: bool = Query(default=False)):
        case = case_or_404(case_id)
        try:
            return mgr.slice_view(case, orientation, index, dose, labels)
        except (ValueError, LookupError) as e:
            raise _http_error(e)

    @app.get("/cases/{case_id}/feasibility")
    def feasibility(case_id: str):
        case = case_or_404(case_id)
        try:
            return mgr.feasibility(case)
        except (ValueError, LookupError) as e:
            raise _http_error(e)

    @app.get("/cases/{case_id}/followup")
    def followup(case_id: str):
        case = case_or_404(case_id)
        return mgr.followup(case)

    @app.get("/cases/{case_id}/inventory-requests")
    def inventory_requests(case_id: str):
        case = case_or_404(case_id)
        return {"requests": case.inventory_requests}

    if config.ui_dir:
        from starlette.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=config.ui_dir, html=True), name="ui")

    return app
