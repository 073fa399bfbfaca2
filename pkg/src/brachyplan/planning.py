"""Virtual needle planning through a template under a registration.

Needles are straight lines normal to the template face; "depth" is the
insertion distance from the face. Plans are immutable values: edits return
new plans, which keeps replanning deterministic and safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .mesh import TemplateModel
from .registration import RigidTransform, apply_transform
from .volume import HR_CTV, OAR_KINDS, LabelMap, StructureKind, structure_mask
from .workflow import TreatmentPhase

MAX_DEPTH_MM = 200.0


@dataclass(frozen=True)
class Needle:
    hole_id: str
    depth: float = 0.0
    active: bool = False
    dwell_step: float = 5.0

    def __post_init__(self):
        if not 0.0 <= self.depth <= MAX_DEPTH_MM:
            raise ValueError(f"depth {self.depth} outside [0, {MAX_DEPTH_MM}] mm")
        if self.dwell_step <= 0:
            raise ValueError("dwell_step must be positive")

    def dwell_offsets(self, retract_margin: float = 0.0) -> np.ndarray:
        """Distances from the tip at which the source stops."""
        usable = max(self.depth - retract_margin, 0.0)
        count = int(np.floor(usable / self.dwell_step)) + 1
        return np.arange(count) * self.dwell_step


@dataclass(frozen=True)
class NeedlePlan:
    """The unit the physician edits: per-hole needles plus the registration."""

    device: TemplateModel
    registration: RigidTransform
    needles: tuple[Needle, ...]
    stage: TreatmentPhase = TreatmentPhase.PRE

    def __post_init__(self):
        ids = [n.hole_id for n in self.needles]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate hole_id in plan")
        known = set(self.device.hole_ids())
        unknown = [h for h in ids if h not in known]
        if unknown:
            raise ValueError(f"holes not on device: {unknown}")

    def needle(self, hole_id: str) -> Needle:
        for n in self.needles:
            if n.hole_id == hole_id:
                return n
        raise KeyError(f"unknown hole {hole_id!r}")

    def active_needles(self) -> list[Needle]:
        return [n for n in self.needles if n.active]


def new_plan(device: TemplateModel, registration: RigidTransform,
             dwell_step: float = 5.0) -> NeedlePlan:
    """Fresh plan with one inactive zero-depth needle per template hole."""
    needles = tuple(Needle(hole_id=h, dwell_step=dwell_step) for h in device.hole_ids())
    return NeedlePlan(device=device, registration=registration, needles=needles)


@dataclass(frozen=True)
class TrajectorySegment:
    entry: np.ndarray
    tip: np.ndarray
    direction: np.ndarray

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.tip - self.entry))


def trajectory(plan: NeedlePlan, hole_id: str) -> TrajectorySegment:
    """Image-space segment of a needle: registered entry, tip at depth."""
    needle = plan.needle(hole_id)
    pos, direction = plan.device.hole(hole_id)
    entry = apply_transform(plan.registration, pos)
    dir_img = plan.registration.rotation @ direction
    return TrajectorySegment(
        entry=entry,
        tip=entry + needle.depth * dir_img,
        direction=dir_img,
    )


def _segment_for_hole(device: TemplateModel, registration: RigidTransform,
                      hole_id: str, depth: float) -> TrajectorySegment:
    pos, direction = device.hole(hole_id)
    entry = apply_transform(registration, pos)
    dir_img = registration.rotation @ direction
    return TrajectorySegment(entry=entry, tip=entry + depth * dir_img, direction=dir_img)


def ray_structure_intersections(
    seg: TrajectorySegment,
    labels: LabelMap,
    kind: StructureKind,
    step: float | None = None,
) -> list[tuple[float, float]]:
    """Depth intervals (mm from entry) where the segment runs through `kind`.

    The segment is marched at a step no larger than half the smallest
    spacing; interval endpoints are accurate to one step. Intervals come
    back sorted and disjoint.
    """
    max_step = min(labels.spacing) / 2.0
    if step is None or step > max_step:
        step = max_step
    length = seg.length
    if length == 0.0:
        depths = np.array([0.0])
    else:
        depths = np.arange(0.0, length + step / 2, step)
        depths = depths[depths <= length]
    points = seg.entry + depths[:, None] * seg.direction
    local = labels.to_local(points)
    idx = np.rint(local).astype(int)
    dims = np.asarray(labels.dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    mask = structure_mask(labels, kind)
    hits = np.zeros(len(depths), dtype=bool)
    if inside.any():
        ii = idx[inside]
        hits[inside] = mask[ii[:, 0], ii[:, 1], ii[:, 2]]
    return _runs_to_intervals(depths, hits)


def _runs_to_intervals(depths: np.ndarray, hits: np.ndarray) -> list[tuple[float, float]]:
    intervals = []
    start = None
    for d, h in zip(depths, hits):
        if h and start is None:
            start = d
        elif not h and start is not None:
            intervals.append((float(start), float(prev)))
            start = None
        prev = d
    if start is not None:
        intervals.append((float(start), float(depths[-1])))
    return intervals


@dataclass(frozen=True)
class HoleFeasibility:
    hole_id: str
    min_depth_to_target: float | None
    max_useful_depth: float | None
    target_path_length: float
    oar_hits: tuple[tuple[StructureKind, float], ...]

    @property
    def feasible(self) -> bool:
        """Target reachable with no OAR transit before reaching it."""
        if self.min_depth_to_target is None:
            return False
        return all(depth >= self.min_depth_to_target for _, depth in self.oar_hits)


@dataclass(frozen=True)
class FeasibilityReport:
    rows: tuple[HoleFeasibility, ...]
    feasible_hole_count: int


def evaluate_feasibility(
    device: TemplateModel,
    registration: RigidTransform,
    labels: LabelMap,
    depth_range: tuple[float, float] = (0.0, MAX_DEPTH_MM),
) -> FeasibilityReport:
    """Pre-implant check: which holes reach the target, and through what.

    Casts every hole's trajectory to the maximum depth; a hole counts as
    feasible when it reaches HR-CTV with no organ-at-risk interval starting
    before the target entry depth. OAR tissue beyond the target exit is
    reported only if hit on the way.
    """
    if not structure_mask(labels, HR_CTV).any():
        raise ValueError("label map has no HR_CTV structure to target")
    lo, hi = depth_range
    rows = []
    feasible = 0
    oar_present = [k for k in sorted(OAR_KINDS, key=lambda k: k.name)
                   if structure_mask(labels, k).any()]
    for hole_id in device.hole_ids():
        seg = _segment_for_hole(device, registration, hole_id, hi)
        target_ivs = ray_structure_intersections(seg, labels, HR_CTV)
        target_ivs = [iv for iv in target_ivs if iv[0] >= lo]
        if target_ivs:
            min_depth = target_ivs[0][0]
            max_useful = target_ivs[-1][1]
            path_len = sum(b - a for a, b in target_ivs)
        else:
            min_depth = None
            max_useful = None
            path_len = 0.0
        oar_hits = []
        for kind in oar_present:
            ivs = ray_structure_intersections(seg, labels, kind)
            if max_useful is not None:
                ivs = [iv for iv in ivs if iv[0] <= max_useful]
            if ivs:
                oar_hits.append((kind, ivs[0][0]))
        row = HoleFeasibility(
            hole_id=hole_id,
            min_depth_to_target=min_depth,
            max_useful_depth=max_useful,
            target_path_length=path_len,
            oar_hits=tuple(oar_hits),
        )
        rows.append(row)
        if row.feasible:
            feasible += 1
    return FeasibilityReport(rows=tuple(rows), feasible_hole_count=feasible)


def dwell_positions(plan: NeedlePlan, hole_id: str,
                    retract_margin: float = 0.0) -> np.ndarray:
    """Source stop positions along an active needle, from tip toward entry.

    Offsets from the tip run 0, step, 2*step, ... while they stay within
    depth - retract_margin; a zero-depth needle still gets its tip point.
    """
    needle = plan.needle(hole_id)
    if not needle.active:
        raise ValueError(f"needle {hole_id} is not active")
    seg = trajectory(plan, hole_id)
    offsets = needle.dwell_offsets(retract_margin)
    return seg.tip - offsets[:, None] * seg.direction


def edit_needle(
    plan: NeedlePlan,
    hole_id: str,
    depth: float | None = None,
    active: bool | None = None,
) -> NeedlePlan:
    """Return a new plan with a single needle edited; everything else intact."""
    current = plan.needle(hole_id)  # raises KeyError for unknown holes
    updates = {}
    if depth is not None:
        updates["depth"] = float(depth)
    if active is not None:
        updates["active"] = bool(active)
    edited = replace(current, **updates)
    needles = tuple(edited if n.hole_id == hole_id else n for n in plan.needles)
    return replace(plan, needles=needles)


def plan_to_dict(plan: NeedlePlan, device_id: str) -> dict:
    """JSON-ready plan payload (device id, 3x4 registration, needle rows)."""
    return {
        "schema": 1,
        "device": device_id,
        "registration": plan.registration.matrix_rows(),
        "stage": plan.stage.name,
        "needles": [
            {
                "hole_id": n.hole_id,
                "depth_mm": n.depth,
                "active": n.active,
                "dwell_step_mm": n.dwell_step,
            }
            for n in plan.needles
        ],
    }


def plan_from_dict(data: dict, device: TemplateModel) -> NeedlePlan:
    registration = RigidTransform.from_matrix_rows(data["registration"])
    needles = tuple(
        Needle(
            hole_id=row["hole_id"],
            depth=float(row["depth_mm"]),
            active=bool(row["active"]),
            dwell_step=float(row["dwell_step_mm"]),
        )
        for row in data["needles"]
    )
    return NeedlePlan(
        device=device,
        registration=registration,
        needles=needles,
        stage=TreatmentPhase[data.get("stage", "PRE")],
    )
