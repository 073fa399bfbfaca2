"""Dose accumulation, DVH metrics, and prescription constraint checks.

The dose kernel is an isotropic inverse-square point source with a
near-field cap: dose at a voxel is sum over dwells of
strength * time / max(r, r_min)^2. Commercial-system kernels (TG-43 radial
dose and anisotropy factors) are an extension point, not implemented.

Doses are physical Gy per brachytherapy fraction; course totals add the
external-beam dose to n_fractions times the per-fraction metric. No
radiobiological (EQD2) weighting is applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import (
    HR_CTV,
    OAR_BLADDER,
    OAR_RECTUM_SIGMOID,
    OAR_SMALL_BOWEL,
    LabelMap,
    ScalarVolume,
    StructureKind,
    structure_mask,
    voxel_volume_cc,
)

R_MIN_MM = 0.5


@dataclass(frozen=True)
class DwellSource:
    """Point source: position (mm), dose-rate scale, dwell time."""

    position: np.ndarray
    strength: float = 1.0
    time: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        if self.strength < 0 or self.time < 0:
            raise ValueError("strength and time must be nonnegative")


def accumulate_dose(
    sources: list[DwellSource],
    grid: ScalarVolume,
    cutoff_radius: float = 150.0,
    r_min: float = R_MIN_MM,
) -> ScalarVolume:
    """Sum the inverse-square kernel of every dwell onto the grid.

    Linear in strength and time; sources beyond cutoff_radius of a voxel
    contribute nothing there. Returns a float64 dose grid on the same
    geometry as `grid`.
    """
    if cutoff_radius <= 0:
        raise ValueError("cutoff_radius must be positive")
    nx, ny, nz = grid.dims
    sx, sy, sz = grid.spacing
    dose = np.zeros(grid.dims, dtype=float)
    if sources:
        xs = np.arange(nx) * sx
        ys = np.arange(ny) * sy
        zs = np.arange(nz) * sz
        origin = np.asarray(grid.origin)
        rot = grid.orientation
        r_min2 = r_min * r_min
        cut2 = cutoff_radius * cutoff_radius
        r2 = np.empty(grid.dims, dtype=float)
        for s in sources:
            st = s.strength * s.time
            if st == 0.0:
                continue
            local = rot.T @ (s.position - origin)
            dx2 = (xs - local[0]) ** 2
            dy2 = (ys - local[1]) ** 2
            dz2 = (zs - local[2]) ** 2
            np.add((dx2[:, None] + dy2[None, :])[:, :, None], dz2[None, None, :], out=r2)
            # the cutoff mask is only needed when some voxel can exceed it
            far2 = max(dx2[0], dx2[-1]) + max(dy2[0], dy2[-1]) + max(dz2[0], dz2[-1])
            outside = r2 > cut2 if far2 > cut2 else None
            np.maximum(r2, r_min2, out=r2)
            np.divide(st, r2, out=r2)
            if outside is not None:
                r2[outside] = 0.0
            dose += r2
    return ScalarVolume(
        dims=grid.dims,
        spacing=grid.spacing,
        origin=grid.origin,
        orientation=grid.orientation,
        voxels=dose,
        modality_tag="DOSE",
    )


@dataclass(frozen=True)
class DvhCurve:
    """Cumulative dose-volume data from exact per-voxel doses (no binning)."""

    structure: StructureKind
    doses_desc: np.ndarray  # per-voxel doses, sorted descending (Gy)
    voxel_cc: float

    @property
    def volume_cc(self) -> float:
        return len(self.doses_desc) * self.voxel_cc

    def volume_at_dose(self, dose_gy: float) -> float:
        """V(d): structure volume (cc) receiving at least dose_gy."""
        n = int(np.searchsorted(-self.doses_desc, -dose_gy, side="right"))
        return n * self.voxel_cc

    def points(self, n: int = 100) -> list[tuple[float, float, float]]:
        """(dose, volume cc, volume %) samples for charting."""
        if len(self.doses_desc) == 0:
            return []
        top = float(self.doses_desc[0])
        out = []
        for d in np.linspace(0.0, top, n):
            v = self.volume_at_dose(float(d))
            out.append((float(d), v, 100.0 * v / self.volume_cc))
        return out


def dvh(dose: ScalarVolume, labels: LabelMap, kind: StructureKind) -> DvhCurve:
    """Exact cumulative DVH of a structure on a matching dose grid."""
    if dose.voxels.shape != labels.voxels.shape:
        raise ValueError("dose grid does not match the label grid")
    mask = structure_mask(labels, kind)
    if not mask.any():
        raise ValueError(f"structure {kind.name} absent from label map")
    doses = np.sort(np.asarray(dose.voxels, dtype=float)[mask])[::-1]
    return DvhCurve(structure=kind, doses_desc=doses, voxel_cc=voxel_volume_cc(labels))


@dataclass(frozen=True)
class DxccResult:
    dose_gy: float
    undersized: bool  # structure smaller than the requested volume


def metric_dxcc(curve: DvhCurve, x_cc: float) -> DxccResult:
    """Minimum dose to the hottest x_cc of the structure.

    Voxel volumes accumulate down the descending dose list until they reach
    x_cc; the dose of the crossing voxel is returned without sub-voxel
    interpolation. Structures smaller than x_cc report their minimum dose,
    flagged undersized.
    """
    if x_cc <= 0:
        raise ValueError("x_cc must be positive")
    n = len(curve.doses_desc)
    cum = np.cumsum(np.full(n, curve.voxel_cc))
    if cum[-1] < x_cc:
        return DxccResult(dose_gy=float(curve.doses_desc[-1]), undersized=True)
    k = int(np.searchsorted(cum, x_cc, side="left"))  # first cum >= x_cc
    return DxccResult(dose_gy=float(curve.doses_desc[k]), undersized=False)


def metric_d_percent(curve: DvhCurve, p: float) -> float:
    """Minimum dose to the hottest p percent of the structure volume.

    Counted in whole voxels: the hottest floor(p% of n) voxels (at least
    one), so tiny percentages report the structure maximum.
    """
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    n = len(curve.doses_desc)
    k = min(max(int(np.floor(p / 100.0 * n)), 1), n)
    return float(curve.doses_desc[k - 1])


def prescription_total(ebrt_gy: float, n_fractions: int, fraction_hrctv_gy: float) -> float:
    """Physical-dose course total: external beam plus all fractions."""
    if ebrt_gy < 0 or n_fractions < 0 or fraction_hrctv_gy < 0:
        raise ValueError("prescription components must be nonnegative")
    return ebrt_gy + n_fractions * fraction_hrctv_gy


@dataclass(frozen=True)
class ConstraintSet:
    """Published tolerances the verdict table is checked against."""

    hrctv_total_gy: tuple[float, float] = (80.0, 90.0)
    d2cc_limits: dict[StructureKind, float] = field(
        default_factory=lambda: {
            OAR_BLADDER: 90.0,
            OAR_RECTUM_SIGMOID: 70.0,
            OAR_SMALL_BOWEL: 55.0,
        }
    )
    ebrt_gy: tuple[float, float] = (40.0, 50.0)
    fractions: tuple[int, int] = (3, 5)
    fraction_dose_gy: tuple[float, float] = (5.5, 7.0)

    def __post_init__(self):
        for lo, hi in (self.hrctv_total_gy, self.ebrt_gy, self.fractions, self.fraction_dose_gy):
            if lo > hi or lo < 0:
                raise ValueError("constraint ranges must be nonempty and nonnegative")
        if any(v < 0 for v in self.d2cc_limits.values()):
            raise ValueError("D2cc limits must be nonnegative")


# fixed verdict-row order: target first, then OARs
_VERDICT_ORDER = (HR_CTV, OAR_BLADDER, OAR_RECTUM_SIGMOID, OAR_SMALL_BOWEL)


def check_constraints(
    dose: ScalarVolume,
    labels: LabelMap,
    rx: ConstraintSet,
    ebrt_gy: float,
    n_fractions: int,
) -> list[dict]:
    """Verdict table: one row per constrained structure, fixed order.

    OAR rows compare course-total D2cc (ebrt + n * per-fraction D2cc) to
    the published limit; the target row compares course-total D90 to the
    prescription range. Structures missing from the labels come back
    "not evaluable" rather than failing.
    """
    rows = []
    for kind in _VERDICT_ORDER:
        present = structure_mask(labels, kind).any()
        if kind == HR_CTV:
            metric = "D90"
            limit = list(rx.hrctv_total_gy)
        else:
            metric = "D2cc"
            limit = rx.d2cc_limits.get(kind)
            if limit is None:
                continue
        if not present:
            rows.append({
                "structure": kind.name,
                "metric": metric,
                "value_gy": None,
                "per_fraction_gy": None,
                "limit_gy": limit,
                "verdict": "not evaluable",
            })
            continue
        curve = dvh(dose, labels, kind)
        if kind == HR_CTV:
            per_fraction = metric_d_percent(curve, 90.0)
            total = prescription_total(ebrt_gy, n_fractions, per_fraction)
            ok = limit[0] <= total <= limit[1]
        else:
            per_fraction = metric_dxcc(curve, 2.0).dose_gy
            total = ebrt_gy + n_fractions * per_fraction
            ok = total <= limit
        rows.append({
            "structure": kind.name,
            "metric": metric,
            "value_gy": total,
            "per_fraction_gy": per_fraction,
            "limit_gy": limit,
            "verdict": "pass" if ok else "fail",
        })
    return rows


def dose_report(
    dose: ScalarVolume,
    labels: LabelMap,
    rx: ConstraintSet,
    ebrt_gy: float,
    n_fractions: int,
    dvh_points: int = 50,
) -> dict:
    """Full JSON-ready evaluation: DVH summaries, metrics, verdicts."""
    structures = []
    for kind in _VERDICT_ORDER:
        if not structure_mask(labels, kind).any():
            continue
        curve = dvh(dose, labels, kind)
        d2 = metric_dxcc(curve, 2.0)
        d01 = metric_dxcc(curve, 0.1)
        structures.append({
            "structure": kind.name,
            "volume_cc": curve.volume_cc,
            "d90_gy": metric_d_percent(curve, 90.0),
            "d2cc_gy": d2.dose_gy,
            "d2cc_undersized": d2.undersized,
            "d01cc_gy": d01.dose_gy,
            "d01cc_undersized": d01.undersized,
            "dvh": [[d, v, pct] for d, v, pct in curve.points(dvh_points)],
        })
    return {
        "schema": 1,
        "ebrt_gy": ebrt_gy,
        "n_fractions": n_fractions,
        "structures": structures,
        "verdicts": check_constraints(dose, labels, rx, ebrt_gy, n_fractions),
    }
