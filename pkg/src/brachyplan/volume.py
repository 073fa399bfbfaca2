"""Voxel-grid data model, SVOL file I/O, and slice extraction.

SVOL v1 is the on-disk interchange format: a UTF-8 text header followed by a
blank line and a raw little-endian payload in x-fastest order.

    svol 1
    dims X Y Z
    spacing SX SY SZ
    origin OX OY OZ
    orient r11 r12 r13 r21 r22 r23 r31 r32 r33
    dtype float32|uint8|int16
    modality TAG
    label CODE NAME          (label maps only, one line per code)

Voxel (i, j, k) has its center at origin + orient @ (i*SX, j*SY, k*SZ) in
patient space (mm). Grids are immutable after load; all operations here are
pure functions.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

ORIENT_TOL = 1e-6

DTYPES = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
    "int16": np.dtype("<i2"),
}


class VolumeFormatError(ValueError):
    """Malformed SVOL header or payload."""


class TruncationError(VolumeFormatError):
    """Payload shorter than the header-declared voxel count."""


@dataclass(frozen=True)
class StructureKind:
    """Structure identity for label maps; compare and hash by name."""

    name: str

    def __str__(self):
        return self.name

    @classmethod
    def other(cls, name: str) -> "StructureKind":
        return cls(f"OTHER:{name}")

    @property
    def is_oar(self) -> bool:
        return self in OAR_KINDS


GTV = StructureKind("GTV")
HR_CTV = StructureKind("HR_CTV")
IR_CTV = StructureKind("IR_CTV")
OAR_BLADDER = StructureKind("OAR_BLADDER")
OAR_RECTUM_SIGMOID = StructureKind("OAR_RECTUM_SIGMOID")
OAR_SMALL_BOWEL = StructureKind("OAR_SMALL_BOWEL")

OAR_KINDS = frozenset({OAR_BLADDER, OAR_RECTUM_SIGMOID, OAR_SMALL_BOWEL})

# Target volumes nest: a voxel coded GTV belongs to HR_CTV and IR_CTV as
# well, so the map stores only the innermost code per voxel.
TARGET_NESTING = {
    GTV: (GTV,),
    HR_CTV: (HR_CTV, GTV),
    IR_CTV: (IR_CTV, HR_CTV, GTV),
}


def _validate_grid(dims, spacing, origin, orientation):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(float(o) for o in origin)
    orientation = np.asarray(orientation, dtype=float).reshape(3, 3)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"dims must be 3 positive integers, got {dims}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive lengths, got {spacing}")
    if np.max(np.abs(orientation.T @ orientation - np.eye(3))) > ORIENT_TOL:
        raise ValueError("orientation columns must be orthonormal")
    return dims, spacing, origin, orientation


@dataclass(frozen=True)
class ScalarVolume:
    """Regular voxel grid of scalar intensities in patient space."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    orientation: np.ndarray
    voxels: np.ndarray  # shape dims, indexed [i, j, k] = (x, y, z)
    modality_tag: str = ""

    def __post_init__(self):
        dims, spacing, origin, orientation = _validate_grid(
            self.dims, self.spacing, self.origin, self.orientation
        )
        voxels = np.asarray(self.voxels)
        if voxels.shape != dims:
            if voxels.size == int(np.prod(dims)):
                voxels = voxels.reshape(dims, order="F")
            else:
                raise ValueError(
                    f"voxel count {voxels.size} != product of dims {dims}"
                )
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "orientation", orientation)
        object.__setattr__(self, "voxels", voxels)

    def grid_fields(self) -> dict:
        return {
            "dims": self.dims,
            "spacing": self.spacing,
            "origin": self.origin,
            "orientation": self.orientation,
        }

    def same_grid(self, other) -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
            and np.array_equal(self.orientation, other.orientation)
        )

    def voxel_centers(self, indices: np.ndarray) -> np.ndarray:
        """Patient-space centers (mm) of (n, 3) integer voxel indices."""
        local = np.asarray(indices, dtype=float) * np.asarray(self.spacing)
        return local @ self.orientation.T + np.asarray(self.origin)

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Map patient-space points to continuous voxel index coordinates."""
        p = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(self.origin)
        return (p @ self.orientation) / np.asarray(self.spacing)


@dataclass(frozen=True)
class LabelMap(ScalarVolume):
    """Voxel grid of small-integer structure codes with a code legend."""

    legend: dict[int, StructureKind] = field(default_factory=dict)

    def __post_init__(self):
        super().__post_init__()
        codes = set(np.unique(self.voxels).tolist()) - {0}
        missing = codes - set(self.legend)
        if missing:
            raise ValueError(f"codes {sorted(missing)} missing from legend")

    def code_for(self, kind: StructureKind) -> int | None:
        for code, k in self.legend.items():
            if k == kind:
                return code
        return None


def structure_mask(labels: LabelMap, kind: StructureKind) -> np.ndarray:
    """Boolean voxel mask of a structure, honoring target nesting.

    HR_CTV includes GTV-coded voxels and IR_CTV includes both, because the
    map stores one (innermost) code per voxel while the clinical volumes
    nest. Non-target kinds match their own code only.
    """
    members = TARGET_NESTING.get(kind, (kind,))
    mask = np.zeros(labels.dims, dtype=bool)
    for k in members:
        code = labels.code_for(k)
        if code is not None:
            mask |= labels.voxels == code
    return mask


def voxel_volume_cc(vol: ScalarVolume) -> float:
    """Volume of one voxel in cm^3."""
    sx, sy, sz = vol.spacing
    return sx * sy * sz / 1000.0


# --- SVOL v1 I/O ---------------------------------------------------------

def _parse_floats(value: str, n: int, key: str) -> tuple[float, ...]:
    parts = value.split()
    if len(parts) != n:
        raise VolumeFormatError(f"header field '{key}' needs {n} values")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as e:
        raise VolumeFormatError(f"header field '{key}' is not numeric") from e


def _read_header(fh) -> tuple[dict, list[tuple[int, str]]]:
    magic = fh.readline().decode("utf-8", "replace").strip()
    if magic != "svol 1":
        raise VolumeFormatError(f"bad magic line {magic!r}, expected 'svol 1'")
    fields: dict = {}
    labels: list[tuple[int, str]] = []
    while True:
        raw = fh.readline()
        if raw == b"":
            raise VolumeFormatError("unterminated header (no blank line)")
        line = raw.decode("utf-8", "replace").rstrip("\n")
        if line == "":
            break
        key, _, value = line.partition(" ")
        if key == "dims":
            vals = _parse_floats(value, 3, "dims")
            if any(v != int(v) or v <= 0 for v in vals):
                raise VolumeFormatError("header field 'dims' must be positive integers")
            fields["dims"] = tuple(int(v) for v in vals)
        elif key == "spacing":
            vals = _parse_floats(value, 3, "spacing")
            if any(v <= 0 for v in vals):
                raise VolumeFormatError("header field 'spacing' must be positive")
            fields["spacing"] = vals
        elif key == "origin":
            fields["origin"] = _parse_floats(value, 3, "origin")
        elif key == "orient":
            fields["orient"] = np.array(_parse_floats(value, 9, "orient")).reshape(3, 3)
        elif key == "dtype":
            if value not in DTYPES:
                raise VolumeFormatError(f"header field 'dtype' unknown: {value!r}")
            fields["dtype"] = value
        elif key == "modality":
            fields["modality"] = value
        elif key == "label":
            code_str, _, name = value.partition(" ")
            try:
                code = int(code_str)
            except ValueError as e:
                raise VolumeFormatError("header field 'label' needs an integer code") from e
            labels.append((code, name))
        else:
            raise VolumeFormatError(f"unknown header field {key!r}")
    for required in ("dims", "spacing", "origin", "orient", "dtype"):
        if required not in fields:
            raise VolumeFormatError(f"header field '{required}' is missing")
    return fields, labels


def _kind_from_name(name: str) -> StructureKind:
    return StructureKind(name)


def load_volume(path) -> ScalarVolume:
    """Load an SVOL v1 file; label maps come back as LabelMap."""
    with open(path, "rb") as fh:
        return _load_volume_fh(fh)


def load_volume_bytes(data: bytes) -> ScalarVolume:
    """Parse SVOL v1 from a byte string (uploads, archive reads)."""
    return _load_volume_fh(io.BytesIO(data))


def _load_volume_fh(fh) -> ScalarVolume:
    fields, labels = _read_header(fh)
    dtype = DTYPES[fields["dtype"]]
    count = int(np.prod(fields["dims"]))
    payload = fh.read()
    expected = count * dtype.itemsize
    if len(payload) < expected:
        raise TruncationError(
            f"payload has {len(payload)} bytes, "
            f"expected {expected} for dims {fields['dims']}"
        )
    if len(payload) > expected:
        raise VolumeFormatError(
            f"{len(payload) - expected} trailing bytes after voxel payload"
        )
    voxels = np.frombuffer(payload, dtype=dtype).reshape(fields["dims"], order="F")
    common = dict(
        dims=fields["dims"],
        spacing=fields["spacing"],
        origin=fields["origin"],
        orientation=fields["orient"],
        voxels=voxels,
        modality_tag=fields.get("modality", ""),
    )
    try:
        if labels:
            legend = {code: _kind_from_name(name) for code, name in labels}
            return LabelMap(legend=legend, **common)
        return ScalarVolume(**common)
    except ValueError as e:
        raise VolumeFormatError(str(e)) from e


def save_volume(vol: ScalarVolume, path) -> None:
    """Write SVOL v1; exact inverse of load_volume on valid volumes."""
    data = dump_volume(vol)
    with open(path, "wb") as fh:
        fh.write(data)


def dump_volume(vol: ScalarVolume) -> bytes:
    """Serialize to SVOL v1 bytes."""
    dtype_name = {v: k for k, v in DTYPES.items()}.get(vol.voxels.dtype)
    if dtype_name is None:
        dtype_name = "float32"
    out = io.BytesIO()

    def line(s):
        out.write((s + "\n").encode("utf-8"))

    line("svol 1")
    line("dims " + " ".join(str(d) for d in vol.dims))
    line("spacing " + " ".join(repr(s) for s in vol.spacing))
    line("origin " + " ".join(repr(o) for o in vol.origin))
    line("orient " + " ".join(repr(float(r)) for r in vol.orientation.ravel()))
    line(f"dtype {dtype_name}")
    line(f"modality {vol.modality_tag}")
    if isinstance(vol, LabelMap):
        for code in sorted(vol.legend):
            line(f"label {code} {vol.legend[code].name}")
    line("")
    out.write(np.ascontiguousarray(vol.voxels.ravel(order="F"), DTYPES[dtype_name]).tobytes())
    return out.getvalue()


# --- acquisition protocol advisories --------------------------------------

T1_SLICE_MM = 3.0
T2_SLICE_RANGE_MM = (4.0, 5.0)
T2_GAPS_MM = (0.0, 1.0)


def validate_protocol(vol: ScalarVolume, kind: str) -> list[str]:
    """Advisory (never fatal) checks of through-plane spacing.

    T1 series are expected at 3 mm with no gaps; T2 at 4-5 mm slices plus a
    0 or 1 mm gap, so combined through-plane spacing in [4, 6] mm. The file
    format carries only the combined spacing.
    """
    kind = kind.upper()
    if kind not in ("T1", "T2"):
        raise ValueError(f"kind must be 'T1' or 'T2', got {kind!r}")
    through = vol.spacing[2]
    advisories = []
    if kind == "T1":
        if abs(through - T1_SLICE_MM) > 1e-9:
            advisories.append(
                f"T1 through-plane spacing {through:g} mm; expected {T1_SLICE_MM:g} mm with no gaps"
            )
    else:
        lo = T2_SLICE_RANGE_MM[0] + T2_GAPS_MM[0]
        hi = T2_SLICE_RANGE_MM[1] + T2_GAPS_MM[1]
        if not lo <= through <= hi:
            advisories.append(
                f"T2 through-plane spacing {through:g} mm; expected 4-5 mm slices with 1 mm or no gaps"
            )
    return advisories


# --- slice extraction ------------------------------------------------------

@dataclass(frozen=True)
class SlicePlane:
    """Oriented sampling plane for 2D views (axis-aligned or oblique)."""

    origin: tuple[float, float, float]
    normal: np.ndarray
    in_plane_u: np.ndarray
    in_plane_v: np.ndarray
    extent: tuple[float, float]
    resolution: tuple[int, int]

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        u = np.asarray(self.in_plane_u, dtype=float).reshape(3)
        v = np.asarray(self.in_plane_v, dtype=float).reshape(3)
        basis = np.stack([u, v, n])
        if np.max(np.abs(basis @ basis.T - np.eye(3))) > ORIENT_TOL:
            raise ValueError("u, v, normal must be mutually orthogonal unit vectors")
        if self.resolution[0] <= 0 or self.resolution[1] <= 0:
            raise ValueError("resolution must be positive")
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "in_plane_u", u)
        object.__setattr__(self, "in_plane_v", v)

    def sample_points(self) -> np.ndarray:
        """(ru*rv, 3) patient-space sample positions, row-major over (i, j)."""
        ru, rv = self.resolution
        su = self.extent[0] / ru
        sv = self.extent[1] / rv
        ii, jj = np.meshgrid(np.arange(ru), np.arange(rv), indexing="ij")
        pts = (
            np.asarray(self.origin)
            + ii.reshape(-1, 1) * su * self.in_plane_u
            + jj.reshape(-1, 1) * sv * self.in_plane_v
        )
        return pts


def axis_aligned_plane(vol: ScalarVolume, axis: int, index: int) -> SlicePlane:
    """Plane through voxel centers at a fixed index along a grid axis."""
    axes = [0, 1, 2]
    axes.remove(axis)
    ua, va = axes
    r = vol.orientation
    origin_idx = np.zeros(3)
    origin_idx[axis] = index
    origin = vol.voxel_centers(origin_idx.reshape(1, 3))[0]
    return SlicePlane(
        origin=tuple(origin),
        normal=r[:, axis],
        in_plane_u=r[:, ua],
        in_plane_v=r[:, va],
        extent=(vol.dims[ua] * vol.spacing[ua], vol.dims[va] * vol.spacing[va]),
        resolution=(vol.dims[ua], vol.dims[va]),
    )


def oblique_plane(origin, axis_direction, extent, resolution, up_hint=(0.0, 0.0, 1.0)) -> SlicePlane:
    """Plane orthogonal to a device axis (paraaxial view helper)."""
    n = np.asarray(axis_direction, dtype=float)
    n = n / np.linalg.norm(n)
    hint = np.asarray(up_hint, dtype=float)
    u = hint - np.dot(hint, n) * n
    if np.linalg.norm(u) < 1e-9:
        hint = np.array([1.0, 0.0, 0.0])
        u = hint - np.dot(hint, n) * n
    u = u / np.linalg.norm(u)
    v = np.cross(n, u)
    return SlicePlane(
        origin=tuple(float(x) for x in origin),
        normal=n,
        in_plane_u=u,
        in_plane_v=v,
        extent=tuple(extent),
        resolution=tuple(resolution),
    )


def extract_slice(vol: ScalarVolume, plane: SlicePlane, interp: str = "trilinear") -> np.ndarray:
    """Resample the volume on a plane; samples outside the grid read 0.

    "Outside" means outside the voxel-center hull, i.e. continuous index
    beyond [0, dim-1] on any axis. Trilinear interpolation is exact for
    affine intensity fields inside the hull.
    """
    if interp not in ("nearest", "trilinear"):
        raise ValueError(f"interp must be 'nearest' or 'trilinear', got {interp!r}")
    pts = plane.sample_points()
    local = vol.to_local(pts)
    dims = np.asarray(vol.dims)
    inside = np.all((local >= 0.0) & (local <= dims - 1), axis=1)
    values = np.zeros(len(local), dtype=float)
    if np.any(inside):
        li = local[inside]
        if interp == "nearest":
            idx = np.rint(li).astype(int)
            values[inside] = vol.voxels[idx[:, 0], idx[:, 1], idx[:, 2]]
        else:
            values[inside] = _trilinear(vol.voxels, li)
    return values.reshape(plane.resolution)


def _trilinear(voxels: np.ndarray, local: np.ndarray) -> np.ndarray:
    dims = np.asarray(voxels.shape)
    lo = np.floor(local).astype(int)
    frac = local - lo
    lo = np.clip(lo, 0, dims - 1)
    hi = np.clip(lo + 1, 0, dims - 1)  # at the far face frac is 0, weight too
    acc = np.zeros(len(local), dtype=float)
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        ix = hi[:, 0] if dx else lo[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            iy = hi[:, 1] if dy else lo[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                iz = hi[:, 2] if dz else lo[:, 2]
                acc += wx * wy * wz * voxels[ix, iy, iz]
    return acc
