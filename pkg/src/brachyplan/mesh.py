"""Triangle-mesh I/O (STL) and parametric clinical device models.

Binary STL is the canonical interchange: 80-byte header (UTF-8 device name,
NUL padded), uint32 little-endian facet count, then 50-byte facets of
12 little-endian float32 (normal, three vertices) plus a uint16 attribute
written as 0 and ignored on read. ASCII STL follows the usual
solid/facet normal/vertex grammar.

Device dimensions are parametric because the clinical hardware dimensions
are proprietary; defaults (6x6 template at 10 mm pitch, 10 mm obturator
radius) are placeholders.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

import numpy as np

DEGENERATE_AREA_MM2 = 1e-9
NORMAL_FLAG_TOL = 1e-3


class StlFormatError(ValueError):
    """STL file violates the declared layout or grammar."""


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle soup with per-facet normals.

    Vertices are welded on load by exact coordinate equality only, so the
    topology never depends on a tolerance.
    """

    vertices: np.ndarray  # (n, 3) float64, mm
    triangles: np.ndarray  # (m, 3) int vertex indices
    normals: np.ndarray | None = None  # (m, 3); recomputed when omitted
    name: str = ""
    # facet indices whose stored normal deviates from the right-hand rule
    normal_flags: tuple[int, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle indices out of range")
        if self.normals is None:
            object.__setattr__(self, "normals", facet_normals(v, t))
        else:
            n = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(n) != len(t):
                raise ValueError("one normal per triangle required")
            object.__setattr__(self, "normals", n)

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def facet_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Right-hand-rule unit normals; zero vector for degenerate facets."""
    if len(triangles) == 0:
        return np.zeros((0, 3))
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    n = np.cross(b - a, c - a)
    lengths = np.linalg.norm(n, axis=1)
    ok = lengths > 0
    n[ok] /= lengths[ok, None]
    return n


def _weld(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Merge exactly-equal points; returns (unique_vertices, index_map)."""
    unique, inverse = np.unique(points, axis=0, return_inverse=True)
    return unique, inverse


def _mesh_from_facets(facets: np.ndarray, normals: np.ndarray, name: str,
                      permissive: bool) -> TriangleMesh:
    if not np.isfinite(facets).all():
        finite_rows = np.isfinite(facets).reshape(len(facets), -1).all(axis=1)
        bad = int(np.argwhere(~finite_rows)[0][0])
        raise StlFormatError(f"non-finite coordinate in facet {bad}")
    verts, inverse = _weld(facets.reshape(-1, 3))
    tris = inverse.reshape(-1, 3)
    areas = 0.5 * np.linalg.norm(
        np.cross(facets[:, 1] - facets[:, 0], facets[:, 2] - facets[:, 0]), axis=1
    ) if len(facets) else np.zeros(0)
    if not permissive and np.any(areas <= DEGENERATE_AREA_MM2):
        bad = int(np.argmin(areas))
        raise StlFormatError(
            f"degenerate facet {bad} (area {areas[bad]:.3g} mm^2); "
            "pass permissive=True to keep it"
        )
    rh = facet_normals(verts, tris)
    dev = np.linalg.norm(normals - rh, axis=1) if len(tris) else np.zeros(0)
    flags = tuple(int(i) for i in np.nonzero(dev > NORMAL_FLAG_TOL)[0])
    return TriangleMesh(verts, tris, normals=normals, name=name, normal_flags=flags)


def load_stl(path, permissive: bool = False) -> TriangleMesh:
    """Load binary or ASCII STL, auto-detected.

    Binary files must contain exactly the declared facet count. Strict mode
    (default) rejects degenerate facets.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if _looks_ascii(data):
        return _load_ascii(data, permissive)
    return _load_binary(data, permissive)


def _looks_ascii(data: bytes) -> bool:
    if not data.lstrip()[:5] == b"solid":
        return False
    # A binary file may still start with "solid": require ASCII keywords.
    head = data[:2048].lower()
    return b"facet" in head or b"endsolid" in head


def _load_binary(data: bytes, permissive: bool) -> TriangleMesh:
    if len(data) < 84:
        raise StlFormatError("binary STL shorter than 84-byte preamble")
    name = data[:80].split(b"\0", 1)[0].decode("utf-8", "replace").strip()
    (count,) = struct.unpack_from("<I", data, 80)
    need = 84 + 50 * count
    if len(data) < need:
        have = (len(data) - 84) // 50
        raise StlFormatError(f"declared {count} facets but only {have} present")
    if len(data) > need:
        raise StlFormatError(f"{len(data) - need} trailing bytes after {count} facets")
    raw = np.frombuffer(data, dtype=np.uint8, count=50 * count, offset=84)
    rec = raw.reshape(count, 50)[:, :48].copy().view("<f4").reshape(count, 12)
    normals = rec[:, 0:3].astype(float)
    facets = rec[:, 3:12].astype(float).reshape(count, 3, 3)
    return _mesh_from_facets(facets, normals, name, permissive)


_ASCII_FACET = re.compile(
    rb"facet\s+normal\s+(\S+)\s+(\S+)\s+(\S+)\s+outer\s+loop\s+"
    rb"vertex\s+(\S+)\s+(\S+)\s+(\S+)\s+"
    rb"vertex\s+(\S+)\s+(\S+)\s+(\S+)\s+"
    rb"vertex\s+(\S+)\s+(\S+)\s+(\S+)\s+endloop\s+endfacet"
)


def _load_ascii(data: bytes, permissive: bool) -> TriangleMesh:
    first = data.lstrip().split(b"\n", 1)[0]
    name = first[5:].strip().decode("utf-8", "replace")
    rows = []
    for i, m in enumerate(_ASCII_FACET.finditer(data)):
        try:
            rows.append([float(g) for g in m.groups()])
        except ValueError as e:
            raise StlFormatError(f"unparseable number in facet {i}") from e
    arr = np.array(rows, dtype=float).reshape(-1, 12)
    normals = arr[:, 0:3]
    facets = arr[:, 3:12].reshape(-1, 3, 3)
    return _mesh_from_facets(facets, normals, name, permissive)


def save_stl(mesh: TriangleMesh, path, format: str = "binary") -> None:
    """Write STL; binary round-trips bit-exactly through load_stl."""
    with open(path, "wb") as fh:
        fh.write(dump_stl(mesh, format))


def dump_stl(mesh: TriangleMesh, format: str = "binary") -> bytes:
    """Serialize a mesh to STL bytes."""
    if format == "binary":
        return _dump_binary(mesh)
    if format == "ascii":
        return _dump_ascii(mesh)
    raise ValueError(f"format must be 'binary' or 'ascii', got {format!r}")


def _dump_binary(mesh: TriangleMesh) -> bytes:
    header = mesh.name.encode("utf-8")[:80].ljust(80, b"\0")
    out = bytearray(header)
    out += struct.pack("<I", mesh.triangle_count)
    pack = struct.Struct("<12fH").pack
    for t in range(mesh.triangle_count):
        n = mesh.normals[t]
        a, b, c = mesh.vertices[mesh.triangles[t]]
        out += pack(*n, *a, *b, *c, 0)
    return bytes(out)


def _dump_ascii(mesh: TriangleMesh) -> bytes:
    # %.9g keeps float32-origin coordinates exact through a text round trip
    def f3(v):
        return f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}"

    lines = [f"solid {mesh.name}"]
    for t in range(mesh.triangle_count):
        lines.append(f"  facet normal {f3(mesh.normals[t])}")
        lines.append("    outer loop")
        for vid in mesh.triangles[t]:
            lines.append(f"      vertex {f3(mesh.vertices[vid])}")
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append(f"endsolid {mesh.name}")
    return ("\n".join(lines) + "\n").encode("utf-8")


# --- parametric devices ----------------------------------------------------

@dataclass(frozen=True)
class TemplateModel:
    """Perineal guide plate with a regular grid of needle holes.

    Hole ids are row letter + column number ("A1"); directions all equal the
    face normal. Geometry is expressed in the device frame: plate centered
    at the origin, face normal +z, holes on the z = +thickness/2 face.
    """

    mesh: TriangleMesh
    holes: tuple[tuple[str, np.ndarray, np.ndarray], ...]
    face_normal: np.ndarray
    plate_thickness: float

    def hole_ids(self) -> list[str]:
        return [h[0] for h in self.holes]

    def hole(self, hole_id: str) -> tuple[np.ndarray, np.ndarray]:
        for hid, pos, direction in self.holes:
            if hid == hole_id:
                return pos, direction
        raise KeyError(f"unknown hole {hole_id!r}")


@dataclass(frozen=True)
class ObturatorModel:
    """Central cylinder placed in the vaginal canal."""

    mesh: TriangleMesh
    axis_origin: np.ndarray
    axis_direction: np.ndarray
    radius: float

    def __post_init__(self):
        d = np.asarray(self.axis_direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("axis_direction must be unit length")
        if self.radius <= 0:
            raise ValueError("radius must be positive")


def _row_letters(rows: int) -> list[str]:
    # A..Z, then AA, AB, ... for grids beyond 26 rows
    out = []
    for r in range(rows):
        label = ""
        n = r
        while True:
            label = chr(ord("A") + n % 26) + label
            n = n // 26 - 1
            if n < 0:
                break
        out.append(label)
    return out


def make_template(
    rows: int = 6,
    cols: int = 6,
    pitch: float = 10.0,
    plate_thickness: float = 10.0,
    hole_radius: float = 1.5,
    ring_segments: int = 16,
    name: str = "interstitial-template",
) -> TemplateModel:
    """Generate a rectangular plate with a rows x cols grid of holes.

    Hole cutouts are N-gon rings through the plate. The plate extends half a
    pitch beyond the outer hole cells, so its footprint is
    (cols+1)*pitch x (rows+1)*pitch.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    if pitch <= 0:
        raise ValueError("pitch must be positive")
    if not 0 < hole_radius < pitch / 2:
        raise ValueError("hole_radius must be in (0, pitch/2)")

    letters = _row_letters(rows)
    half = plate_thickness / 2.0
    # hole centers: columns left-to-right along +x, row A at the top (+y)
    xs = [(j - (cols - 1) / 2.0) * pitch for j in range(cols)]
    ys = [((rows - 1) / 2.0 - i) * pitch for i in range(rows)]
    holes = tuple(
        (f"{letters[i]}{j + 1}",
         np.array([xs[j], ys[i], half]),
         np.array([0.0, 0.0, 1.0]))
        for i in range(rows)
        for j in range(cols)
    )

    # cell grid covering the face: one pitch-sized cell per hole plus a
    # half-pitch border ring of plain cells
    xe = [-(cols / 2.0 + 0.5) * pitch] + [(-cols / 2.0 + j) * pitch for j in range(cols + 1)] + [(cols / 2.0 + 0.5) * pitch]
    ye = [-(rows / 2.0 + 0.5) * pitch] + [(-rows / 2.0 + i) * pitch for i in range(rows + 1)] + [(rows / 2.0 + 0.5) * pitch]

    tris: list[np.ndarray] = []

    def quad(p00, p10, p11, p01, flip=False):
        a, b, c, d = (np.asarray(p, dtype=float) for p in (p00, p10, p11, p01))
        if flip:
            tris.append(np.stack([a, d, c]))
            tris.append(np.stack([a, c, b]))
        else:
            tris.append(np.stack([a, b, c]))
            tris.append(np.stack([a, c, d]))

    def ring(cx, cy, z, flip):
        # ring between the N-gon hole boundary and the pitch-sized cell edge
        for k in range(ring_segments):
            t0 = 2 * np.pi * k / ring_segments
            t1 = 2 * np.pi * (k + 1) / ring_segments
            inner0 = np.array([cx + hole_radius * np.cos(t0), cy + hole_radius * np.sin(t0), z])
            inner1 = np.array([cx + hole_radius * np.cos(t1), cy + hole_radius * np.sin(t1), z])
            outer0 = np.array([cx + _sq(t0)[0] * pitch / 2, cy + _sq(t0)[1] * pitch / 2, z])
            outer1 = np.array([cx + _sq(t1)[0] * pitch / 2, cy + _sq(t1)[1] * pitch / 2, z])
            quad(inner0, outer0, outer1, inner1, flip=flip)

    def _sq(theta):
        # radial projection of a unit direction onto the unit square boundary
        c, s = np.cos(theta), np.sin(theta)
        m = max(abs(c), abs(s))
        return c / m, s / m

    n_xcells = len(xe) - 1
    n_ycells = len(ye) - 1
    for cy_i in range(n_ycells):
        for cx_i in range(n_xcells):
            x0, x1 = xe[cx_i], xe[cx_i + 1]
            y0, y1 = ye[cy_i], ye[cy_i + 1]
            if 1 <= cy_i <= rows and 1 <= cx_i <= cols:
                # hole cell: use the exact hole-center floats so the ring
                # welds bit-exactly with the tunnel wall vertices
                cx = xs[cx_i - 1]
                cy = ys[rows - cy_i]
                ring(cx, cy, half, flip=False)
                ring(cx, cy, -half, flip=True)
            else:
                quad((x0, y0, half), (x1, y0, half), (x1, y1, half), (x0, y1, half))
                quad((x0, y0, -half), (x1, y0, -half), (x1, y1, -half), (x0, y1, -half), flip=True)

    # hole tunnel walls
    for _, pos, _dir in holes:
        cx, cy = pos[0], pos[1]
        for k in range(ring_segments):
            t0 = 2 * np.pi * k / ring_segments
            t1 = 2 * np.pi * (k + 1) / ring_segments
            p0 = np.array([cx + hole_radius * np.cos(t0), cy + hole_radius * np.sin(t0), half])
            p1 = np.array([cx + hole_radius * np.cos(t1), cy + hole_radius * np.sin(t1), half])
            q0, q1 = p0.copy(), p1.copy()
            q0[2] = q1[2] = -half
            quad(p0, p1, q1, q0)  # inward-facing tunnel wall

    # outer side walls
    X, Y = xe[-1], ye[-1]
    quad((-X, -Y, -half), (X, -Y, -half), (X, -Y, half), (-X, -Y, half))
    quad((X, Y, -half), (-X, Y, -half), (-X, Y, half), (X, Y, half))
    quad((X, -Y, -half), (X, Y, -half), (X, Y, half), (X, -Y, half))
    quad((-X, Y, -half), (-X, -Y, -half), (-X, -Y, half), (-X, Y, half))

    facets = np.stack(tris)
    verts, inverse = _weld(facets.reshape(-1, 3))
    mesh = TriangleMesh(verts, inverse.reshape(-1, 3), name=name)
    return TemplateModel(
        mesh=mesh,
        holes=holes,
        face_normal=np.array([0.0, 0.0, 1.0]),
        plate_thickness=float(plate_thickness),
    )


def make_obturator(
    radius: float = 10.0,
    length: float = 120.0,
    segments: int = 32,
    name: str = "obturator",
) -> ObturatorModel:
    """Cylinder along +z from z=0 to z=length, capped at both ends."""
    if radius <= 0 or length <= 0:
        raise ValueError("radius and length must be positive")
    tris = []
    for k in range(segments):
        t0 = 2 * np.pi * k / segments
        t1 = 2 * np.pi * (k + 1) / segments
        p0 = np.array([radius * np.cos(t0), radius * np.sin(t0), 0.0])
        p1 = np.array([radius * np.cos(t1), radius * np.sin(t1), 0.0])
        q0 = p0 + [0, 0, length]
        q1 = p1 + [0, 0, length]
        tris.append(np.stack([p0, p1, q1]))
        tris.append(np.stack([p0, q1, q0]))
        tris.append(np.stack([np.zeros(3), p1, p0]))  # bottom cap, -z out
        top = np.array([0.0, 0.0, length])
        tris.append(np.stack([top, q0, q1]))  # top cap, +z out
    facets = np.stack(tris)
    verts, inverse = _weld(facets.reshape(-1, 3))
    mesh = TriangleMesh(verts, inverse.reshape(-1, 3), name=name)
    return ObturatorModel(
        mesh=mesh,
        axis_origin=np.zeros(3),
        axis_direction=np.array([0.0, 0.0, 1.0]),
        radius=float(radius),
    )


def make_ring(
    ring_radius: float = 30.0,
    tube_radius: float = 4.0,
    segments: int = 24,
    tube_segments: int = 12,
    name: str = "tandem-ring",
) -> TriangleMesh:
    """Torus mesh for display and registration; no planning semantics."""
    tris = []
    for k in range(segments):
        for m in range(tube_segments):
            u0 = 2 * np.pi * k / segments
            u1 = 2 * np.pi * (k + 1) / segments
            v0 = 2 * np.pi * m / tube_segments
            v1 = 2 * np.pi * (m + 1) / tube_segments

            def pt(u, v):
                w = ring_radius + tube_radius * np.cos(v)
                return np.array([w * np.cos(u), w * np.sin(u), tube_radius * np.sin(v)])

            a, b, c, d = pt(u0, v0), pt(u1, v0), pt(u1, v1), pt(u0, v1)
            tris.append(np.stack([a, b, c]))
            tris.append(np.stack([a, c, d]))
    facets = np.stack(tris)
    verts, inverse = _weld(facets.reshape(-1, 3))
    return TriangleMesh(verts, inverse.reshape(-1, 3), name=name)


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Draw n area-weighted random points on the mesh surface.

    Deterministic for a fixed seed; every point lies exactly on a facet.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mesh.triangle_count == 0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total area")
    chosen = rng.choice(mesh.triangle_count, size=n, p=areas / total)
    a = mesh.vertices[mesh.triangles[chosen, 0]]
    b = mesh.vertices[mesh.triangles[chosen, 1]]
    c = mesh.vertices[mesh.triangles[chosen, 2]]
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    return (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c
