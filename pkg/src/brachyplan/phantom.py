"""Synthetic desk-scale case: volume, structures, device, registration.

Deterministic by construction, so scripted runs and their artifacts are
reproducible byte for byte. The geometry is a 128 mm cube sitting in front
of the template face, with a spherical target on the central axis and two
organs at risk offset to the sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TemplateModel, make_template
from .registration import LandmarkPairs, RigidTransform, apply_transform
from .volume import (
    GTV,
    HR_CTV,
    OAR_BLADDER,
    OAR_RECTUM_SIGMOID,
    OAR_SMALL_BOWEL,
    LabelMap,
    ScalarVolume,
)

LEGEND = {
    1: GTV,
    2: HR_CTV,
    3: OAR_BLADDER,
    4: OAR_RECTUM_SIGMOID,
    5: OAR_SMALL_BOWEL,
}


@dataclass(frozen=True)
class PhantomCase:
    volume: ScalarVolume
    labels: LabelMap
    post_volume: ScalarVolume
    device: TemplateModel
    registration: RigidTransform
    landmarks: LandmarkPairs


def _sphere(centers: np.ndarray, center, radius: float) -> np.ndarray:
    d2 = np.sum((centers - np.asarray(center, dtype=float)) ** 2, axis=-1)
    return d2 <= radius * radius


def make_phantom(n: int = 64, spacing_mm: float = 2.0,
                 include_small_bowel: bool = False) -> PhantomCase:
    """Build the reference phantom on an n^3 grid."""
    dims = (n, n, n)
    spacing = (spacing_mm, spacing_mm, spacing_mm)
    extent = (n - 1) * spacing_mm
    # centered laterally on the template axis; stacked in front of the face
    origin = (-extent / 2.0, -extent / 2.0, 2.0)
    orientation = np.eye(3)

    ii, jj, kk = np.meshgrid(*(np.arange(n),) * 3, indexing="ij")
    centers = np.stack(
        [
            origin[0] + ii * spacing_mm,
            origin[1] + jj * spacing_mm,
            origin[2] + kk * spacing_mm,
        ],
        axis=-1,
    )

    scale = extent / 126.0  # keep the layout proportional on small grids
    gtv = _sphere(centers, (0, 0, 60 * scale + 2), 10 * scale)
    hrctv = _sphere(centers, (0, 0, 60 * scale + 2), 20 * scale)
    bladder = _sphere(centers, (25 * scale, 0, 40 * scale + 2), 14 * scale)
    rectum = _sphere(centers, (-25 * scale, -10 * scale, 45 * scale + 2), 12 * scale)

    codes = np.zeros(dims, dtype=np.uint8)
    codes[hrctv] = 2
    codes[gtv] = 1
    codes[bladder] = 3
    codes[rectum] = 4
    legend = dict(LEGEND)
    if include_small_bowel:
        bowel = _sphere(centers, (10 * scale, 25 * scale, 70 * scale + 2), 10 * scale)
        bowel &= codes == 0
        codes[bowel] = 5
    else:
        legend.pop(5)

    intensity = np.full(dims, 20.0, dtype=np.float32)
    intensity[hrctv] = 60.0
    intensity[bladder] = 100.0
    intensity[rectum] = 45.0

    volume = ScalarVolume(
        dims=dims, spacing=spacing, origin=origin, orientation=orientation,
        voxels=intensity, modality_tag="MR-T2",
    )
    labels = LabelMap(
        dims=dims, spacing=spacing, origin=origin, orientation=orientation,
        voxels=codes, modality_tag="LABELS", legend=legend,
    )
    # follow-up scan: same geometry, shrunken residual target
    post_intensity = np.full(dims, 20.0, dtype=np.float32)
    post_intensity[_sphere(centers, (0, 0, 60 * scale + 2), 8 * scale)] = 55.0
    post_volume = ScalarVolume(
        dims=dims, spacing=spacing, origin=origin, orientation=orientation,
        voxels=post_intensity, modality_tag="MR-T2-FOLLOWUP",
    )

    device = make_template(rows=6, cols=6, pitch=10.0)
    # park the template face at z = 0, needles advancing along +z
    registration = RigidTransform(np.eye(3), np.array([0.0, 0.0, -device.plate_thickness / 2]))
    corner_ids = ["A1", "A6", "F1"]
    model_points = np.array([device.hole(h)[0] for h in corner_ids])
    landmarks = LandmarkPairs(model_points, apply_transform(registration, model_points))
    return PhantomCase(
        volume=volume,
        labels=labels,
        post_volume=post_volume,
        device=device,
        registration=registration,
        landmarks=landmarks,
    )
