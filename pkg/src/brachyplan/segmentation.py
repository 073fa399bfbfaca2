"""Seeded structure segmentation and label-map geometry.

The region grower is a synchronous cellular automaton: each pass, every
labeled voxel q attacks its 26-neighbors p with strength
g(|I(p) - I(q)|) * strength(q), where g(d) = 1 - d / d_max and d_max is the
volume-wide intensity range. An attack succeeds when it exceeds the
defender's strength from the previous pass; the strongest attacker wins and
equal strengths resolve to the lowest label code, so results are
deterministic and independent of sweep order.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy import ndimage

from .volume import LabelMap, ScalarVolume, StructureKind, structure_mask, voxel_volume_cc

OFFSETS_26 = [o for o in product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
OFFSETS_6 = [o for o in OFFSETS_26 if sum(abs(c) for c in o) == 1]


@dataclass
class GrowCutState:
    """Automaton state between passes; strengths stay within [0, 1]."""

    labels: np.ndarray
    strength: np.ndarray
    intensity: np.ndarray

    @classmethod
    def from_seeds(cls, vol: ScalarVolume, seeds: LabelMap) -> "GrowCutState":
        labels = seeds.voxels.astype(np.int32)
        strength = (labels > 0).astype(float)
        return cls(labels=labels, strength=strength, intensity=np.asarray(vol.voxels, dtype=float))


def _shift(arr: np.ndarray, offset, fill) -> np.ndarray:
    """Array whose value at p is arr[p + offset]; out-of-grid reads fill."""
    out = np.full_like(arr, fill)
    src = []
    dst = []
    for o, n in zip(offset, arr.shape):
        if o >= 0:
            src.append(slice(o, n))
            dst.append(slice(0, n - o))
        else:
            src.append(slice(0, n + o))
            dst.append(slice(-o, n))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def growcut_pass(state: GrowCutState, d_max: float) -> tuple[GrowCutState, int]:
    """One synchronous pass; returns the new state and the change count."""
    intensity = state.intensity
    best = np.full(state.labels.shape, -np.inf)
    winner = np.full(state.labels.shape, np.iinfo(np.int32).max, dtype=np.int64)
    for off in OFFSETS_26:
        nb_strength = _shift(state.strength, off, 0.0)
        nb_label = _shift(state.labels, off, 0)
        nb_intensity = _shift(intensity, off, 0.0)
        g = 1.0 - np.abs(intensity - nb_intensity) / d_max
        attack = g * nb_strength
        attack[nb_label == 0] = -np.inf
        # strongest attacker wins; on equal strength the lowest label wins
        stronger = attack > best
        tie = attack == best
        winner = np.where(
            stronger, nb_label, np.where(tie, np.minimum(winner, nb_label), winner)
        )
        best = np.maximum(best, attack)
    captured = best > state.strength
    new_labels = np.where(captured, winner, state.labels).astype(np.int32)
    new_strength = np.where(captured, best, state.strength)
    changed = int(np.count_nonzero(new_labels != state.labels)
                  + np.count_nonzero(new_strength != state.strength))
    return GrowCutState(new_labels, new_strength, intensity), changed


def growcut(vol: ScalarVolume, seeds: LabelMap, max_passes: int = 200) -> LabelMap:
    """Evolve seeds to a fixed point (or max_passes) over the volume.

    Seeds must cover at least two distinct labels; seed voxels never change.
    """
    if seeds.voxels.shape != vol.voxels.shape:
        raise ValueError("seed grid does not match the volume grid")
    seed_codes = set(np.unique(seeds.voxels).tolist()) - {0}
    if len(seed_codes) < 2:
        raise ValueError("need seeds for at least two labels")
    intensity = np.asarray(vol.voxels, dtype=float)
    d_max = float(intensity.max() - intensity.min())
    if d_max == 0.0:
        d_max = 1.0
    state = GrowCutState.from_seeds(vol, seeds)
    for _ in range(max_passes):
        state, changed = growcut_pass(state, d_max)
        if changed == 0:
            break
    return LabelMap(
        dims=vol.dims,
        spacing=vol.spacing,
        origin=vol.origin,
        orientation=vol.orientation,
        voxels=state.labels.astype(np.uint8),
        modality_tag="LABELS",
        legend=dict(seeds.legend),
    )


def expand_margin(
    labels: LabelMap,
    source: StructureKind,
    target: StructureKind,
    margin: float,
    extension_mask: np.ndarray | None = None,
) -> LabelMap:
    """Grow `source` by a Euclidean margin (mm) into a `target` label.

    A voxel belongs to the expansion when its center lies within `margin`
    of some source voxel center, anisotropic spacing respected. An optional
    extension_mask (e.g. diagnostic disease extension painted by the user)
    is unioned in. The target code is written only to unlabeled voxels:
    existing structures, OARs in particular, are never overwritten.
    Together with target nesting this keeps source within the expanded
    structure.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    src = structure_mask(labels, source)
    if not src.any():
        raise ValueError(f"source structure {source.name} absent from label map")

    spacing = np.asarray(labels.spacing)
    reach = np.floor(margin / spacing).astype(int)
    ball = _offset_ball(reach, spacing, margin)
    expanded = ndimage.binary_dilation(src, structure=ball)
    if extension_mask is not None:
        if extension_mask.shape != src.shape:
            raise ValueError("extension mask grid does not match the label grid")
        expanded |= extension_mask.astype(bool)

    target_code = labels.code_for(target)
    legend = dict(labels.legend)
    if target_code is None:
        target_code = max(legend, default=0) + 1
        legend[target_code] = target
    voxels = labels.voxels.copy()
    voxels[expanded & (voxels == 0)] = target_code
    return LabelMap(
        dims=labels.dims,
        spacing=labels.spacing,
        origin=labels.origin,
        orientation=labels.orientation,
        voxels=voxels,
        modality_tag=labels.modality_tag,
        legend=legend,
    )


def _offset_ball(reach: np.ndarray, spacing: np.ndarray, margin: float) -> np.ndarray:
    """Boolean footprint of voxel offsets within `margin` (mm) of center."""
    rx, ry, rz = (int(r) for r in reach)
    dx = np.arange(-rx, rx + 1) * spacing[0]
    dy = np.arange(-ry, ry + 1) * spacing[1]
    dz = np.arange(-rz, rz + 1) * spacing[2]
    d2 = dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2
    return d2 <= margin * margin


def surface_cloud(labels: LabelMap, kind: StructureKind) -> np.ndarray:
    """Patient-space centers (mm) of structure voxels on the 6-face surface."""
    mask = structure_mask(labels, kind)
    if not mask.any():
        raise ValueError(f"structure {kind.name} absent from label map")
    interior = np.ones_like(mask)
    for off in OFFSETS_6:
        interior &= _shift(mask, off, False)
    surface = mask & ~interior
    idx = np.argwhere(surface)
    return labels.voxel_centers(idx)


def structure_volume_cc(labels: LabelMap, kind: StructureKind) -> float:
    """Structure volume in cm^3; 0 when the structure is absent."""
    count = int(np.count_nonzero(structure_mask(labels, kind)))
    return count * voxel_volume_cc(labels)


def validate_seeds(seeds: LabelMap) -> None:
    """Raise unless the map carries at least two distinct seed labels."""
    codes = set(np.unique(seeds.voxels).tolist()) - {0}
    if len(codes) < 2:
        raise ValueError("seed map must contain at least two distinct labels")
