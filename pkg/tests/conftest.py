import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from brachyplan.volume import LabelMap, ScalarVolume


def make_volume(voxels, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                orientation=None, modality="TEST"):
    voxels = np.asarray(voxels)
    return ScalarVolume(
        dims=voxels.shape,
        spacing=spacing,
        origin=origin,
        orientation=np.eye(3) if orientation is None else orientation,
        voxels=voxels,
        modality_tag=modality,
    )


def make_labels(codes, legend, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                orientation=None):
    codes = np.asarray(codes, dtype=np.uint8)
    return LabelMap(
        dims=codes.shape,
        spacing=spacing,
        origin=origin,
        orientation=np.eye(3) if orientation is None else orientation,
        voxels=codes,
        modality_tag="LABELS",
        legend=legend,
    )


@pytest.fixture(scope="session")
def small_phantom():
    from brachyplan.phantom import make_phantom

    return make_phantom(n=32)
