import numpy as np
import pytest

from brachyplan.segmentation import (
    expand_margin,
    growcut,
    structure_volume_cc,
    surface_cloud,
    validate_seeds,
)
from brachyplan.volume import GTV, HR_CTV, IR_CTV, OAR_BLADDER, StructureKind, structure_mask

from conftest import make_labels, make_volume
from oracles import expand_margin_oracle, growcut_oracle

L1 = StructureKind.other("region1")
L2 = StructureKind.other("region2")
LEG = {1: L1, 2: L2}


class TestGrowcut:
    def test_uniform_strip_tie_goes_to_lower_label(self):
        vol = make_volume(np.zeros((5, 1, 1)))
        seeds = np.zeros((5, 1, 1), dtype=np.uint8)
        seeds[0] = 1
        seeds[4] = 2
        out = growcut(vol, make_labels(seeds, LEG))
        np.testing.assert_array_equal(out.voxels.ravel(), [1, 1, 1, 2, 2])

    def test_two_intensity_regions(self):
        vox = np.zeros((4, 4, 1))
        vox[2:, :, :] = 100.0
        seeds = np.zeros((4, 4, 1), dtype=np.uint8)
        seeds[0, 0, 0] = 1
        seeds[3, 3, 0] = 2
        out = growcut(make_volume(vox), make_labels(seeds, LEG))
        expected = np.where(vox >= 50, 2, 1)
        np.testing.assert_array_equal(out.voxels, expected)

    def test_full_seed_cover_is_fixed_point(self):
        vox = np.random.default_rng(0).normal(size=(3, 3, 2))
        seeds = np.random.default_rng(1).integers(1, 3, size=(3, 3, 2)).astype(np.uint8)
        out = growcut(make_volume(vox), make_labels(seeds, LEG))
        np.testing.assert_array_equal(out.voxels, seeds)

    def test_matches_oracle_on_random_grids(self):
        rng = np.random.default_rng(2)
        for _ in range(15):
            shape = tuple(rng.integers(2, 5, size=3))
            vox = rng.integers(0, 4, size=shape).astype(float) * 30
            seeds = np.zeros(shape, dtype=np.uint8)
            flat = rng.choice(vox.size, size=2, replace=False)
            seeds.flat[flat[0]] = 1
            seeds.flat[flat[1]] = 2
            out = growcut(make_volume(vox), make_labels(seeds, LEG))
            expected = growcut_oracle(vox, seeds)
            np.testing.assert_array_equal(out.voxels, expected)

    def test_seeds_never_change(self):
        rng = np.random.default_rng(3)
        vox = rng.normal(size=(4, 4, 2))
        seeds = np.zeros((4, 4, 2), dtype=np.uint8)
        seeds[0, 0, 0] = 2
        seeds[3, 3, 1] = 1
        out = growcut(make_volume(vox), make_labels(seeds, LEG))
        assert out.voxels[0, 0, 0] == 2
        assert out.voxels[3, 3, 1] == 1

    def test_requires_two_labels(self):
        seeds = np.zeros((3, 3, 1), dtype=np.uint8)
        seeds[0, 0, 0] = 1
        with pytest.raises(ValueError, match="two"):
            growcut(make_volume(np.zeros((3, 3, 1))), make_labels(seeds, LEG))
        with pytest.raises(ValueError, match="two"):
            validate_seeds(make_labels(seeds, LEG))

    def test_grid_mismatch(self):
        seeds = np.ones((2, 2, 2), dtype=np.uint8)
        with pytest.raises(ValueError, match="grid"):
            growcut(make_volume(np.zeros((3, 3, 3))), make_labels(seeds, LEG))


class TestExpandMargin:
    def test_zero_margin_identity(self):
        codes = np.zeros((5, 5, 5), dtype=np.uint8)
        codes[2, 2, 2] = 1
        lm = make_labels(codes, {1: HR_CTV})
        out = expand_margin(lm, HR_CTV, IR_CTV, 0.0)
        np.testing.assert_array_equal(out.voxels, codes)
        np.testing.assert_array_equal(
            structure_mask(out, IR_CTV), structure_mask(lm, HR_CTV)
        )

    def test_isotropic_ball_matches_oracle(self):
        codes = np.zeros((21, 21, 21), dtype=np.uint8)
        codes[10, 10, 10] = 1
        lm = make_labels(codes, {1: HR_CTV})
        out = expand_margin(lm, HR_CTV, IR_CTV, 10.0)
        expected = expand_margin_oracle(codes, {1}, 2, 10.0, lm.spacing, lm.origin)
        np.testing.assert_array_equal(out.voxels, expected)

    def test_anisotropic_spans(self):
        codes = np.zeros((21, 21, 9), dtype=np.uint8)
        codes[10, 10, 4] = 1
        lm = make_labels(codes, {1: HR_CTV}, spacing=(1.0, 1.0, 5.0))
        out = expand_margin(lm, HR_CTV, IR_CTV, 10.0)
        grown = structure_mask(out, IR_CTV)
        xs = np.unique(np.argwhere(grown)[:, 0])
        zs = np.unique(np.argwhere(grown)[:, 2])
        assert xs.min() == 0 and xs.max() == 20  # reaches 10 voxels in-plane
        assert zs.min() == 2 and zs.max() == 6  # 2 slices through-plane
        expected = expand_margin_oracle(codes, {1}, 2, 10.0, lm.spacing, lm.origin)
        np.testing.assert_array_equal(out.voxels, expected)

    def test_oars_not_overwritten(self):
        codes = np.zeros((7, 1, 1), dtype=np.uint8)
        codes[3] = 1
        codes[5] = 3
        lm = make_labels(codes, {1: HR_CTV, 3: OAR_BLADDER})
        out = expand_margin(lm, HR_CTV, IR_CTV, 3.0)
        ir_code = out.code_for(IR_CTV)
        assert out.voxels[5, 0, 0] == 3  # bladder kept
        assert out.voxels[4, 0, 0] == ir_code
        assert out.voxels[3, 0, 0] == 1  # source kept

    def test_monotone_in_margin(self):
        rng = np.random.default_rng(4)
        codes = (rng.random((10, 10, 10)) < 0.05).astype(np.uint8)
        if not codes.any():
            codes[5, 5, 5] = 1
        lm = make_labels(codes, {1: HR_CTV})
        prev = None
        for margin in (0.0, 1.5, 3.0, 6.0):
            grown = structure_mask(expand_margin(lm, HR_CTV, IR_CTV, margin), IR_CTV)
            if prev is not None:
                assert np.all(grown[prev])  # superset of the smaller margin
            prev = grown

    def test_absent_source(self):
        lm = make_labels(np.zeros((3, 3, 3), dtype=np.uint8), {})
        with pytest.raises(ValueError, match="absent"):
            expand_margin(lm, HR_CTV, IR_CTV, 5.0)

    def test_extension_mask_unioned_in(self):
        codes = np.zeros((9, 1, 1), dtype=np.uint8)
        codes[1] = 1
        lm = make_labels(codes, {1: HR_CTV})
        ext = np.zeros((9, 1, 1), dtype=bool)
        ext[7] = True  # diagnostic extension far from the margin
        out = expand_margin(lm, HR_CTV, IR_CTV, 1.0, extension_mask=ext)
        ir_code = out.code_for(IR_CTV)
        assert out.voxels[7, 0, 0] == ir_code
        assert out.voxels[5, 0, 0] == 0  # between margin and extension stays clear
        with pytest.raises(ValueError, match="extension mask"):
            expand_margin(lm, HR_CTV, IR_CTV, 1.0, extension_mask=np.zeros((2, 2, 2), bool))

    def test_gtv_counts_as_hrctv_source(self):
        codes = np.zeros((9, 9, 9), dtype=np.uint8)
        codes[4, 4, 4] = 1  # GTV only; HR_CTV code never used
        lm = make_labels(codes, {1: GTV, 2: HR_CTV})
        out = expand_margin(lm, HR_CTV, IR_CTV, 2.0)
        assert structure_mask(out, IR_CTV).sum() > 1


class TestSurfaceCloud:
    def test_single_voxel(self):
        codes = np.zeros((3, 3, 3), dtype=np.uint8)
        codes[1, 1, 1] = 1
        lm = make_labels(codes, {1: HR_CTV}, spacing=(2.0, 2.0, 2.0), origin=(1.0, 1.0, 1.0))
        cloud = surface_cloud(lm, HR_CTV)
        np.testing.assert_allclose(cloud, [[3.0, 3.0, 3.0]])

    def test_3x3x3_block_has_26_surface_voxels(self):
        codes = np.zeros((5, 5, 5), dtype=np.uint8)
        codes[1:4, 1:4, 1:4] = 1
        lm = make_labels(codes, {1: HR_CTV})
        assert len(surface_cloud(lm, HR_CTV)) == 26

    def test_rod_is_all_surface(self):
        codes = np.ones((1, 1, 7), dtype=np.uint8)
        lm = make_labels(codes, {1: HR_CTV})
        assert len(surface_cloud(lm, HR_CTV)) == 7

    def test_interior_never_appears(self):
        rng = np.random.default_rng(5)
        codes = (rng.random((8, 8, 8)) < 0.4).astype(np.uint8)
        lm = make_labels(codes, {1: HR_CTV})
        if codes.any():
            cloud = surface_cloud(lm, HR_CTV)
            centers = set(map(tuple, lm.voxel_centers(np.argwhere(codes))))
            assert set(map(tuple, cloud)) <= centers

    def test_absent_kind(self):
        lm = make_labels(np.zeros((2, 2, 2), dtype=np.uint8), {})
        with pytest.raises(ValueError):
            surface_cloud(lm, HR_CTV)


class TestStructureVolume:
    def test_unit_arithmetic(self):
        codes = np.zeros((10, 10, 10), dtype=np.uint8)
        codes.flat[:1000] = 1
        lm = make_labels(codes, {1: HR_CTV})
        assert structure_volume_cc(lm, HR_CTV) == pytest.approx(1.0)

    def test_absent_structure_is_zero(self):
        lm = make_labels(np.zeros((4, 4, 4), dtype=np.uint8), {})
        assert structure_volume_cc(lm, HR_CTV) == 0.0

    def test_anisotropic(self):
        codes = np.zeros((20, 20, 20), dtype=np.uint8)
        codes.flat[:823] = 1
        lm = make_labels(codes, {1: HR_CTV}, spacing=(0.9, 0.9, 3.0))
        assert structure_volume_cc(lm, HR_CTV) == pytest.approx(823 * 0.00243, rel=1e-9)
