import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distillseg.errors import ContractError, IntegrityError, NormalizationError, ParameterError
from distillseg.preprocess import (
    AugmentationParams,
    AugmentationRanges,
    RegionMask,
    apply_augmentation,
    extract_patch,
    labels_to_regions,
    normalize_nonzero,
    regions_to_labels,
    sample_batch,
)
from distillseg.volume_io import LabelMask, Modality, ModalityVolume, generate_phantom


def vol(data):
    return ModalityVolume(Modality.T1, np.asarray(data, dtype=np.float32))


class TestNormalizeNonzero:
    def test_worked_example(self):
        data = np.zeros((1, 1, 5), dtype=np.float32)
        data[0, 0, :3] = [2.0, 4.0, 6.0]
        out = normalize_nonzero(vol(data)).data
        expected = np.array([-1.22474487, 0.0, 1.22474487])
        np.testing.assert_allclose(out[0, 0, :3], expected, atol=1e-5)
        assert np.all(out[0, 0, 3:] == 0)

    def test_constant_foreground_rejected(self):
        data = np.zeros((2, 2, 2), dtype=np.float32)
        data[0] = 3.0
        with pytest.raises(NormalizationError):
            normalize_nonzero(vol(data))

    def test_too_few_foreground_voxels(self):
        data = np.zeros((2, 2, 2), dtype=np.float32)
        data[0, 0, 0] = 1.0
        with pytest.raises(NormalizationError):
            normalize_nonzero(vol(data))

    def test_idempotent_on_normalized_input(self):
        rng = np.random.default_rng(0)
        data = np.zeros((6, 6, 6), dtype=np.float32)
        fg = rng.random(100) + 0.5
        flat_idx = rng.choice(data.size, size=100, replace=False)
        data.flat[flat_idx] = fg
        once = normalize_nonzero(vol(data)).data
        twice = normalize_nonzero(vol(once)).data
        np.testing.assert_allclose(once, twice, atol=1e-4)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2**31))
    def test_postcondition_property(self, seed):
        rng = np.random.default_rng(seed)
        data = np.zeros((8, 8, 8), dtype=np.float32)
        n_fg = int(rng.integers(100, 300))
        idx = rng.choice(data.size, size=n_fg, replace=False)
        data.flat[idx] = rng.normal(3.0, 2.0, size=n_fg).astype(np.float32)
        mask = data != 0
        out = normalize_nonzero(vol(data)).data
        fg = out[mask].astype(np.float64)
        assert abs(fg.mean()) < 1e-5
        assert abs(fg.var() - 1.0) < 1e-4
        assert np.all(out[~mask] == 0)


class TestLabelsToRegions:
    def test_empty_mask(self):
        regions = labels_to_regions(LabelMask(np.zeros((3, 3, 3), dtype=np.uint8)))
        assert regions.data.sum() == 0

    def test_single_enhancing_voxel_in_all_channels(self):
        lab = np.zeros((3, 3, 3), dtype=np.uint8)
        lab[1, 1, 1] = 4
        regions = labels_to_regions(LabelMask(lab))
        assert regions.data[:, 1, 1, 1].tolist() == [1, 1, 1]
        assert regions.data.sum() == 3

    def test_channel_sums_from_label_counts(self):
        rng = np.random.default_rng(3)
        lab = np.zeros(5 * 5 * 5, dtype=np.uint8)
        idx = rng.choice(lab.size, size=15, replace=False)
        lab[idx[:5]] = 1
        lab[idx[5:12]] = 2
        lab[idx[12:]] = 4
        regions = labels_to_regions(LabelMask(lab.reshape(5, 5, 5)))
        counts = regions.voxel_counts()
        assert counts == {"ET": 3, "TC": 8, "WT": 15}

    def test_exhaustive_against_membership_oracle(self):
        # every labeling of a 1x1x3 grid over the valid label set
        for assignment in itertools.product((0, 1, 2, 4), repeat=3):
            lab = np.asarray(assignment, dtype=np.uint8).reshape(1, 1, 3)
            regions = labels_to_regions(LabelMask(lab))
            for i in range(3):
                v = assignment[i]
                assert regions.data[0, 0, 0, i] == (1 if v == 4 else 0)
                assert regions.data[1, 0, 0, i] == (1 if v in (1, 4) else 0)
                assert regions.data[2, 0, 0, i] == (1 if v in (1, 2, 4) else 0)

    def test_regions_to_labels_round_trip(self):
        rng = np.random.default_rng(11)
        lab = rng.choice([0, 1, 2, 4], size=(6, 6, 6)).astype(np.uint8)
        mask = LabelMask(lab)
        back = regions_to_labels(labels_to_regions(mask))
        assert np.array_equal(back.data, mask.data)

    def test_region_mask_rejects_non_nested(self):
        bad = np.zeros((3, 2, 2, 2), dtype=np.uint8)
        bad[0, 0, 0, 0] = 1  # ET set without TC
        with pytest.raises(IntegrityError):
            RegionMask(bad)


class TestExtractPatch:
    def test_exact_fit_full_volume(self, normalized_case):
        inputs, targets, origin = extract_patch(normalized_case, 32, seed=0)
        assert origin == (0, 0, 0)
        assert inputs.shape == (4, 32, 32, 32)
        assert targets.shape == (3, 32, 32, 32)
        np.testing.assert_array_equal(inputs, normalized_case.stacked())

    def test_origin_range_for_large_volume(self):
        # dims (240, 155, 155) with patch 128 allow origins (0..112, 0..27, 0..27)
        dims = (240, 155, 155)
        patch = 128
        highs = [d - patch for d in dims]
        assert highs == [112, 27, 27]
        rng = np.random.default_rng(0)
        draws = np.array(
            [[rng.integers(0, h + 1) for h in highs] for _ in range(200)]
        )
        assert draws.min() >= 0
        assert np.all(draws.max(axis=0) <= highs)

    def test_padding_of_small_volume(self, small_phantom):
        from distillseg.preprocess import normalize_case

        case = normalize_case(small_phantom)
        inputs, targets, origin = extract_patch(case, 24, seed=5)
        assert inputs.shape == (4, 24, 24, 24)
        assert origin == (0, 0, 0)
        # symmetric zero padding: 4 voxels each side
        assert np.all(inputs[:, :4] == 0)
        assert np.all(inputs[:, -4:] == 0)
        assert np.all(targets[:, :4] == 0)

    def test_deterministic(self, normalized_case):
        a = extract_patch(normalized_case, 16, seed=42)
        b = extract_patch(normalized_case, 16, seed=42)
        assert a[2] == b[2]
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_unlabeled_case_with_targets_raises(self, normalized_case):
        view = normalized_case.unlabeled_view()
        with pytest.raises(ContractError):
            extract_patch(view, 16, seed=0)
        inputs, targets, _ = extract_patch(view, 16, seed=0, with_targets=False)
        assert targets is None


class TestAugmentation:
    def test_identity_is_bit_exact_noop(self, normalized_case):
        x, t, _ = extract_patch(normalized_case, 32, seed=3)
        xi, ti = apply_augmentation(x, t, AugmentationParams.identity())
        assert np.array_equal(xi, x)
        assert np.array_equal(ti, t)

    def test_double_mirror_is_identity(self, normalized_case):
        x, t, _ = extract_patch(normalized_case, 32, seed=3)
        for axis in range(3):
            mirror = tuple(i == axis for i in range(3))
            params = AugmentationParams(
                angles_deg=(0.0, 0.0, 0.0),
                scale=1.0,
                mirror=mirror,
                contrast=(1.0,) * 4,
                intensity_shift=(0.0,) * 4,
            )
            x1, t1 = apply_augmentation(x, t, params)
            x2, t2 = apply_augmentation(x1, t1, params)
            assert np.array_equal(x2, x)
            assert np.array_equal(t2, t)

    def test_intensity_ops_never_touch_targets(self, normalized_case):
        x, t, _ = extract_patch(normalized_case, 32, seed=3)
        params = AugmentationParams(
            angles_deg=(0.0, 0.0, 0.0),
            scale=1.0,
            mirror=(False,) * 3,
            contrast=(2.0, 1.0, 1.0, 1.0),
            intensity_shift=(1.0, 0.0, 0.0, 0.0),
        )
        xa, ta = apply_augmentation(x, t, params)
        assert np.array_equal(ta, t)
        np.testing.assert_allclose(xa[0], x[0] * 2.0 + 1.0, rtol=1e-6)
        np.testing.assert_array_equal(xa[1:], x[1:])

    def test_bad_scale_rejected(self, normalized_case):
        x, t, _ = extract_patch(normalized_case, 16, seed=0)
        params = AugmentationParams(
            angles_deg=(0.0, 0.0, 0.0),
            scale=0.0,
            mirror=(False,) * 3,
            contrast=(1.0,) * 4,
            intensity_shift=(0.0,) * 4,
        )
        with pytest.raises(ParameterError):
            apply_augmentation(x, t, params)

    def test_draws_respect_ranges_and_seed(self):
        ranges = AugmentationRanges()
        a = AugmentationParams.draw(ranges, seed=9)
        b = AugmentationParams.draw(ranges, seed=9)
        assert a == b
        assert all(abs(angle) <= ranges.rotation_deg for angle in a.angles_deg)
        assert ranges.scale[0] <= a.scale <= ranges.scale[1]
        assert all(ranges.contrast[0] <= c <= ranges.contrast[1] for c in a.contrast)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2**31))
    def test_targets_stay_binary_and_nested(self, seed, normalized_case):
        x, t, _ = extract_patch(normalized_case, 16, seed=seed)
        params = AugmentationParams.draw(AugmentationRanges(), seed=seed)
        _, ta = apply_augmentation(x, t, params)
        assert set(np.unique(ta)).issubset({0, 1})
        et, tc, wt = ta
        assert not np.any(et > tc)
        assert not np.any(tc > wt)


class TestSampleBatch:
    def test_batch_shapes_and_determinism(self, normalized_case):
        cases = [normalized_case, normalized_case]
        a = sample_batch(cases, 16, seed=1, ranges=AugmentationRanges())
        b = sample_batch(cases, 16, seed=1, ranges=AugmentationRanges())
        assert a.inputs.shape == (2, 4, 16, 16, 16)
        assert a.targets.shape == (2, 3, 16, 16, 16)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.targets, b.targets)

    def test_empty_cases_rejected(self):
        with pytest.raises(ContractError):
            sample_batch([], 16, seed=0)
