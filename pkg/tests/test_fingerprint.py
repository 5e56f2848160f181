"""Fingerprint extraction, aggregation and deterministic plan generation."""

import math

import numpy as np
import pytest

from fedseg.errors import ConfigError, ProtocolError, UsageError
from fedseg.fingerprint import (Fingerprint, GlobalFingerprint, TrainingPlan,
                                aggregate_fingerprints, extract_fingerprint,
                                features_per_stage, make_plan)

GIB = 1 << 30


def fp_from_shapes(shapes, spacings=None, mean=0.0, std=1.0):
    if spacings is None:
        spacings = [[1.0, 1.0]] * len(shapes)
    return GlobalFingerprint(shapes_after_crop=[list(s) for s in shapes],
                             spacings=[list(s) for s in spacings],
                             intensity_mean=mean, intensity_std=std,
                             num_cases=len(shapes), contributor_order=[0])


def plan_oracle(gfp, budget):
    """Independent straight-line reimplementation of the 6-step procedure."""
    def lower_median(vals):
        v = sorted(vals)
        return v[(len(v) - 1) // 2]

    target = [lower_median([s[a] for s in gfp.spacings]) for a in (0, 1)]
    rescaled = [[sh[a] * sp[a] / target[a] for a in (0, 1)]
                for sh, sp in zip(gfp.shapes_after_crop, gfp.spacings)]
    med = [lower_median([r[a] for r in rescaled]) for a in (0, 1)]
    p = 2 ** math.floor(math.log2(min(med)))
    p = min(512, max(32, p))
    while True:
        stages = min(8, max(2, math.floor(math.log2(p)) - 1))
        feats = [min(32 * 2 ** i, 512) for i in range(stages)]
        per_b = 8 * 3 * sum((p // 2 ** i) ** 2 * feats[i]
                            for i in range(stages))
        b = budget // per_b
        if b >= 2:
            return p, stages, feats, int(b), target
        if p <= 32:
            raise ConfigError("too small")
        p //= 2


class TestExtractFingerprint:
    def test_central_block_bbox(self):
        img = np.zeros((64, 64))
        img[16:48, 16:48] = 1.0
        fp = extract_fingerprint([(img, (img > 0).astype(np.uint8),
                                   (1.0, 1.0))])
        assert fp.shapes_after_crop == [[32, 32]]
        assert fp.spacings == [[1.0, 1.0]]
        assert fp.num_cases == 1

    def test_constant_foreground_stats(self):
        img = np.full((8, 8), 5.0)
        fp = extract_fingerprint([(img, np.ones((8, 8), np.uint8),
                                   (1.0, 1.0))])
        assert fp.intensity_mean == pytest.approx(5.0)
        assert fp.intensity_std == pytest.approx(0.0)

    def test_all_zero_image_records_full_shape(self):
        img = np.zeros((12, 20))
        fp = extract_fingerprint([(img, np.zeros((12, 20), np.uint8),
                                   (1.0, 1.0))])
        assert fp.shapes_after_crop == [[12, 20]]

    def test_pooled_stats_match_two_pass_oracle(self):
        rng = np.random.default_rng(0)
        cases = []
        fg_pixels = []
        for _ in range(10):
            h, w = rng.integers(16, 40, size=2)
            img = rng.normal(1.0, 0.5, size=(h, w))
            mask = (rng.uniform(size=(h, w)) > 0.6).astype(np.uint8)
            cases.append((img, mask, (1.0, 1.0)))
            fg_pixels.append(img[mask > 0])
        pooled = np.concatenate(fg_pixels)
        fp = extract_fingerprint(cases)
        assert abs(fp.intensity_mean - pooled.mean()) < 1e-9
        assert abs(fp.intensity_std - pooled.std()) < 1e-9

    def test_empty_dataset_raises(self):
        with pytest.raises(UsageError):
            extract_fingerprint([])

    def test_mask_shape_mismatch_raises(self):
        with pytest.raises(UsageError):
            extract_fingerprint([(np.ones((8, 8)), np.ones((8, 9)),
                                  (1.0, 1.0))])


class TestAggregateFingerprints:
    def test_single_contributor_identity(self):
        fp = Fingerprint(shapes_after_crop=[[40, 40]], spacings=[[1.0, 1.0]],
                         intensity_mean=2.0, intensity_std=0.5, num_cases=1)
        g = aggregate_fingerprints([(3, fp)])
        assert g.shapes_after_crop == fp.shapes_after_crop
        assert g.intensity_mean == fp.intensity_mean
        assert g.intensity_std == pytest.approx(fp.intensity_std)
        assert g.contributor_order == [3]

    def test_concatenation_in_ascending_node_id_order(self):
        a = Fingerprint([[10, 10], [11, 11]], [[1, 1]] * 2, 0.0, 1.0, 2)
        b = Fingerprint([[20, 20], [21, 21], [22, 22]], [[2, 2]] * 3,
                        0.0, 1.0, 3)
        g = aggregate_fingerprints([(5, b), (1, a)])
        assert g.num_cases == 5
        assert g.shapes_after_crop == [[10, 10], [11, 11],
                                       [20, 20], [21, 21], [22, 22]]
        assert g.contributor_order == [1, 5]

    def test_pooled_moments_match_flat_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(0.0, 1.0, size=100)
        y = rng.normal(2.0, 1.0, size=100)
        fa = Fingerprint([[16, 16]] * 100, [[1, 1]] * 100,
                         float(x.mean()), float(x.std()), 100)
        fb = Fingerprint([[16, 16]] * 100, [[1, 1]] * 100,
                         float(y.mean()), float(y.std()), 100)
        g = aggregate_fingerprints([(0, fa), (1, fb)])
        union = np.concatenate([x, y])
        assert abs(g.intensity_mean - union.mean()) < 1e-9
        assert abs(g.intensity_std - union.std()) < 1e-9

    def test_duplicate_node_id_is_protocol_error(self):
        fp = Fingerprint([[16, 16]], [[1, 1]], 0.0, 1.0, 1)
        with pytest.raises(ProtocolError):
            aggregate_fingerprints([(0, fp), (0, fp)])

    def test_round_trip_through_dict(self):
        g = fp_from_shapes([[40, 40], [48, 48]])
        back = GlobalFingerprint.from_dict(g.to_dict())
        assert back.to_dict() == g.to_dict()


class TestMakePlan:
    def test_paper_stage_rule_256_and_512(self):
        for size, stages in [(256, 7), (512, 8)]:
            plan = make_plan(fp_from_shapes([[size, size]] * 3), 64 * GIB)
            assert plan.patch_size == [size, size]
            assert plan.num_stages == stages

    def test_features_for_seven_stages(self):
        plan = make_plan(fp_from_shapes([[256, 256]] * 3), 64 * GIB)
        assert plan.features_per_stage == [32, 64, 128, 256, 512, 512, 512]

    def test_median_spacing_example(self):
        gfp = fp_from_shapes([[64, 64]] * 5,
                             spacings=[[1, 1], [1, 1], [1, 1], [2, 2], [2, 2]])
        plan = make_plan(gfp, 8 * GIB)
        assert plan.target_spacing == [1.0, 1.0]

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(50):
            n = int(rng.integers(1, 8))
            shapes = rng.integers(40, 600, size=(n, 2)).tolist()
            spacings = rng.choice([0.25, 0.5, 1.0, 2.0],
                                  size=(n, 2)).tolist()
            budget = int(rng.choice([GIB // 8, GIB, 8 * GIB]))
            gfp = fp_from_shapes(shapes, spacings)
            try:
                p, stages, feats, b, target = plan_oracle(gfp, budget)
            except ConfigError:
                with pytest.raises(ConfigError):
                    make_plan(gfp, budget)
                continue
            plan = make_plan(gfp, budget)
            assert plan.patch_size == [p, p]
            assert plan.num_stages == stages
            assert plan.features_per_stage == feats
            assert plan.batch_size == b
            assert plan.target_spacing == target

    def test_determinism(self):
        gfp = fp_from_shapes([[100, 180], [90, 120], [300, 280]],
                             spacings=[[1, 1], [0.5, 0.5], [2, 2]])
        a = make_plan(gfp, 4 * GIB)
        b = make_plan(gfp, 4 * GIB)
        assert a.to_dict() == b.to_dict()

    def test_budget_monotonicity(self):
        gfp = fp_from_shapes([[128, 128]] * 4)
        batches = [make_plan(gfp, budget).batch_size
                   for budget in [GIB // 8, GIB // 4, GIB, 4 * GIB, 16 * GIB]]
        assert batches == sorted(batches)

    def test_divisibility_invariant(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            shapes = rng.integers(40, 600, size=(3, 2)).tolist()
            plan = make_plan(fp_from_shapes(shapes), GIB)
            assert plan.patch_size[0] % 2 ** (plan.num_stages - 1) == 0

    def test_small_budget_shrinks_patch(self):
        gfp = fp_from_shapes([[512, 512]] * 3)
        big = make_plan(gfp, 64 * GIB)
        small = make_plan(gfp, GIB // 8)
        assert small.patch_size[0] < big.patch_size[0]
        assert small.batch_size >= 2

    def test_budget_below_floor_is_config_error(self):
        with pytest.raises(ConfigError):
            make_plan(fp_from_shapes([[64, 64]]), 1024)

    def test_intensity_norm_passthrough(self):
        gfp = fp_from_shapes([[64, 64]] * 2, mean=1.5, std=0.25)
        plan = make_plan(gfp, GIB)
        assert plan.intensity_norm == (1.5, 0.25)


class TestTrainingPlanValidation:
    def test_non_square_patch_rejected(self):
        with pytest.raises(ConfigError):
            TrainingPlan([1.0, 1.0], [64, 32], 4, features_per_stage(4), 2,
                         (0.0, 1.0)).validate()

    def test_indivisible_patch_rejected(self):
        with pytest.raises(ConfigError):
            TrainingPlan([1.0, 1.0], [48, 48], 6, features_per_stage(6), 2,
                         (0.0, 1.0)).validate()

    def test_round_trip_through_dict(self):
        plan = TrainingPlan([1.0, 2.0], [64, 64], 5, features_per_stage(5),
                            3, (0.5, 1.5))
        assert TrainingPlan.from_dict(plan.to_dict()).to_dict() \
            == plan.to_dict()
