from fractions import Fraction

import numpy as np
import pytest

from refimpl import (
    reference_bfp16_dense_bits,
    reference_model_cr,
    reference_speedup,
    reference_total_params,
)

from wavepress import compression, model
from wavepress.compression import (
    Mask,
    PruneSchedule,
    compression_ratios,
    iterative_prune_hook,
    prune_2to4,
    prune_unstructured,
    pruned_weight_names,
    schedule_sparsity,
    theoretical_speedup,
    validate_2to4,
)

RNG = np.random.default_rng(77)


class TestSchedule:
    def test_start_and_end(self):
        sch = PruneSchedule(final_sparsity=0.8, n_events=10, delta=100,
                            initial_sparsity=0.1)
        assert schedule_sparsity(0, sch) == pytest.approx(0.1)
        assert schedule_sparsity(1000, sch) == pytest.approx(0.8)
        assert schedule_sparsity(5000, sch) == pytest.approx(0.8)

    def test_halfway_cubic(self):
        sch = PruneSchedule(final_sparsity=0.75, n_events=10, delta=100)
        assert schedule_sparsity(500, sch) == pytest.approx(0.75 * (1 - 0.125))

    def test_held_between_events(self):
        sch = PruneSchedule(final_sparsity=0.75, n_events=10, delta=100)
        for t in range(100, 200):
            assert schedule_sparsity(t, sch) == schedule_sparsity(100, sch)

    def test_non_decreasing(self):
        sch = PruneSchedule(final_sparsity=0.9, n_events=7, delta=50,
                            initial_sparsity=0.2)
        values = [schedule_sparsity(t, sch) for t in range(0, 2000, 50)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_invalid(self):
        with pytest.raises(ValueError):
            PruneSchedule(final_sparsity=1.0, n_events=5)
        with pytest.raises(ValueError):
            PruneSchedule(final_sparsity=0.5, n_events=5, initial_sparsity=0.6)


class TestUnstructured:
    def test_zero_sparsity(self):
        m = prune_unstructured(RNG.normal(size=(6, 7)), 0.0)
        assert m.popcount == 42

    def test_forced_selection(self):
        m = prune_unstructured(np.array([0.1, -0.5, 0.05, 2.0]), 0.5)
        assert m.keep.tolist() == [False, True, False, True]

    def test_popcount_matches_sort_oracle(self):
        t = RNG.normal(size=120_000)
        for s in (0.25, 0.5, 0.75, 0.9):
            m = prune_unstructured(t, s)
            n_drop = int(round(s * t.size))
            assert m.popcount == t.size - n_drop
            kept_min = np.abs(t[m.keep]).min()
            dropped_max = np.abs(t[~m.keep]).max()
            assert kept_min >= dropped_max  # oracle: order statistics

    def test_tie_break_low_index_dropped_first(self):
        m = prune_unstructured(np.ones(8), 0.5)
        assert m.keep.tolist() == [False] * 4 + [True] * 4

    def test_sparsity_range_checked(self):
        with pytest.raises(ValueError):
            prune_unstructured(np.ones(4), 1.0)


class TestBalanced24:
    def test_forced_group(self):
        m = prune_2to4(np.array([[3.0, -1.0, 0.5, -2.0]]))
        assert m.keep.tolist() == [[True, False, False, True]]

    def test_ties_keep_first_two(self):
        m = prune_2to4(np.ones((1, 4)))
        assert m.keep.tolist() == [[True, True, False, False]]

    def test_overall_half_sparsity(self):
        t = RNG.normal(size=(16, 240, 2))
        m = prune_2to4(t)
        assert m.popcount * 2 == t.size
        validate_2to4(m)

    def test_tail_groups(self):
        m = prune_2to4(RNG.normal(size=(3, 7)))  # one full group + tail of 3
        validate_2to4(m)
        assert m.popcount == 3 * (2 + 2)

    def test_validator_names_tensor_and_group(self):
        t = RNG.normal(size=(2, 8))
        m = prune_2to4(t, name="offender")
        m.keep[1, 4:8] = True  # tamper: 4 kept in group 1
        with pytest.raises(ValueError, match=r"offender.*group 1.*row 1"):
            validate_2to4(m)


class TestHook:
    def test_no_event_between_multiples(self, desk_cfg):
        params = model.build(desk_cfg, 0)
        schedules = compression.make_schedules(desk_cfg, 0.75, 1000, delta=500)
        masks = iterative_prune_hook(499, params, schedules, {})
        assert masks == {}

    def test_event_remasks_all_groups(self, desk_cfg):
        params = model.build(desk_cfg, 0)
        schedules = compression.make_schedules(desk_cfg, 0.75, 1000, delta=500)
        masks = iterative_prune_hook(500, params, schedules, {})
        assert set(masks) == set(pruned_weight_names(desk_cfg))
        s = schedule_sparsity(500, next(iter(schedules.values())))
        for name, mask in masks.items():
            numel = params[name].size
            assert mask.popcount == numel - int(round(s * numel))
            assert not params[name][~mask.keep].any()

    def test_unknown_tensor_rejected(self, desk_cfg):
        params = model.build(desk_cfg, 0)
        schedules = {"nope.weight": PruneSchedule(final_sparsity=0.5, n_events=2)}
        with pytest.raises(KeyError):
            iterative_prune_hook(500, params, schedules, {})

    def test_end_of_schedule_exact_popcounts(self, desk_cfg):
        params = model.build(desk_cfg, 0)
        schedules = compression.make_schedules(desk_cfg, 0.75, 100, delta=10)
        masks = {}
        for step in (10, 50, 80, 100):
            masks = iterative_prune_hook(step, params, schedules, masks)
        for name, mask in masks.items():
            numel = params[name].size
            assert mask.popcount == numel - int(round(0.75 * numel))


@pytest.fixture(scope="module")
def paper_masks(paper_cfg, paper_params):
    def at(sparsity):
        return {name: prune_unstructured(paper_params[name], sparsity, name)
                for name in pruned_weight_names(paper_cfg)}
    return at


class TestRatios:
    def test_dense_fp32_all_ones(self, paper_cfg, paper_params):
        rep = compression_ratios(paper_params, None, "FP32", paper_cfg)
        assert rep.sparse_layer_cr == 1.0
        assert rep.model_cr == 1.0
        assert rep.composed_cr == 1.0
        assert rep.speedup_upsample_dense == 1.0

    @pytest.mark.parametrize("cr", [2, 4, 8, 16, 32])
    def test_model_cr_matches_reference_arithmetic(self, cr, paper_cfg,
                                                   paper_params, paper_masks):
        masks = paper_masks(1.0 - 1.0 / cr)
        rep = compression_ratios(paper_params, masks, "FP32", paper_cfg)
        want = float(reference_model_cr(Fraction(cr - 1, cr)))
        assert rep.model_cr == pytest.approx(want, rel=1e-9)
        assert rep.sparse_layer_cr == pytest.approx(cr, rel=1e-9)

    def test_two_four_model_cr(self, paper_cfg, paper_params):
        masks = {name: prune_2to4(paper_params[name], name)
                 for name in pruned_weight_names(paper_cfg)}
        rep = compression_ratios(paper_params, masks, "FP32", paper_cfg)
        assert rep.model_cr == pytest.approx(float(reference_model_cr(Fraction(1, 2))),
                                             rel=1e-9)

    def test_bfp16_dense_bits_reference(self, paper_cfg, paper_params):
        rep = compression_ratios(paper_params, None, "BFP16", paper_cfg)
        want = float(Fraction(reference_total_params() * 32) / reference_bfp16_dense_bits())
        assert rep.model_cr == pytest.approx(want, rel=1e-9)

    def test_model_cr_below_sparse_layer_cr(self, paper_cfg, paper_params, paper_masks):
        rep = compression_ratios(paper_params, paper_masks(0.75), "FP32", paper_cfg)
        assert rep.model_cr < rep.sparse_layer_cr

    def test_monotone_in_sparse_layer_cr(self, paper_cfg, paper_params, paper_masks):
        crs = [compression_ratios(paper_params, paper_masks(1 - 1 / c), "FP32",
                                  paper_cfg).model_cr for c in (2, 4, 8)]
        assert crs[0] < crs[1] < crs[2]

    def test_uniform_formats_compose_exactly(self, paper_cfg, paper_params, paper_masks):
        masks = paper_masks(0.75)
        for fmt in ("TF32", "bfloat16", "FP16.16", "FP16.32", "INT8"):
            rep = compression_ratios(paper_params, masks, fmt, paper_cfg)
            assert rep.model_cr == pytest.approx(rep.composed_cr, rel=1e-12)

    def test_per_layer_sparsity_reported(self, paper_cfg, paper_params, paper_masks):
        rep = compression_ratios(paper_params, paper_masks(0.5), "FP32", paper_cfg)
        sparsity = rep.per_layer_sparsity
        assert set(sparsity) == set(pruned_weight_names(paper_cfg))
        for v in sparsity.values():
            assert v == pytest.approx(0.5, abs=1e-4)


class TestSpeedup:
    def test_dense_is_one(self, paper_cfg):
        assert theoretical_speedup(paper_cfg, None) == 1.0

    @pytest.mark.parametrize("cr", [2, 4, 8, 16, 32])
    def test_matches_reference(self, cr, paper_cfg, paper_params, paper_masks):
        masks = paper_masks(1.0 - 1.0 / cr)
        got = theoretical_speedup(paper_cfg, masks, include_upsample=False)
        want = float(reference_speedup(Fraction(cr - 1, cr)))
        assert got == pytest.approx(want, rel=1e-9)

    def test_conventions_differ(self, paper_cfg, paper_params, paper_masks):
        masks = paper_masks(0.75)
        dense_conv = theoretical_speedup(paper_cfg, masks, include_upsample=False)
        pruned_conv = theoretical_speedup(paper_cfg, masks, include_upsample=True)
        assert pruned_conv > dense_conv
        assert pruned_conv == pytest.approx(
            float(reference_speedup(Fraction(3, 4), include_upsample=True)), rel=1e-9)

    def test_uses_achieved_density(self, paper_cfg):
        # a mask that keeps everything contributes no speedup even if present
        masks = {"out.weight": Mask("out.weight", "unstructured",
                                    np.ones((256, 240, 1), dtype=bool))}
        assert theoretical_speedup(paper_cfg, masks) == 1.0


class TestOneShotProcedure:
    def test_masks_fixed_through_retraining(self, two4_run, desk_cfg):
        dense, retrained = two4_run
        assert not dense.masks
        expected = {name: prune_2to4(dense.params[name], name)
                    for name in pruned_weight_names(desk_cfg)}
        for name, mask in retrained.masks.items():
            assert np.array_equal(mask.keep, expected[name].keep)
            validate_2to4(mask)
            assert not retrained.params[name][~mask.keep].any()

    def test_retraining_recovers_loss(self, two4_run, desk_cfg, desk_dataset):
        from wavepress import training

        dense, retrained = two4_run
        pruned_now = {k: v.copy() for k, v in dense.params.items()}
        compression.apply_masks(pruned_now, retrained.masks)
        ctx_dataset = desk_dataset[:1]
        ce_oneshot = training.evaluate(pruned_now, ctx_dataset, desk_cfg)
        ce_retrained = training.evaluate(retrained.params, ctx_dataset, desk_cfg)
        assert ce_retrained <= ce_oneshot
