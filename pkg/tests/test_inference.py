"""Block bootstrap, BH-FDR step-up, and tier assignment."""

import hashlib

import numpy as np
import pytest
from scipy.stats import norm

from editfx.design import TestCell, TestFamily, TreatmentSpec
from editfx.errors import ConfigError, UnstableCellError
from editfx.inference import (
    TIER_BH,
    TIER_NONE,
    TIER_UNCORRECTED,
    BootstrapConfig,
    InferenceResult,
    bh_fdr,
    block_bootstrap,
    derive_cell_seed,
    infer_all,
    infer_family,
    tier_of,
)

from test_estimation import make_cell, make_unit

TestFamily.__test__ = False


def brute_force_bh(p, alpha):
    """Independent step-up scan: check every rank, keep the largest passing."""
    p = np.asarray(p, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="stable")
    sorted_p = p[order]
    i_star = 0
    for i in range(1, m + 1):
        if sorted_p[i - 1] <= i * alpha / m:
            i_star = i
    reject_sorted = np.array([i < i_star for i in range(m)])
    q_sorted = np.array(
        [min(min(m * sorted_p[j] / (j + 1) for j in range(i, m)), 1.0) for i in range(m)]
    )
    q = np.empty(m)
    reject = np.empty(m, dtype=bool)
    q[order] = q_sorted
    reject[order] = reject_sorted
    return q, reject


def aligned_block_cell():
    """Two blocks whose arms coincide with the blocks; half of all block
    resamples empty an arm."""
    spec = TreatmentSpec(view="surface", feature_name="word_count")
    units = [
        make_unit(pair_id=f"t{k}", treatment=1, outcome=0.1 + 0.01 * k, dataset="ds_a")
        for k in range(6)
    ] + [
        make_unit(pair_id=f"c{k}", treatment=0, outcome=0.01 * k, dataset="ds_b")
        for k in range(6)
    ]
    return TestCell(spec=spec, task_group="math", units=units)


class TestBhFdr:
    def test_hand_example(self):
        q, reject = bh_fdr([0.001, 0.04, 0.2], alpha=0.05)
        assert reject.tolist() == [True, False, False]
        assert q[0] == pytest.approx(0.003)
        assert q[1] == pytest.approx(0.06)
        assert q[2] == pytest.approx(0.2)

    def test_all_zero_rejects_all(self):
        q, reject = bh_fdr([0.0, 0.0, 0.0])
        assert reject.all()
        np.testing.assert_array_equal(q, np.zeros(3))

    def test_rank_one_threshold_at_m_60(self):
        p = [0.0008] + [1.0] * 59
        _, reject = bh_fdr(p, alpha=0.05)
        assert reject[0]
        assert reject.sum() == 1
        p = [0.00085] + [1.0] * 59
        _, reject = bh_fdr(p, alpha=0.05)
        assert not reject.any()

    def test_ties_reject_together(self):
        q, reject = bh_fdr([0.04, 0.04, 0.04], alpha=0.05)
        assert reject.all()
        np.testing.assert_allclose(q, 0.04)

    def test_matches_brute_force_on_random_vectors(self):
        rng = np.random.default_rng(123)
        for _ in range(1000):
            m = int(rng.integers(1, 101))
            p = rng.random(m)
            if rng.random() < 0.3:
                p = np.round(p, 2)  # force ties
            q, reject = bh_fdr(p, alpha=0.05)
            q_ref, reject_ref = brute_force_bh(p, alpha=0.05)
            np.testing.assert_array_equal(reject, reject_ref)
            np.testing.assert_array_equal(q, q_ref)

    def test_lowering_one_p_never_shrinks_rejections(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            m = int(rng.integers(2, 40))
            p = rng.random(m)
            _, before = bh_fdr(p, alpha=0.05)
            k = int(rng.integers(0, m))
            lowered = p.copy()
            lowered[k] = lowered[k] * rng.random()
            _, after = bh_fdr(lowered, alpha=0.05)
            assert np.all(after[before])

    def test_q_values_invariant_to_input_order(self):
        rng = np.random.default_rng(8)
        p = rng.random(25)
        q, _ = bh_fdr(p)
        perm = rng.permutation(25)
        q_perm, _ = bh_fdr(p[perm])
        np.testing.assert_array_equal(q_perm, q[perm])

    def test_input_validation(self):
        with pytest.raises(ConfigError):
            bh_fdr([])
        with pytest.raises(ConfigError):
            bh_fdr([0.5, 1.2])
        with pytest.raises(ConfigError):
            bh_fdr([0.5], alpha=0.0)


class TestTiers:
    def test_thresholds(self):
        assert tier_of(0.001, 0.03) == TIER_BH
        assert tier_of(0.04, 0.12) == TIER_UNCORRECTED
        assert tier_of(0.3, 0.5) == TIER_NONE
        assert tier_of(0.06, 0.049) == TIER_BH

    def test_markers(self):
        def result(tier):
            return InferenceResult(
                view="surface",
                feature="word_count",
                task_group="math",
                estimate=0.1,
                se=0.01,
                p_value=0.001,
                q_value=0.01,
                tier=tier,
                valid_resamples=500,
            )

        assert result(TIER_BH).marker == "★"
        assert result(TIER_UNCORRECTED).marker == "*"
        assert result(TIER_NONE).marker == ""


class TestCellSeed:
    def test_matches_manual_derivation(self):
        digest = hashlib.sha256(b"7|surface|word_count|math").digest()
        expected = int.from_bytes(digest[:8], "big")
        assert derive_cell_seed(7, "surface", "word_count", "math") == expected

    def test_distinct_across_cells_and_seeds(self):
        seeds = {
            derive_cell_seed(0, "surface", "word_count", "math"),
            derive_cell_seed(0, "surface", "word_count", "logical"),
            derive_cell_seed(0, "motif", "word_count", "math"),
            derive_cell_seed(1, "surface", "word_count", "math"),
        }
        assert len(seeds) == 4


class TestBlockBootstrap:
    def test_identical_seed_is_bit_identical(self):
        cell = make_cell(n=160, seed=20)
        cfg = BootstrapConfig(resamples=60, seed=42)
        first = block_bootstrap(cell, cfg)
        second = block_bootstrap(cell, cfg)
        assert first.se == second.se
        assert first.p_value == second.p_value
        np.testing.assert_array_equal(first.resample_estimates, second.resample_estimates)

    def test_seed_changes_resamples(self):
        cell = make_cell(n=160, seed=20)
        a = block_bootstrap(cell, BootstrapConfig(resamples=60, seed=1))
        b = block_bootstrap(cell, BootstrapConfig(resamples=60, seed=2))
        assert not np.array_equal(a.resample_estimates, b.resample_estimates)

    def test_normal_p_matches_reference_formula(self):
        cell = make_cell(n=160, seed=21)
        res = block_bootstrap(cell, BootstrapConfig(resamples=60, seed=3))
        expected = 2.0 * float(norm.sf(abs(res.estimate / res.se)))
        assert res.p_value == pytest.approx(expected, rel=1e-12)

    def test_naive_recipe_bootstraps_unweighted_difference(self):
        cell = make_cell(n=160, seed=22)
        res = block_bootstrap(cell, BootstrapConfig(resamples=40, seed=4), recipe="naive")
        t = np.array([u.treatment for u in cell.units], dtype=float)
        y = np.array([u.outcome for u in cell.units])
        expected = y[t == 1].mean() - y[t == 0].mean()
        assert res.estimate == pytest.approx(expected)

    def test_reuse_weights_flag(self):
        cell = make_cell(n=160, seed=23)
        refit = block_bootstrap(cell, BootstrapConfig(resamples=40, seed=5, refit=True))
        reuse = block_bootstrap(cell, BootstrapConfig(resamples=40, seed=5, refit=False))
        assert refit.estimate == pytest.approx(reuse.estimate)
        assert not np.array_equal(refit.resample_estimates, reuse.resample_estimates)

    def test_iid_mode_runs(self):
        cell = make_cell(n=160, seed=24)
        res = block_bootstrap(cell, BootstrapConfig(resamples=40, seed=6), mode="iid")
        assert res.valid_resamples == 40

    def test_single_block_rejected_in_block_mode(self):
        spec = TreatmentSpec(view="surface", feature_name="word_count")
        units = [
            make_unit(pair_id=f"u{k}", treatment=k % 2, outcome=0.01 * k) for k in range(10)
        ]
        cell = TestCell(spec=spec, task_group="math", units=units)
        with pytest.raises(ConfigError):
            block_bootstrap(cell, BootstrapConfig(resamples=10, seed=0))
        res = block_bootstrap(cell, BootstrapConfig(resamples=10, seed=0), mode="iid")
        assert res.valid_resamples + res.discarded == 10

    def test_degenerate_resamples_are_discarded(self):
        cell = aligned_block_cell()
        hit = None
        for seed in range(50):
            try:
                res = block_bootstrap(cell, BootstrapConfig(resamples=16, seed=seed))
            except UnstableCellError:
                continue
            hit = res
            break
        assert hit is not None
        assert hit.discarded > 0
        assert hit.valid_resamples + hit.discarded == 16
        assert hit.valid_resamples >= 8

    def test_unstable_cell_raises(self):
        cell = aligned_block_cell()
        raised = False
        for seed in range(50):
            try:
                block_bootstrap(cell, BootstrapConfig(resamples=16, seed=seed))
            except UnstableCellError as exc:
                raised = True
                assert "resamples were valid" in str(exc)
                break
        assert raised

    def test_zero_se_branches(self):
        spec = TreatmentSpec(view="surface", feature_name="word_count")
        flat = TestCell(
            spec=spec,
            task_group="math",
            units=[
                make_unit(pair_id=f"u{k}", treatment=k % 2, outcome=0.0, dataset=d)
                for k, d in enumerate(["ds_a", "ds_b"] * 6)
            ],
        )
        res = block_bootstrap(flat, BootstrapConfig(resamples=12, seed=0), recipe="naive")
        assert res.se == 0.0
        assert res.p_value == 1.0
        exact = TestCell(
            spec=spec,
            task_group="math",
            units=[
                make_unit(pair_id=f"u{k}", treatment=k % 2, outcome=float(k % 2), dataset=d)
                for k, d in enumerate(["ds_a", "ds_b"] * 6)
            ],
        )
        res = block_bootstrap(exact, BootstrapConfig(resamples=12, seed=0), recipe="naive")
        assert res.se == 0.0
        assert res.estimate == 1.0
        assert res.p_value == 0.0

    def test_percentile_p_flag(self):
        cell = make_cell(n=200, seed=25, tau=0.5, beta_x=0.0, gamma=0.0)
        res = block_bootstrap(
            cell, BootstrapConfig(resamples=40, seed=7, percentile_p=True), recipe="naive"
        )
        assert res.p_value == 0.0

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            BootstrapConfig(resamples=1)
        cell = make_cell(n=60, seed=26)
        with pytest.raises(ConfigError):
            block_bootstrap(cell, BootstrapConfig(resamples=10), recipe="ols")
        with pytest.raises(ConfigError):
            block_bootstrap(cell, BootstrapConfig(resamples=10), mode="jackknife")


class TestInferFamilies:
    def make_family(self):
        return TestFamily(
            name="surface",
            cells=[
                make_cell(n=120, seed=30, task_group="math"),
                make_cell(n=120, seed=31, task_group="logical"),
            ],
        )

    def test_family_results_sorted_and_corrected(self):
        results, skipped = infer_family(self.make_family(), master_seed=0, resamples=60)
        assert skipped == []
        assert [r.task_group for r in results] == ["logical", "math"]
        q_ref, _ = bh_fdr([r.p_value for r in results])
        np.testing.assert_array_equal([r.q_value for r in results], q_ref)
        for r in results:
            assert r.tier == tier_of(r.p_value, r.q_value)
            assert r.valid_resamples >= 30

    def test_worker_count_does_not_change_output(self):
        serial, _ = infer_family(self.make_family(), master_seed=1, resamples=40, workers=1)
        threaded, _ = infer_family(self.make_family(), master_seed=1, resamples=40, workers=4)
        assert [(r.cell_id, r.se, r.p_value, r.q_value) for r in serial] == [
            (r.cell_id, r.se, r.p_value, r.q_value) for r in threaded
        ]

    def test_families_are_never_pooled(self):
        families = [
            TestFamily(name="surface", cells=[make_cell(n=120, seed=32)]),
            TestFamily(name="motif", cells=[make_cell(n=120, seed=33)]),
        ]
        results, _ = infer_all(families, master_seed=2, resamples=40)
        assert len(results) == 2
        for r in results:
            assert r.q_value == r.p_value  # m=1 within each family

    def test_unstable_cell_skipped_and_family_m_shrinks(self):
        good = make_cell(n=120, seed=34, task_group="logical")
        bad = aligned_block_cell()
        family = TestFamily(name="surface", cells=[good, bad])
        found = False
        for master_seed in range(30):
            results, skipped = infer_family(family, master_seed=master_seed, resamples=16)
            if skipped:
                found = True
                assert skipped[0][0] == "surface:word_count:math"
                assert len(results) == 1
                assert results[0].q_value == results[0].p_value  # m=1 after the skip
                break
        assert found
