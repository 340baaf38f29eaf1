"""Error statistics, total variation, RMSE, and the one-sample t-test."""

import numpy as np
import pytest
import scipy.stats

from kmotion.errors import DegenerateDataError, DimensionError
from kmotion.metrics import (
    displacement_error_stats,
    one_sample_ttest,
    rmse,
    student_t_two_sided_p,
    total_variation,
)
from kmotion.volumes import DisplacementField, GridSpec, RealVolume


def grid(n=8, spacing=(1.0, 1.0, 1.0)):
    return GridSpec((n, n, n), spacing)


def field(g, vectors):
    return DisplacementField(g, vectors)


class TestErrorStats:
    def test_identical_fields_give_zero(self):
        g = grid()
        rng = np.random.default_rng(0)
        vec = rng.standard_normal(g.dims + (3,))
        st = displacement_error_stats(field(g, vec), field(g, vec))
        assert st.mean_mm == st.p95_mm == st.max_mm == 0.0
        assert st.n_voxels == g.n_voxels

    def test_three_four_five_triangle(self):
        g = grid()
        a = np.zeros(g.dims + (3,))
        b = np.zeros(g.dims + (3,))
        b[..., 0], b[..., 1] = 3.0, 4.0
        st = displacement_error_stats(field(g, a), field(g, b))
        assert abs(st.mean_mm - 5.0) < 1e-12
        assert abs(st.p95_mm - 5.0) < 1e-12
        assert abs(st.max_mm - 5.0) < 1e-12

    def test_spacing_scales_per_axis(self):
        g = grid(8, spacing=(2.0, 1.0, 1.0))
        a = np.zeros(g.dims + (3,))
        b = np.zeros(g.dims + (3,))
        b[..., 0] = 1.0  # one voxel along x = 2 mm
        st = displacement_error_stats(field(g, a), field(g, b))
        assert abs(st.max_mm - 2.0) < 1e-12

    def test_matches_sort_based_oracle(self):
        g = grid()
        rng = np.random.default_rng(3)
        pa = rng.standard_normal(g.dims + (3,))
        pb = rng.standard_normal(g.dims + (3,))
        st = displacement_error_stats(field(g, pa), field(g, pb))
        err = np.sort(np.sqrt(np.sum((pa - pb) ** 2, axis=-1)).ravel())
        # linear interpolation between closest order statistics
        pos = 0.95 * (err.size - 1)
        lo = int(np.floor(pos))
        p95 = err[lo] + (err[lo + 1] - err[lo]) * (pos - lo)
        assert abs(st.mean_mm - err.mean()) < 1e-10
        assert abs(st.p95_mm - p95) < 1e-10
        assert abs(st.max_mm - err[-1]) < 1e-10
        assert st.mean_mm <= st.p95_mm <= st.max_mm

    def test_order_invariance(self):
        g = grid()
        rng = np.random.default_rng(4)
        pa = rng.standard_normal(g.dims + (3,))
        zero = np.zeros(g.dims + (3,))
        st = displacement_error_stats(field(g, pa), field(g, zero))
        perm = rng.permutation(g.n_voxels)
        pa_p = pa.reshape(-1, 3)[perm].reshape(g.dims + (3,))
        st_p = displacement_error_stats(field(g, pa_p), field(g, zero))
        assert abs(st.mean_mm - st_p.mean_mm) < 1e-12
        assert abs(st.p95_mm - st_p.p95_mm) < 1e-10
        assert abs(st.max_mm - st_p.max_mm) < 1e-12

    def test_mask_restricts_support(self):
        g = grid()
        a = np.zeros(g.dims + (3,))
        b = np.zeros(g.dims + (3,))
        b[0, 0, 0, 0] = 100.0  # large error outside the mask
        m = np.ones(g.dims)
        m[0, 0, 0] = 0.0
        st = displacement_error_stats(field(g, a), field(g, b), RealVolume(g, m))
        assert st.max_mm == 0.0
        assert st.n_voxels == g.n_voxels - 1

    def test_empty_mask_raises(self):
        g = grid()
        z = np.zeros(g.dims + (3,))
        with pytest.raises(ValueError):
            displacement_error_stats(field(g, z), field(g, z), RealVolume(g, np.zeros(g.dims)))

    def test_grid_mismatch_raises(self):
        with pytest.raises(DimensionError):
            displacement_error_stats(
                DisplacementField.zero(grid(8)), DisplacementField.zero(grid(4))
            )

    def test_p95_nondecreasing_when_max_added(self):
        g = grid(4)
        rng = np.random.default_rng(5)
        vec = np.abs(rng.standard_normal(g.dims + (3,)))
        zero = np.zeros(g.dims + (3,))
        st = displacement_error_stats(field(g, vec), field(g, zero))
        vec2 = vec.copy()
        vec2[0, 0, 0] = (1000.0, 0.0, 0.0)
        st2 = displacement_error_stats(field(g, vec2), field(g, zero))
        assert st2.p95_mm >= st.p95_mm


class TestTotalVariation:
    def test_constant_is_zero(self):
        g = grid()
        assert total_variation(RealVolume(g, np.full(g.dims, 3.7))) == 0.0

    def test_step_closed_form(self):
        g = GridSpec((8, 6, 4), (1.0, 1.0, 1.0))
        h = 2.5
        d = np.zeros(g.dims)
        d[4:, :, :] = h
        # only the plane x=3 has a nonzero forward difference
        expected = h * (6 * 4) / (8 * 6 * 4)
        assert abs(total_variation(RealVolume(g, d)) - expected) < 1e-12

    def test_homogeneity(self):
        g = grid()
        rng = np.random.default_rng(6)
        d = rng.standard_normal(g.dims)
        tv = total_variation(RealVolume(g, d))
        tv3 = total_variation(RealVolume(g, 3.0 * d))
        assert abs(tv3 - 3.0 * tv) < 1e-12

    def test_translation_invariance_for_interior_bump(self):
        g = grid(12)
        d = np.zeros(g.dims)
        rng = np.random.default_rng(7)
        d[3:6, 3:6, 3:6] = rng.standard_normal((3, 3, 3))
        tv = total_variation(RealVolume(g, d))
        rolled = np.roll(d, (2, 1, 3), axis=(0, 1, 2))
        assert abs(total_variation(RealVolume(g, rolled)) - tv) < 1e-12

    def test_mask_selects_region(self):
        g = grid(6)
        d = np.zeros(g.dims)
        d[3:, :, :] = 1.0
        m = np.zeros(g.dims)
        m[0, :, :] = 1.0  # flat region only
        assert total_variation(RealVolume(g, d), RealVolume(g, m)) == 0.0


class TestRmse:
    def test_equal_is_zero(self):
        g = grid()
        rng = np.random.default_rng(8)
        d = rng.standard_normal(g.dims)
        assert rmse(RealVolume(g, d), RealVolume(g, d)) == 0.0

    def test_constant_offset(self):
        g = grid()
        rng = np.random.default_rng(9)
        d = rng.standard_normal(g.dims)
        assert abs(rmse(RealVolume(g, d), RealVolume(g, d - 1.7)) - 1.7) < 1e-12

    def test_matches_direct_sum_oracle(self):
        g = grid()
        rng = np.random.default_rng(10)
        a = rng.standard_normal(g.dims)
        b = rng.standard_normal(g.dims)
        acc = 0.0
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    acc += (a[i, j, k] - b[i, j, k]) ** 2
        oracle = np.sqrt(acc / g.n_voxels)
        assert abs(rmse(RealVolume(g, a), RealVolume(g, b)) - oracle) < 1e-12

    def test_grid_mismatch_raises(self):
        with pytest.raises(DimensionError):
            rmse(
                RealVolume(grid(8), np.zeros((8, 8, 8))),
                RealVolume(grid(4), np.zeros((4, 4, 4))),
            )


class TestTTest:
    def test_symmetric_samples_give_p_one(self):
        r = one_sample_ttest([1, 2, 3, 4, 5], 3.0)
        assert r.t_statistic == 0.0
        assert r.p_value == 1.0
        assert r.cohens_d == 0.0

    def test_cohens_d_by_construction(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal(30)
        s = np.std(x, ddof=1)
        shifted = x - np.mean(x) + 0.86 * s  # mean sits 0.86 s above zero
        r = one_sample_ttest(shifted, 0.0)
        assert abs(r.cohens_d - 0.86) < 1e-10

    def test_matches_reference_implementation(self):
        samples = [2.1, 2.5, 2.3, 2.8, 2.6]
        r = one_sample_ttest(samples, 2.0)
        ref = scipy.stats.ttest_1samp(samples, 2.0)
        assert abs(r.t_statistic - ref.statistic) < 1e-10
        assert abs(r.p_value - ref.pvalue) < 1e-6
        ref_g = scipy.stats.ttest_1samp(samples, 2.0, alternative="greater")
        assert abs(r.p_value_greater - ref_g.pvalue) < 1e-6

    @pytest.mark.parametrize("dof", [1, 2, 4, 9, 17, 99])
    def test_tail_probability_matches_reference_grid(self, dof):
        for t in np.linspace(-6, 6, 25):
            mine = student_t_two_sided_p(float(t), dof)
            ref = 2 * scipy.stats.t.sf(abs(t), dof)
            assert abs(mine - ref) < 1e-8

    def test_p_monotone_in_abs_t(self):
        ts = np.linspace(0, 8, 40)
        ps = [student_t_two_sided_p(float(t), 9) for t in ts]
        assert all(a >= b for a, b in zip(ps, ps[1:]))
        assert all(0 < p <= 1 for p in ps)

    def test_zero_variance_raises(self):
        with pytest.raises(DegenerateDataError):
            one_sample_ttest([2.0, 2.0, 2.0], 1.0)

    def test_too_few_samples_raises(self):
        with pytest.raises(ValueError):
            one_sample_ttest([1.0], 0.0)
