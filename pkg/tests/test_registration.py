"""B-spline field machinery and non-rigid registration."""

import numpy as np
import pytest

from kmotion.errors import (
    ConvergenceError,
    DataIntegrityError,
    DegenerateDataError,
    DimensionError,
)
from kmotion.phantom import (
    MotionSpec,
    PhantomSpec,
    default_bodies,
    motion_trajectory,
    phantom_image,
    phantom_reference,
)
from kmotion.registration import (
    BSplineField,
    RegParams,
    _optimize_level,
    basis_matrix,
    bspline_to_dense,
    control_count,
    cubic_bspline,
    fit_bspline,
    register,
    zero_filled_recon,
)
from kmotion.sampling import disc_offsets
from kmotion.volumes import (
    ComplexVolume,
    DisplacementField,
    GridSpec,
    RealVolume,
    compose_fields,
    fft3_forward,
    warp_volume,
)


def kernel_scalar(t):
    # independent piecewise reference for the cubic kernel
    t = abs(t)
    if t < 1:
        return 2.0 / 3.0 - t * t + 0.5 * t**3
    if t < 2:
        return (2.0 - t) ** 3 / 6.0
    return 0.0


GRID = GridSpec((32, 32, 16), (4.0, 4.0, 4.0))


@pytest.fixture(scope="module")
def phantom():
    spec = PhantomSpec(grid=GRID, bodies=default_bodies(GRID))
    ref = phantom_reference(spec)
    return spec, ref, ref.data > 0.05


class TestBSplineKernel:
    def test_matches_scalar_reference(self):
        ts = np.linspace(-2.5, 2.5, 101)
        expect = np.array([kernel_scalar(t) for t in ts])
        assert np.allclose(cubic_bspline(ts), expect, atol=1e-14)

    def test_knot_values(self):
        assert cubic_bspline(0.0) == pytest.approx(2.0 / 3.0)
        assert cubic_bspline(1.0) == pytest.approx(1.0 / 6.0)
        assert cubic_bspline(2.0) == 0.0
        assert cubic_bspline(-1.0) == pytest.approx(1.0 / 6.0)

    def test_partition_of_unity(self):
        for n, s in ((32, 8), (16, 8), (44, 8), (30, 6)):
            b = basis_matrix(n, s)
            assert np.allclose(b.sum(axis=1), 1.0, atol=1e-12)

    def test_control_count(self):
        assert control_count(32, 8) == 8
        assert control_count(64, 8) == 12
        assert control_count(16, 8) == 6


class TestBSplineField:
    def test_unit_coefficient_reproduces_tensor_kernel(self):
        s = 8
        nc = tuple(control_count(n, s) for n in GRID.dims)
        coeff = np.zeros(nc + (3,))
        a0, b0, c0 = 3, 2, 1
        coeff[a0, b0, c0, 1] = 1.0
        dense = bspline_to_dense(BSplineField(GRID, s, coeff)).vectors
        i, j, k = 11, 18, 6
        expect = (
            kernel_scalar(i / s - (a0 - 1))
            * kernel_scalar(j / s - (b0 - 1))
            * kernel_scalar(k / s - (c0 - 1))
        )
        assert dense[i, j, k, 1] == pytest.approx(expect, abs=1e-12)
        assert np.all(dense[..., 0] == 0)
        assert np.all(dense[..., 2] == 0)
        # brute force over a small block
        for ii in range(8, 14):
            for jj in range(14, 20):
                want = (
                    kernel_scalar(ii / s - (a0 - 1))
                    * kernel_scalar(jj / s - (b0 - 1))
                    * kernel_scalar(6 / s - (c0 - 1))
                )
                assert dense[ii, jj, 6, 1] == pytest.approx(want, abs=1e-12)

    def test_zero_coefficients_zero_field(self):
        nc = tuple(control_count(n, 8) for n in GRID.dims)
        f = BSplineField(GRID, 8, np.zeros(nc + (3,)))
        assert np.all(bspline_to_dense(f).vectors == 0)

    def test_constant_coefficients_constant_field(self):
        nc = tuple(control_count(n, 8) for n in GRID.dims)
        coeff = np.zeros(nc + (3,))
        coeff[..., 0] = 1.7
        coeff[..., 2] = -0.4
        dense = bspline_to_dense(BSplineField(GRID, 8, coeff)).vectors
        assert np.allclose(dense[..., 0], 1.7, atol=1e-10)
        assert np.allclose(dense[..., 1], 0.0, atol=1e-10)
        assert np.allclose(dense[..., 2], -0.4, atol=1e-10)

    def test_fit_round_trip(self):
        rng = np.random.default_rng(5)
        nc = tuple(control_count(n, 8) for n in GRID.dims)
        coeff = rng.normal(size=nc + (3,))
        dense = bspline_to_dense(BSplineField(GRID, 8, coeff)).vectors
        refit = fit_bspline(GRID, 8, dense)
        dense2 = bspline_to_dense(refit).vectors
        assert np.allclose(dense, dense2, atol=1e-8)

    def test_coefficient_shape_checked(self):
        with pytest.raises(DimensionError):
            BSplineField(GRID, 8, np.zeros((3, 3, 3, 3)))

    def test_spacing_checked(self):
        with pytest.raises(ValueError):
            BSplineField(GRID, 1, np.zeros((4, 4, 4, 3)))


class TestZeroFilledRecon:
    def test_full_support_round_trip(self, phantom):
        _, ref, _ = phantom
        k = fft3_forward(ComplexVolume(GRID, ref.data.astype(complex)))
        img = zero_filled_recon(k)
        assert np.allclose(img.data, ref.data, atol=1e-10)

    def test_center_truncation_error_bounded(self):
        grid = GridSpec((64, 64, 44), (6.25, 6.25, 6.25))
        spec = PhantomSpec(grid=grid, bodies=default_bodies(grid))
        ref = phantom_reference(spec)
        k = fft3_forward(ComplexVolume(grid, ref.data.astype(complex)))
        keep = np.zeros(grid.dims)
        cy, cz = grid.dims[1] // 2, grid.dims[2] // 2
        for dy, dz in disc_offsets(10):
            keep[:, cy + dy, cz + dz] = 1.0
        zf = zero_filled_recon(ComplexVolume(grid, k.data * keep), support=keep)
        rel = np.linalg.norm(zf.data - ref.data) / np.linalg.norm(ref.data)
        assert rel < 0.15

    def test_zero_values_with_explicit_support(self):
        sup = np.zeros(GRID.dims)
        sup[:, 16, 8] = 1.0
        img = zero_filled_recon(ComplexVolume(GRID, np.zeros(GRID.dims, complex)), support=sup)
        assert np.all(img.data == 0)

    def test_empty_support_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            zero_filled_recon(ComplexVolume(GRID, np.zeros(GRID.dims, complex)))
        with pytest.raises(ValueError, match="empty"):
            zero_filled_recon(
                ComplexVolume(GRID, np.ones(GRID.dims, complex)), support=np.zeros(GRID.dims)
            )

    def test_support_shape_checked(self):
        with pytest.raises(DimensionError):
            zero_filled_recon(
                ComplexVolume(GRID, np.ones(GRID.dims, complex)), support=np.ones((4, 4, 4))
            )


class TestRegParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            RegParams(control_point_spacing_vox=1)
        with pytest.raises(ValueError):
            RegParams(levels=0)
        with pytest.raises(ValueError):
            RegParams(iterations=0)
        with pytest.raises(ValueError):
            RegParams(tv_weight=-1e-3)
        with pytest.raises(ValueError):
            RegParams(metric="mi")
        with pytest.raises(ValueError):
            RegParams(step_size=0.0)
        with pytest.raises(ValueError):
            RegParams(final_level_iterations=0)


class TestRegister:
    def test_self_registration_near_zero(self, phantom):
        _, ref, _ = phantom
        u = register(ref, ref)
        mag = u.magnitude_vox()
        assert mag.mean() < 0.05
        assert mag.max() < 0.1

    def test_uniform_shift_recovered(self, phantom):
        _, ref, support = phantom
        shift = np.zeros(GRID.dims + (3,))
        shift[..., 1] = 1.5
        moving = warp_volume(ref, DisplacementField(GRID, -shift))
        sink = []
        u = register(ref, moving, trace_sink=sink)
        err = np.linalg.norm(u.vectors - shift, axis=-1)
        assert err[support].mean() < 0.2
        assert len(sink) == 3
        assert [lev["factor"] for lev in sink] == [4, 2, 1]

    def test_sinusoidal_field_recovered(self, phantom):
        spec, ref, support = phantom
        motion = MotionSpec(amplitude_vox=(0.8, 3.0, 1.2), period_tp=10.0, seed=7)
        state = motion_trajectory(motion, 5.0, GRID)
        moving = phantom_image(spec, state)
        sink = []
        u = register(ref, moving, trace_sink=sink)
        epe = np.linalg.norm(u.vectors - state.field.vectors, axis=-1)
        assert epe[support].mean() < 0.5
        for level in sink:
            obj = level["objective"]
            assert all(b < a for a, b in zip(obj, obj[1:]))

    def test_objective_monotone_per_level(self, phantom):
        _, ref, _ = phantom
        shift = np.zeros(GRID.dims + (3,))
        shift[..., 0] = 1.0
        moving = warp_volume(ref, DisplacementField(GRID, -shift))
        sink = []
        register(ref, moving, RegParams(iterations=25), trace_sink=sink)
        assert sink
        for level in sink:
            obj = level["objective"]
            assert all(np.isfinite(obj))
            assert all(b < a for a, b in zip(obj, obj[1:]))

    def test_forward_backward_compose_near_identity(self, phantom):
        _, ref, support = phantom
        shift = np.zeros(GRID.dims + (3,))
        shift[..., 1] = 1.5
        moving = warp_volume(ref, DisplacementField(GRID, -shift))
        u_fwd = register(ref, moving)
        u_bwd = register(moving, ref)
        comp = compose_fields(u_fwd, u_bwd)
        mag = np.linalg.norm(comp.vectors, axis=-1)
        assert mag[support].mean() < 0.5

    def test_tv_weight_smooths_field(self, phantom):
        spec, ref, _ = phantom
        motion = MotionSpec(amplitude_vox=(0.8, 3.0, 1.2), period_tp=10.0, seed=7)
        moving = phantom_image(spec, motion_trajectory(motion, 5.0, GRID))
        variances = []
        for w in (1e-4, 1e-2, 1e-1):
            u = register(ref, moving, RegParams(tv_weight=w))
            variances.append(float(np.var(u.vectors)))
        assert variances[0] > variances[1] > variances[2]

    def test_ncc_handles_intensity_rescale(self, phantom):
        spec, ref, support = phantom
        motion = MotionSpec(amplitude_vox=(0.8, 3.0, 1.2), period_tp=10.0, seed=7)
        state = motion_trajectory(motion, 5.0, GRID)
        moving = phantom_image(spec, state)
        rescaled = RealVolume(GRID, moving.data * 2.3 + 0.1)
        u = register(ref, rescaled, RegParams(metric="ncc"))
        epe = np.linalg.norm(u.vectors - state.field.vectors, axis=-1)
        assert epe[support].mean() < 0.5

    def test_all_ones_mask_matches_no_mask(self, phantom):
        _, ref, _ = phantom
        shift = np.zeros(GRID.dims + (3,))
        shift[..., 1] = 1.0
        moving = warp_volume(ref, DisplacementField(GRID, -shift))
        params = RegParams(iterations=20)
        masked = RegParams(iterations=20, mask=RealVolume(GRID, np.ones(GRID.dims)))
        u_plain = register(ref, moving, params)
        u_masked = register(ref, moving, masked)
        assert np.allclose(u_plain.vectors, u_masked.vectors, atol=1e-12)

    def test_final_level_iterations_trims_last_level(self, phantom):
        _, ref, _ = phantom
        shift = np.zeros(GRID.dims + (3,))
        shift[..., 1] = 1.0
        moving = warp_volume(ref, DisplacementField(GRID, -shift))
        sink = []
        register(ref, moving, RegParams(iterations=20, final_level_iterations=1), trace_sink=sink)
        assert len(sink[-1]["objective"]) <= 2

    def test_grid_mismatch_rejected(self, phantom):
        _, ref, _ = phantom
        other = GridSpec((16, 16, 8), (4.0, 4.0, 4.0))
        with pytest.raises(DimensionError):
            register(ref, RealVolume(other, np.ones(other.dims)))
        with pytest.raises(DimensionError):
            register(ref, ref, RegParams(mask=RealVolume(other, np.ones(other.dims))))

    def test_non_finite_rejected(self, phantom):
        _, ref, _ = phantom
        bad = np.array(ref.data)
        bad[3, 3, 3] = np.nan
        with pytest.raises(DataIntegrityError):
            register(ref, RealVolume(GRID, bad))
        with pytest.raises(DataIntegrityError):
            register(RealVolume(GRID, bad), ref)

    def test_constant_image_rejected(self, phantom):
        _, ref, _ = phantom
        flat = RealVolume(GRID, np.full(GRID.dims, 0.7))
        with pytest.raises(DegenerateDataError):
            register(ref, flat)
        with pytest.raises(DegenerateDataError):
            register(flat, ref)


class TestConvergenceError:
    def test_non_finite_objective_carries_last_iterate(self):
        class ExplodingProblem:
            bases = tuple(basis_matrix(n, 8) for n in GRID.dims)

            def evaluate(self, coeff, need_grad=True):
                return np.nan, np.zeros_like(coeff)

        nc = tuple(control_count(n, 8) for n in GRID.dims)
        with pytest.raises(ConvergenceError) as exc:
            _optimize_level(ExplodingProblem(), np.zeros(nc + (3,)), RegParams(), 5)
        assert exc.value.last_iterate is not None
        assert exc.value.last_iterate.shape == GRID.dims + (3,)
