"""Non-rigid registration of navigator volumes with a cubic B-spline
transformation model.

register(fixed, moving, params) returns a dense displacement field u with
warp(moving, u) ~ fixed, the direction the reconstruction consumes
directly.  The field is parameterized by B-spline control coefficients
optimized by multiresolution steepest descent with backtracking line
search; an isotropic total-variation penalty on the dense field keeps it
smooth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import ConvergenceError, DataIntegrityError, DegenerateDataError, DimensionError
from .volumes import ComplexVolume, DisplacementField, GridSpec, RealVolume, fft3_inverse, warp_array

__all__ = [
    "RegParams",
    "BSplineField",
    "cubic_bspline",
    "basis_matrix",
    "control_count",
    "bspline_to_dense",
    "fit_bspline",
    "zero_filled_recon",
    "register",
]

_TV_EPS = 1e-3


def cubic_bspline(t):
    """Cubic B-spline kernel, support |t| < 2, integral 1."""
    t = np.abs(np.asarray(t, dtype=float))
    out = np.zeros_like(t)
    near = t < 1
    far = (t >= 1) & (t < 2)
    out[near] = 2.0 / 3.0 - t[near] ** 2 + 0.5 * t[near] ** 3
    out[far] = (2.0 - t[far]) ** 3 / 6.0
    return out


def control_count(n: int, spacing: int) -> int:
    """Controls laid at a*spacing for a = -1 .. K+2 with K = ceil((n-1)/s)."""
    k = -(-(n - 1) // spacing)
    return k + 4


def basis_matrix(n: int, spacing: int) -> np.ndarray:
    """Dense basis B[i, a] = kernel(i/spacing - (a - 1)) for voxel i."""
    n_ctrl = control_count(n, spacing)
    i = np.arange(n)[:, None] / spacing
    a = np.arange(n_ctrl)[None, :] - 1.0
    return cubic_bspline(i - a)


@dataclass(frozen=True)
class BSplineField:
    """Displacement field as B-spline control coefficients (voxel units)."""

    grid: GridSpec
    spacing_vox: int
    coefficients: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.spacing_vox < 2:
            raise ValueError(f"control spacing must be >= 2, got {self.spacing_vox}")
        expected = tuple(control_count(n, self.spacing_vox) for n in self.grid.dims) + (3,)
        coeff = np.asarray(self.coefficients, dtype=np.float64)
        if coeff.shape != expected:
            raise DimensionError(f"coefficients shape {coeff.shape} != {expected}")
        coeff = np.ascontiguousarray(coeff)
        coeff.flags.writeable = False
        object.__setattr__(self, "coefficients", coeff)


def _bases(grid: GridSpec, spacing: int):
    return tuple(basis_matrix(n, spacing) for n in grid.dims)


def _dense_from_coeff(coeff, bases):
    bx, by, bz = bases
    return np.einsum("ia,jb,kc,abcv->ijkv", bx, by, bz, coeff, optimize=True)


def _project_to_coeff(dense, bases):
    bx, by, bz = bases
    return np.einsum("ia,jb,kc,ijkv->abcv", bx, by, bz, dense, optimize=True)


def bspline_to_dense(f: BSplineField) -> DisplacementField:
    """Evaluate the tensor-product spline at every voxel."""
    vec = _dense_from_coeff(f.coefficients, _bases(f.grid, f.spacing_vox))
    return DisplacementField(f.grid, vec)


def fit_bspline(grid: GridSpec, spacing_vox: int, dense: np.ndarray) -> BSplineField:
    """Least-squares B-spline coefficients for a dense field.

    The tensor-product structure lets the fit factor into per-axis
    pseudo-inverses.
    """
    bases = _bases(grid, spacing_vox)
    px, py, pz = (np.linalg.pinv(b) for b in bases)
    coeff = np.einsum("ai,bj,ck,ijkv->abcv", px, py, pz, dense, optimize=True)
    return BSplineField(grid, spacing_vox, coeff)


def zero_filled_recon(center_data: ComplexVolume, support: np.ndarray | None = None) -> RealVolume:
    """Magnitude image of zero-filled k-space (a low-resolution navigator).

    support, when given, is the 0/1 sampled-line mask; values may then be
    legitimately all zero.  Without it the support is inferred from the
    nonzero values, and an all-zero input is rejected as empty.
    """
    if support is not None:
        sup = np.asarray(getattr(support, "weights", support))
        if sup.shape != center_data.grid.dims:
            raise DimensionError("support shape differs from k-space grid")
        if not np.any(sup):
            raise ValueError("empty sampling support")
    elif not np.any(center_data.data):
        raise ValueError("empty sampling support")
    img = fft3_inverse(center_data)
    return RealVolume(center_data.grid, np.abs(img.data))


@dataclass(frozen=True)
class RegParams:
    """Registration controls; defaults suit navigator-resolution volumes."""

    control_point_spacing_vox: int = 8
    levels: int = 3
    iterations: int = 150
    final_level_iterations: int | None = None
    step_size: float = 0.4
    tv_weight: float = 3e-3
    metric: str = "ssd"
    mask: RealVolume | None = None
    max_step_vox: float = 0.4

    def __post_init__(self):
        if self.control_point_spacing_vox < 2:
            raise ValueError("control_point_spacing_vox must be >= 2")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.final_level_iterations is not None and self.final_level_iterations < 1:
            raise ValueError("final_level_iterations must be >= 1")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.metric not in ("ssd", "ncc"):
            raise ValueError(f"metric must be 'ssd' or 'ncc', got {self.metric!r}")
        if not 0 < self.step_size:
            raise ValueError("step_size must be positive")
        if not 0 < self.max_step_vox:
            raise ValueError("max_step_vox must be positive")


def _axis_factors(dims, factor):
    # per-axis downsampling that keeps dims integral, even, and >= 4
    out = []
    for n in dims:
        f = factor
        while f > 1 and (n % f != 0 or (n // f) % 2 != 0 or n // f < 4):
            f //= 2
        out.append(f)
    return tuple(out)


def _block_average(data, factors):
    fx, fy, fz = factors
    nx, ny, nz = data.shape
    return data.reshape(nx // fx, fx, ny // fy, fy, nz // fz, fz).mean(axis=(1, 3, 5))


def _resample_field(vec, new_dims):
    # linear resize of each component plus voxel-unit rescale per axis
    old = vec.shape[:3]
    ratios = [nd / od for nd, od in zip(new_dims, old)]
    coords = np.meshgrid(
        *[(np.arange(nd) + 0.5) / r - 0.5 for nd, r in zip(new_dims, ratios)], indexing="ij"
    )
    out = np.empty(tuple(new_dims) + (3,))
    for c in range(3):
        out[..., c] = map_coordinates(vec[..., c], coords, order=1, mode="nearest") * ratios[c]
    return out


def _tv_value_grad(vec):
    # isotropic forward-difference TV of the 3-vector field, smoothed so
    # the objective stays differentiable at zero gradient
    n = vec[..., 0].size
    diffs = []
    sq = np.zeros(vec.shape[:3])
    for ax in range(3):
        for c in range(3):
            d = np.zeros(vec.shape[:3])
            sl_lo = [slice(None)] * 3
            sl_hi = [slice(None)] * 3
            sl_lo[ax] = slice(0, -1)
            sl_hi[ax] = slice(1, None)
            d[tuple(sl_lo)] = vec[tuple(sl_hi) + (c,)] - vec[tuple(sl_lo) + (c,)]
            diffs.append((ax, c, d))
            sq += d * d
    mag = np.sqrt(sq + _TV_EPS**2)
    value = float(np.mean(mag))
    grad = np.zeros_like(vec)
    for ax, c, d in diffs:
        nd = d / mag
        # adjoint of the forward difference with zero last plane
        adj = np.zeros(vec.shape[:3])
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[ax] = slice(0, -1)
        sl_hi[ax] = slice(1, None)
        adj[tuple(sl_lo)] -= nd[tuple(sl_lo)]
        adj[tuple(sl_hi)] += nd[tuple(sl_lo)]
        grad[..., c] += adj / n
    return value, grad


class _LevelProblem:
    """One pyramid level: metric value and coefficient-space gradient."""

    def __init__(self, fixed, moving, mask, bases, metric, tv_weight):
        self.fixed = fixed
        self.moving = moving
        self.mask = mask
        self.bases = bases
        self.metric = metric
        self.tv_weight = tv_weight
        self.mov_grad = np.gradient(moving)
        self.norm = float(np.sum(mask)) if mask is not None else fixed.size
        base = np.mgrid[tuple(slice(0, n) for n in fixed.shape)].astype(float)
        self.base_coords = base
        fm = fixed if mask is None else fixed * mask
        fbar = float(np.sum(fm)) / self.norm
        self.fixed_centered = fixed - fbar
        sff = self.fixed_centered**2
        if mask is not None:
            sff = sff * mask
        self.fixed_var = float(np.sum(sff))

    def _warp(self, dense):
        coords = self.base_coords + np.moveaxis(dense, -1, 0)
        warped = map_coordinates(self.moving, coords, order=1, mode="grid-constant", cval=0.0)
        grads = [
            map_coordinates(g, coords, order=1, mode="grid-constant", cval=0.0)
            for g in self.mov_grad
        ]
        return warped, grads

    def evaluate(self, coeff, need_grad=True):
        dense = _dense_from_coeff(coeff, self.bases)
        warped, grads = self._warp(dense)
        m = self.mask
        if self.metric == "ssd":
            resid = warped - self.fixed
            if m is not None:
                resid = resid * m
            value = float(np.sum(resid * resid)) / self.norm
            dmetric = 2.0 * resid / self.norm
        else:
            a = warped
            if m is not None:
                abar = float(np.sum(a * m)) / self.norm
            else:
                abar = float(np.mean(a))
            ac = a - abar
            if m is not None:
                ac = ac * m
            saa = float(np.sum(ac * ac))
            sab = float(np.sum(ac * self.fixed_centered * (m if m is not None else 1.0)))
            denom = np.sqrt(max(saa * self.fixed_var, 1e-30))
            ncc = sab / denom
            value = 1.0 - ncc
            b = self.fixed_centered * (m if m is not None else 1.0)
            dmetric = -(b - ac * (sab / max(saa, 1e-30))) / denom
        tv_val = 0.0
        tv_grad = None
        if self.tv_weight > 0:
            tv_val, tv_grad = _tv_value_grad(dense)
            value += self.tv_weight * tv_val
        if not need_grad:
            return value, None
        g_dense = np.empty_like(dense)
        for c in range(3):
            g_dense[..., c] = dmetric * grads[c]
        if tv_grad is not None:
            g_dense += self.tv_weight * tv_grad
        return value, _project_to_coeff(g_dense, self.bases)


def _optimize_level(problem, coeff, params, iterations):
    value, grad = problem.evaluate(coeff)
    if not np.isfinite(value):
        raise ConvergenceError(
            "registration objective is not finite at initialization",
            last_iterate=_dense_from_coeff(coeff, problem.bases),
        )
    trace = [value]
    alpha = min(params.step_size, params.max_step_vox)
    for _ in range(iterations):
        direction = -grad
        ddense = _dense_from_coeff(direction, problem.bases)
        peak = float(np.max(np.abs(ddense)))
        if peak < 1e-14:
            break
        direction = direction / peak  # unit max dense step
        accepted = False
        a = alpha
        for _ in range(10):
            cand = coeff + a * direction
            cand_val, cand_grad = problem.evaluate(cand)
            if np.isfinite(cand_val) and cand_val < value - 1e-14:
                coeff, value, grad = cand, cand_val, cand_grad
                alpha = min(a * 1.3, params.max_step_vox)
                accepted = True
                break
            a *= 0.5
        if not accepted:
            if not np.isfinite(value):
                raise ConvergenceError(
                    "registration objective diverged",
                    last_iterate=_dense_from_coeff(coeff, problem.bases),
                )
            break  # line search at its floor: the level has converged
        trace.append(value)
    return coeff, trace


def register(
    fixed: RealVolume,
    moving: RealVolume,
    params: RegParams | None = None,
    trace_sink: list | None = None,
) -> DisplacementField:
    """Estimate the displacement aligning moving onto fixed.

    Multiresolution steepest descent on B-spline coefficients; the
    returned dense field u satisfies warp(moving, u) ~ fixed.  An optional
    trace_sink list receives one {"factor", "objective"} entry per level;
    objectives are non-increasing across accepted iterations.
    """
    params = params or RegParams()
    if fixed.grid != moving.grid:
        raise DimensionError("fixed and moving grids differ")
    if params.mask is not None and params.mask.grid != fixed.grid:
        raise DimensionError("mask grid differs from image grid")
    if not (np.all(np.isfinite(fixed.data)) and np.all(np.isfinite(moving.data))):
        raise DataIntegrityError("registration inputs contain non-finite values")
    if np.ptp(fixed.data) == 0.0 or np.ptp(moving.data) == 0.0:
        raise DegenerateDataError("registration inputs are constant images")

    factors = [2 ** (params.levels - 1 - i) for i in range(params.levels)]
    dense_prev = None
    dims_prev = None
    for f in factors:
        fax = _axis_factors(fixed.grid.dims, f)
        dims_l = tuple(n // a for n, a in zip(fixed.grid.dims, fax))
        spacing_l = tuple(s * a for s, a in zip(fixed.grid.spacing, fax))
        grid_l = GridSpec(dims_l, spacing_l)
        fix_l = _block_average(fixed.data, fax)
        mov_l = _block_average(moving.data, fax)
        mask_l = None
        if params.mask is not None:
            mask_l = (_block_average(params.mask.data, fax) > 0.5).astype(float)
            if not np.any(mask_l):
                mask_l = None
        bases = _bases(grid_l, params.control_point_spacing_vox)
        if dense_prev is None:
            n_ctrl = tuple(control_count(n, params.control_point_spacing_vox) for n in dims_l)
            coeff = np.zeros(n_ctrl + (3,))
        else:
            up = _resample_field(dense_prev, dims_l)
            coeff = fit_bspline(grid_l, params.control_point_spacing_vox, up).coefficients.copy()
        problem = _LevelProblem(fix_l, mov_l, mask_l, bases, params.metric, params.tv_weight)
        # the finest level dominates wall time; final_level_iterations trims
        # it to a polish pass when coarser levels carry enough detail
        iters = params.iterations
        if f == 1 and params.final_level_iterations is not None:
            iters = params.final_level_iterations
        coeff, trace = _optimize_level(problem, coeff, params, iters)
        if trace_sink is not None:
            trace_sink.append({"factor": f, "objective": trace})
        dense_prev = _dense_from_coeff(coeff, bases)
        dims_prev = dims_l
    if dims_prev != fixed.grid.dims:
        dense_prev = _resample_field(dense_prev, fixed.grid.dims)
    return DisplacementField(fixed.grid, dense_prev)
