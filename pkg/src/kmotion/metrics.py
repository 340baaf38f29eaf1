"""Evaluation metrics: displacement error statistics, total variation,
RMSE, and a one-sample t-test with effect size."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError, DimensionError
from .volumes import DisplacementField, RealVolume

__all__ = [
    "ErrorStats",
    "TestResult",
    "displacement_error_stats",
    "total_variation",
    "rmse",
    "one_sample_ttest",
    "student_t_two_sided_p",
]


@dataclass(frozen=True)
class ErrorStats:
    """Endpoint-error summary in mm over the evaluated voxels."""

    mean_mm: float
    p95_mm: float
    max_mm: float
    n_voxels: int

    def __post_init__(self):
        if self.mean_mm < 0 or self.p95_mm > self.max_mm + 1e-12:
            raise ValueError(f"inconsistent error stats {self}")


@dataclass(frozen=True)
class TestResult:
    """One-sample t-test outcome.

    p_value is two-sided; p_value_greater tests the one-sided alternative
    that the mean exceeds the null mean.
    """

    t_statistic: float
    p_value: float
    p_value_greater: float
    cohens_d: float
    n: int


def _mask_select(data: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return data.ravel()
    sel = mask.data > 0
    if not np.any(sel):
        raise ValueError("mask selects no voxels")
    return data[sel]


def displacement_error_stats(
    predicted: DisplacementField, truth: DisplacementField, mask: RealVolume | None = None
) -> ErrorStats:
    """Per-voxel Euclidean endpoint error in mm between two fields.

    The per-axis voxel displacement difference is scaled by the grid
    spacing before taking the norm; statistics run over the mask support
    (every voxel when no mask is given).  The 95th percentile linearly
    interpolates between closest order statistics.
    """
    if predicted.grid != truth.grid:
        raise DimensionError("field grids differ")
    if mask is not None and mask.grid != predicted.grid:
        raise DimensionError("mask grid differs from field grid")
    spacing = np.asarray(predicted.grid.spacing)
    diff_mm = (predicted.vectors - truth.vectors) * spacing
    err = np.sqrt(np.sum(diff_mm**2, axis=-1))
    vals = _mask_select(err, mask)
    return ErrorStats(
        mean_mm=float(np.mean(vals)),
        p95_mm=float(np.percentile(vals, 95)),
        max_mm=float(np.max(vals)),
        n_voxels=int(vals.size),
    )


def total_variation(v: RealVolume, mask: RealVolume | None = None) -> float:
    """Mean isotropic forward-difference gradient magnitude.

    Forward differences with replicate boundary: the last plane along each
    axis contributes a zero difference.
    """
    if mask is not None and mask.grid != v.grid:
        raise DimensionError("mask grid differs from volume grid")
    d = v.data
    gx = np.zeros_like(d)
    gy = np.zeros_like(d)
    gz = np.zeros_like(d)
    gx[:-1, :, :] = d[1:, :, :] - d[:-1, :, :]
    gy[:, :-1, :] = d[:, 1:, :] - d[:, :-1, :]
    gz[:, :, :-1] = d[:, :, 1:] - d[:, :, :-1]
    mag = np.sqrt(gx**2 + gy**2 + gz**2)
    return float(np.mean(_mask_select(mag, mask)))


def rmse(a: RealVolume, b: RealVolume, mask: RealVolume | None = None) -> float:
    """Root mean squared voxelwise difference over the mask support."""
    if a.grid != b.grid:
        raise DimensionError("volume grids differ")
    if mask is not None and mask.grid != a.grid:
        raise DimensionError("mask grid differs from volume grid")
    diff = _mask_select(a.data - b.data, mask)
    return float(np.sqrt(np.mean(diff**2)))


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz continued fraction for the incomplete beta integral
    max_iter, eps, fpmin = 300, 3e-14, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def _regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    # continued fraction converges fast on the side below the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: int) -> float:
    """Two-sided tail probability of Student's t with dof degrees."""
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    if t == 0.0:
        return 1.0
    x = dof / (dof + t * t)
    return _regularized_incomplete_beta(dof / 2.0, 0.5, x)


def one_sample_ttest(samples, null_mean: float) -> TestResult:
    """Test whether the sample mean differs from null_mean.

    Cohen's d is (mean - null_mean) / s with the unbiased standard
    deviation s.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    s = float(np.std(x, ddof=1))
    if s == 0.0:
        raise DegenerateDataError("zero sample variance")
    mean = float(np.mean(x))
    t = (mean - null_mean) / (s / math.sqrt(n))
    p_two = student_t_two_sided_p(t, n - 1)
    p_greater = p_two / 2.0 if t > 0 else 1.0 - p_two / 2.0
    return TestResult(
        t_statistic=t,
        p_value=p_two,
        p_value_greater=p_greater,
        cohens_d=(mean - null_mean) / s,
        n=n,
    )
