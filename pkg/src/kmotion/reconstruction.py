"""Motion-corrected k-space accumulation.

Every patch sample is inverse-transformed on its own zero-filled grid,
warped into the reference anatomy by the displacement field of its time
point, transformed back, masked to the patch geometry, and summed; the
running per-voxel coverage count normalizes the sum.  Peripheral patches
sit half a time point later than the center where motion is estimated, so
their field can be advanced by a quadratic Taylor step before warping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .sampling import CENTER_KINDS, patch_mask, point_indices
from .volumes import (
    ComplexVolume,
    DisplacementField,
    GridSpec,
    RealVolume,
    fft3_forward,
    fft3_inverse,
    warp_volume,
)

__all__ = [
    "WeightVolume",
    "ReconOptions",
    "shift_correct",
    "accumulate",
    "reconstruct_image",
]


@dataclass(frozen=True)
class WeightVolume:
    """Per-voxel k-space coverage counts and their normalizer."""

    grid: GridSpec
    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        counts = np.ascontiguousarray(np.asarray(self.counts, dtype=np.float64))
        if counts.shape != self.grid.dims:
            raise DimensionError(f"counts shape {counts.shape} != grid dims {self.grid.dims}")
        if np.any(counts < 0):
            raise ValueError("coverage counts must be non-negative")
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    def normalizer(self) -> np.ndarray:
        """1/count where covered, 1 elsewhere."""
        out = np.ones_like(self.counts)
        covered = self.counts > 0
        out[covered] = 1.0 / self.counts[covered]
        return out


@dataclass(frozen=True)
class ReconOptions:
    reference_time: int = 1
    shift_correction: bool = False
    delta: float = 0.5
    deterministic_reduction: bool = True

    def __post_init__(self):
        if self.reference_time < 1:
            raise ValueError("reference_time must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


def shift_correct(fields, t: int, delta: float) -> DisplacementField:
    """Advance the field sequence from integer time t to t + delta.

    Quadratic Taylor step using central differences; edge time points fall
    back to one-sided first differences with zero curvature.
    """
    fields = list(fields)
    n = len(fields)
    if n < 1:
        raise ValueError("field sequence is empty")
    if not 1 <= t <= n:
        raise ValueError(f"time point {t} outside [1, {n}]")
    u = fields[t - 1].vectors
    if delta == 0:
        return fields[t - 1]
    if n == 1:
        return fields[0]
    if t == 1:
        du = fields[1].vectors - u
        ddu = 0.0
    elif t == n:
        du = u - fields[n - 2].vectors
        ddu = 0.0
    else:
        prev = fields[t - 2].vectors
        nxt = fields[t].vectors
        du = (nxt - prev) / 2.0
        ddu = nxt - 2.0 * u + prev
    return DisplacementField(fields[t - 1].grid, u + du * delta + 0.5 * ddu * delta**2)


def _embed_patch(sample, grid: GridSpec) -> np.ndarray:
    data = np.zeros(grid.dims, dtype=np.complex128)
    if sample.patch.points:
        iy, iz = point_indices(sample.patch.points, grid)
        data[:, iy, iz] = sample.lines.T
    return data


def accumulate(
    record,
    fields,
    opts: ReconOptions | None = None,
    time_order=None,
    log_sink: list | None = None,
) -> tuple[ComplexVolume, WeightVolume]:
    """Motion-corrected accumulation of every patch sample in the record.

    fields[t-1] aligns the anatomy at time point t onto the reference.
    Center patches warp by their own field; peripheral patches use the
    field advanced by opts.delta when shift correction is on.  time_order
    overrides the processing order; with deterministic reduction the
    contributions are reduced in canonical ascending order regardless.
    """
    opts = opts or ReconOptions()
    fields = list(fields)
    grid = record.grid
    n_t = len(record.time_points)
    if len(fields) != n_t:
        raise ValueError(
            f"need one field per time point: got {len(fields)} fields for {n_t} time points"
        )
    for f in fields:
        if f.grid != grid:
            raise DimensionError("field grid differs from acquisition grid")
    if opts.reference_time > n_t:
        raise ValueError(f"reference_time {opts.reference_time} outside [1, {n_t}]")

    order = list(range(1, n_t + 1)) if time_order is None else [int(t) for t in time_order]
    if sorted(order) != list(range(1, n_t + 1)):
        raise ValueError("time_order must be a permutation of the time points")
    if opts.deterministic_reduction:
        order = sorted(order)

    total = np.zeros(grid.dims, dtype=np.complex128)
    counts = np.zeros(grid.dims)
    for t in order:
        entry = record.time_points[t - 1]
        advanced = None
        for sample in entry.samples:
            if not sample.patch.points:
                continue
            if sample.patch.kind in CENTER_KINDS or not opts.shift_correction:
                u = fields[t - 1]
                shifted = False
            else:
                if advanced is None:
                    advanced = shift_correct(fields, t, opts.delta)
                u = advanced
                shifted = True
            patch_k = ComplexVolume(grid, _embed_patch(sample, grid))
            img = fft3_inverse(patch_k)
            corrected = fft3_forward(warp_volume(img, u))
            mask = patch_mask(sample.patch, grid).weights
            total += corrected.data * mask
            counts += mask
            if log_sink is not None:
                log_sink.append(
                    {"t": t, "patch_kind": sample.patch.kind, "shift_corrected": shifted}
                )
    weights = WeightVolume(grid, counts)
    kbar = total * weights.normalizer()
    kbar[counts == 0] = 0.0
    return ComplexVolume(grid, kbar), weights


def reconstruct_image(kbar: ComplexVolume) -> RealVolume:
    """Magnitude of the inverse transform of the accumulated k-space."""
    img = fft3_inverse(kbar)
    return RealVolume(kbar.grid, np.abs(img.data))
