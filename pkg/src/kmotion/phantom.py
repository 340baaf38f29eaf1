"""Analytic deformable breathing phantom and the k-space acquisition
simulator.

Direction convention for motion fields: for every time coordinate tau the
ground-truth field u satisfies warp(image_tau, u) ~ reference, the same
direction the reconstruction applies and registration estimates.  The
image itself is rendered with the inverse ("pull") field, computed by a
fixed-point iteration on the closed-form field evaluator, so ground truth
stays exact while the rendering carries the inversion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .rng import stream
from .sampling import PatchSchedule, patch_mask, point_indices
from .volumes import (
    ComplexVolume,
    DisplacementField,
    GridSpec,
    RealVolume,
    fft3_forward,
    invert_field,
    warp_volume,
)

__all__ = [
    "Ellipsoid",
    "PhantomSpec",
    "MotionSpec",
    "MotionState",
    "PatchSample",
    "AcquisitionRecord",
    "default_bodies",
    "phantom_reference",
    "phantom_image",
    "motion_trajectory",
    "acquire",
]


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


@dataclass(frozen=True)
class Ellipsoid:
    """Soft-edged ellipsoid, optionally clipped by a half-space plane.

    All geometry in mm.  clip keeps the side with normal.(p - point) < 0.
    """

    center_mm: tuple[float, float, float]
    semiaxes_mm: tuple[float, float, float]
    intensity: float
    clip_point_mm: tuple[float, float, float] | None = None
    clip_normal: tuple[float, float, float] | None = None
    edge_mm: float = 8.0

    def __post_init__(self):
        for name in ("center_mm", "semiaxes_mm", "clip_point_mm", "clip_normal"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(float(v) for v in val))
        if self.intensity < 0:
            raise ValueError(f"intensity must be >= 0, got {self.intensity}")
        if any(a <= 0 for a in self.semiaxes_mm):
            raise ValueError(f"semiaxes must be positive, got {self.semiaxes_mm}")
        if (self.clip_point_mm is None) != (self.clip_normal is None):
            raise ValueError("clip_point_mm and clip_normal must be given together")

    def check_inside_fov(self, grid: GridSpec) -> None:
        for c, a, f in zip(self.center_mm, self.semiaxes_mm, grid.fov):
            if c - a < 0 or c + a > f:
                raise ValueError(f"ellipsoid extent [{c - a}, {c + a}] mm exceeds FOV {f} mm")

    def render(self, xm: np.ndarray, ym: np.ndarray, zm: np.ndarray) -> np.ndarray:
        cx, cy, cz = self.center_mm
        ax, ay, az = self.semiaxes_mm
        q = ((xm - cx) / ax) ** 2 + ((ym - cy) / ay) ** 2 + ((zm - cz) / az) ** 2
        # (1 - sqrt(q)) * a_min approximates the signed boundary distance in mm
        dist = (1.0 - np.sqrt(q)) * min(self.semiaxes_mm)
        ind = _smoothstep(0.5 + dist / self.edge_mm)
        if self.clip_normal is not None:
            n = np.asarray(self.clip_normal, dtype=float)
            n = n / np.linalg.norm(n)
            p0 = self.clip_point_mm
            signed = (xm - p0[0]) * n[0] + (ym - p0[1]) * n[1] + (zm - p0[2]) * n[2]
            ind = ind * _smoothstep(0.5 - signed / self.edge_mm)
        return self.intensity * ind


def default_bodies(grid: GridSpec) -> tuple[Ellipsoid, ...]:
    """Torso with a diaphragm-clipped liver, a spleen, and bright markers.

    Geometry scales with the FOV so the same layout works on any grid.
    """
    fx, fy, fz = grid.fov
    edge = 2.0 * max(grid.spacing)

    def at(px, py, pz):
        return (px * fx, py * fy, pz * fz)

    return (
        Ellipsoid(at(0.5, 0.5, 0.5), (0.375 * fx, 0.3 * fy, 0.4 * fz), 0.35, edge_mm=edge),
        Ellipsoid(
            at(0.575, 0.5, 0.44),
            (0.2 * fx, 0.175 * fy, 0.22 * fz),
            0.85,
            clip_point_mm=at(0.5, 0.5, 0.56),
            clip_normal=(0.0, 0.0, 1.0),
            edge_mm=edge,
        ),
        Ellipsoid(at(0.3, 0.42, 0.42), (0.09 * fx, 0.08 * fy, 0.1 * fz), 0.7, edge_mm=edge),
        Ellipsoid(at(0.45, 0.3, 0.35), (0.035 * fx,) * 3, 1.3, edge_mm=edge),
        Ellipsoid(at(0.62, 0.62, 0.3), (0.035 * fx,) * 3, 1.3, edge_mm=edge),
        Ellipsoid(at(0.38, 0.6, 0.55), (0.035 * fx,) * 3, 1.3, edge_mm=edge),
    )


@dataclass(frozen=True)
class PhantomSpec:
    """Analytic phantom: body list plus relative k-space noise level."""

    grid: GridSpec
    bodies: tuple[Ellipsoid, ...]
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "bodies", tuple(self.bodies))
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for b in self.bodies:
            b.check_inside_fov(self.grid)


@dataclass(frozen=True)
class MotionSpec:
    """Quasi-periodic breathing with slow amplitude jitter and linear drift.

    amplitude_vox is the peak displacement per axis at the envelope peak;
    drift is spatially uniform.  The motion vanishes exactly at
    tau = reference_tau (default 0).
    """

    amplitude_vox: tuple[float, float, float]
    period_tp: float
    drift_vox_per_tp: tuple[float, float, float] = (0.0, 0.0, 0.0)
    amplitude_jitter: float = 0.0
    reference_tau: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "amplitude_vox", tuple(float(a) for a in self.amplitude_vox))
        object.__setattr__(
            self, "drift_vox_per_tp", tuple(float(d) for d in self.drift_vox_per_tp)
        )
        if not self.period_tp > 2:
            raise ValueError(f"period_tp must be > 2, got {self.period_tp}")
        if not all(math.isfinite(a) for a in self.amplitude_vox):
            raise ValueError("amplitude_vox must be finite")
        if not 0 <= self.amplitude_jitter < 1:
            raise ValueError(f"amplitude_jitter must be in [0, 1), got {self.amplitude_jitter}")
        if not math.isfinite(self.reference_tau):
            raise ValueError("reference_tau must be finite")


@dataclass(frozen=True)
class MotionState:
    """Ground-truth motion at one time coordinate.

    field aligns the tau image back to the reference.  pull_field() gives
    the inverse, which renders the reference into the tau image; states
    made by motion_trajectory invert the closed form exactly, other states
    fall back to grid-based fixed-point inversion.
    """

    tau: float
    field: DisplacementField
    _pull: object = None

    def pull_field(self) -> DisplacementField:
        pull = self._pull
        if pull is None:
            pull = invert_field(self.field)
        elif callable(pull):
            pull = pull()
        object.__setattr__(self, "_pull", pull)
        return pull


def _envelope_raw(xv: np.ndarray, yv: np.ndarray, zv: np.ndarray, dims) -> np.ndarray:
    # separable bump: vanishes at the x/y/z FOV edges, peaks near the
    # diaphragm plane at 0.55 of the z extent
    nx, ny, nz = dims
    ex = np.sin(np.pi * np.clip(xv / (nx - 1), 0.0, 1.0)) ** 2
    ey = np.sin(np.pi * np.clip(yv / (ny - 1), 0.0, 1.0)) ** 2
    ez = np.sin(np.pi * np.clip(zv / (nz - 1), 0.0, 1.0)) ** 2
    ez = ez * np.exp(-(((zv - 0.55 * (nz - 1)) / (0.35 * (nz - 1))) ** 2))
    return ex * ey * ez


_ENVELOPE_NORM_CACHE: dict = {}


def _envelope_norm(grid: GridSpec) -> float:
    norm = _ENVELOPE_NORM_CACHE.get(grid.dims)
    if norm is None:
        nx, ny, nz = grid.dims
        xv, yv, zv = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij", sparse=True
        )
        norm = float(np.max(_envelope_raw(xv, yv, zv, grid.dims)))
        _ENVELOPE_NORM_CACHE[grid.dims] = norm
    return norm


def _breathing_scale(m: MotionSpec, tau: float) -> float:
    # amplitude factor a(tau) * sin^2(pi phi / period) with phi measured
    # from the reference time; a = 1 + jitter * q with q a slow two-tone
    # wobble, |q| <= 1
    phi = tau - m.reference_tau
    s = math.sin(math.pi * phi / m.period_tp) ** 2
    if m.amplitude_jitter > 0:
        rng = stream(m.seed, "motion-jitter")
        ph1, ph2 = rng.uniform(0.0, 2.0 * math.pi, 2)
        q = 0.6 * math.sin(2 * math.pi * phi / (4.7 * m.period_tp) + ph1) + 0.4 * math.sin(
            2 * math.pi * phi / (11.3 * m.period_tp) + ph2
        )
        s *= 1.0 + m.amplitude_jitter * q
    return s


def _field_at(m, grid, tau, xv, yv, zv):
    # closed-form alignment field at arbitrary voxel coordinates
    env = _envelope_raw(xv, yv, zv, grid.dims) / _envelope_norm(grid)
    s = _breathing_scale(m, tau)
    phi = tau - m.reference_tau
    out = np.empty(np.broadcast_shapes(xv.shape, yv.shape, zv.shape) + (3,))
    for c in range(3):
        out[..., c] = env * (m.amplitude_vox[c] * s) + m.drift_vox_per_tp[c] * phi
    return out


def motion_trajectory(m: MotionSpec, tau: float, grid: GridSpec) -> MotionState:
    """Ground-truth motion state at continuous time tau (time-point units).

    Deterministic in (m, tau); the field is exactly zero at the spec's
    reference_tau.
    """
    nx, ny, nz = grid.dims
    xv, yv, zv = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    vec = _field_at(m, grid, tau, xv, yv, zv)
    state_field = DisplacementField(grid, vec)

    def analytic_pull(iterations=25, tol=1e-9):
        # fixed point g = -u(x + g) on the closed form, no grid resampling
        g = -vec
        for _ in range(iterations):
            nxt = -_field_at(m, grid, tau, xv + g[..., 0], yv + g[..., 1], zv + g[..., 2])
            delta = np.max(np.abs(nxt - g))
            g = nxt
            if delta < tol:
                break
        return DisplacementField(grid, g)

    return MotionState(tau=float(tau), field=state_field, _pull=analytic_pull)


_REFERENCE_CACHE: dict = {}


def phantom_reference(spec: PhantomSpec) -> RealVolume:
    """Rasterize the phantom at rest (voxel centers, mm coordinates)."""
    key = (spec.grid, spec.bodies)
    vol = _REFERENCE_CACHE.get(key)
    if vol is None:
        nx, ny, nz = spec.grid.dims
        sx, sy, sz = spec.grid.spacing
        xm, ym, zm = np.meshgrid(
            (np.arange(nx) + 0.5) * sx,
            (np.arange(ny) + 0.5) * sy,
            (np.arange(nz) + 0.5) * sz,
            indexing="ij",
            sparse=True,
        )
        data = np.zeros(spec.grid.dims)
        for b in spec.bodies:
            data = data + b.render(xm, ym, zm)
        vol = RealVolume(spec.grid, data)
        if len(_REFERENCE_CACHE) > 8:
            _REFERENCE_CACHE.clear()
        _REFERENCE_CACHE[key] = vol
    return vol


def phantom_image(spec: PhantomSpec, state: MotionState) -> RealVolume:
    """Phantom deformed to the given motion state.

    Backward warp of the reference rasterization by the state's pull
    field, so warping the result by state.field recovers the reference up
    to interpolation error.
    """
    if state.field.grid != spec.grid:
        raise DimensionError("motion state grid differs from phantom grid")
    ref = phantom_reference(spec)
    if not np.any(state.field.vectors):
        return ref
    return warp_volume(ref, state.pull_field())


@dataclass(frozen=True)
class PatchSample:
    """Measured readout lines of one patch: lines[i] is the full
    frequency-encode line through the patch's i-th phase-encode point."""

    patch: object
    tau: float
    lines: np.ndarray = field(repr=False)

    def __post_init__(self):
        lines = np.asarray(self.lines, dtype=np.complex128)
        if lines.ndim != 2 or lines.shape[0] != len(self.patch.points):
            raise ValueError(f"lines shape {lines.shape} != ({len(self.patch.points)}, nx)")
        lines = np.ascontiguousarray(lines)
        lines.flags.writeable = False
        object.__setattr__(self, "lines", lines)


@dataclass(frozen=True)
class TimePointSamples:
    t: int
    samples: tuple[PatchSample, ...]


@dataclass(frozen=True)
class AcquisitionRecord:
    """Everything measured in one simulated scan, patch by patch."""

    schedule: PatchSchedule
    grid: GridSpec
    time_points: tuple[TimePointSamples, ...]

    def partial_kspace(self, t: int) -> ComplexVolume:
        """Merged partial k-space at time point t (zero off support).

        Patches sampling the same line at different intra-entry times
        overwrite in acquisition order; reconstruction reads the per-patch
        samples directly and never relies on this merge.
        """
        entry = self.time_points[t - 1]
        if entry.t != t:
            raise ValueError(f"record entries out of order at t={t}")
        data = np.zeros(self.grid.dims, dtype=np.complex128)
        for s in entry.samples:
            if s.patch.points:
                iy, iz = point_indices(s.patch.points, self.grid)
                data[:, iy, iz] = s.lines.T
        return ComplexVolume(self.grid, data)

    def support_mask(self, t: int) -> np.ndarray:
        entry = self.time_points[t - 1]
        w = np.zeros(self.grid.dims)
        for s in entry.samples:
            w = np.maximum(w, patch_mask(s.patch, self.grid).weights)
        return w


def _measure_lines(k_data: np.ndarray, patch, grid: GridSpec) -> np.ndarray:
    if not patch.points:
        return np.zeros((0, grid.dims[0]), dtype=np.complex128)
    iy, iz = point_indices(patch.points, grid)
    return np.ascontiguousarray(k_data[:, iy, iz].T)


def acquire(
    spec: PhantomSpec,
    m: MotionSpec,
    schedule: PatchSchedule,
    line_timing: bool = False,
) -> AcquisitionRecord:
    """Simulate the scan: snapshot the phantom at each patch midpoint,
    Fourier transform, and keep exactly the patch's readout lines.

    Complex Gaussian noise of relative level spec.noise_sigma (times the
    reference DC magnitude, per real/imag component) lands on sampled
    lines only.  With line_timing=True every line gets its own phantom
    snapshot spread across the patch's slot instead of one mid-patch
    snapshot; this is slow and meant for small-grid studies.
    """
    if spec.grid != schedule.grid:
        raise DimensionError("phantom and schedule grids differ")
    grid = spec.grid

    ref_k = fft3_forward(ComplexVolume(grid, phantom_reference(spec).data.astype(complex)))
    dc = grid.dims[0] // 2, grid.dims[1] // 2, grid.dims[2] // 2
    noise_scale = spec.noise_sigma * float(np.abs(ref_k.data[dc]))

    def snapshot_k(tau):
        img = phantom_image(spec, motion_trajectory(m, tau, grid))
        return fft3_forward(ComplexVolume(grid, img.data.astype(complex))).data

    time_points = []
    for entry in schedule.entries:
        n_patches = len(entry.patches)
        samples = []
        for j, sp in enumerate(entry.patches):
            if line_timing:
                n = len(sp.patch.points)
                lines = np.zeros((n, grid.dims[0]), dtype=np.complex128)
                for i in range(n):
                    tau_i = sp.tau + ((i + 0.5) / n - 0.5) / n_patches
                    k = snapshot_k(tau_i)
                    lines[i] = _measure_lines(k, sp.patch, grid)[i]
            else:
                lines = _measure_lines(snapshot_k(sp.tau), sp.patch, grid)
            if noise_scale > 0 and lines.size:
                rng = stream(schedule.seed, "acquire", entry.t, j)
                lines = lines + noise_scale * (
                    rng.standard_normal(lines.shape) + 1j * rng.standard_normal(lines.shape)
                )
            samples.append(PatchSample(sp.patch, sp.tau, lines))
        time_points.append(TimePointSamples(entry.t, tuple(samples)))
    return AcquisitionRecord(schedule=schedule, grid=grid, time_points=tuple(time_points))
