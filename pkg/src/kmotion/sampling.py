"""Disc-shaped patch geometry in the phase-encoding plane, acquisition
schedules, sampling masks, and exact timing arithmetic.

A phase-encode point is an integer (ky, kz) offset from the k-space
center; sampling one point always reads the full frequency-encode line
through it.  Patches are strict-interior discs of such points.  Timing is
kept in exact rational milliseconds so phase totals close exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .rng import stream
from .volumes import GridSpec

__all__ = [
    "CENTER",
    "CENTER_WIDE",
    "CENTER_NARROW",
    "PERIPHERAL",
    "PATCH_RADII",
    "PhaseEncodePoint",
    "Patch",
    "ScheduledPatch",
    "ScheduleEntry",
    "PatchSchedule",
    "SamplingMask",
    "TimingReport",
    "disc_offsets",
    "disc_patch_points",
    "make_patch",
    "valid_pe_bounds",
    "peripheral_cover",
    "build_schedule",
    "schedule_timing",
    "patch_mask",
    "point_indices",
    "serialize_schedule",
]

# patch kinds: dense center discs at three sizes plus the roving
# high-frequency disc
CENTER = "center"
CENTER_WIDE = "center_wide"
CENTER_NARROW = "center_narrow"
PERIPHERAL = "peripheral"

CENTER_KINDS = (CENTER, CENTER_WIDE, CENTER_NARROW)

# protocol radii; the resulting disc point counts are 109/305/9/69
PATCH_RADII = {CENTER: 6, CENTER_WIDE: 10, CENTER_NARROW: 2, PERIPHERAL: 5}


class PhaseEncodePoint(NamedTuple):
    ky: int
    kz: int


@lru_cache(maxsize=None)
def disc_offsets(radius: int) -> tuple[PhaseEncodePoint, ...]:
    """Integer offsets strictly inside a radius-r disc, raster order."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    r2 = radius * radius
    pts = []
    for dky in range(-radius + 1, radius):
        for dkz in range(-radius + 1, radius):
            if dky * dky + dkz * dkz < r2:
                pts.append(PhaseEncodePoint(dky, dkz))
    return tuple(pts)


def valid_pe_bounds(grid: GridSpec) -> tuple[int, int]:
    """Largest |ky| and |kz| representable on the grid (strict bound n/2)."""
    _, ny, nz = grid.dims
    return ny // 2 - 1, nz // 2 - 1


def disc_patch_points(
    radius: int, center: PhaseEncodePoint, grid: GridSpec
) -> tuple[PhaseEncodePoint, ...]:
    """Disc lattice points around center, clipped to the grid's PE bounds."""
    ky_max, kz_max = valid_pe_bounds(grid)
    pts = []
    for off in disc_offsets(radius):
        ky, kz = center[0] + off.ky, center[1] + off.kz
        if abs(ky) <= ky_max and abs(kz) <= kz_max:
            pts.append(PhaseEncodePoint(ky, kz))
    return tuple(pts)


@dataclass(frozen=True)
class Patch:
    """A disc of phase-encode points acquired back to back."""

    kind: str
    center: PhaseEncodePoint
    radius: int
    points: tuple[PhaseEncodePoint, ...]

    def __post_init__(self):
        if self.kind not in PATCH_RADII:
            raise ValueError(f"unknown patch kind {self.kind!r}")
        if self.kind in CENTER_KINDS and tuple(self.center) != (0, 0):
            raise ValueError(f"{self.kind} patches must be centered at (0, 0)")

    @property
    def nominal_n_points(self) -> int:
        """Unclipped disc point count; fixes the patch's protocol time slot."""
        return len(disc_offsets(self.radius))


def make_patch(kind: str, center: PhaseEncodePoint, radius: int, grid: GridSpec) -> Patch:
    return Patch(kind, PhaseEncodePoint(*center), radius, disc_patch_points(radius, center, grid))


@dataclass(frozen=True)
class ScheduledPatch:
    """A patch with its protocol time slot and temporal midpoint.

    tau is the midpoint in time-point units under idealized intra-entry
    spacing: patch j of m at entry t sits at t + j/m.  start_ms/duration_ms
    carry the exact wall-clock slot; duration uses the nominal disc count
    because the sequence allocates a fixed slot per patch kind even when
    edge clipping drops lines.
    """

    patch: Patch
    tau: float
    start_ms: Fraction
    duration_ms: Fraction

    @property
    def midpoint_ms(self) -> Fraction:
        return self.start_ms + self.duration_ms / 2


@dataclass(frozen=True)
class ScheduleEntry:
    t: int
    patches: tuple[ScheduledPatch, ...]


@dataclass(frozen=True)
class PatchSchedule:
    """Full acquisition plan: per-time-point patch lists plus phase layout."""

    mode: str
    grid: GridSpec
    T: int
    tr_ms: Fraction
    seed: int
    training_length: int
    phases: tuple[tuple[str, tuple[int, int]], ...]
    entries: tuple[ScheduleEntry, ...]

    def phase_of(self, t: int) -> str:
        for name, (lo, hi) in self.phases:
            if lo <= t <= hi:
                return name
        raise ValueError(f"time point {t} outside schedule")


def _hex_lattice(ky_max: int, kz_max: int, spacing: int = 6) -> list[PhaseEncodePoint]:
    # rows spaced `spacing` apart, alternate rows offset by half a spacing
    pts = []
    for i, ky in enumerate(range(-ky_max, ky_max + 1, spacing)):
        off = (spacing // 2) if i % 2 else 0
        for kz in range(-kz_max + off, kz_max + 1, spacing):
            pts.append(PhaseEncodePoint(ky, kz))
    return pts


def peripheral_cover(grid: GridSpec, radius: int = PATCH_RADII[PERIPHERAL]) -> tuple[PhaseEncodePoint, ...]:
    """Deterministic list of disc centers whose union covers every valid
    phase-encode point outside the narrow center disc.

    Hexagonal-ish lattice first, then a greedy patch-up pass adding any
    still-uncovered target point as its own center.  No randomness; the
    schedule shuffles visit order separately.
    """
    ky_max, kz_max = valid_pe_bounds(grid)
    narrow_r = PATCH_RADII[CENTER_NARROW]
    excluded = {tuple(p) for p in disc_offsets(narrow_r)}

    covered = np.zeros((2 * ky_max + 1, 2 * kz_max + 1), dtype=bool)

    def mark(center):
        for p in disc_patch_points(radius, center, grid):
            covered[p.ky + ky_max, p.kz + kz_max] = True

    centers = _hex_lattice(ky_max, kz_max)
    for c in centers:
        mark(c)
    for ky in range(-ky_max, ky_max + 1):
        for kz in range(-kz_max, kz_max + 1):
            if (ky, kz) in excluded:
                continue
            if not covered[ky + ky_max, kz + kz_max]:
                c = PhaseEncodePoint(ky, kz)
                centers.append(c)
                mark(c)
    return tuple(centers)


def _entry_patches(kinds, centers, grid, t, start_ms, tr_ms):
    m = len(kinds)
    patches = []
    for j, (kind, center) in enumerate(zip(kinds, centers)):
        p = make_patch(kind, center, PATCH_RADII[kind], grid)
        dur = p.nominal_n_points * tr_ms
        patches.append(ScheduledPatch(p, t + j / m, start_ms, dur))
        start_ms = start_ms + dur
    return tuple(patches), start_ms


def build_schedule(
    mode: str,
    T: int,
    tr_ms,
    grid: GridSpec,
    seed: int,
    training_length: int = 100,
) -> PatchSchedule:
    """Construct the acquisition plan for one scan.

    standard mode: every time point acquires one center disc then one
    peripheral disc.  accelerated mode: the first training_length points
    acquire one wide center disc each, the rest one narrow center disc
    then one peripheral disc.  Peripheral centers walk a precomputed cover
    of the outer phase-encode plane in seeded random permutations, one
    fresh permutation per repetition, so the whole plane is revisited
    evenly but in pseudo-random order.
    """
    if mode not in ("standard", "accelerated"):
        raise ValueError(f"unknown schedule mode {mode!r}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if mode == "accelerated" and T < training_length:
        raise ValueError(f"accelerated schedule needs T >= {training_length}, got {T}")

    tr = Fraction(str(tr_ms))
    if tr <= 0:
        raise ValueError(f"tr_ms must be positive, got {tr_ms}")

    n_peripheral = T if mode == "standard" else T - training_length
    cover = peripheral_cover(grid)
    rng = stream(seed, "schedule")
    h_centers: list[PhaseEncodePoint] = []
    while len(h_centers) < n_peripheral:
        for i in rng.permutation(len(cover)):
            h_centers.append(cover[i])
    h_centers = h_centers[:n_peripheral]

    origin = PhaseEncodePoint(0, 0)
    entries = []
    clock = Fraction(0)
    h_i = 0
    for t in range(1, T + 1):
        if mode == "standard":
            kinds = (CENTER, PERIPHERAL)
            centers = (origin, h_centers[h_i])
            h_i += 1
        elif t <= training_length:
            kinds = (CENTER_WIDE,)
            centers = (origin,)
        else:
            kinds = (CENTER_NARROW, PERIPHERAL)
            centers = (origin, h_centers[h_i])
            h_i += 1
        patches, clock = _entry_patches(kinds, centers, grid, t, clock, tr)
        entries.append(ScheduleEntry(t, patches))

    if mode == "standard":
        phases = (("standard", (1, T)),)
    else:
        phases = (("training", (1, training_length)),)
        if T > training_length:
            phases = phases + (("inference", (training_length + 1, T)),)

    return PatchSchedule(
        mode=mode,
        grid=grid,
        T=T,
        tr_ms=tr,
        seed=int(seed),
        training_length=training_length if mode == "accelerated" else 0,
        phases=phases,
        entries=tuple(entries),
    )


@dataclass(frozen=True)
class TimingReport:
    """Exact per-phase and total durations plus per-kind patch slots."""

    phase_seconds: dict
    total_seconds: Fraction
    patch_ms: dict

    def phase_seconds_float(self) -> dict:
        return {k: float(v) for k, v in self.phase_seconds.items()}

    def total_minutes(self) -> float:
        return float(self.total_seconds) / 60.0


def schedule_timing(s: PatchSchedule) -> TimingReport:
    phase_seconds = {name: Fraction(0) for name, _ in s.phases}
    patch_ms = {}
    total = Fraction(0)
    for entry in s.entries:
        phase = s.phase_of(entry.t)
        for sp in entry.patches:
            phase_seconds[phase] += sp.duration_ms / 1000
            total += sp.duration_ms / 1000
            patch_ms.setdefault(sp.patch.kind, sp.duration_ms)
    return TimingReport(phase_seconds=phase_seconds, total_seconds=total, patch_ms=patch_ms)


@dataclass(frozen=True)
class SamplingMask:
    """0/1 weight per voxel marking the readout lines of one patch."""

    grid: GridSpec
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != self.grid.dims:
            raise ValueError(f"weights shape {w.shape} != grid dims {self.grid.dims}")
        w = np.ascontiguousarray(w)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def n_sampled(self) -> int:
        return int(np.count_nonzero(self.weights))


def point_indices(points, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Array indices (iy, iz) of phase-encode points on the centered grid."""
    _, ny, nz = grid.dims
    pts = np.asarray([tuple(p) for p in points], dtype=np.int64).reshape(-1, 2)
    return pts[:, 0] + ny // 2, pts[:, 1] + nz // 2


def patch_mask(p: Patch, grid: GridSpec) -> SamplingMask:
    """1 on every voxel of every readout line through the patch's points."""
    w = np.zeros(grid.dims)
    if p.points:
        iy, iz = point_indices(p.points, grid)
        w[:, iy, iz] = 1.0
    return SamplingMask(grid, w)


def serialize_schedule(s: PatchSchedule) -> str:
    """Canonical JSON text of the schedule for reproducibility audits.

    Millisecond values are exact rational strings; the same inputs always
    produce byte-identical output.
    """
    doc = {
        "mode": s.mode,
        "grid": {"dims": list(s.grid.dims), "spacing": list(s.grid.spacing)},
        "T": s.T,
        "tr_ms": str(s.tr_ms),
        "seed": s.seed,
        "training_length": s.training_length,
        "phases": [[name, [lo, hi]] for name, (lo, hi) in s.phases],
        "entries": [
            [
                {
                    "kind": sp.patch.kind,
                    "center": list(sp.patch.center),
                    "radius": sp.patch.radius,
                    "n_points": len(sp.patch.points),
                    "tau": sp.tau,
                    "start_ms": str(sp.start_ms),
                    "duration_ms": str(sp.duration_ms),
                }
                for sp in entry.patches
            ]
            for entry in s.entries
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))
