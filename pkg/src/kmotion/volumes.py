"""Volumetric containers, centered 3D Fourier transforms, and field warping.

Axis convention for all arrays: (x, y, z) = (frequency encode, phase
encode 1, phase encode 2), C-contiguous.  K-space arrays use the centered
convention with DC at index ``dims // 2`` on every axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import DataIntegrityError, DimensionError

__all__ = [
    "GridSpec",
    "RealVolume",
    "ComplexVolume",
    "DisplacementField",
    "fft3_forward",
    "fft3_inverse",
    "warp_volume",
    "warp_array",
    "invert_field",
    "compose_fields",
    "rms_coil_combine",
]


@dataclass(frozen=True)
class GridSpec:
    """Voxel grid geometry: dims in voxels, spacing in mm/voxel.

    Dims must be even and at least 2 on every axis so the centered FFT
    convention has a well-defined DC index at ``dims // 2``.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError("dims and spacing must be length-3")
        if any(d < 2 or d % 2 != 0 for d in dims):
            raise ValueError(f"dims must be even and >= 2, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def fov(self) -> tuple[float, float, float]:
        """Field of view in mm, exactly dims * spacing."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RealVolume:
    """Real scalar per voxel on a GridSpec."""

    grid: GridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.grid.dims:
            raise DimensionError(f"data shape {data.shape} != grid dims {self.grid.dims}")
        object.__setattr__(self, "data", _freeze(data))

    def validate(self) -> "RealVolume":
        if not np.all(np.isfinite(self.data)):
            raise DataIntegrityError("RealVolume contains non-finite values")
        return self


@dataclass(frozen=True)
class ComplexVolume:
    """Complex scalar per voxel on a GridSpec (k-space or complex image)."""

    grid: GridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.shape != self.grid.dims:
            raise DimensionError(f"data shape {data.shape} != grid dims {self.grid.dims}")
        object.__setattr__(self, "data", _freeze(data))

    def validate(self) -> "ComplexVolume":
        if not np.all(np.isfinite(self.data)):
            raise DataIntegrityError("ComplexVolume contains non-finite values")
        return self

    def magnitude(self) -> RealVolume:
        return RealVolume(self.grid, np.abs(self.data))


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel 3-vector displacement in voxel units.

    ``vectors[..., c]`` is the displacement along axis c.  Conversion to mm
    is per-axis multiplication by the grid spacing.
    """

    grid: GridSpec
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.shape != self.grid.dims + (3,):
            raise DimensionError(f"vectors shape {vec.shape} != {self.grid.dims + (3,)}")
        object.__setattr__(self, "vectors", _freeze(vec))

    def validate(self) -> "DisplacementField":
        if not np.all(np.isfinite(self.vectors)):
            raise DataIntegrityError("DisplacementField contains non-finite values")
        return self

    @classmethod
    def zero(cls, grid: GridSpec) -> "DisplacementField":
        return cls(grid, np.zeros(grid.dims + (3,)))

    def magnitude_vox(self) -> np.ndarray:
        return np.sqrt(np.sum(self.vectors**2, axis=-1))


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise DataIntegrityError(f"{what} contains non-finite values")


def fft3_forward(v: ComplexVolume) -> ComplexVolume:
    """Centered, unitary 3D DFT (image to k-space, DC at dims // 2)."""
    _check_finite(v.data, "fft3_forward input")
    k = np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(v.data), norm="ortho"))
    return ComplexVolume(v.grid, k)


def fft3_inverse(k: ComplexVolume) -> ComplexVolume:
    """Inverse of :func:`fft3_forward` under the same centering."""
    _check_finite(k.data, "fft3_inverse input")
    v = np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(k.data), norm="ortho"))
    return ComplexVolume(k.grid, v)


def _sample_coords(vectors: np.ndarray) -> np.ndarray:
    # coords[c, i, j, k] = index along axis c of the source sample for voxel (i, j, k)
    nx, ny, nz, _ = vectors.shape
    base = np.mgrid[0:nx, 0:ny, 0:nz].astype(np.float64)
    return base + np.moveaxis(vectors, -1, 0)


def warp_array(data: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Backward warp: out(x) = data(x + u(x)), trilinear, zero outside."""
    coords = _sample_coords(vectors)
    if np.iscomplexobj(data):
        re = map_coordinates(data.real, coords, order=1, mode="grid-constant", cval=0.0)
        im = map_coordinates(data.imag, coords, order=1, mode="grid-constant", cval=0.0)
        return re + 1j * im
    return map_coordinates(data, coords, order=1, mode="grid-constant", cval=0.0)


def warp_volume(v, u: DisplacementField):
    """Backward-warp a volume by a displacement field.

    out(x) = v(x + u(x)) with trilinear interpolation; sample points
    outside the domain evaluate to zero.  Complex volumes interpolate real
    and imaginary parts independently.  Returns the same volume type as v.
    """
    if v.grid != u.grid:
        raise DimensionError("volume and field grids differ")
    out = warp_array(v.data, u.vectors)
    if isinstance(v, ComplexVolume):
        return ComplexVolume(v.grid, out)
    return RealVolume(v.grid, out)


def _sample_field(vectors: np.ndarray, at: np.ndarray) -> np.ndarray:
    coords = _sample_coords(at)
    out = np.empty_like(vectors)
    for c in range(3):
        out[..., c] = map_coordinates(vectors[..., c], coords, order=1, mode="grid-constant", cval=0.0)
    return out


def compose_fields(f: DisplacementField, g: DisplacementField) -> DisplacementField:
    """Displacement of the composed map (id + f) o (id + g).

    The result h satisfies x + h(x) = (x + g(x)) + f(x + g(x)), so warping
    a volume by h equals warping it by f first and warping that result by g.
    """
    if f.grid != g.grid:
        raise DimensionError("field grids differ")
    return DisplacementField(f.grid, g.vectors + _sample_field(f.vectors, g.vectors))


def invert_field(u: DisplacementField, iterations: int = 30, tol: float = 1e-9) -> DisplacementField:
    """Inverse displacement v with (id + v) o (id + u) = id, by fixed point.

    Converges for smooth fields with Jacobian perturbation below 1; the
    breathing-scale fields used here are well inside that regime.
    """
    vec = u.vectors
    inv = -vec
    for _ in range(iterations):
        nxt = -_sample_field(vec, inv)
        delta = np.max(np.abs(nxt - inv))
        inv = nxt
        if delta < tol:
            break
    return DisplacementField(u.grid, inv)


def rms_coil_combine(coils: list[ComplexVolume]) -> RealVolume:
    """Combine coil images by per-voxel root sum of squares of magnitudes."""
    if not coils:
        raise ValueError("need at least one coil volume")
    grid = coils[0].grid
    for c in coils[1:]:
        if c.grid != grid:
            raise DimensionError("coil grids differ")
    acc = np.zeros(grid.dims)
    for c in coils:
        acc += np.abs(c.data) ** 2
    return RealVolume(grid, np.sqrt(acc))
