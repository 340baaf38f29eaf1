"""Motion model: tiny k-space centers in, displacement fields out.

Training vectorizes each tiny center patch, projects it onto the leading
PCA modes of the training set, expands the scores with elementwise square
and cube features, and solves a ridge least-squares problem mapping
features to B-spline control coefficients of the registered fields.
Prediction runs the same chain forward and evaluates the spline densely.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ArtifactError, ChecksumError, DataIntegrityError, DegenerateDataError
from .registration import BSplineField, bspline_to_dense, control_count, fit_bspline
from .sampling import CENTER_NARROW, PATCH_RADII, disc_offsets
from .volumes import ComplexVolume, DisplacementField, GridSpec

__all__ = [
    "PcaBasis",
    "MotionModel",
    "vectorize_center",
    "vectorize_lines",
    "input_length",
    "fit_pca",
    "project_scores",
    "cubic_features",
    "fit_weights",
    "train_motion_model",
    "predict_from_vector",
    "predict_motion",
    "save_model",
    "load_model",
]

_MODEL_FORMAT = "motion-model"
_MODEL_VERSION = 1


@lru_cache(maxsize=8)
def _narrow_offsets():
    return disc_offsets(PATCH_RADII[CENTER_NARROW])


def input_length(grid: GridSpec) -> int:
    """Vector length: real and imaginary parts of every narrow-center line."""
    return 2 * len(_narrow_offsets()) * grid.dims[0]


def vectorize_lines(lines: np.ndarray) -> np.ndarray:
    """Flatten complex line data to (all real parts, all imaginary parts)."""
    lines = np.asarray(lines)
    if lines.ndim != 2 or lines.shape[0] != len(_narrow_offsets()):
        raise ValueError(
            f"expected {len(_narrow_offsets())} readout lines, got shape {lines.shape}"
        )
    flat = np.ascontiguousarray(lines).ravel()
    return np.concatenate([flat.real, flat.imag])


def vectorize_center(volume: ComplexVolume) -> np.ndarray:
    """Vectorize a k-space volume whose support is the tiny center patch.

    Lines are taken in the raster order of the narrow-disc offsets; any
    nonzero value off that support is rejected.
    """
    nx, ny, nz = volume.grid.dims
    cy, cz = ny // 2, nz // 2
    offs = _narrow_offsets()
    mask = np.zeros((ny, nz), dtype=bool)
    for dy, dz in offs:
        mask[cy + dy, cz + dz] = True
    outside = volume.data[:, ~mask]
    if np.any(outside != 0):
        raise ValueError("nonzero k-space values outside the tiny center support")
    lines = np.stack([volume.data[:, cy + dy, cz + dz] for dy, dz in offs])
    return vectorize_lines(lines)


@dataclass(frozen=True)
class PcaBasis:
    """Mean and leading principal directions of the training inputs."""

    mean: np.ndarray = field(repr=False)
    components: np.ndarray = field(repr=False)  # (d_in, d_pca), columns orthonormal
    explained_variance: np.ndarray = field(repr=False)

    def __post_init__(self):
        mean = np.ascontiguousarray(np.asarray(self.mean, dtype=np.float64))
        comp = np.ascontiguousarray(np.asarray(self.components, dtype=np.float64))
        ev = np.ascontiguousarray(np.asarray(self.explained_variance, dtype=np.float64))
        if comp.ndim != 2 or comp.shape[0] != mean.shape[0] or comp.shape[1] != ev.shape[0]:
            raise ValueError("inconsistent basis dimensions")
        for a in (mean, comp, ev):
            a.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comp)
        object.__setattr__(self, "explained_variance", ev)

    @property
    def d_in(self) -> int:
        return self.mean.shape[0]

    @property
    def d_pca(self) -> int:
        return self.components.shape[1]


def fit_pca(inputs, d_pca: int) -> PcaBasis:
    """Mean-centered PCA keeping the d_pca leading modes.

    Components carry a deterministic sign: the largest-magnitude entry of
    each is positive.  Explained variances are sample variances (ddof 1).
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("inputs must be an (n, d_in) array or list of vectors")
    n, d = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 training inputs, got {n}")
    if not np.all(np.isfinite(x)):
        raise DataIntegrityError("training inputs contain non-finite values")
    if not 1 <= d_pca <= min(n - 1, d):
        raise ValueError(f"d_pca must be in [1, {min(n - 1, d)}], got {d_pca}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, float(np.abs(x).max())):
        raise DegenerateDataError("training inputs have zero variance")
    comp = vt[:d_pca].T
    signs = np.sign(comp[np.argmax(np.abs(comp), axis=0), np.arange(d_pca)])
    signs[signs == 0] = 1.0
    comp = comp * signs
    explained = s[:d_pca] ** 2 / (n - 1)
    return PcaBasis(mean=mean, components=comp, explained_variance=explained)


def project_scores(basis: PcaBasis, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != basis.mean.shape:
        raise ValueError(f"input length {x.shape} does not match basis ({basis.mean.shape})")
    return basis.components.T @ (x - basis.mean)


def cubic_features(s: np.ndarray) -> np.ndarray:
    """(s, s^2, s^3) elementwise, concatenated."""
    s = np.asarray(s, dtype=np.float64)
    return np.concatenate([s, s**2, s**3])


def fit_weights(features, outputs, ridge_lambda: float = 0.0) -> np.ndarray:
    """Solve min ||Z W^T - Y||^2 + lambda ||W||_F^2 for the (d_out, p) weights.

    lambda = 0 gives the minimum-Frobenius-norm least-squares solution.
    """
    z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    if z.shape[0] != y.shape[0]:
        raise ValueError(f"feature count {z.shape[0]} != output count {y.shape[0]}")
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be >= 0")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
        raise DataIntegrityError("model fitting inputs contain non-finite values")
    p = z.shape[1]
    if ridge_lambda > 0:
        z = np.vstack([z, np.sqrt(ridge_lambda) * np.eye(p)])
        y = np.vstack([y, np.zeros((p, y.shape[1]))])
    wt, *_ = np.linalg.lstsq(z, y, rcond=None)
    return wt.T


@dataclass(frozen=True)
class MotionModel:
    """Fitted mapping from tiny-center vectors to displacement fields."""

    basis: PcaBasis
    weights: np.ndarray = field(repr=False)  # (d_out, 3*d_pca)
    ridge_lambda: float
    grid: GridSpec
    control_spacing_vox: int
    n_train: int

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64))
        if w.shape != (self.d_out, 3 * self.basis.d_pca):
            raise ValueError(
                f"weights shape {w.shape} != ({self.d_out}, {3 * self.basis.d_pca})"
            )
        if not np.all(np.isfinite(w)):
            raise DataIntegrityError("model weights contain non-finite values")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def control_dims(self) -> tuple[int, int, int]:
        return tuple(control_count(n, self.control_spacing_vox) for n in self.grid.dims)

    @property
    def d_out(self) -> int:
        ca, cb, cc = self.control_dims
        return ca * cb * cc * 3


def _default_lambda(z: np.ndarray) -> float:
    # small trace-scaled ridge keeps degenerate jitter-free data solvable
    return 1e-6 * float(np.trace(z.T @ z)) / z.shape[1]


def train_motion_model(
    inputs,
    fields,
    d_pca: int = 10,
    ridge_lambda: float | None = None,
    control_spacing_vox: int = 8,
) -> MotionModel:
    """Fit the full chain on paired (center vector, displacement field) data."""
    x = np.asarray(inputs, dtype=np.float64)
    fields = list(fields)
    if x.ndim != 2 or x.shape[0] != len(fields):
        raise ValueError("inputs and fields must pair up one to one")
    grid = fields[0].grid
    for f in fields:
        if f.grid != grid:
            raise ValueError("all training fields must share one grid")
    basis = fit_pca(x, d_pca)
    z = np.stack([cubic_features(project_scores(basis, xi)) for xi in x])
    y = np.stack(
        [fit_bspline(grid, control_spacing_vox, f.vectors).coefficients.ravel() for f in fields]
    )
    lam = _default_lambda(z) if ridge_lambda is None else float(ridge_lambda)
    weights = fit_weights(z, y, lam)
    return MotionModel(
        basis=basis,
        weights=weights,
        ridge_lambda=lam,
        grid=grid,
        control_spacing_vox=control_spacing_vox,
        n_train=x.shape[0],
    )


def predict_from_vector(model: MotionModel, x: np.ndarray) -> DisplacementField:
    s = project_scores(model.basis, x)
    y = model.weights @ cubic_features(s)
    coeff = y.reshape(model.control_dims + (3,))
    return bspline_to_dense(BSplineField(model.grid, model.control_spacing_vox, coeff))


def predict_motion(model: MotionModel, tiny_center: ComplexVolume) -> DisplacementField:
    """Predict the displacement field for one tiny center patch."""
    if tiny_center.grid != model.grid:
        raise ValueError("center patch grid does not match the model grid")
    return predict_from_vector(model, vectorize_center(tiny_center))


def save_model(model: MotionModel, path, extra: dict | None = None) -> None:
    """Write the model as raw little-endian float64 plus a sidecar header."""
    path = Path(path)
    arrays = [
        model.basis.mean,
        model.basis.explained_variance,
        np.ascontiguousarray(model.basis.components),
        np.ascontiguousarray(model.weights),
    ]
    payload = b"".join(a.astype("<f8").tobytes() for a in arrays)
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "format": _MODEL_FORMAT,
        "version": _MODEL_VERSION,
        "d_in": model.basis.d_in,
        "d_pca": model.basis.d_pca,
        "d_out": model.d_out,
        "ridge_lambda": model.ridge_lambda,
        "n_train": model.n_train,
        "control_spacing_vox": model.control_spacing_vox,
        "grid_dims": list(model.grid.dims),
        "grid_spacing": list(model.grid.spacing),
        "payload_bytes": len(payload),
        "sha256": digest,
    }
    if extra:
        header.update(extra)
    path.write_bytes(payload)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_model(path) -> MotionModel:
    """Read a model written by save_model, validating checksum and sizes."""
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not path.exists() or not sidecar.exists():
        raise ArtifactError(f"model artifact missing: {path}")
    header = json.loads(sidecar.read_text())
    if header.get("format") != _MODEL_FORMAT or header.get("version") != _MODEL_VERSION:
        raise ArtifactError(f"unrecognized model format in {sidecar}")
    payload = path.read_bytes()
    if len(payload) != header["payload_bytes"]:
        raise ArtifactError(
            f"model payload is {len(payload)} bytes, header says {header['payload_bytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ChecksumError(f"model payload checksum mismatch for {path}")
    d_in, d_pca, d_out = header["d_in"], header["d_pca"], header["d_out"]
    counts = [d_in, d_pca, d_in * d_pca, d_out * 3 * d_pca]
    if len(payload) != 8 * sum(counts):
        raise ArtifactError("model payload size inconsistent with dimensions")
    flat = np.frombuffer(payload, dtype="<f8")
    pos = 0
    parts = []
    for c in counts:
        parts.append(np.array(flat[pos : pos + c]))
        pos += c
    mean, ev, comp, weights = parts
    basis = PcaBasis(
        mean=mean,
        components=comp.reshape(d_in, d_pca),
        explained_variance=ev,
    )
    grid = GridSpec(tuple(header["grid_dims"]), tuple(header["grid_spacing"]))
    return MotionModel(
        basis=basis,
        weights=weights.reshape(d_out, 3 * d_pca),
        ridge_lambda=header["ridge_lambda"],
        grid=grid,
        control_spacing_vox=header["control_spacing_vox"],
        n_train=header["n_train"],
    )
