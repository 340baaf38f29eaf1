"""On-disk artifact formats.

Every artifact is a little-endian binary payload next to a JSON sidecar
(`<name>.json`) holding the structured header: format tag, version,
dims, spacing, value kind, axis order, payload byte count, and a sha256
of the payload.  Volumes and fields are stored as 32-bit floats (complex
values as interleaved re/im pairs, field vectors as interleaved
3-vectors, axis order x-y-z, C layout).  Acquisition records keep their
measured lines at full complex double precision and embed the canonical
schedule text so a read can audit the schedule against a deterministic
rebuild.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ArtifactError, ChecksumError, DimensionError
from .phantom import AcquisitionRecord, PatchSample, TimePointSamples
from .registration import BSplineField
from .sampling import build_schedule, serialize_schedule
from .volumes import ComplexVolume, DisplacementField, GridSpec, RealVolume

__all__ = [
    "write_volume",
    "read_volume",
    "write_field_sequence",
    "read_field_sequence",
    "write_bspline_sequence",
    "read_bspline_sequence",
    "write_record",
    "read_record",
    "sha256_file",
]

_VOLUME_FORMAT = "kmotion-volume"
_SEQUENCE_FORMAT = "kmotion-field-sequence"
_BSPLINE_FORMAT = "kmotion-bspline-sequence"
_RECORD_FORMAT = "kmotion-record"
_VERSION = 1


def _sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def _write_payload(path, payload: bytes, meta: dict) -> None:
    path = Path(path)
    doc = dict(meta)
    doc["version"] = _VERSION
    doc["payload_bytes"] = len(payload)
    doc["sha256"] = hashlib.sha256(payload).hexdigest()
    path.write_bytes(payload)
    _sidecar_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_payload(path, expect_format: str) -> tuple[bytes, dict]:
    path = Path(path)
    sidecar = _sidecar_path(path)
    if not path.exists() or not sidecar.exists():
        missing = path if not path.exists() else sidecar
        raise ArtifactError(f"missing artifact: {missing}")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as e:
        raise ArtifactError(f"unreadable sidecar {sidecar}: {e}") from e
    if meta.get("format") != expect_format:
        raise ArtifactError(
            f"{path}: expected format {expect_format!r}, got {meta.get('format')!r}")
    if meta.get("version") != _VERSION:
        raise ArtifactError(f"{path}: unsupported version {meta.get('version')!r}")
    payload = path.read_bytes()
    if len(payload) != meta.get("payload_bytes"):
        raise ArtifactError(
            f"{path}: payload size mismatch, sidecar says {meta.get('payload_bytes')} "
            f"bytes but file has {len(payload)}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != meta.get("sha256"):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    return payload, meta


def _grid_from_meta(meta, path) -> GridSpec:
    try:
        return GridSpec(tuple(meta["dims"]), tuple(meta["spacing_mm"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactError(f"{path}: bad grid header: {e}") from e


def write_volume(path, v) -> None:
    """Persist a volume or displacement field, float32 payload + sidecar."""
    if isinstance(v, RealVolume):
        kind, dtype, arr = "real", "<f4", np.asarray(v.data, dtype="<f4")
    elif isinstance(v, ComplexVolume):
        kind, dtype, arr = "complex", "<c8", np.asarray(v.data, dtype="<c8")
    elif isinstance(v, DisplacementField):
        kind, dtype, arr = "field", "<f4", np.asarray(v.vectors, dtype="<f4")
    else:
        raise TypeError(f"cannot persist {type(v).__name__} as a volume")
    _write_payload(path, arr.tobytes(order="C"), {
        "format": _VOLUME_FORMAT,
        "value_kind": kind,
        "dtype": dtype,
        "dims": list(v.grid.dims),
        "spacing_mm": list(v.grid.spacing),
        "axis_order": "xyz",
    })


def read_volume(path):
    payload, meta = _read_payload(path, _VOLUME_FORMAT)
    grid = _grid_from_meta(meta, path)
    kind = meta.get("value_kind")
    shapes = {
        "real": (grid.dims, "<f4"),
        "complex": (grid.dims, "<c8"),
        "field": (grid.dims + (3,), "<f4"),
    }
    if kind not in shapes:
        raise ArtifactError(f"{path}: unknown value kind {kind!r}")
    shape, dtype = shapes[kind]
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise ArtifactError(
            f"{path}: payload size mismatch for {kind} {grid.dims}, expected "
            f"{expected} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if kind == "real":
        return RealVolume(grid, arr.astype(np.float64))
    if kind == "complex":
        return ComplexVolume(grid, arr.astype(np.complex128))
    return DisplacementField(grid, arr.astype(np.float64))


def write_field_sequence(path, fields, times) -> None:
    """Persist an ordered set of displacement fields, one per time point."""
    fields = list(fields)
    times = [int(t) for t in times]
    if len(fields) != len(times):
        raise ValueError(f"{len(fields)} fields for {len(times)} times")
    if not fields:
        raise ValueError("empty field sequence")
    if len(set(times)) != len(times):
        raise ValueError("duplicate time points in field sequence")
    grid = fields[0].grid
    for f in fields:
        if f.grid != grid:
            raise DimensionError("field sequence grids differ")
    payload = b"".join(np.asarray(f.vectors, dtype="<f4").tobytes(order="C")
                       for f in fields)
    _write_payload(path, payload, {
        "format": _SEQUENCE_FORMAT,
        "dtype": "<f4",
        "dims": list(grid.dims),
        "spacing_mm": list(grid.spacing),
        "axis_order": "xyz",
        "times": times,
    })


def read_field_sequence(path) -> tuple[tuple, list]:
    """Return (times, fields); times[i] is the 1-based time of fields[i]."""
    payload, meta = _read_payload(path, _SEQUENCE_FORMAT)
    grid = _grid_from_meta(meta, path)
    times = meta.get("times")
    if not isinstance(times, list) or not times:
        raise ArtifactError(f"{path}: missing times list")
    per = int(np.prod(grid.dims)) * 3 * 4
    if len(payload) != per * len(times):
        raise ArtifactError(
            f"{path}: payload size mismatch, expected {per * len(times)} bytes "
            f"for {len(times)} fields, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").reshape((len(times),) + grid.dims + (3,))
    fields = [DisplacementField(grid, arr[i].astype(np.float64))
              for i in range(len(times))]
    return tuple(int(t) for t in times), fields


def write_bspline_sequence(path, fields, times) -> None:
    """Persist per-time-point B-spline fields as control coefficients.

    Coefficients stay at full double precision; they are three orders of
    magnitude smaller than the dense fields they expand to.
    """
    fields = list(fields)
    times = [int(t) for t in times]
    if len(fields) != len(times):
        raise ValueError(f"{len(fields)} fields for {len(times)} times")
    if not fields:
        raise ValueError("empty field sequence")
    if len(set(times)) != len(times):
        raise ValueError("duplicate time points in field sequence")
    first = fields[0]
    for f in fields:
        if f.grid != first.grid or f.spacing_vox != first.spacing_vox:
            raise DimensionError("coefficient sequence grids differ")
    payload = b"".join(np.asarray(f.coefficients, dtype="<f8").tobytes(order="C")
                       for f in fields)
    _write_payload(path, payload, {
        "format": _BSPLINE_FORMAT,
        "dtype": "<f8",
        "dims": list(first.grid.dims),
        "spacing_mm": list(first.grid.spacing),
        "control_spacing_vox": first.spacing_vox,
        "control_dims": list(fields[0].coefficients.shape[:3]),
        "axis_order": "xyz",
        "times": times,
    })


def read_bspline_sequence(path) -> tuple[tuple, list]:
    """Return (times, BSplineField list) from a coefficient sequence."""
    payload, meta = _read_payload(path, _BSPLINE_FORMAT)
    grid = _grid_from_meta(meta, path)
    times = meta.get("times")
    if not isinstance(times, list) or not times:
        raise ArtifactError(f"{path}: missing times list")
    try:
        spacing_vox = int(meta["control_spacing_vox"])
        control_dims = tuple(int(n) for n in meta["control_dims"])
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactError(f"{path}: bad control grid header: {e}") from e
    per = int(np.prod(control_dims)) * 3 * 8
    if len(payload) != per * len(times):
        raise ArtifactError(
            f"{path}: payload size mismatch, expected {per * len(times)} bytes "
            f"for {len(times)} coefficient sets, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f8").reshape(
        (len(times),) + control_dims + (3,))
    try:
        fields = [BSplineField(grid, spacing_vox, arr[i].astype(np.float64))
                  for i in range(len(times))]
    except DimensionError as e:
        raise ArtifactError(f"{path}: control grid inconsistent with image grid: {e}") from e
    return tuple(int(t) for t in times), fields


def write_record(path, record: AcquisitionRecord) -> None:
    """Persist a simulated scan: schedule text plus every measured line."""
    chunks = []
    for tp in record.time_points:
        for s in tp.samples:
            chunks.append(np.asarray(s.lines, dtype="<c16").tobytes(order="C"))
    _write_payload(path, b"".join(chunks), {
        "format": _RECORD_FORMAT,
        "dtype": "<c16",
        "dims": list(record.grid.dims),
        "spacing_mm": list(record.grid.spacing),
        "schedule": serialize_schedule(record.schedule),
    })


def read_record(path) -> AcquisitionRecord:
    """Rebuild the scan from disk.

    The schedule is reconstructed from its parameters and audited against
    the embedded canonical text, so a record can never silently pair
    lines with a different acquisition plan.
    """
    payload, meta = _read_payload(path, _RECORD_FORMAT)
    grid = _grid_from_meta(meta, path)
    text = meta.get("schedule")
    if not isinstance(text, str):
        raise ArtifactError(f"{path}: missing schedule header")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{path}: unreadable schedule header: {e}") from e

    try:
        schedule = build_schedule(
            doc["mode"], doc["T"], doc["tr_ms"], grid, doc["seed"],
            training_length=doc["training_length"] or 100,
        )
    except (KeyError, ValueError) as e:
        raise ArtifactError(f"{path}: cannot rebuild schedule: {e}") from e
    if serialize_schedule(schedule) != text:
        raise ArtifactError(
            f"{path}: schedule audit failed, rebuilt plan differs from header")

    nx = grid.dims[0]
    item = np.dtype("<c16").itemsize
    total = sum(len(sp.patch.points) for e in schedule.entries for sp in e.patches)
    if len(payload) != total * nx * item:
        raise ArtifactError(
            f"{path}: payload size mismatch, schedule needs {total * nx * item} "
            f"bytes, got {len(payload)}")

    offset = 0
    time_points = []
    for entry in schedule.entries:
        samples = []
        for sp in entry.patches:
            n = len(sp.patch.points) * nx * item
            lines = np.frombuffer(payload[offset:offset + n], dtype="<c16")
            lines = lines.reshape(len(sp.patch.points), nx).astype(np.complex128)
            offset += n
            samples.append(PatchSample(sp.patch, sp.tau, lines))
        time_points.append(TimePointSamples(entry.t, tuple(samples)))
    return AcquisitionRecord(schedule=schedule, grid=grid,
                             time_points=tuple(time_points))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
