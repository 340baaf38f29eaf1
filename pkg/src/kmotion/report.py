"""Run reports: structured JSON, delimited tables, figures, slice images.

Everything written here is deterministic for a fixed config and seed;
wall-clock timings live in a separate volatile file owned by the
pipeline, never in the report itself.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .metrics import ErrorStats, TestResult
from .volumes import RealVolume

__all__ = [
    "VariantResult",
    "RunReport",
    "report_to_dict",
    "write_report",
    "read_report",
    "write_table",
    "export_slices",
    "tv_by_slice",
    "figure_variant_bars",
    "figure_error_per_time",
]


@dataclass(frozen=True)
class VariantResult:
    """Image-level scores of one reconstruction variant."""

    name: str
    rmse_vs_reference: float
    tv: float
    image_sha256: str


@dataclass(frozen=True)
class RunReport:
    """Everything a finished run claims, minus wall-clock timing.

    prediction_error summarizes predicted-versus-truth displacement over
    the inference time points; registration_error does the same for the
    registered training fields.  tv_change is the per-slice paired test
    of shift-corrected against plain non-rigid total variation.
    """

    config_sha256: str
    seed: int
    profile: str
    grid_dims: tuple
    grid_spacing_mm: tuple
    timing: dict
    total_minutes: float
    stage_seeds: dict
    variants: tuple
    prediction_error: ErrorStats | None
    registration_error: ErrorStats | None
    tv_change: TestResult | None
    artifacts: dict


def _stats_dict(s: ErrorStats | None):
    if s is None:
        return None
    return {"mean_mm": s.mean_mm, "p95_mm": s.p95_mm, "max_mm": s.max_mm,
            "n_voxels": s.n_voxels}


def _test_dict(t: TestResult | None):
    if t is None:
        return None
    return {"t_statistic": t.t_statistic, "p_value": t.p_value,
            "p_value_greater": t.p_value_greater, "cohens_d": t.cohens_d, "n": t.n}


def report_to_dict(r: RunReport) -> dict:
    return {
        "config_sha256": r.config_sha256,
        "seed": r.seed,
        "profile": r.profile,
        "grid": {"dims": list(r.grid_dims), "spacing_mm": list(r.grid_spacing_mm)},
        "timing": r.timing,
        "total_minutes": r.total_minutes,
        "stage_seeds": r.stage_seeds,
        "variants": [
            {"name": v.name, "rmse_vs_reference": v.rmse_vs_reference, "tv": v.tv,
             "image_sha256": v.image_sha256}
            for v in r.variants
        ],
        "prediction_error": _stats_dict(r.prediction_error),
        "registration_error": _stats_dict(r.registration_error),
        "tv_change": _test_dict(r.tv_change),
        "artifacts": r.artifacts,
    }


def write_report(path, r: RunReport) -> None:
    Path(path).write_text(json.dumps(report_to_dict(r), indent=2, sort_keys=True) + "\n")


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


def write_table(path, rows, fieldnames) -> None:
    """Delimited table; floats keep full repr so re-runs diff cleanly."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v)
                        for k, v in row.items()})


def export_slices(v: RealVolume, out_dir, axis: int = 0, indices=None,
                  prefix: str = "slice") -> list:
    """Save 8-bit grayscale slices, windowed to [0, 99.5th percentile].

    The window comes from the whole volume so slices stay comparable;
    values at or above the window map to 255.  Returns the written paths.
    """
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1, or 2, got {axis}")
    n = v.grid.dims[axis]
    if indices is None:
        indices = (n // 2,)
    indices = [int(i) for i in indices]
    for i in indices:
        if not 0 <= i < n:
            raise ValueError(f"slice index {i} out of range for axis {axis} (size {n})")

    hi = float(np.percentile(v.data, 99.5))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in indices:
        plane = np.take(v.data, i, axis=axis)
        if hi > 0:
            img = np.clip(np.round(plane * (255.0 / hi)), 0, 255).astype(np.uint8)
        else:
            img = np.zeros(plane.shape, dtype=np.uint8)
        # last remaining volume axis points up in the image
        path = out_dir / f"{prefix}_ax{axis}_{i:03d}.png"
        Image.fromarray(img.T[::-1]).save(path)
        paths.append(path)
    return paths


def tv_by_slice(v: RealVolume, axis: int = 0) -> np.ndarray:
    """Mean 2-D isotropic forward-difference gradient magnitude per slice."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1, or 2, got {axis}")
    d = np.moveaxis(v.data, axis, 0)
    ga = np.zeros_like(d)
    gb = np.zeros_like(d)
    ga[:, :-1, :] = d[:, 1:, :] - d[:, :-1, :]
    gb[:, :, :-1] = d[:, :, 1:] - d[:, :, :-1]
    return np.sqrt(ga**2 + gb**2).mean(axis=(1, 2))


def figure_variant_bars(values: dict, ylabel: str, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.2, 3.0), dpi=140)
    names = list(values)
    ax.bar(range(len(names)), [values[k] for k in names], color="#4878a8")
    ax.set_xticks(range(len(names)), names, rotation=20)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def figure_error_per_time(times, mean_mm, path, label: str = "prediction") -> None:
    fig, ax = plt.subplots(figsize=(4.6, 3.0), dpi=140)
    ax.plot(list(times), list(mean_mm), lw=1.0, color="#a84848", label=label)
    ax.set_xlabel("time point")
    ax.set_ylabel("mean endpoint error [mm]")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
