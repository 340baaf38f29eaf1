"""Pipeline stages: simulate, train, reconstruct, evaluate.

Each stage reads its inputs from the run directory and writes its
outputs back there, so stages can be re-run independently; identical
config and seed reproduce every artifact byte for byte.  Wall-clock
timings go to a separate runtime.json that deliberately stays outside
the determinism contract.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .artifacts import (
    read_bspline_sequence,
    read_record,
    read_volume,
    sha256_file,
    write_bspline_sequence,
    write_record,
    write_volume,
)
from .config import PipelineConfig, config_sha256, write_config
from .errors import ArtifactError, DependencyError
from .metrics import ErrorStats, one_sample_ttest, rmse, total_variation
from .motion_model import (
    load_model,
    predict_from_vector,
    save_model,
    train_motion_model,
    vectorize_lines,
)
from .phantom import (
    MotionSpec,
    PhantomSpec,
    acquire,
    default_bodies,
    motion_trajectory,
    phantom_reference,
)
from .reconstruction import ReconOptions, accumulate, reconstruct_image
from .registration import RegParams, bspline_to_dense, fit_bspline, register, zero_filled_recon
from .report import (
    RunReport,
    VariantResult,
    export_slices,
    figure_error_per_time,
    figure_variant_bars,
    tv_by_slice,
    write_report,
    write_table,
)
from .rng import stream
from .sampling import (
    CENTER_NARROW,
    PATCH_RADII,
    PERIPHERAL,
    PhaseEncodePoint,
    build_schedule,
    make_patch,
    patch_mask,
    point_indices,
    schedule_timing,
)
from .volumes import ComplexVolume, DisplacementField, GridSpec

__all__ = ["RunPaths", "stage_simulate", "stage_train", "stage_reconstruct",
           "stage_evaluate", "run_all"]

_SUPPORT_REL = 0.05


class RunPaths:
    """File layout of one run directory."""

    def __init__(self, out):
        self.out = Path(out)
        self.config = self.out / "config.yaml"
        self.record = self.out / "record.bin"
        self.reference = self.out / "reference.vol"
        self.model = self.out / "model.bin"
        self.training_fields = self.out / "fields_training.bin"
        self.registered_fields = self.out / "fields_registered.bin"
        self.predicted_fields = self.out / "fields_predicted.bin"
        self.report = self.out / "report.json"
        self.runtime = self.out / "runtime.json"
        self.figures = self.out / "figures"
        self.slices = self.out / "slices"

    def image(self, variant: str) -> Path:
        return self.out / f"image_{variant}.vol"

    def kspace(self, variant: str) -> Path:
        return self.out / f"kspace_{variant}.vol"


def _grid(cfg: PipelineConfig) -> GridSpec:
    return GridSpec(cfg.grid_dims, cfg.grid_spacing_mm)


def stage_seeds(cfg: PipelineConfig) -> dict:
    """Named integer sub-seeds expanded from the root seed."""
    return {name: int(stream(cfg.seed, "stage", name).integers(0, 2**31 - 1))
            for name in ("schedule", "motion")}


def _motion_spec(cfg: PipelineConfig) -> MotionSpec:
    seeds = stage_seeds(cfg)
    return MotionSpec(
        amplitude_vox=cfg.motion.amplitude_vox,
        period_tp=cfg.motion.period_tp,
        drift_vox_per_tp=cfg.motion.drift_vox_per_tp,
        amplitude_jitter=cfg.motion.amplitude_jitter,
        reference_tau=float(cfg.recon.reference_time),
        seed=seeds["motion"],
    )


def _phantom_spec(cfg: PipelineConfig) -> PhantomSpec:
    grid = _grid(cfg)
    return PhantomSpec(grid, default_bodies(grid), noise_sigma=cfg.phantom.noise_sigma)


def _reg_params(cfg: PipelineConfig) -> RegParams:
    r = cfg.registration
    return RegParams(
        control_point_spacing_vox=r.control_point_spacing_vox,
        levels=r.levels,
        iterations=r.iterations,
        final_level_iterations=r.final_level_iterations,
        step_size=r.step_size,
        tv_weight=r.tv_weight,
        metric=r.metric,
    )


def truth_field(cfg: PipelineConfig, t: float) -> DisplacementField:
    """Ground-truth alignment field at time point t, straight from the
    closed-form motion; no artifact needed beyond the config."""
    return motion_trajectory(_motion_spec(cfg), float(t), _grid(cfg)).field


def _record_runtime(paths: RunPaths, stage: str, seconds: float) -> None:
    doc = {}
    if paths.runtime.exists():
        try:
            doc = json.loads(paths.runtime.read_text())
        except json.JSONDecodeError:
            doc = {}
    doc.setdefault("stages", {})[stage] = seconds
    doc["total"] = float(sum(doc["stages"].values()))
    paths.runtime.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _timed(paths: RunPaths, stage: str):
    class _Timer:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc_type is None:
                _record_runtime(paths, stage, time.perf_counter() - self.t0)

    return _Timer()


def _load_record(cfg: PipelineConfig, paths: RunPaths):
    if not paths.record.exists():
        raise DependencyError(
            f"missing {paths.record.name}; run the simulate stage first")
    record = read_record(paths.record)
    if record.grid != _grid(cfg):
        raise ArtifactError(
            f"{paths.record.name} was simulated on grid {record.grid.dims}, "
            f"config wants {cfg.grid_dims}")
    return record


def _center_sample(record, t: int):
    for s in record.time_points[t - 1].samples:
        if s.patch.kind != PERIPHERAL:
            return s
    raise ArtifactError(f"no center patch at time point {t}")


def _navigator(record, t: int):
    """Zero-filled low-resolution image from the center patch at t."""
    s = _center_sample(record, t)
    grid = record.grid
    data = np.zeros(grid.dims, dtype=np.complex128)
    iy, iz = point_indices(s.patch.points, grid)
    data[:, iy, iz] = s.lines.T
    return zero_filled_recon(ComplexVolume(grid, data), patch_mask(s.patch, grid))


def _narrow_vector(record, t: int) -> np.ndarray:
    """Model input vector from the narrow center lines at t.

    Wider center patches contain the narrow disc, so training and
    inference always see the same nine lines regardless of patch kind.
    """
    s = _center_sample(record, t)
    grid = record.grid
    narrow = make_patch(CENTER_NARROW, PhaseEncodePoint(0, 0),
                        PATCH_RADII[CENTER_NARROW], grid)
    if s.patch.kind == CENTER_NARROW:
        lines = s.lines
    else:
        row = {pt: i for i, pt in enumerate(s.patch.points)}
        try:
            lines = s.lines[[row[pt] for pt in narrow.points]]
        except KeyError as e:
            raise ArtifactError(
                f"center patch at t={t} does not cover the narrow disc") from e
    return vectorize_lines(lines)


def stage_simulate(cfg: PipelineConfig, paths: RunPaths) -> None:
    """Build the schedule, acquire the phantom scan, persist the record."""
    paths.out.mkdir(parents=True, exist_ok=True)
    with _timed(paths, "simulate"):
        write_config(cfg, paths.config)
        seeds = stage_seeds(cfg)
        grid = _grid(cfg)
        schedule = build_schedule(
            cfg.schedule.mode, cfg.schedule.T, cfg.schedule.tr_ms, grid,
            seeds["schedule"], training_length=cfg.schedule.training_length)
        record = acquire(_phantom_spec(cfg), _motion_spec(cfg), schedule)
        write_record(paths.record, record)
        write_volume(paths.reference, phantom_reference(_phantom_spec(cfg)))


def stage_train(cfg: PipelineConfig, paths: RunPaths) -> None:
    """Register the training navigators and fit the motion model."""
    with _timed(paths, "train"):
        record = _load_record(cfg, paths)
        train_ts = cfg.training_times()
        params = _reg_params(cfg)
        spacing = cfg.registration.control_point_spacing_vox
        grid = record.grid

        fixed = _navigator(record, cfg.recon.reference_time)
        fields = []
        coeffs = []
        for t in train_ts:
            if t == cfg.recon.reference_time:
                dense = DisplacementField.zero(grid)
            else:
                dense = register(fixed, _navigator(record, t), params)
            fields.append(dense)
            coeffs.append(fit_bspline(grid, spacing, dense.vectors))
        write_bspline_sequence(paths.training_fields, coeffs, train_ts)

        inputs = np.stack([_narrow_vector(record, t) for t in train_ts])
        model = train_motion_model(
            inputs, fields, d_pca=cfg.model.d_pca,
            ridge_lambda=cfg.model.ridge_lambda, control_spacing_vox=spacing)
        save_model(model, paths.model,
                   extra={"seed": cfg.seed, "training_times": list(train_ts)})


def _registered_fields(cfg, paths, record) -> list:
    """Dense per-time-point fields from navigator registration, cached on
    disk as control coefficients."""
    T = cfg.schedule.T
    if paths.registered_fields.exists():
        times, coeffs = read_bspline_sequence(paths.registered_fields)
        if times != tuple(range(1, T + 1)):
            raise ArtifactError(
                f"{paths.registered_fields.name} covers times {times[:3]}..., "
                f"expected 1..{T}")
        return [bspline_to_dense(c) for c in coeffs]

    params = _reg_params(cfg)
    spacing = cfg.registration.control_point_spacing_vox
    grid = record.grid
    fixed = _navigator(record, cfg.recon.reference_time)
    fields = []
    coeffs = []
    for t in range(1, T + 1):
        if t == cfg.recon.reference_time:
            dense = DisplacementField.zero(grid)
        else:
            dense = register(fixed, _navigator(record, t), params)
        fields.append(dense)
        coeffs.append(fit_bspline(grid, spacing, dense.vectors))
    write_bspline_sequence(paths.registered_fields, coeffs, range(1, T + 1))
    return fields


def _accelerated_fields(cfg, paths, record) -> list:
    """Training fields from registration, inference fields from the model."""
    if not paths.model.exists():
        raise DependencyError(
            f"missing {paths.model.name}; run the train stage first")
    if not paths.training_fields.exists():
        raise DependencyError(
            f"missing {paths.training_fields.name}; run the train stage first")
    model = load_model(paths.model)
    train_times, train_coeffs = read_bspline_sequence(paths.training_fields)
    spacing = cfg.registration.control_point_spacing_vox
    grid = record.grid

    by_time = {}
    for t, c in zip(train_times, train_coeffs):
        by_time[t] = bspline_to_dense(c)
    pred_ts = cfg.inference_times()
    pred_coeffs = []
    for t in pred_ts:
        dense = predict_from_vector(model, _narrow_vector(record, t))
        by_time[t] = dense
        pred_coeffs.append(fit_bspline(grid, spacing, dense.vectors))
    if pred_ts:
        write_bspline_sequence(paths.predicted_fields, pred_coeffs, pred_ts)

    missing = [t for t in range(1, cfg.schedule.T + 1) if t not in by_time]
    if missing:
        raise ArtifactError(
            f"no field for time points {missing[:5]}; training artifact does "
            f"not match this config's training split")
    return [by_time[t] for t in range(1, cfg.schedule.T + 1)]


def stage_reconstruct(cfg: PipelineConfig, paths: RunPaths, variant: str) -> None:
    """Accumulate the motion-corrected image for one variant."""
    with _timed(paths, f"reconstruct.{variant}"):
        record = _load_record(cfg, paths)
        grid = record.grid
        T = cfg.schedule.T

        if variant == "static":
            fields = [DisplacementField.zero(grid)] * T
        elif variant in ("nonrigid", "shift"):
            fields = _registered_fields(cfg, paths, record)
        elif variant == "accelerated":
            fields = _accelerated_fields(cfg, paths, record)
        else:
            raise ValueError(f"unknown variant {variant!r}")

        opts = ReconOptions(
            reference_time=cfg.recon.reference_time,
            shift_correction=variant in ("shift", "accelerated"),
            delta=cfg.recon.delta,
            deterministic_reduction=cfg.recon.deterministic_reduction,
        )
        kbar, _ = accumulate(record, fields, opts)
        write_volume(paths.kspace(variant), kbar)
        write_volume(paths.image(variant), reconstruct_image(kbar))


def _pooled_stats(cfg, fields_by_time: dict, support: np.ndarray) -> tuple:
    """Endpoint-error stats in mm pooled over time points, plus the
    per-time mean trace for plotting."""
    spacing = np.asarray(cfg.grid_spacing_mm)
    chunks = []
    trace = []
    for t in sorted(fields_by_time):
        est = fields_by_time[t]
        tru = truth_field(cfg, t)
        diff = (est.vectors - tru.vectors) * spacing
        err = np.sqrt(np.sum(diff**2, axis=-1))[support]
        chunks.append(err)
        trace.append((t, float(err.mean())))
    pooled = np.concatenate(chunks)
    stats = ErrorStats(
        mean_mm=float(pooled.mean()),
        p95_mm=float(np.percentile(pooled, 95)),
        max_mm=float(pooled.max()),
        n_voxels=int(pooled.size),
    )
    return stats, trace


def stage_evaluate(cfg: PipelineConfig, paths: RunPaths, profile: str = "") -> None:
    """Recompute every reported number from the persisted artifacts."""
    with _timed(paths, "evaluate"):
        record = _load_record(cfg, paths)
        if not paths.reference.exists():
            raise DependencyError(
                f"missing {paths.reference.name}; run the simulate stage first")
        reference = read_volume(paths.reference)
        support = reference.data > _SUPPORT_REL * float(reference.data.max())

        variants = []
        tv_values = {}
        rmse_values = {}
        images = {}
        for name in cfg.report.variants:
            path = paths.image(name)
            if not path.exists():
                raise DependencyError(
                    f"missing {path.name}; run the reconstruct stage for "
                    f"variant {name!r} first")
            img = read_volume(path)
            images[name] = img
            rmse_values[name] = rmse(img, reference)
            tv_values[name] = total_variation(img)
            variants.append(VariantResult(
                name=name, rmse_vs_reference=rmse_values[name],
                tv=tv_values[name], image_sha256=sha256_file(path)))

        prediction_error = None
        prediction_trace = None
        if paths.predicted_fields.exists():
            times, coeffs = read_bspline_sequence(paths.predicted_fields)
            by_time = {t: bspline_to_dense(c) for t, c in zip(times, coeffs)}
            prediction_error, prediction_trace = _pooled_stats(cfg, by_time, support)

        registration_error = None
        if paths.training_fields.exists():
            times, coeffs = read_bspline_sequence(paths.training_fields)
            by_time = {t: bspline_to_dense(c) for t, c in zip(times, coeffs)}
            registration_error, _ = _pooled_stats(cfg, by_time, support)

        tv_change = None
        if "shift" in images and "nonrigid" in images:
            axis = cfg.report.slice_axis
            diffs = tv_by_slice(images["nonrigid"], axis) - tv_by_slice(
                images["shift"], axis)
            tv_change = one_sample_ttest(diffs, 0.0)

        timing = schedule_timing(record.schedule)
        timing_doc = {
            "patch_ms": {k: str(v) for k, v in timing.patch_ms.items()},
            "phase_seconds": {k: str(v) for k, v in timing.phase_seconds.items()},
            "phase_seconds_float": timing.phase_seconds_float(),
        }

        artifact_files = [paths.config, paths.record, paths.reference,
                          paths.model, paths.training_fields,
                          paths.registered_fields, paths.predicted_fields]
        artifact_files += [paths.image(n) for n in cfg.report.variants]
        artifact_files += [paths.kspace(n) for n in cfg.report.variants]
        artifacts = {p.name: sha256_file(p) for p in artifact_files if p.exists()}

        run_report = RunReport(
            config_sha256=config_sha256(cfg),
            seed=cfg.seed,
            profile=profile,
            grid_dims=cfg.grid_dims,
            grid_spacing_mm=cfg.grid_spacing_mm,
            timing=timing_doc,
            total_minutes=timing.total_minutes(),
            stage_seeds=stage_seeds(cfg),
            variants=tuple(variants),
            prediction_error=prediction_error,
            registration_error=registration_error,
            tv_change=tv_change,
            artifacts=artifacts,
        )
        write_report(paths.report, run_report)

        write_table(paths.out / "variants.csv",
                    [{"variant": v.name, "rmse_vs_reference": v.rmse_vs_reference,
                      "tv": v.tv} for v in variants],
                    ["variant", "rmse_vs_reference", "tv"])
        stat_rows = []
        for label, stats in (("prediction", prediction_error),
                             ("registration", registration_error)):
            if stats is not None:
                stat_rows.append({"set": label, "mean_mm": stats.mean_mm,
                                  "p95_mm": stats.p95_mm, "max_mm": stats.max_mm,
                                  "n_voxels": stats.n_voxels})
        if stat_rows:
            write_table(paths.out / "error_stats.csv", stat_rows,
                        ["set", "mean_mm", "p95_mm", "max_mm", "n_voxels"])
        write_table(paths.out / "timing.csv",
                    [{"phase": k, "seconds": v}
                     for k, v in timing.phase_seconds_float().items()],
                    ["phase", "seconds"])

        if cfg.report.figures:
            paths.figures.mkdir(parents=True, exist_ok=True)
            figure_variant_bars(rmse_values, "RMSE vs reference",
                                paths.figures / "rmse.png")
            figure_variant_bars(tv_values, "total variation",
                                paths.figures / "tv.png")
            if prediction_trace:
                figure_error_per_time([t for t, _ in prediction_trace],
                                      [e for _, e in prediction_trace],
                                      paths.figures / "prediction_error.png")

        axis = cfg.report.slice_axis
        indices = cfg.report.slice_indices
        export_slices(reference, paths.slices, axis, indices, prefix="reference")
        for name, img in images.items():
            export_slices(img, paths.slices, axis, indices, prefix=name)


def run_all(cfg: PipelineConfig, paths: RunPaths, profile: str = "") -> None:
    """simulate, train when needed, every requested variant, evaluate."""
    stage_simulate(cfg, paths)
    if cfg.needs_model():
        stage_train(cfg, paths)
    for variant in cfg.report.variants:
        stage_reconstruct(cfg, paths, variant)
    stage_evaluate(cfg, paths, profile)
