"""Pipeline configuration: typed sections, profiles, strict YAML parsing.

A config is read in three layers: built-in defaults, an optional named
profile overlay, then the user's YAML file.  Unknown keys anywhere are
rejected with the offending dotted path, and every range check runs at
read time so a bad value never reaches a pipeline stage.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import yaml

from .errors import ConfigError

__all__ = [
    "PipelineConfig",
    "PROFILES",
    "VARIANTS",
    "default_config",
    "read_config",
    "write_config",
    "config_to_dict",
    "config_sha256",
]

VARIANTS = ("static", "nonrigid", "shift", "accelerated")


@dataclass(frozen=True)
class ScheduleConfig:
    mode: str = "standard"
    T: int = 1500
    tr_ms: str = "2.5"
    training_length: int = 100
    simulate_accelerated_from_standard: bool = False


@dataclass(frozen=True)
class PhantomConfig:
    noise_sigma: float = 0.005


@dataclass(frozen=True)
class MotionConfig:
    amplitude_vox: tuple = (0.6, 3.5, 0.9)
    period_tp: float = 14.7
    drift_vox_per_tp: tuple = (0.0, 0.0, 0.0)
    amplitude_jitter: float = 0.15


@dataclass(frozen=True)
class RegistrationConfig:
    control_point_spacing_vox: int = 8
    levels: int = 3
    iterations: int = 150
    final_level_iterations: int | None = 30
    step_size: float = 0.4
    tv_weight: float = 3e-3
    metric: str = "ssd"


@dataclass(frozen=True)
class ModelConfig:
    d_pca: int = 10
    ridge_lambda: float | None = None
    training_split: str = "leading"


@dataclass(frozen=True)
class ReconConfig:
    delta: float = 0.5
    reference_time: int = 1
    deterministic_reduction: bool = True


@dataclass(frozen=True)
class ReportConfig:
    variants: tuple = ("static", "nonrigid", "shift")
    slice_axis: int = 0
    slice_indices: tuple | None = None
    figures: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    grid_dims: tuple = (128, 128, 88)
    grid_spacing_mm: tuple = (3.125, 3.125, 3.125)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def needs_model(self) -> bool:
        return "accelerated" in self.report.variants

    def training_times(self) -> tuple:
        """1-based time points whose center data trains the motion model."""
        L = self.schedule.training_length
        if self.schedule.mode == "accelerated":
            return tuple(range(1, L + 1))
        if self.model.training_split == "leading":
            return tuple(range(1, L + 1))
        lead = (L + 1) // 2
        T = self.schedule.T
        return tuple(range(1, lead + 1)) + tuple(range(T - (L - lead) + 1, T + 1))

    def inference_times(self) -> tuple:
        known = set(self.training_times())
        return tuple(t for t in range(1, self.schedule.T + 1) if t not in known)


# Profile overlays applied between the defaults and the user file.  The
# desk profile is sized so a full run finishes on a laptop; paper keeps
# the full-scale defaults.
PROFILES = {
    "paper": {},
    "desk": {
        "grid": {"dims": [64, 64, 44], "spacing_mm": [6.25, 6.25, 6.25]},
        "schedule": {
            "T": 150,
            "training_length": 20,
            "simulate_accelerated_from_standard": True,
        },
        "motion": {"period_tp": 6.7},
        "model": {"d_pca": 6, "training_split": "leading_last"},
        "report": {"variants": ["static", "nonrigid", "shift", "accelerated"]},
    },
}


def _fail(path, message):
    raise ConfigError(f"{path}: {message}")


def _as_int(value, path, lo=None, hi=None):
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(path, f"expected an integer, got {value!r}")
    if lo is not None and value < lo:
        _fail(path, f"must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        _fail(path, f"must be <= {hi}, got {value}")
    return value


def _as_float(value, path, lo=None, hi=None, lo_open=False, hi_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(path, f"expected a number, got {value!r}")
    v = float(value)
    if v != v:
        _fail(path, "must not be NaN")
    if lo is not None and (v < lo or (lo_open and v == lo)):
        _fail(path, f"must be {'>' if lo_open else '>='} {lo}, got {value}")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        _fail(path, f"must be {'<' if hi_open else '<='} {hi}, got {value}")
    return v


def _as_bool(value, path):
    if not isinstance(value, bool):
        _fail(path, f"expected true/false, got {value!r}")
    return value


def _as_choice(value, path, options):
    if value not in options:
        _fail(path, f"expected one of {sorted(options)}, got {value!r}")
    return value


def _as_triple(value, path, lo=None, lo_open=False):
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        _fail(path, f"expected a list of 3 numbers, got {value!r}")
    return tuple(
        _as_float(v, f"{path}[{i}]", lo=lo, lo_open=lo_open) for i, v in enumerate(value)
    )


def _as_tr_ms(value, path):
    # kept as an exact decimal string so downstream timing stays rational
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        _fail(path, f"expected a positive number, got {value!r}")
    text = str(value)
    try:
        tr = Fraction(text)
    except (ValueError, ZeroDivisionError):
        _fail(path, f"not a decimal number: {value!r}")
    if tr <= 0:
        _fail(path, f"must be positive, got {value!r}")
    return text


def _section(raw, path, fields):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        _fail(path, f"expected a mapping, got {type(raw).__name__}")
    for key in raw:
        if key not in fields:
            _fail(f"{path}.{key}", "unknown key")
    return {name: parse(raw[name]) if name in raw else None for name, parse in fields.items()}


def _merge(base: dict, overlay: dict, path="config") -> dict:
    out = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, f"{path}.{key}")
        else:
            out[key] = value
    return out


def _build(raw: dict) -> PipelineConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root: expected a mapping, got {type(raw).__name__}")
    known = {"seed", "grid", "schedule", "phantom", "motion", "registration",
             "model", "recon", "report"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"config.{key}: unknown key")

    seed = _as_int(raw.get("seed", 0), "config.seed", lo=0)

    g = _section(raw.get("grid"), "config.grid", {
        "dims": lambda v: _grid_dims(v, "config.grid.dims"),
        "spacing_mm": lambda v: _as_triple(v, "config.grid.spacing_mm", lo=0.0, lo_open=True),
    })

    s = _section(raw.get("schedule"), "config.schedule", {
        "mode": lambda v: _as_choice(v, "config.schedule.mode", ("standard", "accelerated")),
        "T": lambda v: _as_int(v, "config.schedule.T", lo=1),
        "tr_ms": lambda v: _as_tr_ms(v, "config.schedule.tr_ms"),
        "training_length": lambda v: _as_int(v, "config.schedule.training_length", lo=2),
        "simulate_accelerated_from_standard": lambda v: _as_bool(
            v, "config.schedule.simulate_accelerated_from_standard"),
    })

    p = _section(raw.get("phantom"), "config.phantom", {
        "noise_sigma": lambda v: _as_float(v, "config.phantom.noise_sigma", lo=0.0),
    })

    m = _section(raw.get("motion"), "config.motion", {
        "amplitude_vox": lambda v: _as_triple(v, "config.motion.amplitude_vox"),
        "period_tp": lambda v: _as_float(v, "config.motion.period_tp", lo=2.0, lo_open=True),
        "drift_vox_per_tp": lambda v: _as_triple(v, "config.motion.drift_vox_per_tp"),
        "amplitude_jitter": lambda v: _as_float(
            v, "config.motion.amplitude_jitter", lo=0.0, hi=1.0, hi_open=True),
    })

    r = _section(raw.get("registration"), "config.registration", {
        "control_point_spacing_vox": lambda v: _as_int(
            v, "config.registration.control_point_spacing_vox", lo=2),
        "levels": lambda v: _as_int(v, "config.registration.levels", lo=1, hi=6),
        "iterations": lambda v: _as_int(v, "config.registration.iterations", lo=1),
        "final_level_iterations": lambda v: None if v is None else _as_int(
            v, "config.registration.final_level_iterations", lo=1),
        "step_size": lambda v: _as_float(
            v, "config.registration.step_size", lo=0.0, lo_open=True),
        "tv_weight": lambda v: _as_float(v, "config.registration.tv_weight", lo=0.0),
        "metric": lambda v: _as_choice(v, "config.registration.metric", ("ssd", "ncc")),
    })

    mo = _section(raw.get("model"), "config.model", {
        "d_pca": lambda v: _as_int(v, "config.model.d_pca", lo=1),
        "ridge_lambda": lambda v: None if v is None else _as_float(
            v, "config.model.ridge_lambda", lo=0.0),
        "training_split": lambda v: _as_choice(
            v, "config.model.training_split", ("leading", "leading_last")),
    })

    rc = _section(raw.get("recon"), "config.recon", {
        "delta": lambda v: _as_float(v, "config.recon.delta", lo=0.0),
        "reference_time": lambda v: _as_int(v, "config.recon.reference_time", lo=1),
        "deterministic_reduction": lambda v: _as_bool(
            v, "config.recon.deterministic_reduction"),
    })

    rp = _section(raw.get("report"), "config.report", {
        "variants": lambda v: _variants(v, "config.report.variants"),
        "slice_axis": lambda v: _as_int(v, "config.report.slice_axis", lo=0, hi=2),
        "slice_indices": lambda v: None if v is None else tuple(
            _as_int(i, f"config.report.slice_indices[{j}]", lo=0)
            for j, i in enumerate(v if isinstance(v, (list, tuple)) else
                                  _fail("config.report.slice_indices", "expected a list"))),
        "figures": lambda v: _as_bool(v, "config.report.figures"),
    })

    def fill(parsed, cls):
        return cls(**{k: v for k, v in parsed.items() if v is not None})

    cfg = PipelineConfig(
        seed=seed,
        grid_dims=g["dims"] if g["dims"] is not None else PipelineConfig.grid_dims,
        grid_spacing_mm=(g["spacing_mm"] if g["spacing_mm"] is not None
                         else PipelineConfig.grid_spacing_mm),
        schedule=fill(s, ScheduleConfig),
        phantom=fill(p, PhantomConfig),
        motion=fill(m, MotionConfig),
        registration=fill(r, RegistrationConfig),
        model=fill(mo, ModelConfig),
        recon=fill(rc, ReconConfig),
        report=fill(rp, ReportConfig),
    )
    # explicit null is meaningful for these two, so fill() must not drop it
    if "ridge_lambda" in (raw.get("model") or {}):
        cfg = _replace_model(cfg, mo["ridge_lambda"])
    if "final_level_iterations" in (raw.get("registration") or {}):
        cfg = _replace_final_iters(cfg, r["final_level_iterations"])
    if "slice_indices" in (raw.get("report") or {}):
        cfg = _replace_slices(cfg, rp["slice_indices"])
    _validate_cross(cfg)
    return cfg


def _replace_model(cfg, value):
    from dataclasses import replace
    return replace(cfg, model=replace(cfg.model, ridge_lambda=value))


def _replace_final_iters(cfg, value):
    from dataclasses import replace
    return replace(cfg, registration=replace(cfg.registration, final_level_iterations=value))


def _replace_slices(cfg, value):
    from dataclasses import replace
    return replace(cfg, report=replace(cfg.report, slice_indices=value))


def _grid_dims(value, path):
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        _fail(path, f"expected a list of 3 integers, got {value!r}")
    dims = tuple(_as_int(v, f"{path}[{i}]", lo=4) for i, v in enumerate(value))
    for i, n in enumerate(dims):
        if n % 2:
            _fail(f"{path}[{i}]", f"must be even, got {n}")
    return dims


def _variants(value, path):
    if not isinstance(value, (list, tuple)) or not value:
        _fail(path, f"expected a non-empty list, got {value!r}")
    out = []
    for i, v in enumerate(value):
        _as_choice(v, f"{path}[{i}]", VARIANTS)
        if v in out:
            _fail(f"{path}[{i}]", f"duplicate variant {v!r}")
        out.append(v)
    return tuple(out)


def _validate_cross(cfg: PipelineConfig):
    s = cfg.schedule
    if s.mode == "accelerated":
        if s.T < s.training_length:
            raise ConfigError(
                f"config.schedule.T: accelerated mode needs T >= training_length "
                f"({s.training_length}), got {s.T}")
        if s.simulate_accelerated_from_standard:
            raise ConfigError(
                "config.schedule.simulate_accelerated_from_standard: "
                "only meaningful in standard mode")
        if cfg.model.training_split != "leading":
            raise ConfigError(
                "config.model.training_split: accelerated mode trains on its "
                "contiguous leading phase; use 'leading'")
    if s.simulate_accelerated_from_standard and s.T < s.training_length + 1:
        raise ConfigError(
            f"config.schedule.T: simulated acceleration needs T > training_length "
            f"({s.training_length}), got {s.T}")

    needs_center = 6 if s.mode == "standard" else 10
    half = (min(cfg.grid_dims[1], cfg.grid_dims[2]) // 2) - 1
    if half < needs_center:
        raise ConfigError(
            f"config.grid.dims: phase-encode extent too small for the "
            f"{s.mode} center patch (needs half-width > {needs_center})")

    if "accelerated" in cfg.report.variants:
        if s.mode == "standard" and not s.simulate_accelerated_from_standard:
            raise ConfigError(
                "config.report.variants: 'accelerated' needs accelerated mode or "
                "simulate_accelerated_from_standard")
    if s.mode == "accelerated":
        bad = [v for v in cfg.report.variants if v in ("nonrigid", "shift")]
        if bad:
            raise ConfigError(
                f"config.report.variants: {bad[0]!r} needs per-time-point center "
                f"data; use standard mode")

    if cfg.model.d_pca > max(1, cfg.schedule.training_length - 1):
        raise ConfigError(
            f"config.model.d_pca: must be < training_length "
            f"({cfg.schedule.training_length}), got {cfg.model.d_pca}")
    if cfg.recon.reference_time > s.T:
        raise ConfigError(
            f"config.recon.reference_time: beyond last time point {s.T}")
    if cfg.needs_model() and cfg.recon.reference_time not in cfg.training_times():
        raise ConfigError(
            "config.recon.reference_time: must be a training time point when "
            "the accelerated variant is requested")

    if cfg.report.slice_indices is not None:
        n = cfg.grid_dims[cfg.report.slice_axis]
        for idx in cfg.report.slice_indices:
            if idx >= n:
                raise ConfigError(
                    f"config.report.slice_indices: {idx} out of range for axis "
                    f"{cfg.report.slice_axis} (size {n})")


def default_config(profile: str = "paper") -> PipelineConfig:
    return _build(_profile_overlay(profile))


def _profile_overlay(profile):
    if profile not in PROFILES:
        raise ConfigError(f"config profile: expected one of {sorted(PROFILES)}, "
                          f"got {profile!r}")
    return _merge({}, PROFILES[profile])


def read_config(path=None, profile: str = "paper", overrides: dict | None = None
                ) -> PipelineConfig:
    """Load the effective config: defaults, profile overlay, user file.

    overrides (a nested dict, e.g. {"seed": 7}) land on top of the file;
    the CLI uses them for --seed.  Every error is a ConfigError naming the
    offending dotted key.
    """
    raw = _profile_overlay(profile)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path}: {e}") from e
        if doc is not None and not isinstance(doc, dict):
            raise ConfigError(f"config file {path}: expected a mapping at top level")
        raw = _merge(raw, doc or {})
    if overrides:
        raw = _merge(raw, overrides)
    return _build(raw)


def config_to_dict(cfg: PipelineConfig) -> dict:
    """Plain nested dict of the full effective config, canonical types."""
    return {
        "seed": cfg.seed,
        "grid": {"dims": list(cfg.grid_dims),
                 "spacing_mm": list(cfg.grid_spacing_mm)},
        "schedule": {
            "mode": cfg.schedule.mode,
            "T": cfg.schedule.T,
            "tr_ms": cfg.schedule.tr_ms,
            "training_length": cfg.schedule.training_length,
            "simulate_accelerated_from_standard":
                cfg.schedule.simulate_accelerated_from_standard,
        },
        "phantom": {"noise_sigma": cfg.phantom.noise_sigma},
        "motion": {
            "amplitude_vox": list(cfg.motion.amplitude_vox),
            "period_tp": cfg.motion.period_tp,
            "drift_vox_per_tp": list(cfg.motion.drift_vox_per_tp),
            "amplitude_jitter": cfg.motion.amplitude_jitter,
        },
        "registration": {
            "control_point_spacing_vox": cfg.registration.control_point_spacing_vox,
            "levels": cfg.registration.levels,
            "iterations": cfg.registration.iterations,
            "final_level_iterations": cfg.registration.final_level_iterations,
            "step_size": cfg.registration.step_size,
            "tv_weight": cfg.registration.tv_weight,
            "metric": cfg.registration.metric,
        },
        "model": {
            "d_pca": cfg.model.d_pca,
            "ridge_lambda": cfg.model.ridge_lambda,
            "training_split": cfg.model.training_split,
        },
        "recon": {
            "delta": cfg.recon.delta,
            "reference_time": cfg.recon.reference_time,
            "deterministic_reduction": cfg.recon.deterministic_reduction,
        },
        "report": {
            "variants": list(cfg.report.variants),
            "slice_axis": cfg.report.slice_axis,
            "slice_indices": (None if cfg.report.slice_indices is None
                              else list(cfg.report.slice_indices)),
            "figures": cfg.report.figures,
        },
    }


def write_config(cfg: PipelineConfig, path) -> None:
    """Write the canonical YAML form; read_config(path) restores cfg."""
    Path(path).write_text(canonical_yaml(cfg))


def canonical_yaml(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)


def config_sha256(cfg: PipelineConfig) -> str:
    return hashlib.sha256(canonical_yaml(cfg).encode()).hexdigest()
