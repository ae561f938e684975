"""YAML configuration: skeleton geometry and pipeline settings.

The skeleton file is a versioned, human-readable description of the palm
reference points, bone lengths, render radii, and per-layer angle ranges,
in model units.  A packaged default ships with the library.

The pipeline config is a single optional YAML file whose sections override
the built-in defaults (camera, sampler, cascade, swarm, eval).  Unknown
keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .cascade import CascadeConfig
from .errors import ConfigError
from .pso import SwarmConfig
from .skeleton import HandSkeleton
from .synth import OrthoCamera, PoseSampler

SKELETON_SCHEMA_VERSION = 1


def _default_skeleton_text() -> str:
    return resources.files("hierhand").joinpath("data/default_skeleton.yaml").read_text("utf-8")


def load_skeleton(path: str | Path | None = None) -> HandSkeleton:
    """Load a skeleton file (model units); ``None`` loads the packaged default."""
    text = _default_skeleton_text() if path is None else Path(path).read_text("utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"skeleton file is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("skeleton file must be a mapping")
    version = raw.get("schema_version")
    if version != SKELETON_SCHEMA_VERSION:
        raise ConfigError(f"unsupported skeleton schema_version {version!r}")
    try:
        return HandSkeleton(
            palm_reference=np.array(raw["palm_reference"], dtype=float),
            bone_lengths=np.array(raw["bone_lengths"], dtype=float),
            palm_radius=float(raw.get("palm_radius", 13.0)),
            bone_radii=np.array(raw.get("bone_radii", [[9.0] * 5, [8.0] * 5, [7.0] * 5]), dtype=float),
            angle_ranges=np.array(
                raw.get(
                    "angle_ranges",
                    HandSkeleton.__dataclass_fields__["angle_ranges"].default_factory(),
                ),
                dtype=float,
            ),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid skeleton file: {exc}") from exc


def save_skeleton(path: str | Path, skeleton: HandSkeleton) -> None:
    doc = {
        "schema_version": SKELETON_SCHEMA_VERSION,
        "palm_reference": skeleton.palm_reference.tolist(),
        "bone_lengths": skeleton.bone_lengths.tolist(),
        "palm_radius": float(skeleton.palm_radius),
        "bone_radii": skeleton.bone_radii.tolist(),
        "angle_ranges": skeleton.angle_ranges.tolist(),
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")


@dataclass(frozen=True)
class SamplerSettings:
    rotation_range: tuple[float, float] = (-1.0, 1.0)
    tilt_range: tuple[float, float] = (-0.15, 0.15)
    translation_center: tuple[float, float, float] = (0.5, 0.72, 0.5)
    translation_extent: tuple[float, float, float] = (0.04, 0.04, 0.05)


@dataclass(frozen=True)
class EvalSettings:
    n_thresholds: int = 40
    units: str = "model"  # or "normalized"
    per_frame_max: bool = False

    def __post_init__(self):
        if self.units not in ("model", "normalized"):
            raise ConfigError(f"eval units must be 'model' or 'normalized', got {self.units!r}")
        if self.n_thresholds < 2:
            raise ConfigError("need at least 2 thresholds")


@dataclass(frozen=True)
class PipelineConfig:
    skeleton: HandSkeleton = field(default_factory=load_skeleton)
    camera: OrthoCamera = field(default_factory=OrthoCamera)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    swarm: SwarmConfig = field(default_factory=SwarmConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def image_skeleton(self) -> HandSkeleton:
        return self.camera.to_image(self.skeleton)

    def make_sampler(self, seed: int) -> PoseSampler:
        return PoseSampler(
            skeleton=self.image_skeleton(),
            camera=self.camera,
            rotation_range=self.sampler.rotation_range,
            tilt_range=self.sampler.tilt_range,
            translation_center=self.sampler.translation_center,
            translation_extent=self.sampler.translation_extent,
            seed=seed,
        )


def _build_section(cls, raw: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    coerced = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        value = raw[f.name]
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        coerced[f.name] = value
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] settings: {exc}") from exc


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Build the pipeline config, overlaying a user YAML file when given."""
    if path is None:
        return PipelineConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text("utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must be a mapping of sections")
    known_sections = {"skeleton", "camera", "sampler", "cascade", "swarm", "eval"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    skeleton_path = raw.get("skeleton")
    skeleton = load_skeleton(skeleton_path) if isinstance(skeleton_path, str) else load_skeleton()
    cfg = PipelineConfig(
        skeleton=skeleton,
        camera=_build_section(OrthoCamera, raw.get("camera", {}), "camera"),
        sampler=_build_section(SamplerSettings, raw.get("sampler", {}), "sampler"),
        cascade=_build_section(CascadeConfig, raw.get("cascade", {}), "cascade"),
        swarm=_build_section(SwarmConfig, raw.get("swarm", {}), "swarm"),
        eval=_build_section(EvalSettings, raw.get("eval", {}), "eval"),
    )
    return cfg


def with_overrides(cfg: PipelineConfig, **sections) -> PipelineConfig:
    return replace(cfg, **sections)
