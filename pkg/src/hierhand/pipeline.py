"""End-to-end inference modes and model-bundle persistence.

Three inference modes share one trained bundle:

* ``holistic``: a single regressor maps the image pyramid straight to all
  21 joints, with no attention and no hierarchy.
* ``hierarchical``: the full attention cascade, layer by layer.
* ``hybrid``: the cascade plus swarm-based kinematic refinement after each
  layer; each refined layer feeds the next one's crops and the next
  refinement's parent joints.

A model bundle is a directory holding a YAML manifest (config, learned
crop ratios, camera, skeleton) and one binary tensor per predictor.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .cascade import CascadeConfig, CascadeModel, PipelineState, RidgePredictor, identity_features, build_pyramid, run_layer, run_layer0
from .errors import DataFormatError
from .pso import ObservationContext, SwarmConfig, refine_partial_pose
from .skeleton import HandSkeleton, JointLocations
from .synth import DepthFrame, OrthoCamera
from .tensorio import load_tensor, save_tensor

BUNDLE_VERSION = 1
MANIFEST_NAME = "manifest.yaml"

INFER_MODES = ("holistic", "hierarchical", "hybrid")


@dataclass
class FrameDiagnostics:
    """Optional per-frame provenance: cascade records and swarm energy traces."""

    state: PipelineState = field(default_factory=PipelineState)
    energy_traces: dict[int, list[float]] = field(default_factory=dict)
    initial_energies: dict[int, float] = field(default_factory=dict)
    best_energies: dict[int, float] = field(default_factory=dict)


def infer_frame(
    model: CascadeModel,
    frame: DepthFrame,
    mode: str = "hierarchical",
    swarm: SwarmConfig | None = None,
    seed: int = 0,
    diagnostics: FrameDiagnostics | None = None,
) -> JointLocations:
    """Estimate all 21 joints of one frame."""
    if mode not in INFER_MODES:
        raise ValueError(f"mode must be one of {INFER_MODES}, got {mode!r}")
    if mode == "holistic":
        pyramid = build_pyramid(frame, model.config.pyramid_factors)
        patch = model.holistic.patch_shape[1]
        flat = model.holistic.predict(identity_features(pyramid, patch))
        return JointLocations.full_hand(flat.reshape(21, 3))

    state = diagnostics.state if diagnostics is not None else None
    layer_joints, theta = run_layer0(frame, model, state)

    if mode == "hybrid":
        swarm = swarm or SwarmConfig()
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        ctx = ObservationContext.from_frame(frame, model.skeleton)
        refined = refine_partial_pose(0, layer_joints, ctx, swarm, rng)
        layer_joints = refined.joints
        if diagnostics is not None:
            diagnostics.energy_traces[0] = refined.trace
            diagnostics.initial_energies[0] = refined.initial_energy
            diagnostics.best_energies[0] = refined.best_energy

    layers = [layer_joints]
    for layer in (1, 2, 3):
        estimated = run_layer(frame, layer, layers[layer - 1], theta, model, state)
        if mode == "hybrid":
            grand = layers[layer - 2] if layer >= 2 else None
            ctx = ObservationContext.from_frame(
                frame, model.skeleton, parents=layers[layer - 1], grandparents=grand
            )
            refined = refine_partial_pose(layer, estimated, ctx, swarm, rng)
            estimated = refined.joints
            if diagnostics is not None:
                diagnostics.energy_traces[layer] = refined.trace
                diagnostics.initial_energies[layer] = refined.initial_energy
                diagnostics.best_energies[layer] = refined.best_energy
        layers.append(estimated)
    return JointLocations.concat(layers)


def infer_frames(
    model: CascadeModel,
    frames: list[DepthFrame],
    mode: str = "hierarchical",
    swarm: SwarmConfig | None = None,
    seed: int = 0,
    threads: int = 1,
) -> list[JointLocations]:
    """Run inference over many frames; results are independent of thread count.

    Every frame gets its own deterministic seed stream derived from
    ``seed`` and its index, so parallel and serial runs agree bit for bit.
    """
    jobs = [(i, frame) for i, frame in enumerate(frames)]

    def one(arg):
        i, frame = arg
        return infer_frame(model, frame, mode, swarm, seed=seed * 1_000_003 + i)

    if threads <= 1:
        return [one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, jobs))


# ---------------------------------------------------------------------------
# bundle persistence


def _predictor_doc(name: str) -> dict:
    return {"weights": f"{name}.btf"}


def save_model(model: CascadeModel, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, RidgePredictor] = {"layer0_initial": model.layer0_initial, "holistic": model.holistic}
    for k, preds in enumerate(model.layer0_stages):
        for j, p in enumerate(preds):
            tensors[f"layer0_s{k + 1}_j{j}"] = p
    for layer, preds in model.layer_initial.items():
        for j, p in enumerate(preds, start=1):
            tensors[f"layer{layer}_init_j{j}"] = p
    for layer, stages in model.layer_stages.items():
        for k, preds in enumerate(stages):
            for j, p in enumerate(preds, start=1):
                tensors[f"layer{layer}_s{k + 1}_j{j}"] = p
    for name, pred in tensors.items():
        save_tensor(directory / f"{name}.btf", pred.weights)

    manifest = {
        "bundle_version": BUNDLE_VERSION,
        "config": {
            "stages_per_layer": list(model.config.stages_per_layer),
            "pyramid_factors": list(model.config.pyramid_factors),
            "patch_size": model.config.patch_size,
            "ridge_lambdas": list(model.config.ridge_lambdas),
            "val_fraction": model.config.val_fraction,
            "min_crop_pixels": model.config.min_crop_pixels,
            "use_ground_truth_parents": model.config.use_ground_truth_parents,
        },
        "camera": {
            "scale": model.camera.scale,
            "width": model.camera.width,
            "height": model.camera.height,
            "background": model.camera.background,
        },
        "skeleton": {
            "palm_reference": model.skeleton.palm_reference.tolist(),
            "bone_lengths": model.skeleton.bone_lengths.tolist(),
            "palm_radius": float(model.skeleton.palm_radius),
            "bone_radii": model.skeleton.bone_radii.tolist(),
            "angle_ranges": model.skeleton.angle_ranges.tolist(),
        },
        "patch_shape": list(model.layer0_initial.patch_shape),
        "crops": {
            "layer0_stages": [list(map(float, row)) for row in model.layer0_stage_crops],
            "layer_initial": {str(l): list(map(float, v)) for l, v in model.layer_initial_crops.items()},
            "layer_stages": {
                str(l): [list(map(float, row)) for row in v] for l, v in model.layer_stage_crops.items()
            },
        },
        "predictors": sorted(tensors),
    }
    (directory / MANIFEST_NAME).write_text(yaml.safe_dump(manifest, sort_keys=True), encoding="utf-8")


def load_model(directory: str | Path) -> CascadeModel:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataFormatError(f"{directory}: not a model bundle (missing {MANIFEST_NAME})")
    manifest = yaml.safe_load(manifest_path.read_text("utf-8"))
    if manifest.get("bundle_version") != BUNDLE_VERSION:
        raise DataFormatError(f"{directory}: unsupported bundle version")
    cfg_doc = manifest["config"]
    config = CascadeConfig(
        stages_per_layer=tuple(cfg_doc["stages_per_layer"]),
        pyramid_factors=tuple(cfg_doc["pyramid_factors"]),
        patch_size=int(cfg_doc["patch_size"]),
        ridge_lambdas=tuple(cfg_doc["ridge_lambdas"]),
        val_fraction=float(cfg_doc["val_fraction"]),
        min_crop_pixels=float(cfg_doc["min_crop_pixels"]),
        use_ground_truth_parents=bool(cfg_doc["use_ground_truth_parents"]),
    )
    cam_doc = manifest["camera"]
    camera = OrthoCamera(
        scale=float(cam_doc["scale"]),
        width=int(cam_doc["width"]),
        height=int(cam_doc["height"]),
        background=float(cam_doc["background"]),
    )
    sk = manifest["skeleton"]
    skeleton = HandSkeleton(
        palm_reference=np.array(sk["palm_reference"]),
        bone_lengths=np.array(sk["bone_lengths"]),
        palm_radius=float(sk["palm_radius"]),
        bone_radii=np.array(sk["bone_radii"]),
        angle_ranges=np.array(sk["angle_ranges"]),
    )
    patch_shape = tuple(manifest["patch_shape"])

    def load_predictor(name: str) -> RidgePredictor:
        path = directory / f"{name}.btf"
        if not path.exists():
            raise DataFormatError(f"{directory}: missing predictor tensor {name}.btf")
        weights, _ = load_tensor(path)
        return RidgePredictor(weights, patch_shape)

    crops = manifest["crops"]
    layer0_stages = []
    for k in range(config.stages_per_layer[0]):
        layer0_stages.append([load_predictor(f"layer0_s{k + 1}_j{j}") for j in range(6)])
    layer_initial = {}
    layer_stages = {}
    for layer in (1, 2, 3):
        layer_initial[layer] = [load_predictor(f"layer{layer}_init_j{j}") for j in range(1, 6)]
        layer_stages[layer] = [
            [load_predictor(f"layer{layer}_s{k + 1}_j{j}") for j in range(1, 6)]
            for k in range(config.stages_per_layer[layer])
        ]
    return CascadeModel(
        config=config,
        skeleton=skeleton,
        camera=camera,
        layer0_initial=load_predictor("layer0_initial"),
        layer0_stages=layer0_stages,
        layer0_stage_crops=[list(map(float, row)) for row in crops["layer0_stages"]],
        layer_initial=layer_initial,
        layer_initial_crops={int(l): list(map(float, v)) for l, v in crops["layer_initial"].items()},
        layer_stages=layer_stages,
        layer_stage_crops={
            int(l): [list(map(float, row)) for row in v] for l, v in crops["layer_stages"].items()
        },
        holistic=load_predictor("holistic"),
    )
