"""Cascaded hierarchical regression driven by spatial attention.

Estimation proceeds layer by layer in order of articulation depth.  The
palm layer starts from a holistic prediction over the multi-resolution
pyramid; every subsequent refinement stage re-centers (and for the palm
layer re-orients) an attention crop around the current estimate, predicts
a residual in that canonical patch space, and maps the corrected point
back to frame coordinates.  Finger layers predict offsets from their
parent joints inside attention crops oriented by the palm rotation.

Depth is handled additively alongside the planar residual: the attention
transform only touches x and y, so z corrections pass through untouched.

The in-plane rotation is re-estimated from the wrist and middle-root
estimates after every palm-layer stage and frozen once the palm layer
finishes; finger layers reuse the frozen value.  Joints within one stage
are refined independently from a snapshot of the previous stage, so their
update order cannot change the result.

Predictors are pluggable.  The reference implementation is ridge
regression on flattened patch stacks with the regularization weight picked
on a fixed validation split, which keeps training deterministic.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DataQualityWarning
from .skeleton import HandSkeleton, JointLocations, layer_joint_ids
from .synth import DepthFrame, OrthoCamera
from .transform import (
    AffineTransform2D,
    RasterGrid,
    compute_rotation,
    estimate_crop_ratio,
    map_point,
    resample,
    transform_points,
)


@dataclass(frozen=True)
class CascadeConfig:
    """Static hyperparameters of the cascade."""

    stages_per_layer: tuple[int, int, int, int] = (1, 0, 0, 0)
    pyramid_factors: tuple[int, ...] = (2, 4)
    patch_size: int = 32
    ridge_lambdas: tuple[float, ...] = (1e-2, 1.0, 1e2)
    val_fraction: float = 0.15
    min_crop_pixels: float = 4.0
    use_ground_truth_parents: bool = False

    def __post_init__(self):
        if len(self.stages_per_layer) != 4 or any(k < 0 for k in self.stages_per_layer):
            raise ValueError("stages_per_layer needs four non-negative counts")
        if any(f < 1 for f in self.pyramid_factors):
            raise ValueError("pyramid factors must be >= 1")
        if self.patch_size < 2:
            raise ValueError("patch_size must be at least 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if len(self.ridge_lambdas) == 0 or any(l < 0 for l in self.ridge_lambdas):
            raise ValueError("ridge_lambdas must be non-negative and non-empty")


class StageRecord(NamedTuple):
    layer: int
    stage: int
    joint: int
    before: np.ndarray
    after: np.ndarray
    theta: float
    crop_ratio: float


@dataclass
class PipelineState:
    """Per-frame estimation state and provenance.

    The in-plane rotation may only change while the palm layer is being
    processed; ``freeze_theta`` seals it for the finger layers.
    """

    theta: float | None = None
    theta_frozen: bool = False
    records: list[StageRecord] = field(default_factory=list)

    def set_theta(self, value: float) -> None:
        if self.theta_frozen:
            raise RuntimeError("in-plane rotation is frozen after the palm layer")
        self.theta = float(value)

    def freeze_theta(self) -> None:
        self.theta_frozen = True

    def log(self, record: StageRecord) -> None:
        self.records.append(record)


class Predictor(Protocol):
    """Trainable map from a stack of resampled patches to a flat vector."""

    output_dim: int
    patch_shape: tuple[int, int, int]  # (n_grids, height, width)

    def predict(self, patches: Sequence[RasterGrid]) -> np.ndarray: ...


def stack_features(patches: Sequence[RasterGrid]) -> np.ndarray:
    """Flatten a patch stack into one feature vector (grid order, row major)."""
    return np.concatenate([p.values.reshape(-1) for p in patches])


def _check_patches(predictor: Predictor, patches: Sequence[RasterGrid]) -> None:
    n, h, w = predictor.patch_shape
    if len(patches) != n:
        raise ValueError(f"predictor expects {n} grids, got {len(patches)}")
    for p in patches:
        if p.values.shape != (h, w):
            raise ValueError(f"predictor expects {h}x{w} patches, got {p.values.shape}")


@dataclass(frozen=True)
class RidgePredictor:
    """Linear predictor with an intercept, stored as one weight matrix."""

    weights: np.ndarray  # (output_dim, n_features + 1), last column is the bias
    patch_shape: tuple[int, int, int]

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=float))
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "patch_shape", tuple(int(v) for v in self.patch_shape))

    @property
    def output_dim(self) -> int:
        return self.weights.shape[0]

    def predict(self, patches: Sequence[RasterGrid]) -> np.ndarray:
        _check_patches(self, patches)
        x = stack_features(patches)
        return self.weights[:, :-1] @ x + self.weights[:, -1]


def fit_ridge(
    features: np.ndarray,
    targets: np.ndarray,
    lambdas: Sequence[float],
    val_fraction: float,
    patch_shape: tuple[int, int, int],
) -> RidgePredictor:
    """Closed-form ridge fit with the penalty chosen on a fixed tail split.

    The intercept column is never penalized.  After selection the model is
    refit on the full data with the chosen penalty.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n = x.shape[0]
    n_val = min(max(1, int(round(val_fraction * n))), n - 1) if n > 1 else 0
    xb = np.concatenate([x, np.ones((n, 1))], axis=1)
    nf = xb.shape[1]
    penalty = np.ones(nf)
    penalty[-1] = 0.0

    def solve(gram, rhs, lam):
        a = gram + lam * np.diag(penalty)
        try:
            return cho_solve(cho_factor(a, lower=True, check_finite=False), rhs, check_finite=False)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(a, rhs, rcond=None)[0]

    if n_val == 0:
        gram = xb.T @ xb
        rhs = xb.T @ y
        w = solve(gram, rhs, float(lambdas[0]))
        return RidgePredictor(w.T, patch_shape)

    xb_tr, xb_val = xb[: n - n_val], xb[n - n_val :]
    y_tr, y_val = y[: n - n_val], y[n - n_val :]
    gram_tr = xb_tr.T @ xb_tr
    rhs_tr = xb_tr.T @ y_tr
    best_lam = None
    best_err = np.inf
    for lam in lambdas:
        w = solve(gram_tr, rhs_tr, float(lam))
        err = float(np.mean((xb_val @ w - y_val) ** 2))
        if err < best_err:
            best_err = err
            best_lam = float(lam)
    gram_all = gram_tr + xb_val.T @ xb_val
    rhs_all = rhs_tr + xb_val.T @ y_val
    w = solve(gram_all, rhs_all, best_lam)
    return RidgePredictor(w.T, patch_shape)


def build_pyramid(frame: DepthFrame, factors: Sequence[int] = (2, 4)) -> list[RasterGrid]:
    """Original grid plus average-pooled copies at the given factors.

    Pooling is exact block averaging, so the frame must be divisible by
    every factor.  Normalized coordinates are preserved by construction,
    hence every level carries the identity coordinate adjustment.
    """
    grid = frame.grid
    levels = [grid]
    for f in factors:
        f = int(f)
        if grid.width < f or grid.height < f:
            raise ValueError(f"frame {grid.width}x{grid.height} smaller than pyramid factor {f}")
        if grid.width % f or grid.height % f:
            raise ValueError(f"frame {grid.width}x{grid.height} not divisible by factor {f}")
        pooled = grid.values.reshape(grid.height // f, f, grid.width // f, f).mean(axis=(1, 3))
        levels.append(RasterGrid(pooled, fill=grid.fill))
    return levels


def resample_stack(
    grids: Sequence[RasterGrid], transform: AffineTransform2D, patch_size: int
) -> list[RasterGrid]:
    return [resample(g, transform, patch_size, patch_size) for g in grids]


def identity_features(pyramid: Sequence[RasterGrid], patch_size: int) -> list[RasterGrid]:
    return resample_stack(pyramid, AffineTransform2D.identity(), patch_size)


def layer0_rotation(joints: JointLocations) -> float:
    return compute_rotation(joints.get(0, 0), joints.get(0, 3))


def refine_stage(
    predictor: Predictor,
    features: Sequence[RasterGrid],
    estimate: JointLocations,
    theta: float,
    crop_ratio: float,
    feature_theta: float | None = None,
    state: PipelineState | None = None,
    stage_key: tuple[int, int, int] | None = None,
) -> JointLocations:
    """One residual-refinement pass for a single joint.

    Features are cropped around the current estimate (rotated by
    ``feature_theta``, which defaults to the label rotation), the predictor
    emits a residual in the canonical patch space, and the corrected point
    is mapped back.  The label path is exact affine algebra, so a
    zero-residual predictor is a fixed point regardless of interpolation.
    """
    if len(estimate) != 1:
        raise ValueError("refine_stage operates on a single joint")
    if predictor.output_dim != 3:
        raise ValueError(f"stage predictor must emit 3 values, got {predictor.output_dim}")
    center = (float(estimate.coords[0, 0]), float(estimate.coords[0, 1]))
    label_t = AffineTransform2D(theta, center, crop_ratio)
    feat_t = label_t if feature_theta is None else AffineTransform2D(feature_theta, center, crop_ratio)
    _, h, w = predictor.patch_shape
    if h != w:
        raise ValueError("attention patches are square")
    patches = resample_stack(features, feat_t, h)
    _check_patches(predictor, patches)
    residual = predictor.predict(patches)
    transformed = transform_points(label_t, estimate, "forward")
    corrected = transformed.coords[0] + residual
    back = transform_points(label_t, estimate.with_coords(corrected.reshape(1, 3)), "inverse")
    if state is not None and stage_key is not None:
        layer, stage, joint = stage_key
        state.log(
            StageRecord(layer, stage, joint, estimate.coords[0].copy(), back.coords[0].copy(), theta, crop_ratio)
        )
    return back


@dataclass
class CascadeModel:
    """Trained predictors plus the learned crop ratios, one bundle.

    ``layer0_stages[k][j]`` refines palm joint ``j`` at stage ``k + 1``;
    ``layer_initial[l][j - 1]`` predicts finger-layer offsets;
    ``layer_stages[l][k][j - 1]`` refines finger joints.  Crop ratio tables
    mirror the predictor tables.  The holistic head regresses all 21 joints
    in one shot and serves as a baseline inference mode.
    """

    config: CascadeConfig
    skeleton: HandSkeleton  # image units
    camera: OrthoCamera
    layer0_initial: RidgePredictor
    layer0_stages: list[list[RidgePredictor]]
    layer0_stage_crops: list[list[float]]
    layer_initial: dict[int, list[RidgePredictor]]
    layer_initial_crops: dict[int, list[float]]
    layer_stages: dict[int, list[list[RidgePredictor]]]
    layer_stage_crops: dict[int, list[list[float]]]
    holistic: RidgePredictor


def run_layer0(
    frame: DepthFrame, model: CascadeModel, state: PipelineState | None = None
) -> tuple[JointLocations, float]:
    """Estimate the palm layer and the in-plane rotation.

    The initial predictor maps the identity-cropped pyramid to all six palm
    joints jointly; each configured stage then refines the joints one by one
    from a snapshot of the previous stage and re-estimates the rotation.
    """
    pyramid = build_pyramid(frame, model.config.pyramid_factors)
    patch = model.layer0_initial.patch_shape[1]
    feats = identity_features(pyramid, patch)
    flat = model.layer0_initial.predict(feats)
    if flat.shape != (18,):
        raise ValueError("palm initializer must emit 18 values")
    joints = JointLocations.for_layer(0, flat.reshape(6, 3))
    theta = layer0_rotation(joints)
    if state is not None:
        state.set_theta(theta)
    n_stages = model.config.stages_per_layer[0]
    for k in range(1, n_stages + 1):
        crops = model.layer0_stage_crops[k - 1]
        preds = model.layer0_stages[k - 1]
        new_coords = joints.coords.copy()
        for j in range(6):
            single = joints.subset([(0, j)])
            refined = refine_stage(
                preds[j], pyramid, single, theta, crops[j], state=state, stage_key=(0, k, j)
            )
            new_coords[j] = refined.coords[0]
        joints = joints.with_coords(new_coords)
        theta = layer0_rotation(joints)
        if state is not None:
            state.set_theta(theta)
    if state is not None:
        state.freeze_theta()
    return joints, theta


def run_layer(
    frame: DepthFrame,
    layer: int,
    parents: JointLocations,
    theta: float,
    model: CascadeModel,
    state: PipelineState | None = None,
) -> JointLocations:
    """Estimate one finger layer from its parent joints.

    Per finger: crop the pyramid around the parent joint (rotated by the
    frozen palm rotation), predict an offset in the canonical patch space,
    and map the offset target back.  Refinement stages, when configured,
    crop features translation-only but keep the rotation on the label path.
    An invalid parent marks that finger's joint invalid; the rest proceed.
    """
    if layer not in (1, 2, 3):
        raise ValueError("layer must be 1..3")
    pyramid = build_pyramid(frame, model.config.pyramid_factors)
    preds = model.layer_initial[layer]
    crops = model.layer_initial_crops[layer]
    coords = np.zeros((5, 3))
    valid = np.zeros(5, dtype=bool)
    for j in range(1, 6):
        if not parents.is_valid(layer - 1, j):
            continue
        parent = parents.get(layer - 1, j)
        t = AffineTransform2D(theta, (parent[0], parent[1]), crops[j - 1])
        patch = preds[j - 1].patch_shape[1]
        patches = resample_stack(pyramid, t, patch)
        _check_patches(preds[j - 1], patches)
        offset = preds[j - 1].predict(patches)
        target = np.concatenate([offset[:2], [parent[2] + offset[2]]])
        back = transform_points(t, JointLocations.single(layer, j, target), "inverse")
        coords[j - 1] = back.coords[0]
        valid[j - 1] = True
        if state is not None:
            state.log(StageRecord(layer, 0, j, parent.copy(), coords[j - 1].copy(), theta, crops[j - 1]))
    joints = JointLocations.for_layer(layer, coords, valid)
    for k in range(1, model.config.stages_per_layer[layer] + 1):
        stage_preds = model.layer_stages[layer][k - 1]
        stage_crops = model.layer_stage_crops[layer][k - 1]
        new_coords = joints.coords.copy()
        for j in range(1, 6):
            if not joints.is_valid(layer, j):
                continue
            single = joints.subset([(layer, j)])
            refined = refine_stage(
                stage_preds[j - 1],
                pyramid,
                single,
                theta,
                stage_crops[j - 1],
                feature_theta=0.0,
                state=state,
                stage_key=(layer, k, j),
            )
            new_coords[j - 1] = refined.coords[0]
        joints = joints.with_coords(new_coords)
    return joints


def _residual_label(theta: float, center_xy: np.ndarray, crop: float, gt: np.ndarray, est: np.ndarray):
    t = AffineTransform2D(theta, (center_xy[0], center_xy[1]), crop)
    inv = t.invert()
    d_xy = map_point(inv, gt[:2]) - map_point(inv, est[:2])
    return np.array([d_xy[0], d_xy[1], gt[2] - est[2]])


def train_pipeline(
    dataset: Sequence, config: CascadeConfig, skeleton: HandSkeleton, camera: OrthoCamera
) -> CascadeModel:
    """Fit the whole cascade (and the holistic baseline head) on a dataset.

    Layers are trained in order.  For every predictor the crop ratio is
    estimated first, from offsets or residuals carried into the canonical
    space with a unit crop; later layers consume the previous layers'
    *predictions* on the training set so each initializer also learns to
    absorb upstream error (ground-truth parents are available behind a
    config flag for ablation).
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    if len(dataset) < 2:
        warnings.warn(
            "training on fewer than 2 frames; crop-ratio estimates are unreliable",
            DataQualityWarning,
            stacklevel=2,
        )
    frames = [item[0] for item in dataset]
    truths = [item[1] for item in dataset]
    n = len(frames)
    width = frames[0].width
    patch = config.patch_size
    pyramids = [build_pyramid(f, config.pyramid_factors) for f in frames]
    n_grids = len(pyramids[0])
    patch_shape = (n_grids, patch, patch)

    x0 = np.stack([stack_features(identity_features(p, patch)) for p in pyramids])
    y_palm = np.stack([t.layer(0).coords.reshape(-1) for t in truths])
    y_full = np.stack([t.coords.reshape(-1) for t in truths])
    layer0_initial = fit_ridge(x0, y_palm, config.ridge_lambdas, config.val_fraction, patch_shape)
    holistic = fit_ridge(x0, y_full, config.ridge_lambdas, config.val_fraction, patch_shape)

    estimates = [
        JointLocations.for_layer(0, layer0_initial.predict(identity_features(p, patch)).reshape(6, 3))
        for p in pyramids
    ]
    thetas = [layer0_rotation(e) for e in estimates]

    layer0_stages: list[list[RidgePredictor]] = []
    layer0_stage_crops: list[list[float]] = []
    for _k in range(config.stages_per_layer[0]):
        stage_preds: list[RidgePredictor] = []
        stage_crops: list[float] = []
        snapshot = [e.coords.copy() for e in estimates]
        for j in range(6):
            gt = np.stack([t.get(0, j) for t in truths])
            est = np.stack([snapshot[i][j] for i in range(n)])
            res1 = np.stack(
                [_residual_label(thetas[i], est[i, :2], 1.0, gt[i], est[i])[:2] for i in range(n)]
            )
            b = estimate_crop_ratio(res1, width, config.min_crop_pixels)
            feats = np.stack(
                [
                    stack_features(
                        resample_stack(
                            pyramids[i], AffineTransform2D(thetas[i], (est[i, 0], est[i, 1]), b), patch
                        )
                    )
                    for i in range(n)
                ]
            )
            labels = np.stack([_residual_label(thetas[i], est[i, :2], b, gt[i], est[i]) for i in range(n)])
            pred = fit_ridge(feats, labels, config.ridge_lambdas, config.val_fraction, patch_shape)
            stage_preds.append(pred)
            stage_crops.append(b)
        for i in range(n):
            new_coords = snapshot[i].copy()
            for j in range(6):
                single = JointLocations.single(0, j, snapshot[i][j])
                refined = refine_stage(stage_preds[j], pyramids[i], single, thetas[i], stage_crops[j])
                new_coords[j] = refined.coords[0]
            estimates[i] = estimates[i].with_coords(new_coords)
            thetas[i] = layer0_rotation(estimates[i])
        layer0_stages.append(stage_preds)
        layer0_stage_crops.append(stage_crops)

    # finger layers chain off predicted parents unless configured otherwise
    parent_estimates: list[JointLocations] = list(estimates)
    layer_initial: dict[int, list[RidgePredictor]] = {}
    layer_initial_crops: dict[int, list[float]] = {}
    layer_stages: dict[int, list[list[RidgePredictor]]] = {}
    layer_stage_crops: dict[int, list[list[float]]] = {}
    for layer in (1, 2, 3):
        if config.use_ground_truth_parents:
            parent_estimates = [t.layer(layer - 1) for t in truths]
        preds_l: list[RidgePredictor] = []
        crops_l: list[float] = []
        layer_estimates_coords = np.zeros((n, 5, 3))
        for j in range(1, 6):
            gt = np.stack([t.get(layer, j) for t in truths])
            par = np.stack([parent_estimates[i].get(layer - 1, j) for i in range(n)])
            off1 = np.stack(
                [_residual_label(thetas[i], par[i, :2], 1.0, gt[i], par[i])[:2] for i in range(n)]
            )
            b = estimate_crop_ratio(off1, width, config.min_crop_pixels)
            feats = np.stack(
                [
                    stack_features(
                        resample_stack(
                            pyramids[i], AffineTransform2D(thetas[i], (par[i, 0], par[i, 1]), b), patch
                        )
                    )
                    for i in range(n)
                ]
            )
            labels = np.stack([_residual_label(thetas[i], par[i, :2], b, gt[i], par[i]) for i in range(n)])
            pred = fit_ridge(feats, labels, config.ridge_lambdas, config.val_fraction, patch_shape)
            preds_l.append(pred)
            crops_l.append(b)
            offsets = feats @ pred.weights[:, :-1].T + pred.weights[:, -1]
            for i in range(n):
                t = AffineTransform2D(thetas[i], (par[i, 0], par[i, 1]), b)
                target = np.concatenate([offsets[i, :2], [par[i, 2] + offsets[i, 2]]])
                back = transform_points(t, JointLocations.single(layer, j, target), "inverse")
                layer_estimates_coords[i, j - 1] = back.coords[0]
        layer_initial[layer] = preds_l
        layer_initial_crops[layer] = crops_l

        current = [JointLocations.for_layer(layer, layer_estimates_coords[i]) for i in range(n)]
        stages_l: list[list[RidgePredictor]] = []
        stage_crops_l: list[list[float]] = []
        for _k in range(config.stages_per_layer[layer]):
            stage_preds = []
            stage_crops = []
            snapshot = [c.coords.copy() for c in current]
            for j in range(1, 6):
                gt = np.stack([t.get(layer, j) for t in truths])
                est = np.stack([snapshot[i][j - 1] for i in range(n)])
                res1 = np.stack(
                    [_residual_label(thetas[i], est[i, :2], 1.0, gt[i], est[i])[:2] for i in range(n)]
                )
                b = estimate_crop_ratio(res1, width, config.min_crop_pixels)
                feats = np.stack(
                    [
                        stack_features(
                            resample_stack(
                                pyramids[i], AffineTransform2D(0.0, (est[i, 0], est[i, 1]), b), patch
                            )
                        )
                        for i in range(n)
                    ]
                )
                labels = np.stack(
                    [_residual_label(thetas[i], est[i, :2], b, gt[i], est[i]) for i in range(n)]
                )
                pred = fit_ridge(feats, labels, config.ridge_lambdas, config.val_fraction, patch_shape)
                stage_preds.append(pred)
                stage_crops.append(b)
            for i in range(n):
                new_coords = snapshot[i].copy()
                for j in range(1, 6):
                    single = JointLocations.single(layer, j, snapshot[i][j - 1])
                    refined = refine_stage(
                        stage_preds[j - 1],
                        pyramids[i],
                        single,
                        thetas[i],
                        stage_crops[j - 1],
                        feature_theta=0.0,
                    )
                    new_coords[j - 1] = refined.coords[0]
                current[i] = current[i].with_coords(new_coords)
            stages_l.append(stage_preds)
            stage_crops_l.append(stage_crops)
        layer_stages[layer] = stages_l
        layer_stage_crops[layer] = stage_crops_l
        parent_estimates = current

    return CascadeModel(
        config=config,
        skeleton=skeleton,
        camera=camera,
        layer0_initial=layer0_initial,
        layer0_stages=layer0_stages,
        layer0_stage_crops=layer0_stage_crops,
        layer_initial=layer_initial,
        layer_initial_crops=layer_initial_crops,
        layer_stages=layer_stages,
        layer_stage_crops=layer_stage_crops,
        holistic=holistic,
    )
