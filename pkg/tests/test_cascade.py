from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import pytest

from hierhand import (
    AffineTransform2D,
    CascadeConfig,
    DataQualityWarning,
    JointLocations,
    PoseParams,
    RasterGrid,
    forward_kinematics,
    generate_dataset,
    render,
    resample,
    train_pipeline,
    transform_points,
)
from hierhand.cascade import (
    PipelineState,
    build_pyramid,
    estimate_crop_ratio,
    fit_ridge,
    identity_features,
    layer0_rotation,
    map_point,
    refine_stage,
    run_layer,
    run_layer0,
    stack_features,
)
from hierhand.pipeline import infer_frame
from hierhand.synth import DepthFrame
from hierhand.transform import compute_rotation

from conftest import make_sampler


@dataclass
class FunctionPredictor:
    """Test stub satisfying the predictor protocol with an arbitrary map."""

    output_dim: int
    patch_shape: tuple[int, int, int]
    fn: Callable[[Sequence[RasterGrid]], np.ndarray]

    def predict(self, patches):
        return np.asarray(self.fn(patches), dtype=float)


def constant_predictor(vector, patch_shape):
    vector = np.asarray(vector, dtype=float)
    return FunctionPredictor(vector.size, patch_shape, lambda patches: vector)


@pytest.fixture(scope="module")
def scene(small_skeleton, small_camera):
    sampler = make_sampler(small_skeleton, small_camera, seed=31)
    sample = generate_dataset(sampler, 1)[0]
    return sample


class TestPyramid:
    def test_level_dimensions(self, skeleton, camera):
        sampler = make_sampler(skeleton, camera, seed=32)
        frame = generate_dataset(sampler, 1)[0].frame
        levels = build_pyramid(frame, (2, 4))
        assert [(g.height, g.width) for g in levels] == [(96, 96), (48, 48), (24, 24)]

    def test_constant_frame_stays_constant(self, small_camera):
        grid = RasterGrid(np.full((48, 48), 0.7), fill=1.0)
        frame = DepthFrame(grid, small_camera)
        for level in build_pyramid(frame, (2, 4)):
            np.testing.assert_allclose(level.values, 0.7)

    def test_matches_block_average_oracle(self, small_camera, rng):
        values = rng.uniform(size=(48, 48))
        frame = DepthFrame(RasterGrid(values, fill=1.0), small_camera)
        levels = build_pyramid(frame, (2, 4))
        for f, level in zip((2, 4), levels[1:]):
            expected = np.zeros((48 // f, 48 // f))
            for r in range(48 // f):
                for c in range(48 // f):
                    expected[r, c] = values[r * f : (r + 1) * f, c * f : (c + 1) * f].mean()
            np.testing.assert_allclose(level.values, expected, atol=1e-9)

    def test_identity_coordinate_metadata(self, scene):
        for level in build_pyramid(scene.frame, (2, 4)):
            assert level.coord_scale == (1.0, 1.0)
            assert level.coord_offset == (0.0, 0.0)

    def test_too_small_frame_rejected(self, small_camera):
        frame = DepthFrame(RasterGrid(np.ones((4, 4)), fill=2.0), small_camera)
        with pytest.raises(ValueError, match="smaller"):
            build_pyramid(frame, (8,))

    def test_indivisible_frame_rejected(self, small_camera):
        frame = DepthFrame(RasterGrid(np.ones((50, 50)), fill=2.0), small_camera)
        with pytest.raises(ValueError, match="divisible"):
            build_pyramid(frame, (4,))


class TestRefineStage:
    def test_zero_residual_is_fixed_point(self, scene):
        pyramid = build_pyramid(scene.frame, (2, 4))
        predictor = constant_predictor(np.zeros(3), (3, 12, 12))
        estimate = JointLocations.single(0, 2, [0.41, 0.62, 0.5])
        for _ in range(4):
            out = refine_stage(predictor, pyramid, estimate, 0.3, 0.25)
            np.testing.assert_array_equal(out.coords, estimate.coords)
            estimate = out

    def test_oracle_residual_reaches_truth(self, scene):
        # oracle: the predictor emits the exact residual in patch space; the
        # label path is pure affine algebra so the output hits ground truth
        pyramid = build_pyramid(scene.frame, (2, 4))
        truth = scene.joints.get(0, 4)
        start = truth + np.array([0.04, -0.03, 0.02])
        theta, b = 0.7, 0.3
        t = AffineTransform2D(theta, (start[0], start[1]), b)
        inv = t.invert()
        residual = np.concatenate(
            [map_point(inv, truth[:2]) - map_point(inv, start[:2]), [truth[2] - start[2]]]
        )
        predictor = constant_predictor(residual, (3, 12, 12))
        out = refine_stage(predictor, pyramid, JointLocations.single(0, 4, start), theta, b)
        np.testing.assert_allclose(out.coords[0], truth, atol=1e-9)

    def test_rotation_equivariance(self, small_camera, rng):
        # analytic oracle: rasterize a smooth field and its exactly rotated
        # twin, rotate the estimate and rotation parameter along, and the
        # refined output must rotate too, up to interpolation noise
        center = np.array([0.5, 0.5])

        def field(x, y):
            return np.exp(-(((x - 0.42) / 0.24) ** 2 + (((y - 0.58) / 0.3) ** 2))) + 0.5 * np.exp(
                -(((x - 0.62) / 0.33) ** 2 + (((y - 0.45) / 0.2) ** 2))
            )

        def rasterize(fn):
            xs = (np.arange(48) + 0.5) / 48
            gx, gy = np.meshgrid(xs, xs)
            return DepthFrame(RasterGrid(fn(gx, gy), fill=0.0), small_camera)

        delta = 0.5
        c, s = np.cos(delta), np.sin(delta)
        rot = np.array([[c, s], [-s, c]])

        def rotated_field(x, y):
            dx, dy = x - center[0], y - center[1]
            src = np.stack([c * dx - s * dy, s * dx + c * dy])  # rot^-1 applied
            return field(center[0] + src[0], center[1] + src[1])

        weights = rng.normal(0, 0.003, (3, 3 * 12 * 12))
        predictor = FunctionPredictor(3, (3, 12, 12), lambda p: weights @ stack_features(p))
        start = np.array([0.45, 0.6, 0.5])
        theta0, b = 0.2, 0.4
        out = refine_stage(
            predictor,
            build_pyramid(rasterize(field), (2, 4)),
            JointLocations.single(0, 1, start),
            theta0,
            b,
        )
        start_rot = np.concatenate([center + rot @ (start[:2] - center), start[2:]])
        out_rot = refine_stage(
            predictor,
            build_pyramid(rasterize(rotated_field), (2, 4)),
            JointLocations.single(0, 1, start_rot),
            theta0 + delta,
            b,
        )
        expected_xy = center + rot @ (out.coords[0, :2] - center)
        assert np.abs(out_rot.coords[0, :2] - expected_xy).max() < 1e-3
        assert abs(out_rot.coords[0, 2] - out.coords[0, 2]) < 1e-3

    def test_geometry_mismatch_rejected(self, scene):
        pyramid = build_pyramid(scene.frame, (2, 4))
        predictor = constant_predictor(np.zeros(3), (2, 12, 12))  # wants 2 grids, gets 3
        with pytest.raises(ValueError, match="grids"):
            refine_stage(predictor, pyramid, JointLocations.single(0, 0, [0.5, 0.5, 0.5]), 0.0, 0.5)

    def test_multi_joint_estimate_rejected(self, scene):
        pyramid = build_pyramid(scene.frame, (2, 4))
        predictor = constant_predictor(np.zeros(3), (3, 12, 12))
        with pytest.raises(ValueError, match="single joint"):
            refine_stage(predictor, pyramid, scene.joints.layer(0), 0.0, 0.5)


def oracle_model(scene, skeleton, camera, stages=(1, 0, 0, 0)):
    """CascadeModel whose predictors are oracles for one known scene."""
    from hierhand.cascade import CascadeModel

    patch_shape = (3, 12, 12)
    truth = scene.joints
    palm_truth = truth.layer(0).coords.reshape(-1)
    layer0_initial = constant_predictor(palm_truth, patch_shape)
    zero = lambda: constant_predictor(np.zeros(3), patch_shape)
    return CascadeModel(
        config=CascadeConfig(stages_per_layer=stages, patch_size=12),
        skeleton=skeleton,
        camera=camera,
        layer0_initial=layer0_initial,
        layer0_stages=[[zero() for _ in range(6)] for _ in range(stages[0])],
        layer0_stage_crops=[[0.3] * 6 for _ in range(stages[0])],
        layer_initial={l: [zero() for _ in range(5)] for l in (1, 2, 3)},
        layer_initial_crops={l: [0.3] * 5 for l in (1, 2, 3)},
        layer_stages={l: [] for l in (1, 2, 3)},
        layer_stage_crops={l: [] for l in (1, 2, 3)},
        holistic=constant_predictor(truth.coords.reshape(-1), patch_shape),
    )


class TestRunLayer0:
    def test_oracle_initializer_recovers_rotation(self, scene, small_skeleton, small_camera):
        model = oracle_model(scene, small_skeleton, small_camera)
        joints, theta = run_layer0(scene.frame, model)
        expected = compute_rotation(scene.joints.get(0, 0), scene.joints.get(0, 3))
        assert abs(theta - expected) < 1e-6
        np.testing.assert_allclose(joints.coords, scene.joints.layer(0).coords, atol=1e-9)

    def test_zero_stages_return_initial(self, scene, small_skeleton, small_camera):
        model = oracle_model(scene, small_skeleton, small_camera, stages=(0, 0, 0, 0))
        joints, _ = run_layer0(scene.frame, model)
        np.testing.assert_array_equal(joints.coords, scene.joints.layer(0).coords)

    def test_theta_freezes_after_layer0(self, scene, small_skeleton, small_camera):
        model = oracle_model(scene, small_skeleton, small_camera)
        state = PipelineState()
        run_layer0(scene.frame, model, state)
        assert state.theta_frozen
        with pytest.raises(RuntimeError, match="frozen"):
            state.set_theta(0.0)

    def test_stage_records_logged(self, scene, small_skeleton, small_camera):
        model = oracle_model(scene, small_skeleton, small_camera)
        state = PipelineState()
        run_layer0(scene.frame, model, state)
        assert len(state.records) == 6
        assert {r.joint for r in state.records} == set(range(6))


class TestRunLayer:
    def test_oracle_offsets_reach_truth(self, scene, small_skeleton, small_camera):
        # per finger, hand the exact patch-space offset to the predictor
        model = oracle_model(scene, small_skeleton, small_camera)
        truth = scene.joints
        theta = compute_rotation(truth.get(0, 0), truth.get(0, 3))
        for layer in (1, 2, 3):
            preds = []
            for j in range(1, 6):
                parent = truth.get(layer - 1, j)
                t = AffineTransform2D(theta, (parent[0], parent[1]), 0.3)
                gt = truth.get(layer, j)
                inv = t.invert()
                off = np.concatenate([map_point(inv, gt[:2]), [gt[2] - parent[2]]])
                preds.append(constant_predictor(off, (3, 12, 12)))
            model.layer_initial[layer] = preds
            out = run_layer(scene.frame, layer, truth.layer(layer - 1), theta, model)
            np.testing.assert_allclose(out.coords, truth.layer(layer).coords, atol=1e-9)

    def test_zero_offset_collapses_to_parent(self, scene, small_skeleton, small_camera):
        model = oracle_model(scene, small_skeleton, small_camera)
        truth = scene.joints
        theta = 0.1
        out = run_layer(scene.frame, 1, truth.layer(0), theta, model)
        for j in range(1, 6):
            np.testing.assert_allclose(out.get(1, j), truth.get(0, j), atol=1e-12)

    def test_perturbed_parent_still_corrected(self, scene, small_skeleton, small_camera):
        # labels are offsets from the perturbed parent, so an oracle trained on
        # them absorbs the upstream error completely
        model = oracle_model(scene, small_skeleton, small_camera)
        truth = scene.joints
        theta = compute_rotation(truth.get(0, 0), truth.get(0, 3))
        eps = np.array([0.03, -0.02, 0.01])
        perturbed = truth.layer(0).with_coords(truth.layer(0).coords + eps)
        preds = []
        for j in range(1, 6):
            parent = perturbed.get(0, j)
            t = AffineTransform2D(theta, (parent[0], parent[1]), 0.3)
            gt = truth.get(1, j)
            inv = t.invert()
            off = np.concatenate(
                [map_point(inv, gt[:2]) - map_point(inv, parent[:2]), [gt[2] - parent[2]]]
            )
            preds.append(constant_predictor(off, (3, 12, 12)))
        model.layer_initial[1] = preds
        out = run_layer(scene.frame, 1, perturbed, theta, model)
        np.testing.assert_allclose(out.coords, truth.layer(1).coords, atol=1e-9)

    def test_invalid_parent_skips_finger_only(self, scene, small_skeleton, small_camera):
        model = oracle_model(scene, small_skeleton, small_camera)
        truth = scene.joints
        valid = np.ones(6, dtype=bool)
        valid[3] = False  # middle finger root unusable
        parents = JointLocations.for_layer(0, truth.layer(0).coords, valid)
        out = run_layer(scene.frame, 1, parents, 0.0, model)
        assert not out.is_valid(1, 3)
        for j in (1, 2, 4, 5):
            assert out.is_valid(1, j)


class TestRidge:
    def test_recovers_linear_map(self, rng):
        x = rng.uniform(size=(200, 10))
        w_true = rng.normal(size=(3, 10))
        y = x @ w_true.T + 0.5
        pred = fit_ridge(x, y, (1e-10,), 0.2, (1, 2, 5))
        np.testing.assert_allclose(pred.weights[:, :-1], w_true, atol=1e-6)
        np.testing.assert_allclose(pred.weights[:, -1], 0.5, atol=1e-6)

    def test_lambda_selection_prefers_generalizing_fit(self, rng):
        # pure-noise targets with near-square design: a tiny penalty
        # interpolates the training block and should lose the validation
        # comparison to a strong penalty
        x = rng.uniform(size=(40, 36))
        y = rng.normal(size=(40, 1))
        overfit = fit_ridge(x, y, (1e-10,), 0.15, (1, 6, 6))
        selected = fit_ridge(x, y, (1e-10, 1e3), 0.15, (1, 6, 6))
        assert np.linalg.norm(selected.weights[:, :-1]) < 0.5 * np.linalg.norm(overfit.weights[:, :-1])


@pytest.fixture(scope="module")
def tiny_setup(small_skeleton, small_camera):
    sampler = make_sampler(small_skeleton, small_camera, seed=33)
    data = generate_dataset(sampler, 60)
    cfg = CascadeConfig(patch_size=12, stages_per_layer=(2, 0, 0, 0))
    model = train_pipeline([(s.frame, s.joints) for s in data], cfg, small_skeleton, small_camera)
    return data, cfg, model


class TestTrainPipeline:
    def test_memorizes_repeated_pose(self, small_skeleton, small_camera):
        sampler = make_sampler(small_skeleton, small_camera, seed=34)
        sample = generate_dataset(sampler, 1)[0]
        data = [(sample.frame, sample.joints)] * 12
        cfg = CascadeConfig(patch_size=12)
        model = train_pipeline(data, cfg, small_skeleton, small_camera)
        estimate = infer_frame(model, sample.frame, "hierarchical")
        assert np.abs(estimate.coords - sample.joints.coords).max() < 1e-3

    def test_single_frame_warns_unreliable(self, small_skeleton, small_camera):
        sampler = make_sampler(small_skeleton, small_camera, seed=35)
        sample = generate_dataset(sampler, 1)[0]
        with pytest.warns(DataQualityWarning, match="unreliable"):
            train_pipeline([(sample.frame, sample.joints)], CascadeConfig(patch_size=12), small_skeleton, small_camera)

    def test_recorded_crop_ratios_match_rule(self, tiny_setup, small_camera):
        # oracle: replay the trained palm cascade on the training frames and
        # re-derive the layer-1 crop ratio from the doubled offset means
        data, cfg, model = tiny_setup
        width = small_camera.width
        offsets = {j: [] for j in range(1, 6)}
        for sample in data:
            est0, theta = run_layer0(sample.frame, model)
            for j in range(1, 6):
                parent = est0.get(0, j)
                t1 = AffineTransform2D(theta, (parent[0], parent[1]), 1.0)
                inv = t1.invert()
                offsets[j].append(map_point(inv, sample.joints.get(1, j)[:2]) - map_point(inv, parent[:2]))
        for j in range(1, 6):
            expected = estimate_crop_ratio(np.array(offsets[j]), width, cfg.min_crop_pixels)
            assert model.layer_initial_crops[1][j - 1] == pytest.approx(expected, abs=1e-12)

    def test_training_error_non_increasing_over_stages(self, tiny_setup):
        # replaying inference on the training frames reproduces the training
        # trajectory, so stage records give the per-stage training errors
        data, cfg, model = tiny_setup
        per_stage = {(stage, joint): [] for stage in (1, 2) for joint in range(6)}
        for sample in data:
            state = PipelineState()
            run_layer0(sample.frame, model, state)
            for rec in state.records:
                gt = sample.joints.get(0, rec.joint)
                before = np.linalg.norm(rec.before - gt)
                after = np.linalg.norm(rec.after - gt)
                per_stage[(rec.stage, rec.joint)].append((before, after))
        for (stage, joint), pairs in per_stage.items():
            before = np.mean([p[0] for p in pairs])
            after = np.mean([p[1] for p in pairs])
            assert after <= before + 1e-12, f"stage {stage} joint {joint} got worse in training"

    def test_empty_dataset_rejected(self, small_skeleton, small_camera):
        with pytest.raises(ValueError, match="non-empty"):
            train_pipeline([], CascadeConfig(), small_skeleton, small_camera)


class TestConfigValidation:
    def test_negative_stage_count_rejected(self):
        with pytest.raises(ValueError):
            CascadeConfig(stages_per_layer=(1, -1, 0, 0))

    def test_bad_val_fraction_rejected(self):
        with pytest.raises(ValueError):
            CascadeConfig(val_fraction=1.5)

    def test_defaults_match_contract(self):
        cfg = CascadeConfig()
        assert cfg.stages_per_layer == (1, 0, 0, 0)
        assert cfg.pyramid_factors == (2, 4)
