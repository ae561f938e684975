"""Kinematic-constraint refinement with a partial particle swarm.

Each hierarchy layer's discriminative estimate is converted to the layer's
own parameter space (rigid palm placement for layer 0, five bone-rotation
triples for the finger layers), a Gaussian swarm is sampled around that
initialization, and an inertia-weight particle swarm maximizes

    energy = log prior + log(likelihood + eps)

where the prior is a diagonal Gaussian around the initialization (rotation
deviations measured as angles) and the likelihood rewards joints whose
projection falls on the hand silhouette and whose depth stays inside the
dominant depth band of the observed cloud.  The winning parameters are
converted back to joint locations through the skeleton, which enforces the
palm structure and bone lengths exactly no matter how distorted the input
estimate was.

The swarm always contains the initialization itself, so refinement can
only keep or improve the initialization's energy, and shrinking the
sampling scales collapses the output onto the initialization.  A fixed
seed fixes every byte of the result.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import DataQualityWarning
from .geometry import (
    quat_canonical,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    quat_rotation_angle,
    wrap_angle,
)
from .skeleton import (
    BoneRotations,
    GlobalPose,
    HandSkeleton,
    JointLocations,
    PoseParams,
    forward_kinematics,
    infer_bone_rotations,
    infer_global_pose,
    parent_bone_directions,
)
from .geometry import CANONICAL_BONE_AXIS, bone_direction, quat_to_matrix, rotation_between
from .synth import DepthFrame


@dataclass(frozen=True)
class SwarmConfig:
    """Swarm size, dynamics, and energy shaping knobs."""

    n_particles: int = 100
    n_generations: int = 5
    inertia_start: float = 0.9
    inertia_end: float = 0.25
    cognitive: float = 1.49445
    social: float = 1.49445
    sigma_rotation: float = np.radians(10.0)
    sigma_translation: float = 0.02
    # wide enough that bone parameters sweep their anatomical ranges, which
    # lets the silhouette term outweigh the prior where the data disagrees
    sigma_bone: float = np.radians(35.0)
    velocity_clamp: float = 3.0  # in units of the per-coordinate sigma
    likelihood_epsilon: float = 1e-6
    silhouette_cutoff: float = 0.03
    depth_margin: float = 0.04
    depth_cutoff: float = 0.03
    translation_box: tuple[float, float] = (-0.5, 1.5)

    def __post_init__(self):
        if self.n_particles < 1 or self.n_generations < 1:
            raise ValueError("swarm needs at least 1 particle and 1 generation")
        for name in ("sigma_rotation", "sigma_translation", "sigma_bone"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.likelihood_epsilon <= 0:
            raise ValueError("likelihood_epsilon must be positive")


@dataclass
class Particle:
    """One swarm member: position, velocity, and its personal best."""

    position: np.ndarray
    velocity: np.ndarray
    best_position: np.ndarray
    best_energy: float


@dataclass(frozen=True)
class ObservationContext:
    """Everything the likelihood needs about one frame and one layer.

    Built once per refinement call: the silhouette distance map and the
    depth band of the masked cloud are precomputed so that scoring a whole
    swarm costs a few vectorized lookups.  ``parents`` (and
    ``grandparents`` for layers 2 and 3) are the already-refined joints of
    the previous layers.
    """

    frame: DepthFrame
    skeleton: HandSkeleton
    distance_map: np.ndarray  # pixels to the silhouette, 0 inside
    depth_band: tuple[float, float]
    silhouette_empty: bool
    parents: JointLocations | None = None
    grandparents: JointLocations | None = None

    @classmethod
    def from_frame(
        cls,
        frame: DepthFrame,
        skeleton: HandSkeleton,
        parents: JointLocations | None = None,
        grandparents: JointLocations | None = None,
    ) -> "ObservationContext":
        mask = frame.mask
        empty = not bool(mask.any())
        if empty:
            dist = np.zeros_like(frame.grid.values)
            band = (0.0, 0.0)
        else:
            dist = distance_transform_edt(~mask)
            depths = frame.grid.values[mask]
            band = (float(np.percentile(depths, 5)), float(np.percentile(depths, 95)))
        dist = np.ascontiguousarray(dist, dtype=float)
        dist.setflags(write=False)
        return cls(frame, skeleton, dist, band, empty, parents, grandparents)


def silhouette_score(ctx: ObservationContext, xy: np.ndarray, cutoff: float) -> np.ndarray:
    """Containment score in [0, 1] per point: 1 on the silhouette, linear decay.

    Points beyond the frame add their out-of-frame distance to the distance
    transform value at the nearest edge pixel, so the decay stays monotone
    along any path leading away from the hand.
    """
    frame = ctx.frame
    w, h = frame.width, frame.height
    scale = float(max(w, h))
    x = xy[..., 0] * w - 0.5
    y = xy[..., 1] * h - 0.5
    cx = np.clip(np.rint(x).astype(int), 0, w - 1)
    cy = np.clip(np.rint(y).astype(int), 0, h - 1)
    inside_dist = ctx.distance_map[cy, cx] / scale
    overflow = np.hypot(np.maximum(np.abs(x - cx) - 0.5, 0.0), np.maximum(np.abs(y - cy) - 0.5, 0.0))
    d = inside_dist + overflow / scale
    return np.clip(1.0 - d / cutoff, 0.0, 1.0)


def depth_band_score(ctx: ObservationContext, z: np.ndarray, margin: float, cutoff: float) -> np.ndarray:
    lo, hi = ctx.depth_band
    gap = np.maximum(lo - margin - z, 0.0) + np.maximum(z - hi - margin, 0.0)
    return np.clip(1.0 - gap / cutoff, 0.0, 1.0)


def likelihood_energy(joints: JointLocations, ctx: ObservationContext, cfg: SwarmConfig) -> float:
    """Sum of per-joint containment scores; a fully valid pose scores the joint count.

    Each valid joint contributes the average of its silhouette and depth
    terms, so the score is bounded by the number of joints.  An empty
    silhouette yields zero and a data-quality warning.
    """
    if ctx.silhouette_empty:
        warnings.warn("empty hand silhouette; likelihood is zero", DataQualityWarning, stacklevel=2)
        return 0.0
    coords = joints.coords[joints.valid]
    return float(_likelihood_batch(coords[None, :, :], ctx, cfg)[0])


def _likelihood_batch(coords: np.ndarray, ctx: ObservationContext, cfg: SwarmConfig) -> np.ndarray:
    """(n_particles, n_joints, 3) -> (n_particles,) likelihood scores."""
    if ctx.silhouette_empty:
        return np.zeros(coords.shape[0])
    b = silhouette_score(ctx, coords[..., :2], cfg.silhouette_cutoff)
    d = depth_band_score(ctx, coords[..., 2], cfg.depth_margin, cfg.depth_cutoff)
    return 0.5 * (b + d).sum(axis=-1)


# ---------------------------------------------------------------------------
# partial-pose parameter spaces


def pack_global(pose: GlobalPose) -> np.ndarray:
    return np.concatenate([pose.quaternion, pose.translation])


def unpack_global(x: np.ndarray) -> GlobalPose:
    return GlobalPose(quat_canonical(quat_normalize(x[:4])), x[4:7])


def prior_energy(position: np.ndarray, mean: np.ndarray, cfg: SwarmConfig, layer: int):
    """Diagonal-Gaussian log density around the initialization, up to a constant.

    Layer 0 measures the quaternion block by the relative rotation angle
    against ``sigma_rotation``; translations and bone angles are plain
    per-coordinate deviations (angles wrapped into (-pi, pi]).
    """
    position = np.asarray(position, dtype=float)
    single = position.ndim == 1
    pos = position[None, :] if single else position
    if layer == 0:
        ang = quat_rotation_angle(quat_normalize(pos[:, :4]), mean[:4])
        dt = (pos[:, 4:7] - mean[4:7]) / cfg.sigma_translation
        e = -0.5 * ((np.atleast_1d(ang) / cfg.sigma_rotation) ** 2 + (dt**2).sum(axis=1))
    else:
        d = wrap_angle(pos - mean[None, :]) / cfg.sigma_bone
        e = -0.5 * (d**2).sum(axis=1)
    return float(e[0]) if single else e


def _sample_positions(mean: np.ndarray, layer: int, cfg: SwarmConfig, rng: np.random.Generator, n: int):
    """Gaussian swarm around the mean; the mean itself is particle zero."""
    if layer == 0:
        rotvecs = rng.normal(0.0, cfg.sigma_rotation, size=(n, 3))
        quats = quat_canonical(quat_multiply(mean[:4], quat_from_rotvec(rotvecs)))
        trans = mean[4:7] + rng.normal(0.0, cfg.sigma_translation, size=(n, 3))
        positions = np.concatenate([quats, trans], axis=1)
    else:
        positions = mean[None, :] + rng.normal(0.0, cfg.sigma_bone, size=(n, mean.size))
    positions[0] = mean
    return positions


def _sigma_vector(layer: int, cfg: SwarmConfig, dim: int) -> np.ndarray:
    if layer == 0:
        # quaternion components move at roughly half the rotation angle
        return np.concatenate([np.full(4, 0.5 * cfg.sigma_rotation), np.full(3, cfg.sigma_translation)])
    return np.full(dim, cfg.sigma_bone)


def _make_normalizer(layer: int, cfg: SwarmConfig, skeleton: HandSkeleton):
    if layer == 0:
        lo, hi = cfg.translation_box

        def normalize(x: np.ndarray) -> np.ndarray:
            q = quat_canonical(quat_normalize(x[:4]))
            t = np.clip(x[4:7], lo, hi)
            return np.concatenate([q, t])

    else:
        ranges = skeleton.angle_ranges[layer - 1]  # (3, 2)
        lo = np.tile(ranges[:, 0], 5)
        hi = np.tile(ranges[:, 1], 5)

        def normalize(x: np.ndarray) -> np.ndarray:
            return np.clip(wrap_angle(x), lo, hi)

    return normalize


# ---------------------------------------------------------------------------
# swarm core


def pso_step(
    swarm: list[Particle],
    best_position: np.ndarray,
    best_energy: float,
    inertia: float,
    cognitive: float,
    social: float,
    rng: np.random.Generator,
    energy: Callable[[np.ndarray], np.ndarray],
    normalize: Callable[[np.ndarray], np.ndarray] | None = None,
    velocity_limit: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """One inertia-weight swarm update; returns the new global best.

    Velocities blend the previous velocity with random attractions toward
    each particle's personal best and the global best, positions move by
    the velocity and get re-normalized, and bests only change on strict
    energy improvement (so the global best trace is non-decreasing by
    construction).
    """
    if not swarm:
        raise ValueError("swarm must be non-empty")
    dim = swarm[0].position.size
    for p in swarm:
        r1 = rng.uniform(size=dim)
        r2 = rng.uniform(size=dim)
        p.velocity = (
            inertia * p.velocity
            + cognitive * r1 * (p.best_position - p.position)
            + social * r2 * (best_position - p.position)
        )
        if velocity_limit is not None:
            p.velocity = np.clip(p.velocity, -velocity_limit, velocity_limit)
        p.position = p.position + p.velocity
        if normalize is not None:
            p.position = normalize(p.position)
    energies = energy(np.stack([p.position for p in swarm]))
    for p, e in zip(swarm, energies):
        if e > p.best_energy:
            p.best_energy = float(e)
            p.best_position = p.position.copy()
        if e > best_energy:
            best_energy = float(e)
            best_position = p.position.copy()
    return best_position, best_energy


@dataclass
class SwarmResult:
    best_position: np.ndarray
    best_energy: float
    initial_energy: float
    trace: list[float] = field(default_factory=list)


def optimize_swarm(
    energy: Callable[[np.ndarray], np.ndarray],
    initial_positions: np.ndarray,
    cfg: SwarmConfig,
    rng: np.random.Generator,
    normalize: Callable[[np.ndarray], np.ndarray] | None = None,
    velocity_limit: np.ndarray | None = None,
) -> SwarmResult:
    """Run the configured number of generations from explicit start positions."""
    positions = np.asarray(initial_positions, dtype=float)
    if normalize is not None:
        positions = np.stack([normalize(p) for p in positions])
    energies = energy(positions)
    swarm = [
        Particle(p.copy(), np.zeros_like(p), p.copy(), float(e)) for p, e in zip(positions, energies)
    ]
    best_idx = int(np.argmax(energies))
    best_position = positions[best_idx].copy()
    best_energy = float(energies[best_idx])
    result = SwarmResult(best_position, best_energy, best_energy, [best_energy])
    gens = cfg.n_generations
    for g in range(gens):
        frac = g / (gens - 1) if gens > 1 else 0.0
        inertia = cfg.inertia_start + (cfg.inertia_end - cfg.inertia_start) * frac
        best_position, best_energy = pso_step(
            swarm,
            best_position,
            best_energy,
            inertia,
            cfg.cognitive,
            cfg.social,
            rng,
            energy,
            normalize,
            velocity_limit,
        )
        result.trace.append(best_energy)
    result.best_position = best_position
    result.best_energy = best_energy
    return result


# ---------------------------------------------------------------------------
# layer refinement


@dataclass
class RefineResult:
    """Constraint-satisfying joints plus the winning partial pose.

    ``pose`` is a :class:`GlobalPose` for layer 0 and a (5, 3) array of
    bone-rotation triples for the finger layers.  Energies of the
    initialization and the winner are kept for diagnostics.
    """

    joints: JointLocations
    pose: GlobalPose | np.ndarray
    initial_energy: float
    best_energy: float
    trace: list[float]


def _joints_batch_layer0(skeleton: HandSkeleton, positions: np.ndarray) -> np.ndarray:
    quats = quat_normalize(positions[:, :4])
    rots = quat_to_matrix(quats)
    palm = np.einsum("nij,kj->nki", rots, skeleton.palm_reference)
    return palm + positions[:, None, 4:7]


def _joints_batch_layer(
    skeleton: HandSkeleton,
    layer: int,
    positions: np.ndarray,
    parents: JointLocations,
    grandparents: JointLocations | None,
) -> np.ndarray:
    pdirs = parent_bone_directions(skeleton, layer, parents, grandparents)
    frames = np.stack([rotation_between(CANONICAL_BONE_AXIS, d) for d in pdirs])
    angles = positions.reshape(-1, 5, 3)
    local = bone_direction(angles)
    world = np.einsum("fij,nfj->nfi", frames, local)
    anchors = np.stack([parents.get(layer - 1, j) for j in range(1, 6)])
    lengths = skeleton.bone_lengths[layer - 1][None, :, None]
    return anchors[None, :, :] + lengths * world


def refine_partial_pose(
    layer: int,
    cnn_joints: JointLocations,
    ctx: ObservationContext,
    cfg: SwarmConfig,
    rng: np.random.Generator | int | None = 0,
) -> RefineResult:
    """Project one layer's estimates onto the kinematic model and polish them.

    The initialization comes from rigid palm alignment (layer 0) or
    bone-rotation extraction (finger layers); the swarm then trades off
    staying near that initialization against silhouette and depth-band
    containment.  The returned joints are a deterministic function of the
    inputs and the seed, and always satisfy the palm structure and bone
    lengths exactly.  An empty silhouette degrades to prior-only
    optimization with a warning.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    skeleton = ctx.skeleton
    if ctx.silhouette_empty:
        warnings.warn(
            "empty hand silhouette; refining against the prior only",
            DataQualityWarning,
            stacklevel=2,
        )

    if layer == 0:
        init = infer_global_pose(skeleton, cnn_joints)
        mean = pack_global(init)

        def to_joints(positions: np.ndarray) -> np.ndarray:
            return _joints_batch_layer0(skeleton, positions)

    elif layer in (1, 2, 3):
        if ctx.parents is None:
            raise ValueError("finger-layer refinement needs parent joints in the context")
        rotations: BoneRotations = infer_bone_rotations(
            skeleton, cnn_joints, ctx.parents, ctx.grandparents, layer
        )
        mean = rotations.angles.reshape(-1)

        def to_joints(positions: np.ndarray) -> np.ndarray:
            return _joints_batch_layer(skeleton, layer, positions, ctx.parents, ctx.grandparents)

    else:
        raise ValueError("layer must be 0..3")

    def energy(positions: np.ndarray) -> np.ndarray:
        prior = prior_energy(positions, mean, cfg, layer)
        like = _likelihood_batch(to_joints(positions), ctx, cfg)
        return prior + np.log(like + cfg.likelihood_epsilon)

    normalize = _make_normalizer(layer, cfg, skeleton)
    start = _sample_positions(mean, layer, cfg, rng, cfg.n_particles)
    limit = cfg.velocity_clamp * _sigma_vector(layer, cfg, mean.size)
    run = optimize_swarm(energy, start, cfg, rng, normalize, limit)

    best = run.best_position
    coords = to_joints(best[None, :])[0]
    if layer == 0:
        pose: GlobalPose | np.ndarray = unpack_global(best)
        joints = JointLocations.for_layer(0, coords)
    else:
        pose = best.reshape(5, 3)
        joints = JointLocations.for_layer(layer, coords)
    return RefineResult(joints, pose, run.initial_energy, run.best_energy, run.trace)
