"""Hand skeleton model and kinematics.

The hand is modelled as 21 joints arranged in four layers ordered by
articulation depth:

* layer 0: wrist (finger index ``j = 0``) plus the five finger root joints
  (``j = 1..5``, thumb to pinky), rigidly attached to the palm;
* layers 1..3: one joint per finger, each connected to the layer below by a
  bone of fixed length.

The full pose has 51 degrees of freedom: a global rotation (unit
quaternion) and translation for the palm, and five (swing, bend, twist)
Euler triples for each of the three finger layers.  Twist spins a bone
about its own axis and does not move any joint; inverse computations
always report it as zero.

Coordinates follow the image convention used throughout the package: x and
y are normalized by frame width and height (y grows downward), z is depth
in the same normalized scale.  A skeleton loaded from a config file lives
in model units; :meth:`OrthoCamera.to_image` (see :mod:`hierhand.synth`)
produces the image-space twin that every pipeline stage consumes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegenerateGeometryWarning
from .geometry import (
    CANONICAL_BONE_AXIS,
    bone_angles,
    bone_direction,
    quat_canonical,
    quat_from_matrix,
    quat_to_matrix,
    rotation_between,
    unit,
    wrap_angle,
)

LAYER_COUNT = 4
LAYER_JOINT_COUNTS = (6, 5, 5, 5)
FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")

WRIST = (0, 0)
MIDDLE_ROOT = (0, 3)


def layer_joint_ids(layer: int) -> tuple[tuple[int, int], ...]:
    """(layer, finger) identifiers of one layer, in canonical order."""
    if layer == 0:
        return tuple((0, j) for j in range(6))
    if layer in (1, 2, 3):
        return tuple((layer, j) for j in range(1, 6))
    raise ValueError(f"layer must be 0..3, got {layer}")


HAND_JOINT_IDS: tuple[tuple[int, int], ...] = tuple(
    jid for layer in range(LAYER_COUNT) for jid in layer_joint_ids(layer)
)

_FLAT_INDEX = {jid: i for i, jid in enumerate(HAND_JOINT_IDS)}


def flat_joint_index(layer: int, finger: int) -> int:
    """Map a (layer, finger) pair to its flat index in 0..20."""
    try:
        return _FLAT_INDEX[(layer, finger)]
    except KeyError:
        raise ValueError(f"no joint ({layer}, {finger}) in the 21-joint model") from None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.setflags(write=False)
    return a


# Conservative per-layer (swing, bend, twist) intervals in radians, used by
# the pose sampler and as clamp boxes during swarm refinement.
DEFAULT_ANGLE_RANGES = np.array(
    [
        [[-0.45, 0.45], [-0.30, 1.10], [0.0, 0.0]],
        [[-0.20, 0.20], [-0.20, 1.20], [0.0, 0.0]],
        [[-0.15, 0.15], [-0.20, 1.00], [0.0, 0.0]],
    ]
)


@dataclass(frozen=True)
class HandSkeleton:
    """Fixed hand geometry: palm shape, finger bone lengths, render radii.

    ``palm_reference`` holds the wrist (row 0, pinned to the origin) and the
    five finger roots of an upright reference palm.  ``bone_lengths[l-1, j-1]``
    is the length of the bone ending at joint (l, j).  Radii are only used by
    the synthetic renderer.  Angle ranges bound the per-bone Euler triples.
    """

    palm_reference: np.ndarray  # (6, 3), wrist first
    bone_lengths: np.ndarray  # (3, 5), layers 1..3 by finger
    palm_radius: float = 13.0
    bone_radii: np.ndarray = field(default_factory=lambda: np.array([[9.0] * 5, [8.0] * 5, [7.0] * 5]))
    angle_ranges: np.ndarray = field(default_factory=lambda: DEFAULT_ANGLE_RANGES.copy())

    def __post_init__(self):
        palm = _readonly(self.palm_reference)
        lengths = _readonly(self.bone_lengths)
        radii = _readonly(self.bone_radii)
        ranges = _readonly(self.angle_ranges)
        if palm.shape != (6, 3):
            raise ValueError(f"palm_reference must be (6, 3), got {palm.shape}")
        if np.linalg.norm(palm[0]) > 1e-12:
            raise ValueError("palm_reference wrist (row 0) must sit at the origin")
        if lengths.shape != (3, 5):
            raise ValueError(f"bone_lengths must be (3, 5), got {lengths.shape}")
        if not np.all(lengths > 0):
            raise ValueError("all bone lengths must be strictly positive")
        if radii.shape != (3, 5):
            raise ValueError(f"bone_radii must be (3, 5), got {radii.shape}")
        if ranges.shape != (3, 3, 2):
            raise ValueError(f"angle_ranges must be (3, 3, 2), got {ranges.shape}")
        if self.palm_radius <= 0:
            raise ValueError("palm_radius must be positive")
        object.__setattr__(self, "palm_reference", palm)
        object.__setattr__(self, "bone_lengths", lengths)
        object.__setattr__(self, "bone_radii", radii)
        object.__setattr__(self, "angle_ranges", ranges)

    @property
    def n_joints(self) -> int:
        return 21

    def layer_index(self, layer: int, finger: int) -> int:
        """Flat joint index of the (layer, finger) joint."""
        return flat_joint_index(layer, finger)

    def bone_length(self, layer: int, finger: int) -> float:
        if layer not in (1, 2, 3) or finger not in (1, 2, 3, 4, 5):
            raise ValueError(f"no bone ends at joint ({layer}, {finger})")
        return float(self.bone_lengths[layer - 1, finger - 1])

    def hand_span(self) -> float:
        """Largest wrist-to-fingertip reach of the model, in its own units."""
        root_dist = np.linalg.norm(self.palm_reference[1:], axis=1)
        return float(np.max(root_dist + self.bone_lengths.sum(axis=0)))

    def palm_distance_table(self) -> np.ndarray:
        """Pairwise (6, 6) distances of the reference palm joints."""
        d = self.palm_reference[:, None, :] - self.palm_reference[None, :, :]
        return np.linalg.norm(d, axis=-1)


@dataclass(frozen=True)
class JointLocations:
    """3D locations for an explicit set of (layer, finger) joints.

    Coordinates are (x, y, z) with x, y normalized by the frame size and z
    in normalized depth units.  ``valid`` marks joints that carry usable
    estimates; geometry consumers must skip invalid entries.
    """

    joint_ids: tuple[tuple[int, int], ...]
    coords: np.ndarray  # (n, 3)
    valid: np.ndarray  # (n,) bool

    def __post_init__(self):
        ids = tuple(tuple(j) for j in self.joint_ids)
        coords = _readonly(self.coords)
        if coords.shape != (len(ids), 3):
            raise ValueError(f"coords shape {coords.shape} does not match {len(ids)} joints")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate joint ids")
        for jid in ids:
            flat_joint_index(*jid)
        valid = np.ascontiguousarray(np.asarray(self.valid, dtype=bool))
        if valid.shape != (len(ids),):
            raise ValueError("valid mask shape mismatch")
        valid.setflags(write=False)
        object.__setattr__(self, "joint_ids", ids)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def for_layer(cls, layer: int, coords: np.ndarray, valid=None) -> "JointLocations":
        ids = layer_joint_ids(layer)
        if valid is None:
            valid = np.ones(len(ids), dtype=bool)
        return cls(ids, coords, valid)

    @classmethod
    def full_hand(cls, coords: np.ndarray, valid=None) -> "JointLocations":
        if valid is None:
            valid = np.ones(21, dtype=bool)
        return cls(HAND_JOINT_IDS, coords, valid)

    @classmethod
    def single(cls, layer: int, finger: int, coord, valid: bool = True) -> "JointLocations":
        return cls(((layer, finger),), np.asarray(coord, dtype=float).reshape(1, 3), np.array([valid]))

    @classmethod
    def concat(cls, parts: list["JointLocations"]) -> "JointLocations":
        ids = tuple(j for p in parts for j in p.joint_ids)
        coords = np.concatenate([p.coords for p in parts], axis=0)
        valid = np.concatenate([p.valid for p in parts], axis=0)
        return cls(ids, coords, valid)

    def __len__(self) -> int:
        return len(self.joint_ids)

    def index_of(self, layer: int, finger: int) -> int:
        try:
            return self.joint_ids.index((layer, finger))
        except ValueError:
            raise KeyError(f"joint ({layer}, {finger}) not present") from None

    def get(self, layer: int, finger: int) -> np.ndarray:
        return self.coords[self.index_of(layer, finger)]

    def is_valid(self, layer: int, finger: int) -> bool:
        return bool(self.valid[self.index_of(layer, finger)])

    def layer(self, layer: int) -> "JointLocations":
        return self.subset(layer_joint_ids(layer))

    def subset(self, ids) -> "JointLocations":
        idx = [self.index_of(*jid) for jid in ids]
        return JointLocations(tuple(tuple(j) for j in ids), self.coords[idx], self.valid[idx])

    def with_coords(self, coords: np.ndarray, valid=None) -> "JointLocations":
        return JointLocations(self.joint_ids, coords, self.valid if valid is None else valid)

    @property
    def xy(self) -> np.ndarray:
        return self.coords[:, :2]

    @property
    def z(self) -> np.ndarray:
        return self.coords[:, 2]


class BoneRotations(NamedTuple):
    """Per-finger Euler triples plus a mask of degenerate observations."""

    angles: np.ndarray  # (5, 3)
    degenerate: np.ndarray  # (5,) bool


@dataclass(frozen=True)
class GlobalPose:
    """Rigid palm placement: unit quaternion plus translation."""

    quaternion: np.ndarray  # (4,) scalar first
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        q = _readonly(self.quaternion)
        t = _readonly(self.translation)
        if q.shape != (4,):
            raise ValueError("quaternion must have 4 components")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("quaternion must be unit length within 1e-9")
        if t.shape != (3,):
            raise ValueError("translation must have 3 components")
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "GlobalPose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))


@dataclass(frozen=True)
class PoseParams:
    """Full 51-DoF hand pose: global placement plus three angle layers.

    ``layer_angles[l-1, j-1]`` is the (swing, bend, twist) triple of the bone
    ending at joint (l, j).  All angles live in (-pi, pi].
    """

    global_pose: GlobalPose
    layer_angles: np.ndarray  # (3, 5, 3)

    def __post_init__(self):
        angles = _readonly(self.layer_angles)
        if angles.shape != (3, 5, 3):
            raise ValueError(f"layer_angles must be (3, 5, 3), got {angles.shape}")
        if not np.all((angles > -np.pi) & (angles <= np.pi)):
            raise ValueError("Euler angles must lie in (-pi, pi]")
        object.__setattr__(self, "layer_angles", angles)

    @classmethod
    def rest(cls, translation=(0.0, 0.0, 0.0)) -> "PoseParams":
        gp = GlobalPose(np.array([1.0, 0.0, 0.0, 0.0]), np.asarray(translation, dtype=float))
        return cls(gp, np.zeros((3, 5, 3)))

    def with_global(self, global_pose: GlobalPose) -> "PoseParams":
        return PoseParams(global_pose, self.layer_angles)

    def with_layer_angles(self, layer: int, angles: np.ndarray) -> "PoseParams":
        out = self.layer_angles.copy()
        out[layer - 1] = angles
        return PoseParams(self.global_pose, out)


def _check_quaternion(pose: GlobalPose):
    if abs(np.linalg.norm(pose.quaternion) - 1.0) > 1e-9:
        raise ValueError("quaternion drifted off unit length beyond 1e-9")


def parent_bone_directions(
    skeleton: HandSkeleton,
    layer: int,
    parents: JointLocations,
    grandparents: JointLocations | None,
) -> np.ndarray:
    """Unit direction of each finger's parent bone for the given layer.

    For layer 1 the parent bone runs from the wrist to the finger root; the
    wrist is taken from ``parents`` (or ``grandparents`` when provided).
    A zero-length parent bone falls back to the canonical axis.
    """
    if layer < 1 or layer > 3:
        raise ValueError("layer must be 1..3")
    dirs = np.empty((5, 3))
    for j in range(1, 6):
        p = parents.get(layer - 1, j)
        if layer == 1:
            source = grandparents if grandparents is not None else parents
            g = source.get(0, 0)
        else:
            if grandparents is None:
                raise ValueError("grandparent joints required for layers 2 and 3")
            g = grandparents.get(layer - 2, j)
        d = p - g
        n = np.linalg.norm(d)
        dirs[j - 1] = CANONICAL_BONE_AXIS if n < 1e-12 else d / n
    return dirs


def place_layer_joints(
    skeleton: HandSkeleton,
    layer: int,
    angles: np.ndarray,
    parents: JointLocations,
    grandparents: JointLocations | None,
) -> JointLocations:
    """Place one finger layer from its Euler triples and observed parents.

    Each joint lands at ``parent + bone_length * direction`` where the
    direction is the parent bone direction rotated by the joint's triple.
    Bone lengths are enforced exactly by construction.
    """
    angles = np.asarray(angles, dtype=float).reshape(5, 3)
    pdirs = parent_bone_directions(skeleton, layer, parents, grandparents)
    coords = np.empty((5, 3))
    valid = np.empty(5, dtype=bool)
    for j in range(1, 6):
        frame = rotation_between(CANONICAL_BONE_AXIS, pdirs[j - 1])
        direction = frame @ bone_direction(angles[j - 1])
        p = parents.get(layer - 1, j)
        coords[j - 1] = p + skeleton.bone_length(layer, j) * direction
        pv = parents.is_valid(layer - 1, j)
        if layer == 1:
            source = grandparents if grandparents is not None else parents
            gv = source.is_valid(0, 0)
        else:
            gv = grandparents.is_valid(layer - 2, j)
        valid[j - 1] = pv and gv
    return JointLocations.for_layer(layer, coords, valid)


def forward_kinematics(
    skeleton: HandSkeleton, pose: PoseParams, up_to_layer: int = 3
) -> JointLocations:
    """Joint locations of layers 0..``up_to_layer`` for a pose.

    Layer 0 is the reference palm rigidly moved by the global pose; each
    finger layer chains off the previous one with exact bone lengths.
    """
    if up_to_layer not in (0, 1, 2, 3):
        raise ValueError("up_to_layer must be 0..3")
    _check_quaternion(pose.global_pose)
    rot = quat_to_matrix(pose.global_pose.quaternion)
    palm = skeleton.palm_reference @ rot.T + pose.global_pose.translation
    layers = [JointLocations.for_layer(0, palm)]
    for layer in range(1, up_to_layer + 1):
        grand = layers[layer - 2] if layer >= 2 else layers[0]
        layers.append(
            place_layer_joints(skeleton, layer, pose.layer_angles[layer - 1], layers[layer - 1], grand)
        )
    return JointLocations.concat(layers)


def infer_global_pose(skeleton: HandSkeleton, palm_joints: JointLocations) -> GlobalPose:
    """Least-squares rigid alignment of the reference palm onto observations.

    Solves for the proper rotation and translation minimizing the sum of
    squared distances from the transformed reference to the six observed
    palm joints (SVD of the cross covariance, smallest singular vector sign
    flipped when the naive solution reflects).  Rank-deficient observations
    (coincident or collinear joints) fall back to translation-only alignment
    with a :class:`DegenerateGeometryWarning`.
    """
    obs = palm_joints.layer(0) if palm_joints.joint_ids != layer_joint_ids(0) else palm_joints
    if not np.all(obs.valid):
        raise ValueError("all six palm joints must be valid for rigid alignment")
    ref = skeleton.palm_reference
    tgt = obs.coords
    ref_c = ref.mean(axis=0)
    tgt_c = tgt.mean(axis=0)
    centered = tgt - tgt_c
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1.0):
        warnings.warn(
            "palm joints are rank deficient (collinear or coincident); "
            "falling back to translation-only alignment",
            DegenerateGeometryWarning,
            stacklevel=2,
        )
        return GlobalPose(np.array([1.0, 0.0, 0.0, 0.0]), tgt_c - ref_c)
    h = (ref - ref_c).T @ centered
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = tgt_c - rot @ ref_c
    return GlobalPose(quat_canonical(quat_from_matrix(rot)), t)


def infer_bone_rotations(
    skeleton: HandSkeleton,
    joints_here: JointLocations,
    joints_parent: JointLocations,
    joints_grandparent: JointLocations | None,
    layer: int,
) -> BoneRotations:
    """Per-finger Euler triples that reproduce the observed joints.

    The recovered swing and bend aim the bone at each observed joint; the
    unobservable twist is zero.  Re-running :func:`place_layer_joints` with
    the result puts every joint at exactly one bone length from its parent
    along the observed direction.  A joint coinciding with its parent is
    flagged degenerate and gets a zero triple.
    """
    if layer not in (1, 2, 3):
        raise ValueError("layer must be 1..3")
    pdirs = parent_bone_directions(skeleton, layer, joints_parent, joints_grandparent)
    angles = np.zeros((5, 3))
    degenerate = np.zeros(5, dtype=bool)
    for j in range(1, 6):
        observed = joints_here.get(layer, j) - joints_parent.get(layer - 1, j)
        n = np.linalg.norm(observed)
        if n < 1e-12:
            degenerate[j - 1] = True
            continue
        frame = rotation_between(CANONICAL_BONE_AXIS, pdirs[j - 1])
        local = frame.T @ (observed / n)
        angles[j - 1] = wrap_angle(bone_angles(local))
    return BoneRotations(angles, degenerate)
