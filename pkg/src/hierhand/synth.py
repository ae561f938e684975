"""Synthetic depth data: orthographic hand rendering and pose sampling.

Frames are rendered by exact ray casting against a union of solids derived
from the skeleton: every finger bone becomes a capsule (sphere-swept
segment) and the palm becomes sphere-swept triangles fanned out from the
wrist.  The camera is orthographic and looks along +z, so each pixel keeps
the smallest surface depth above its center, and the silhouette is exactly
the set of pixels whose depth beats the background fill.

The orthographic camera maps model units to normalized image units with a
single scale and an axis flip (model y up, model z toward the viewer;
image y down, depth growing away).  Applying it to a skeleton once up
front keeps every downstream module in one coordinate system.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import RenderError
from .skeleton import HandSkeleton, JointLocations, GlobalPose, PoseParams, forward_kinematics
from .geometry import quat_from_matrix, rot_x, rot_y
from .transform import RasterGrid

# Model axes to image axes: y flips (screen y grows downward) and z flips
# (model z points at the viewer, depth grows away from it).
_AXIS_FLIP = np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True)
class OrthoCamera:
    """Orthographic sensor: uniform model-to-image scale plus frame geometry."""

    scale: float = 1.0 / 380.0
    width: int = 96
    height: int = 96
    background: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("camera scale must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("frame must be at least 8x8 pixels")

    def to_image(self, skeleton: HandSkeleton) -> HandSkeleton:
        """Skeleton re-expressed in normalized image units."""
        return HandSkeleton(
            palm_reference=skeleton.palm_reference @ (_AXIS_FLIP * self.scale).T,
            bone_lengths=skeleton.bone_lengths * self.scale,
            palm_radius=skeleton.palm_radius * self.scale,
            bone_radii=skeleton.bone_radii * self.scale,
            angle_ranges=skeleton.angle_ranges,
        )

    def to_model_units(self, normalized: float | np.ndarray):
        """Convert normalized-unit distances back to model units."""
        return normalized / self.scale


def rotation_about_view_axis(angle: float) -> np.ndarray:
    """Image-space rotation about the viewing axis.

    Built so that applying it to a hand increases the in-plane rotation
    reported by :func:`hierhand.transform.compute_rotation` by exactly
    ``angle``.
    """
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class DepthFrame:
    """A rendered or loaded depth image plus the camera that produced it.

    The silhouette mask is defined (and enforced) as the pixels whose depth
    lies strictly in front of the background fill.
    """

    grid: RasterGrid
    camera: OrthoCamera

    @cached_property
    def mask(self) -> np.ndarray:
        m = self.grid.values < self.grid.fill
        m.setflags(write=False)
        return m

    @property
    def width(self) -> int:
        return self.grid.width

    @property
    def height(self) -> int:
        return self.grid.height

    def pixel_of(self, xy) -> tuple[int, int]:
        """(row, col) of the pixel containing a normalized point, clamped."""
        x, y = float(xy[0]), float(xy[1])
        col = min(max(int(np.floor(x * self.width)), 0), self.width - 1)
        row = min(max(int(np.floor(y * self.height)), 0), self.height - 1)
        return row, col


def _capsule_depth(px, py, a, b, radius):
    """Smallest surface depth of a capsule above each pixel center, inf elsewhere."""
    r2 = radius * radius
    best = np.full(px.shape, np.inf)
    for center in (a, b):
        h2 = (px - center[0]) ** 2 + (py - center[1]) ** 2
        hit = h2 <= r2
        if np.any(hit):
            z = center[2] - np.sqrt(np.maximum(r2 - h2, 0.0))
            best = np.where(hit, np.minimum(best, z), best)
    d = b - a
    dd = float(d @ d)
    if dd > 1e-24:
        coef_a = 1.0 - d[2] * d[2] / dd
        if coef_a > 1e-12:
            w0x = px - a[0]
            w0y = py - a[1]
            w0z = -a[2]
            w0_dot_d = w0x * d[0] + w0y * d[1] + w0z * d[2]
            half_b = w0z - w0_dot_d * d[2] / dd
            coef_c = w0x * w0x + w0y * w0y + w0z * w0z - w0_dot_d * w0_dot_d / dd - r2
            disc = half_b * half_b - coef_a * coef_c
            ok = disc >= 0.0
            if np.any(ok):
                t = (-half_b - np.sqrt(np.maximum(disc, 0.0))) / coef_a
                u = (w0_dot_d + t * d[2]) / dd
                ok &= (u >= 0.0) & (u <= 1.0)
                best = np.where(ok, np.minimum(best, t), best)
    return best


def _inside_triangle_2d(px, py, v0, v1, v2):
    eps = 1e-12

    def edge(ax, ay, bx, by):
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax)

    d0 = edge(v0[0], v0[1], v1[0], v1[1])
    d1 = edge(v1[0], v1[1], v2[0], v2[1])
    d2 = edge(v2[0], v2[1], v0[0], v0[1])
    all_pos = (d0 >= -eps) & (d1 >= -eps) & (d2 >= -eps)
    all_neg = (d0 <= eps) & (d1 <= eps) & (d2 <= eps)
    return all_pos | all_neg


def _slab_depth(px, py, verts, radius):
    """Depth through the two offset faces of a sphere-swept triangle."""
    n = np.cross(verts[1] - verts[0], verts[2] - verts[0])
    norm = np.linalg.norm(n)
    if norm < 1e-18:
        return np.full(px.shape, np.inf)
    n = n / norm
    if abs(n[2]) < 1e-9:
        return np.full(px.shape, np.inf)
    best = np.full(px.shape, np.inf)
    for sign in (1.0, -1.0):
        shifted = verts + sign * radius * n
        v0 = shifted[0]
        z = v0[2] - (n[0] * (px - v0[0]) + n[1] * (py - v0[1])) / n[2]
        inside = _inside_triangle_2d(px, py, shifted[0], shifted[1], shifted[2])
        best = np.where(inside, np.minimum(best, z), best)
    return best


def _bbox_slices(xlo, xhi, ylo, yhi, width, height):
    c0 = max(int(np.ceil(xlo * width - 0.5)) - 1, 0)
    c1 = min(int(np.floor(xhi * width - 0.5)) + 1, width - 1)
    r0 = max(int(np.ceil(ylo * height - 0.5)) - 1, 0)
    r1 = min(int(np.floor(yhi * height - 0.5)) + 1, height - 1)
    if c1 < c0 or r1 < r0:
        return None
    return slice(r0, r1 + 1), slice(c0, c1 + 1)


def render(pose: PoseParams, skeleton: HandSkeleton, camera: OrthoCamera) -> DepthFrame:
    """Rasterize a pose into a depth frame.

    The skeleton must already live in image units (see
    :meth:`OrthoCamera.to_image`).  Rendering is closed form and
    deterministic; the same inputs always produce the same bytes.
    """
    joints = forward_kinematics(skeleton, pose, up_to_layer=3)
    coords = joints.coords
    w, h = camera.width, camera.height
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h

    depth = np.full((h, w), np.inf)

    def splat(candidate_fn, pts, radius):
        xlo = pts[:, 0].min() - radius
        xhi = pts[:, 0].max() + radius
        ylo = pts[:, 1].min() - radius
        yhi = pts[:, 1].max() + radius
        region = _bbox_slices(xlo, xhi, ylo, yhi, w, h)
        if region is None:
            return
        rows, cols = region
        px, py = np.meshgrid(xs[cols], ys[rows])
        local = candidate_fn(px, py)
        depth[rows, cols] = np.minimum(depth[rows, cols], local)

    for layer in (1, 2, 3):
        for finger in range(1, 6):
            a = coords[skeleton.layer_index(layer - 1, finger)]
            b = coords[skeleton.layer_index(layer, finger)]
            r = float(skeleton.bone_radii[layer - 1, finger - 1])
            splat(lambda px, py, a=a, b=b, r=r: _capsule_depth(px, py, a, b, r), np.stack([a, b]), r)

    palm = coords[:6]
    pr = skeleton.palm_radius
    for j in range(1, 5):
        tri = np.stack([palm[0], palm[j], palm[j + 1]])
        splat(lambda px, py, tri=tri: _slab_depth(px, py, tri, pr), tri, pr)
        for e0, e1 in ((0, 1), (1, 2), (2, 0)):
            a, b = tri[e0], tri[e1]
            splat(lambda px, py, a=a, b=b: _capsule_depth(px, py, a, b, pr), np.stack([a, b]), pr)

    covered = np.isfinite(depth)
    if not covered.any():
        raise RenderError("pose projects entirely outside the frame")
    values = np.where(covered & (depth < camera.background), depth, camera.background)
    return DepthFrame(RasterGrid(values, fill=camera.background), camera)


@dataclass(frozen=True)
class PoseSampler:
    """Uniform pose generator for synthetic datasets.

    In-plane rotation is sampled uniformly over ``rotation_range`` and is
    realized exactly: the sampled value equals the in-plane rotation
    recovered from the generated joints.  Out-of-plane tilts, translation
    and per-bone angles are uniform over their boxes; per-bone ranges come
    from the skeleton (twist defaults to a point range at zero, which keeps
    generated poses exactly recoverable from their joints).
    """

    skeleton: HandSkeleton  # image units
    camera: OrthoCamera
    rotation_range: tuple[float, float] = (-1.0, 1.0)
    tilt_range: tuple[float, float] = (-0.15, 0.15)
    translation_center: tuple[float, float, float] = (0.5, 0.72, 0.5)
    translation_extent: tuple[float, float, float] = (0.04, 0.04, 0.05)
    seed: int = 0

    def sample_pose(self, rng: np.random.Generator) -> PoseParams:
        theta = rng.uniform(*self.rotation_range)
        tilt_x = rng.uniform(*self.tilt_range)
        tilt_y = rng.uniform(*self.tilt_range)
        rot = rotation_about_view_axis(theta) @ rot_x(tilt_x) @ rot_y(tilt_y)
        center = np.asarray(self.translation_center)
        extent = np.asarray(self.translation_extent)
        translation = rng.uniform(center - extent, center + extent)
        ranges = self.skeleton.angle_ranges  # (layer, component, lo/hi)
        lo = np.broadcast_to(ranges[:, None, :, 0], (3, 5, 3))
        hi = np.broadcast_to(ranges[:, None, :, 1], (3, 5, 3))
        angles = rng.uniform(lo, hi)
        return PoseParams(GlobalPose(quat_from_matrix(rot), translation), angles)


class Sample(NamedTuple):
    frame: DepthFrame
    joints: JointLocations
    pose: PoseParams


def generate_dataset(sampler: PoseSampler, n: int) -> list[Sample]:
    """Render ``n`` i.i.d. samples; a fixed sampler seed fixes every byte."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(sampler.seed)
    out = []
    for _ in range(n):
        pose = sampler.sample_pose(rng)
        frame = render(pose, sampler.skeleton, sampler.camera)
        joints = forward_kinematics(sampler.skeleton, pose, up_to_layer=3)
        out.append(Sample(frame, joints, pose))
    return out
