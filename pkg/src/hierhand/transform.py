"""Attention transforms: parameterized crop-rotate warps for grids and points.

A transform is the affine map

    [x_src]   [ b cos(theta)  b sin(theta) ] [x_out]   [t_x]
    [y_src] = [-b sin(theta)  b cos(theta) ] [y_out] + [t_y]

from output-patch coordinates to source-image coordinates.  Source
coordinates are normalized to [0, 1]^2 with the origin at the top-left
corner and y growing downward.  Output-patch coordinates are normalized to
the patch size and *centered*: the patch spans [-1/2, 1/2]^2 so its origin
is the patch center.  The translation therefore places the patch center at
``t`` (typically the joint under attention) and the rotation spins the
patch about its own center.  A crop ratio ``b < 1`` zooms into a
sub-window of width ``b`` times the source width.

Positive ``theta`` rotates sampled content counter-clockwise in standard
mathematical (y up) orientation.  An upright subject yields ``theta = 0``.

Only the x and y coordinates of a point participate in the map; depth is
always carried through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .skeleton import JointLocations

# Sub-pixel offsets below this snap to exact pixel centers so that identity
# warps reproduce their input bit for bit.
_PIXEL_SNAP = 1e-9


@dataclass(frozen=True)
class AffineTransform2D:
    """Rotation + translation + crop, the unit of spatial attention.

    ``crop_ratio`` must be strictly positive.  Attention transforms built
    from data keep it in (0, 1]; values above 1 arise only as the inverse
    of a cropping transform and are accepted so that ``invert`` closes over
    the parameter space.
    """

    theta: float
    translation: tuple[float, float]
    crop_ratio: float

    def __post_init__(self):
        b = float(self.crop_ratio)
        if not np.isfinite(b) or b <= 0.0:
            raise ValueError(f"crop_ratio must be positive and finite, got {b}")
        if not np.isfinite(self.theta):
            raise ValueError("theta must be finite")
        tx, ty = (float(v) for v in self.translation)
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "translation", (tx, ty))
        object.__setattr__(self, "crop_ratio", b)

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        """Transform whose output patch reproduces the full source frame."""
        return cls(0.0, (0.5, 0.5), 1.0)

    @property
    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.theta), np.sin(self.theta)
        b = self.crop_ratio
        return np.array([[b * c, b * s], [-b * s, b * c]])

    @property
    def offset(self) -> np.ndarray:
        return np.array(self.translation)

    def invert(self) -> "AffineTransform2D":
        """Exact algebraic inverse, representable in the same parameterization."""
        c, s = np.cos(self.theta), np.sin(self.theta)
        inv_b = 1.0 / self.crop_ratio
        m_inv = inv_b * np.array([[c, -s], [s, c]])
        t_new = -m_inv @ self.offset
        return AffineTransform2D(-self.theta, (t_new[0], t_new[1]), inv_b)


@dataclass(frozen=True)
class RasterGrid:
    """A scalar field on a pixel grid (depth values or feature activations).

    ``coord_scale`` and ``coord_offset`` map the grid's own normalized
    coordinates to the original frame's normalized coordinates
    (``p_frame = offset + scale * p_grid``).  Plain images and pooled
    pyramid levels use the identity mapping; the hook exists for feature
    maps whose geometry was altered by striding or padding.
    """

    values: np.ndarray  # (height, width)
    fill: float = 0.0
    coord_scale: tuple[float, float] = (1.0, 1.0)
    coord_offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"values must be a 2D grid with positive dims, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "fill", float(self.fill))
        object.__setattr__(self, "coord_scale", tuple(float(x) for x in self.coord_scale))
        object.__setattr__(self, "coord_offset", tuple(float(x) for x in self.coord_offset))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def compute_rotation(wrist, middle_root) -> float:
    """In-plane rotation of the hand from two layer-0 joints.

    Returns the signed angle in (-pi, pi] between the wrist-to-middle-root
    vector and the upright direction (pointing up on screen, toward smaller
    y).  Zero means the hand already stands upright.
    """
    wrist = np.asarray(wrist, dtype=float)[:2]
    middle = np.asarray(middle_root, dtype=float)[:2]
    # subtract in this order rather than negating the difference: -0.0 as the
    # first arctan2 argument would return -pi, outside the (-pi, pi] contract
    dx = wrist[0] - middle[0]
    dy = wrist[1] - middle[1]
    if np.hypot(dx, dy) < 1e-12:
        raise ValueError("wrist and middle root coincide; orientation undefined")
    return float(np.arctan2(dx, dy))


def map_point(transform: AffineTransform2D, point) -> np.ndarray:
    """Apply the patch-to-source map to 2D point(s), shape (..., 2).

    Pure affine evaluation; points outside the patch or frame map linearly
    with no clamping.
    """
    p = np.asarray(point, dtype=float)
    return p @ transform.matrix.T + transform.offset


def transform_points(
    transform: AffineTransform2D,
    joints: JointLocations,
    direction: Literal["forward", "inverse"],
) -> JointLocations:
    """Carry joint coordinates into ("forward") or out of ("inverse") a patch.

    Forward maps source-frame labels into the attention patch's centered
    coordinates; inverse is the patch-to-source map itself.  Depth is
    copied verbatim either way.
    """
    if direction == "forward":
        xy = map_point(transform.invert(), joints.xy)
    elif direction == "inverse":
        xy = map_point(transform, joints.xy)
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    coords = np.concatenate([xy, joints.coords[:, 2:3]], axis=1)
    return joints.with_coords(coords)


def _snap(a: np.ndarray) -> np.ndarray:
    rounded = np.rint(a)
    return np.where(np.abs(a - rounded) < _PIXEL_SNAP, rounded, a)


def resample(
    src: RasterGrid,
    transform: AffineTransform2D,
    out_width: int,
    out_height: int,
    method: Literal["bilinear", "nearest"] = "bilinear",
) -> RasterGrid:
    """Sample a grid through a transform into a new patch.

    Every output pixel center is mapped through the transform and read from
    the source by bilinear interpolation (or nearest neighbor, for masks and
    other categorical grids).  Samples landing outside the source pixel-center
    hull produce the grid's fill value.
    """
    if out_width < 1 or out_height < 1:
        raise ValueError("output dimensions must be at least 1x1")
    xs = (np.arange(out_width) + 0.5) / out_width - 0.5
    ys = (np.arange(out_height) + 0.5) / out_height - 0.5
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx, gy], axis=-1)
    mapped = map_point(transform, pts.reshape(-1, 2)).reshape(out_height, out_width, 2)
    sx, sy = src.coord_scale
    ox, oy = src.coord_offset
    px = _snap((mapped[..., 0] - ox) / sx * src.width - 0.5)
    py = _snap((mapped[..., 1] - oy) / sy * src.height - 0.5)

    inside = (px >= 0) & (px <= src.width - 1) & (py >= 0) & (py <= src.height - 1)
    out = np.full((out_height, out_width), src.fill)
    if np.any(inside):
        pxs = px[inside]
        pys = py[inside]
        if method == "nearest":
            ix = np.rint(pxs).astype(int)
            iy = np.rint(pys).astype(int)
            out[inside] = src.values[iy, ix]
        elif method == "bilinear":
            ix = np.clip(np.floor(pxs).astype(int), 0, max(src.width - 2, 0))
            iy = np.clip(np.floor(pys).astype(int), 0, max(src.height - 2, 0))
            fx = pxs - ix
            fy = pys - iy
            ix1 = np.minimum(ix + 1, src.width - 1)
            iy1 = np.minimum(iy + 1, src.height - 1)
            v = src.values
            out[inside] = (
                v[iy, ix] * (1 - fx) * (1 - fy)
                + v[iy, ix1] * fx * (1 - fy)
                + v[iy1, ix] * (1 - fx) * fy
                + v[iy1, ix1] * fx * fy
            )
        else:
            raise ValueError(f"unknown interpolation method {method!r}")
    return RasterGrid(out, fill=src.fill)


def estimate_crop_ratio(offsets: np.ndarray, image_width: int, min_pixels: float = 4.0) -> float:
    """Crop ratio from the spread of offsets around an attention center.

    Takes per-coordinate means of absolute offsets (already normalized by
    the frame size), doubles the larger of the two, and clamps the result
    into (0, 1].  The lower clamp keeps the crop at least ``min_pixels``
    source pixels wide so degenerate offset sets stay usable.
    """
    offsets = np.asarray(offsets, dtype=float)
    if offsets.size == 0:
        raise ValueError("offset set must be non-empty")
    offsets = offsets.reshape(-1, 2)
    means = np.mean(np.abs(offsets), axis=0)
    b = 2.0 * float(np.max(means))
    lo = min_pixels / float(image_width)
    return min(max(b, lo), 1.0)
