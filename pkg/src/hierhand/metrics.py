"""Accuracy metric: proportion of joints within a maximum error.

Errors are 3D Euclidean distances per joint.  The curve value at a
threshold D is the fraction of joint instances (pooled over all frames)
whose error is at most D; a per-frame worst-case variant counts a frame
only when its largest joint error beats the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .skeleton import HandSkeleton, JointLocations


class JointErrorRow(NamedTuple):
    layer: int
    finger: int
    mean_error: float
    median_error: float


@dataclass(frozen=True)
class MetricCurve:
    """Monotone accuracy curve plus a per-joint error table."""

    thresholds: np.ndarray
    proportions: np.ndarray
    per_joint: tuple[JointErrorRow, ...]
    mean_error: float

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=float)
        p = np.asarray(self.proportions, dtype=float)
        if t.shape != p.shape or t.ndim != 1:
            raise ValueError("thresholds and proportions must be matching 1D arrays")
        if np.any(np.diff(t) < 0):
            raise ValueError("thresholds must be ascending")
        if np.any(p < 0) or np.any(p > 1) or np.any(np.diff(p) < -1e-12):
            raise ValueError("proportions must be non-decreasing within [0, 1]")
        t.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "proportions", p)
        object.__setattr__(self, "per_joint", tuple(self.per_joint))


def default_thresholds(skeleton: HandSkeleton, n: int = 40) -> np.ndarray:
    """Evenly spaced thresholds from zero to half the hand span."""
    return np.linspace(0.0, skeleton.hand_span() / 2.0, n)


def joint_errors(
    predictions: Sequence[JointLocations],
    ground_truth: Sequence[JointLocations],
    error_scale: float = 1.0,
) -> np.ndarray:
    """(n_frames, n_joints) Euclidean errors, optionally rescaled to model units."""
    if len(predictions) != len(ground_truth):
        raise ValueError("prediction and ground-truth sequences differ in length")
    if not predictions:
        raise ValueError("empty sequences")
    errs = []
    for pred, truth in zip(predictions, ground_truth):
        if pred.joint_ids != truth.joint_ids:
            raise ValueError("prediction and ground truth cover different joint sets")
        errs.append(np.linalg.norm(pred.coords - truth.coords, axis=1) * error_scale)
    return np.stack(errs)


def compute_metric(
    predictions: Sequence[JointLocations],
    ground_truth: Sequence[JointLocations],
    thresholds: np.ndarray,
    error_scale: float = 1.0,
    per_frame_max: bool = False,
) -> MetricCurve:
    """Build the accuracy curve for aligned prediction/ground-truth sequences.

    ``error_scale`` converts normalized-unit errors into reporting units
    (for the synthetic camera this is ``1 / camera.scale``, i.e. model
    units).  Thresholds are interpreted in the reporting units.
    """
    errs = joint_errors(predictions, ground_truth, error_scale)
    thresholds = np.asarray(thresholds, dtype=float)
    pooled = errs.max(axis=1) if per_frame_max else errs.reshape(-1)
    proportions = (pooled[None, :] <= thresholds[:, None]).mean(axis=1)
    rows = []
    ids = predictions[0].joint_ids
    for k, (layer, finger) in enumerate(ids):
        rows.append(
            JointErrorRow(layer, finger, float(errs[:, k].mean()), float(np.median(errs[:, k])))
        )
    return MetricCurve(thresholds, proportions, tuple(rows), float(errs.mean()))
