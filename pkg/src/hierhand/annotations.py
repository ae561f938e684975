"""Text annotation format for datasets and predictions.

A dataset annotation file is line oriented:

    HHANNOT 1
    camera <scale> <width> <height> <background>
    frame <id> <63 floats: x y z for each of the 21 joints>
    ...

Coordinates are written with shortest round-trip float formatting, so a
save/load cycle is lossless.  Each ``frame`` record has a binary depth
sidecar ``depth/<id>.btf`` next to the annotation file.  Prediction files
share the record syntax under the ``HHPRED 1`` header and carry no
sidecars.

Out-of-range normalized coordinates load with a warning rather than an
error; real captures legitimately contain truncated hands.
"""

from __future__ import annotations

import warnings
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataFormatError, DataQualityWarning
from .skeleton import JointLocations
from .synth import DepthFrame, OrthoCamera
from .tensorio import load_grid, save_grid

ANNOT_MAGIC = "HHANNOT"
PRED_MAGIC = "HHPRED"
FORMAT_VERSION = 1


class AnnotationRecord(NamedTuple):
    frame_id: str
    joints: JointLocations
    frame: DepthFrame | None


def _format_record(frame_id: str, joints: JointLocations) -> str:
    if len(joints) != 21:
        raise ValueError(f"record {frame_id} must carry 21 joints, got {len(joints)}")
    numbers = " ".join(repr(float(v)) for v in joints.coords.reshape(-1))
    return f"frame {frame_id} {numbers}"


def _depth_dir(path: Path) -> Path:
    return path.parent / "depth"


def save_annotations(path, records: list[AnnotationRecord], camera: OrthoCamera) -> None:
    """Write a dataset file; depth sidecars are written for records that have frames."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{ANNOT_MAGIC} {FORMAT_VERSION}",
        f"camera {camera.scale!r} {camera.width} {camera.height} {camera.background!r}",
    ]
    depth_dir = _depth_dir(path)
    for rec in records:
        if " " in rec.frame_id:
            raise ValueError(f"frame id {rec.frame_id!r} must not contain spaces")
        lines.append(_format_record(rec.frame_id, rec.joints))
        if rec.frame is not None:
            depth_dir.mkdir(parents=True, exist_ok=True)
            save_grid(depth_dir / f"{rec.frame_id}.btf", rec.frame.grid)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_predictions(path, records: list[AnnotationRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{PRED_MAGIC} {FORMAT_VERSION}"]
    lines += [_format_record(rec.frame_id, rec.joints) for rec in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_joint_line(line: str, lineno: int, path: Path) -> tuple[str, JointLocations]:
    parts = line.split()
    if len(parts) != 2 + 63:
        raise DataFormatError(
            f"{path}:{lineno}: frame record needs an id and 21 joints "
            f"(63 numbers), got {len(parts) - 2} numbers"
        )
    frame_id = parts[1]
    try:
        values = np.array([float(v) for v in parts[2:]]).reshape(21, 3)
    except ValueError as exc:
        raise DataFormatError(f"{path}:{lineno}: non-numeric coordinate") from exc
    if np.any(values[:, :2] < 0.0) or np.any(values[:, :2] > 1.0):
        warnings.warn(
            f"{path}:{lineno}: frame {frame_id} has joints outside the unit frame",
            DataQualityWarning,
            stacklevel=3,
        )
    return frame_id, JointLocations.full_hand(values)


def _read_lines(path: Path, magic: str) -> list[tuple[int, str]]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read annotation file: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty annotation file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != magic:
        raise DataFormatError(f"{path}:1: expected '{magic} <version>' header")
    if int(header[1]) != FORMAT_VERSION:
        raise DataFormatError(f"{path}:1: unsupported version {header[1]}")
    return [(i + 1, ln) for i, ln in enumerate(lines[1:], start=1) if ln.strip()]


def load_annotations(path, with_depth: bool = True) -> tuple[list[AnnotationRecord], OrthoCamera]:
    """Load a dataset file; sidecar depth grids are required unless disabled."""
    path = Path(path)
    body = _read_lines(path, ANNOT_MAGIC)
    camera = None
    records: list[AnnotationRecord] = []
    for lineno, line in body:
        key = line.split(maxsplit=1)[0]
        if key == "camera":
            parts = line.split()
            if len(parts) != 5:
                raise DataFormatError(f"{path}:{lineno}: camera line needs 4 values")
            camera = OrthoCamera(
                scale=float(parts[1]),
                width=int(parts[2]),
                height=int(parts[3]),
                background=float(parts[4]),
            )
        elif key == "frame":
            if camera is None:
                raise DataFormatError(f"{path}:{lineno}: frame record before camera line")
            frame_id, joints = _parse_joint_line(line, lineno, path)
            frame = None
            if with_depth:
                sidecar = _depth_dir(path) / f"{frame_id}.btf"
                if not sidecar.exists():
                    raise DataFormatError(f"{path}: missing depth sidecar for frame {frame_id}")
                frame = DepthFrame(load_grid(sidecar), camera)
            records.append(AnnotationRecord(frame_id, joints, frame))
        else:
            raise DataFormatError(f"{path}:{lineno}: unknown record type {key!r}")
    if camera is None:
        raise DataFormatError(f"{path}: no camera line found")
    return records, camera


def load_predictions(path) -> list[AnnotationRecord]:
    path = Path(path)
    body = _read_lines(path, PRED_MAGIC)
    records = []
    for lineno, line in body:
        if not line.startswith("frame "):
            raise DataFormatError(f"{path}:{lineno}: unknown record type")
        frame_id, joints = _parse_joint_line(line, lineno, path)
        records.append(AnnotationRecord(frame_id, joints, None))
    return records
