import numpy as np
import pytest

from hierhand import DataFormatError, JointLocations, generate_dataset
from hierhand.annotations import (
    AnnotationRecord,
    load_annotations,
    load_predictions,
    save_annotations,
    save_predictions,
)
from hierhand.errors import DataQualityWarning

from conftest import make_sampler


@pytest.fixture()
def dataset(small_skeleton, small_camera):
    sampler = make_sampler(small_skeleton, small_camera, seed=21)
    samples = generate_dataset(sampler, 3)
    return [AnnotationRecord(f"f{i:03d}", s.joints, s.frame) for i, s in enumerate(samples)]


def test_save_load_roundtrip_lossless(tmp_path, dataset, small_camera):
    path = tmp_path / "annotations.txt"
    save_annotations(path, dataset, small_camera)
    loaded, camera = load_annotations(path)
    assert camera == small_camera
    assert len(loaded) == len(dataset)
    for orig, back in zip(dataset, loaded):
        assert back.frame_id == orig.frame_id
        assert np.array_equal(back.joints.coords, orig.joints.coords)
        assert np.array_equal(back.frame.grid.values, orig.frame.grid.values)
        assert back.frame.grid.fill == orig.frame.grid.fill


def test_missing_sidecar_names_frame(tmp_path, dataset, small_camera):
    path = tmp_path / "annotations.txt"
    save_annotations(path, dataset, small_camera)
    (tmp_path / "depth" / "f001.btf").unlink()
    with pytest.raises(DataFormatError, match="f001"):
        load_annotations(path)
    # skipping depth skips the requirement
    loaded, _ = load_annotations(path, with_depth=False)
    assert all(rec.frame is None for rec in loaded)


def test_wrong_joint_count_cites_line(tmp_path, dataset, small_camera):
    path = tmp_path / "annotations.txt"
    save_annotations(path, dataset, small_camera)
    lines = path.read_text().splitlines()
    parts = lines[2].split()
    lines[2] = " ".join(parts[: 2 + 60])  # drop one joint -> 20 joints
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError, match=":3"):
        load_annotations(path)


def test_non_numeric_coordinate_rejected(tmp_path, dataset, small_camera):
    path = tmp_path / "annotations.txt"
    save_annotations(path, dataset, small_camera)
    text = path.read_text().replace("frame f000 ", "frame f000 oops ", 1)
    lines = text.splitlines()
    parts = lines[2].split()
    lines[2] = " ".join(parts[:-1])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError, match="non-numeric"):
        load_annotations(path)


def test_out_of_range_coordinates_warn_not_error(tmp_path, small_camera, dataset):
    coords = dataset[0].joints.coords.copy()
    coords[3, 0] = 1.4  # truncated hand: joint beyond the frame edge
    records = [AnnotationRecord("wide", JointLocations.full_hand(coords), dataset[0].frame)]
    path = tmp_path / "annotations.txt"
    save_annotations(path, records, small_camera)
    with pytest.warns(DataQualityWarning, match="wide"):
        loaded, _ = load_annotations(path)
    assert loaded[0].joints.coords[3, 0] == pytest.approx(1.4)


def test_bad_header_rejected(tmp_path):
    path = tmp_path / "annotations.txt"
    path.write_text("WRONG 1\n")
    with pytest.raises(DataFormatError, match="header"):
        load_annotations(path)


def test_unknown_record_rejected(tmp_path, dataset, small_camera):
    path = tmp_path / "annotations.txt"
    save_annotations(path, dataset, small_camera)
    with open(path, "a") as fh:
        fh.write("mystery 1 2 3\n")
    with pytest.raises(DataFormatError, match="mystery"):
        load_annotations(path)


def test_predictions_roundtrip(tmp_path, dataset):
    path = tmp_path / "predictions.txt"
    records = [AnnotationRecord(r.frame_id, r.joints, None) for r in dataset]
    save_predictions(path, records)
    loaded = load_predictions(path)
    for orig, back in zip(records, loaded):
        assert back.frame_id == orig.frame_id
        assert np.array_equal(back.joints.coords, orig.joints.coords)
    assert not (tmp_path / "depth").exists()


def test_save_is_deterministic(tmp_path, dataset, small_camera):
    save_annotations(tmp_path / "a.txt", dataset, small_camera)
    save_annotations(tmp_path / "b.txt", dataset, small_camera)
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
