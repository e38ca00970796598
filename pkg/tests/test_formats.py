import numpy as np
import pytest

from roverscape import formats
from roverscape.camera import Pose, rotvec_to_matrix
from roverscape.errors import DecodeError, FormatError


def test_pfm_round_trip_single_channel(tmp_path):
    data = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    formats.write_pfm(tmp_path / "d.pfm", data)
    back = formats.read_pfm(tmp_path / "d.pfm")
    assert back.dtype == np.float32
    assert np.array_equal(back, data)


def test_pfm_round_trip_three_channel(tmp_path):
    data = np.random.default_rng(0).uniform(-1, 1, (5, 6, 3)).astype(np.float32)
    formats.write_pfm(tmp_path / "n.pfm", data)
    assert np.array_equal(formats.read_pfm(tmp_path / "n.pfm"), data)


def test_pfm_header_is_little_endian_bottom_up(tmp_path):
    data = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    formats.write_pfm(tmp_path / "d.pfm", data)
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    first_row = np.frombuffer(raw[len(b"Pf\n2 2\n-1.0\n"):], "<f4")[:2]
    assert np.array_equal(first_row, [3.0, 4.0])


def test_pfm_rejects_bad_shape(tmp_path):
    with pytest.raises(FormatError):
        formats.write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))


def test_read_pfm_rejects_garbage(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"not a pfm")
    with pytest.raises(FormatError):
        formats.read_pfm(tmp_path / "x.pfm")


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (7, 9, 3), dtype=np.uint8)
    formats.write_png(tmp_path / "a.png", img)
    assert np.array_equal(formats.read_image(tmp_path / "a.png"), img)


def test_read_image_decode_error(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"\x89PNG broken")
    with pytest.raises(DecodeError):
        formats.read_image(tmp_path / "bad.png")


def test_to_uint8_rounds_and_clips():
    assert np.array_equal(formats.to_uint8([-0.5, 0.0, 0.5, 1.0, 2.0]), [0, 0, 128, 255, 255])


def test_pose_file_round_trip_is_exact(tmp_path):
    poses = [Pose(rotvec_to_matrix([0.1, -0.2, 0.3]), [1.5, -2.25, 1 / 3]), Pose.identity()]
    formats.write_poses(tmp_path / "p.txt", poses)
    back = formats.read_poses(tmp_path / "p.txt")
    for a, b in zip(poses, back):
        assert np.array_equal(a.matrix34(), b.matrix34())
    lines = (tmp_path / "p.txt").read_text().splitlines()
    assert all(len(ln.split()) == 12 for ln in lines)


def test_pose_line_wrong_count():
    with pytest.raises(FormatError):
        formats.pose_from_line("1 2 3")


def test_correspondences_round_trip(tmp_path):
    uv1 = np.array([[1.0, 2.0], [3.5, 4.25]])
    uv2 = np.array([[1.1, 2.2], [3.3, 4.4]])
    formats.write_correspondences(tmp_path / "c.txt", uv1, uv2)
    a, b, w = formats.read_correspondences(tmp_path / "c.txt")
    assert np.array_equal(a, uv1) and np.array_equal(b, uv2) and w is None
    formats.write_correspondences(tmp_path / "w.txt", uv1, uv2, [0.5, 2.0])
    assert np.array_equal(formats.read_correspondences(tmp_path / "w.txt")[2], [0.5, 2.0])


def test_correspondences_bad_row(tmp_path):
    (tmp_path / "c.txt").write_text("# comment\n1 2 3\n")
    with pytest.raises(FormatError, match=":2:"):
        formats.read_correspondences(tmp_path / "c.txt")
