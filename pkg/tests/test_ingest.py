import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarplace.errors import (InvalidConfig, MalformedLine, NonFiniteValue, NonOrthonormalRotation,
                               TruncatedRecord)
from lidarplace.ingest import (Frame, PointCloud, Pose, SynthConfig, format_pose_file, frames_digest,
                               frames_from_kitti, generate_synthetic_world, parse_point_cloud_bin,
                               parse_pose_file, read_manifest, serialize_point_cloud, write_manifest,
                               write_point_cloud)


def test_parse_single_record():
    cloud = parse_point_cloud_bin(struct.pack("<4f", 1.0, 2.0, 3.0, 0.5))
    assert len(cloud) == 1
    p = cloud[0]
    assert (p.x, p.y, p.z, p.intensity) == (1.0, 2.0, 3.0, 0.5)


def test_parse_empty():
    assert len(parse_point_cloud_bin(b"")) == 0


def test_parse_truncated():
    with pytest.raises(TruncatedRecord):
        parse_point_cloud_bin(b"\0" * 17)


def test_parse_nonfinite_flagged_only_when_validating():
    data = struct.pack("<4f", 1.0, float("nan"), 0.0, 0.1)
    with pytest.raises(NonFiniteValue):
        parse_point_cloud_bin(data)
    assert len(parse_point_cloud_bin(data, validate=False)) == 1


def test_intensity_clamped_and_counted():
    cloud = parse_point_cloud_bin(struct.pack("<8f", 0, 0, 0, 1.7, 0, 0, 0, -0.2))
    assert cloud.points[:, 3].tolist() == [1.0, 0.0]
    assert cloud.clamped == 2


def test_file_order_preserved():
    vals = np.arange(40, dtype="<f4").reshape(10, 4) / 100
    cloud = parse_point_cloud_bin(vals.tobytes())
    assert [p.x for p in cloud] == vals[:, 0].tolist()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-1e4, 1e4, width=32)] * 3, st.floats(0, 1, width=32)),
                max_size=50))
def test_binary_round_trip_bit_exact(points):
    raw = np.array(points, dtype="<f4").reshape(-1, 4).tobytes()
    assert serialize_point_cloud(parse_point_cloud_bin(raw)) == raw


def test_pose_identity():
    (p,) = parse_pose_file("1 0 0 0 0 1 0 0 0 0 1 0")
    np.testing.assert_array_equal(p.rotation, np.eye(3))
    np.testing.assert_array_equal(p.position, [0, 0, 0])


def test_pose_yaw_90():
    (p,) = parse_pose_file("0 -1 0 2 1 0 0 3 0 0 1 0")
    np.testing.assert_array_equal(p.position, [2, 3, 0])
    assert p.yaw == pytest.approx(np.pi / 2)


def test_pose_eleven_numbers():
    with pytest.raises(MalformedLine) as exc:
        parse_pose_file("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1")
    assert exc.value.line_no == 2


def test_pose_non_number():
    with pytest.raises(MalformedLine):
        parse_pose_file("1 0 0 0 0 1 0 0 0 0 1 x")


def test_pose_not_orthonormal():
    with pytest.raises(NonOrthonormalRotation) as exc:
        parse_pose_file("1 0 0 0 0 1 0 0 0 0 1 0\n2 0 0 0 0 1 0 0 0 0 1 0")
    assert exc.value.line_no == 2


def test_pose_reflection_rejected():
    with pytest.raises(NonOrthonormalRotation):
        parse_pose_file("-1 0 0 0 0 1 0 0 0 0 1 0")


def test_pose_tolerance_accepts_float32_noise():
    parse_pose_file("1.00004 0 0 0 0 1 0 0 0 0 1 0")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-np.pi, np.pi), min_size=1, max_size=8), st.integers(0, 3))
def test_pose_count_and_round_trip(yaws, blanks):
    poses = [Pose(np.array([i, -i, 0.5]), np.array([[np.cos(a), -np.sin(a), 0],
                                                    [np.sin(a), np.cos(a), 0], [0, 0, 1]]))
             for i, a in enumerate(yaws)]
    text = format_pose_file(poses) + "\n" * blanks
    back = parse_pose_file(text)
    assert len(back) == len(poses)
    for a, b in zip(poses, back):
        np.testing.assert_array_equal(a.matrix34(), b.matrix34())


def small_world(**kw):
    return SynthConfig(n_frames=kw.pop("n_frames", 60), lap_frames=kw.pop("lap_frames", 40),
                       n_landmarks=kw.pop("n_landmarks", 120), **kw)


def test_synthetic_determinism():
    a = generate_synthetic_world(small_world(), 3)
    b = generate_synthetic_world(small_world(), 3)
    assert frames_digest(a) == frames_digest(b)


def test_synthetic_seeds_differ():
    a = generate_synthetic_world(small_world(n_frames=5), 1)
    b = generate_synthetic_world(small_world(n_frames=5), 2)
    assert frames_digest(a) != frames_digest(b)


def test_synthetic_revisit_exists():
    frames = generate_synthetic_world(SynthConfig(n_frames=450, lap_frames=400, n_landmarks=200), 0)
    pos = np.array([f.pose.position for f in frames])
    idx = np.arange(len(frames))
    d = np.linalg.norm(pos[:, None] - pos[None], axis=2)
    gap = np.abs(idx[:, None] - idx[None])
    assert np.any((d < 5) & (gap > 200))


def test_synthetic_frame_invariants():
    frames = generate_synthetic_world(small_world(), 0)
    assert [f.id for f in frames] == list(range(60))
    assert all(a.timestamp < b.timestamp for a, b in zip(frames, frames[1:]))
    for f in frames[:5]:
        pts = f.cloud.points
        assert pts.dtype == np.float32 and np.all(np.isfinite(pts))
        assert pts[:, 3].min() >= 0 and pts[:, 3].max() <= 1
        assert np.linalg.norm(pts[:, :2], axis=1).max() < SynthConfig().sensor_range


@pytest.mark.parametrize("kw", [{"n_frames": 1}, {"n_landmarks": 0}, {"step": 0.0},
                                {"sensor_range": -1.0}])
def test_synthetic_invalid_config(kw):
    with pytest.raises(InvalidConfig):
        generate_synthetic_world(SynthConfig(**kw), 0)


def test_manifest_round_trip(tmp_path):
    frames = generate_synthetic_world(small_world(n_frames=4), 0)
    write_manifest(tmp_path / "m.csv", frames)
    back = read_manifest(tmp_path / "m.csv", sequence_tag="synth")
    assert frames_digest(back) == frames_digest(frames)
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == "id,timestamp,cloud_path,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz"


def test_kitti_directory(tmp_path):
    vel = tmp_path / "velodyne"
    vel.mkdir()
    for i in range(3):
        write_point_cloud(vel / f"{i:06d}.bin", PointCloud(np.full((2, 4), i / 10, np.float32)))
    (tmp_path / "poses.txt").write_text("\n".join(["1 0 0 %d 0 1 0 0 0 0 1 0" % i for i in range(3)]))
    frames = frames_from_kitti(vel, tmp_path / "poses.txt")
    assert [f.pose.position[0] for f in frames] == [0, 1, 2]
    assert isinstance(frames[0], Frame) and frames[2].cloud.points[0, 0] == np.float32(0.2)
    (tmp_path / "poses.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 0")
    with pytest.raises(InvalidConfig):
        frames_from_kitti(vel, tmp_path / "poses.txt")
