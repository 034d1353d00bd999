"""LiDAR scan / pose parsing and the synthetic loop-world generator."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import InvalidConfig, MalformedLine, NonFiniteValue, NonOrthonormalRotation, TruncatedRecord

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-4
RECORD = np.dtype("<f4")


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float


@dataclass
class PointCloud:
    """Ordered points as an (N, 4) float32 array of x, y, z, intensity."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), np.float32))
    clamped: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return (Point(*map(float, row)) for row in self.points)

    def __getitem__(self, i):
        return Point(*map(float, self.points[i]))


@dataclass
class Pose:
    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.eye(3))

    def matrix34(self):
        return np.hstack([self.rotation, self.position[:, None]])

    @property
    def yaw(self):
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))


@dataclass
class Frame:
    id: int
    timestamp: float
    cloud: PointCloud
    pose: Pose
    sequence_tag: str = "seq"


def rotation_is_valid(r, tol=ORTHO_TOL):
    r = np.asarray(r, dtype=np.float64)
    return bool(np.abs(r.T @ r - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1) <= tol)


# -- KITTI velodyne ------------------------------------------------------------------

def parse_point_cloud_bin(data: bytes, validate: bool = True) -> PointCloud:
    """Decode little-endian float32 quadruples (x, y, z, intensity)."""
    if len(data) % 16:
        raise TruncatedRecord(f"{len(data)} bytes is not a multiple of 16")
    pts = np.frombuffer(data, dtype=RECORD).reshape(-1, 4).astype(np.float32)
    if validate and not np.all(np.isfinite(pts)):
        bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
        raise NonFiniteValue(f"point {bad} has a non-finite field")
    clamped = 0
    if len(pts):
        outside = (pts[:, 3] < 0) | (pts[:, 3] > 1)
        clamped = int(outside.sum())
        if clamped:
            log.warning("clamped %d intensities into [0, 1]", clamped)
            pts[:, 3] = np.clip(pts[:, 3], 0, 1)
    return PointCloud(pts, clamped)


def serialize_point_cloud(cloud: PointCloud) -> bytes:
    return np.ascontiguousarray(cloud.points, dtype=RECORD).tobytes()


def read_point_cloud(path, validate=True) -> PointCloud:
    return parse_point_cloud_bin(Path(path).read_bytes(), validate)


def write_point_cloud(path, cloud: PointCloud):
    Path(path).write_bytes(serialize_point_cloud(cloud))


# -- KITTI poses -------------------------------------------------------------------------

def _pose_from_numbers(vals, line_no):
    m = np.asarray(vals, dtype=np.float64).reshape(3, 4)
    if not np.all(np.isfinite(m)):
        raise MalformedLine(line_no, "non-finite value")
    if not rotation_is_valid(m[:, :3]):
        raise NonOrthonormalRotation(line_no, "rotation is not orthonormal")
    return Pose(m[:, 3], m[:, :3])


def parse_pose_file(text: str) -> list:
    """One Pose per non-empty line of 12 row-major 3x4 matrix entries."""
    poses = []
    for k, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 12:
            raise MalformedLine(k, f"expected 12 numbers, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise MalformedLine(k, str(exc)) from None
        poses.append(_pose_from_numbers(vals, k))
    return poses


def format_pose_file(poses) -> str:
    return "".join(" ".join(repr(float(v)) for v in p.matrix34().ravel()) + "\n" for p in poses)


# -- CSV manifest ---------------------------------------------------------------------------

MANIFEST_FIELDS = ["id", "timestamp", "cloud_path",
                   "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22",
                   "tx", "ty", "tz"]


def read_manifest(path, sequence_tag=None, validate=True) -> list:
    """Load frames from a CSV manifest; cloud paths are relative to the manifest."""
    path = Path(path)
    frames = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise MalformedLine(1, f"manifest header lacks {sorted(missing)}")
        for k, row in enumerate(reader, start=2):
            try:
                r = [float(row[f"r{a}{b}"]) for a in range(3) for b in range(3)]
                t = [float(row[c]) for c in ("tx", "ty", "tz")]
                fid, ts = int(row["id"]), float(row["timestamp"])
            except (TypeError, ValueError) as exc:
                raise MalformedLine(k, str(exc)) from None
            m = np.hstack([np.reshape(r, (3, 3)), np.reshape(t, (3, 1))])
            pose = _pose_from_numbers(m.ravel(), k)
            cloud = read_point_cloud(path.parent / row["cloud_path"], validate)
            frames.append(Frame(fid, ts, cloud, pose, sequence_tag or path.stem))
    frames.sort(key=lambda f: f.timestamp)
    return frames


def write_manifest(path, frames, cloud_dir="clouds"):
    path = Path(path)
    (path.parent / cloud_dir).mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for f in frames:
            rel = f"{cloud_dir}/{f.id:06d}.bin"
            write_point_cloud(path.parent / rel, f.cloud)
            w.writerow([f.id, repr(float(f.timestamp)), rel,
                        *[repr(float(v)) for v in f.pose.rotation.ravel()],
                        *[repr(float(v)) for v in f.pose.position]])


def frames_from_kitti(velodyne_dir, pose_file, sequence_tag="kitti", validate=True):
    """Pair ``velodyne_dir/*.bin`` (sorted) with the lines of a KITTI pose file."""
    bins = sorted(Path(velodyne_dir).glob("*.bin"))
    poses = parse_pose_file(Path(pose_file).read_text())
    if len(bins) != len(poses):
        raise InvalidConfig(f"{len(bins)} scans but {len(poses)} poses")
    return [Frame(i, float(i), read_point_cloud(b, validate), p, sequence_tag)
            for i, (b, p) in enumerate(zip(bins, poses))]


# -- synthetic world -----------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Loop traversal through a field of static landmarks.

    The first ``lap_frames`` frames drive one full lap; later frames drive the
    loop again with a lateral offset, so frame ``lap_frames + i`` revisits the
    place of frame ``i``.
    """

    n_frames: int = 600
    lap_frames: int = 400
    step: float = 1.0                 # metres between consecutive frames
    n_landmarks: int = 700
    corridor: float = 38.0            # max lateral landmark distance from the path
    road_half_width: float = 4.0
    sensor_range: float = 40.0
    sensor_height: float = 1.73
    point_noise: float = 0.03
    revisit_offset: float = 1.0       # lateral shift (m) of later laps
    yaw_jitter: float = 0.02          # radians
    ground_points: int = 400
    sequence_tag: str = "synth"

    def validate(self):
        ints = ("n_frames", "lap_frames", "n_landmarks")
        for name in ints:
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive")
        for name in ("step", "corridor", "sensor_range"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.n_frames < 2:
            raise InvalidConfig("need at least 2 frames")
        if self.road_half_width >= self.corridor:
            raise InvalidConfig("road_half_width must be below corridor")
        return self


def _loop_path(rng, perimeter, n=4096):
    """Closed smooth curve with the requested perimeter, sampled by arclength."""
    theta = np.linspace(0, 2 * np.pi, n, endpoint=False)
    r = np.ones_like(theta)
    for h, amp in ((2, 0.25), (3, 0.12), (4, 0.06)):
        r += rng.uniform(0.3, 1.0) * amp * np.cos(h * theta + rng.uniform(0, 2 * np.pi))
    xy = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    seg = np.linalg.norm(np.roll(xy, -1, axis=0) - xy, axis=1)
    xy *= perimeter / seg.sum()
    cum = np.concatenate([[0], np.cumsum(seg * perimeter / seg.sum())])
    return xy, cum


def _sample_path(xy, cum, s):
    """Position and unit tangent at arclength(s), wrapping around the loop."""
    perimeter = cum[-1]
    s = np.mod(s, perimeter)
    closed = np.vstack([xy, xy[:1]])
    x = np.interp(s, cum, closed[:, 0])
    y = np.interp(s, cum, closed[:, 1])
    ds = 0.5
    x2 = np.interp(np.mod(s + ds, perimeter), cum, closed[:, 0])
    y2 = np.interp(np.mod(s + ds, perimeter), cum, closed[:, 1])
    t = np.stack([x2 - x, y2 - y], axis=-1)
    t /= np.linalg.norm(t, axis=-1, keepdims=True)
    return np.stack([x, y], axis=-1), t


def _yaw_rotation(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _landmarks(rng, cfg, xy, cum):
    n = cfg.n_landmarks
    s = rng.uniform(0, cum[-1], n)
    base, tan = _sample_path(xy, cum, s)
    normal = np.stack([-tan[:, 1], tan[:, 0]], axis=1)
    side = rng.choice([-1.0, 1.0], n)
    lateral = side * rng.uniform(cfg.road_half_width, cfg.corridor, n)
    centers = base + normal * lateral[:, None]
    kind = rng.choice(3, n, p=[0.55, 0.3, 0.15])       # pole, tree, building
    size = np.where(kind == 0, rng.uniform(0.15, 0.4, n),
                    np.where(kind == 1, rng.uniform(0.8, 2.5, n), rng.uniform(3.0, 9.0, n)))
    height = np.where(kind == 2, rng.uniform(4, 12, n), rng.uniform(3, 8, n))
    intensity = rng.uniform(0.15, 1.0, n)
    yaw = rng.uniform(0, np.pi, n)
    return {"center": centers, "kind": kind, "size": size, "height": height,
            "intensity": intensity, "yaw": yaw}


def _surface_points(rng, lm, j, sensor_xy, z0, cfg):
    """Visible surface samples of landmark ``j`` in world coordinates."""
    c = lm["center"][j]
    size = lm["size"][j]
    dist = max(np.linalg.norm(c - sensor_xy), 1.0)
    if lm["kind"][j] == 2:
        # rectangle footprint (size x size/2), visible faces only
        half = np.array([size, size / 2]) / 2
        rot = _yaw_rotation(lm["yaw"][j])[:2, :2]
        corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * half
        pts = []
        for a, b in zip(corners, np.roll(corners, -1, axis=0)):
            mid = (a + b) / 2
            normal = rot @ (mid / np.linalg.norm(mid))
            wa, wb = c + rot @ a, c + rot @ b
            if np.dot(normal, sensor_xy - (wa + wb) / 2) <= 0:
                continue
            m = int(np.clip(60 * np.linalg.norm(wb - wa) / dist, 4, 80))
            t = rng.uniform(0, 1, m)[:, None]
            pts.append(wa + (wb - wa) * t)
        xy = np.vstack(pts) if pts else np.zeros((0, 2))
    else:
        m = int(np.clip(40 * size / dist * 4, 3, 60))
        toward = np.arctan2(*(sensor_xy - c)[::-1])
        ang = toward + rng.uniform(-np.pi / 2, np.pi / 2, m)
        xy = c + size * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    z = rng.uniform(z0, z0 + lm["height"][j], len(xy))
    inten = np.clip(lm["intensity"][j] + rng.normal(0, 0.03, len(xy)), 0, 1)
    return np.column_stack([xy, z, inten])


def generate_synthetic_world(config: SynthConfig, seed: int) -> list:
    """Deterministic frames of a looped drive; see :class:`SynthConfig`."""
    cfg = config.validate()
    world = np.random.default_rng([seed, 0])
    xy, cum = _loop_path(world, cfg.lap_frames * cfg.step)
    lm = _landmarks(world, cfg, xy, cum)

    frames = []
    for i in range(cfg.n_frames):
        rng = np.random.default_rng([seed, 1, i])
        lap, k = divmod(i, cfg.lap_frames)
        s = (k + 0.5 * (lap % 2)) * cfg.step
        pos, tan = _sample_path(xy, cum, np.array([s]))
        pos, tan = pos[0], tan[0]
        offset = cfg.revisit_offset * (lap % 2)
        pos = pos + offset * np.array([-tan[1], tan[0]]) + rng.normal(0, 0.05, 2)
        yaw = np.arctan2(tan[1], tan[0]) + rng.normal(0, cfg.yaw_jitter)
        rot = _yaw_rotation(yaw)
        position = np.array([pos[0], pos[1], cfg.sensor_height])

        near = np.flatnonzero(np.linalg.norm(lm["center"] - pos, axis=1) < cfg.sensor_range + 10)
        chunks = [_surface_points(rng, lm, j, pos, 0.0, cfg) for j in near]
        r = cfg.sensor_range * np.sqrt(rng.uniform(0, 1, cfg.ground_points))
        a = rng.uniform(0, 2 * np.pi, cfg.ground_points)
        gnd = np.column_stack([pos[0] + r * np.cos(a), pos[1] + r * np.sin(a),
                               np.zeros(cfg.ground_points), rng.uniform(0.0, 0.12, cfg.ground_points)])
        world_pts = np.vstack(chunks + [gnd]) if chunks else gnd
        world_pts[:, :3] += rng.normal(0, cfg.point_noise, (len(world_pts), 3))

        # world -> sensor, then range truncation
        local = (world_pts[:, :3] - position) @ rot
        keep = np.linalg.norm(local[:, :2], axis=1) < cfg.sensor_range
        pts = np.column_stack([local[keep], world_pts[keep, 3]]).astype(np.float32)
        frames.append(Frame(i, float(i), PointCloud(pts), Pose(position, rot), cfg.sequence_tag))
    return frames


def frames_digest(frames) -> bytes:
    """Canonical byte serialization used for determinism checks."""
    parts = []
    for f in frames:
        parts.append(np.array([f.id, f.timestamp], dtype="<f8").tobytes())
        parts.append(f.pose.matrix34().astype("<f8").tobytes())
        parts.append(serialize_point_cloud(f.cloud))
    return b"".join(parts)
