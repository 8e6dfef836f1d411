"""Scenes of two posed point clouds, rigid transforms and pose Jacobians.

Quaternions are ``(w, x, y, z)``. A point ``p`` is rotated by conjugation
``q p q*``, which for a unit quaternion is the rotation matrix returned by
:func:`rotation_matrix`. World ``z`` points up (gravity along ``-z``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSceneError, FormatError, InvalidPoseError

QUAT_TOL = 1e-6
MIN_POINTS = 4


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points in the object-local frame, shape ``(N, 3)``, meters."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise FormatError(f"point cloud must have shape (N, 3), got {pts.shape}")
        if len(pts) < MIN_POINTS:
            raise FormatError(f"point cloud needs at least {MIN_POINTS} points, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise FormatError("point cloud has non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        return isinstance(other, PointCloud) and np.array_equal(self.points, other.points)


def normalize_quaternion(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidPoseError(f"cannot normalize quaternion {q}")
    return q / n


@dataclass(frozen=True, eq=False)
class Pose:
    """Translation ``t`` (world frame, meters) and unit quaternion ``q``.

    The quaternion is renormalized on construction unless it is already unit
    length to within 1e-12.
    """

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise InvalidPoseError(f"non-finite translation {t}")
        q = np.array(self.q, dtype=np.float64).reshape(4)
        # leave already-unit input untouched so text round trips stay bit-exact
        if abs(np.linalg.norm(q) - 1.0) > 1e-12:
            q = normalize_quaternion(q)
        t.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    @classmethod
    def identity(cls):
        return cls()

    def __eq__(self, other):
        return (isinstance(other, Pose) and np.array_equal(self.t, other.t)
                and np.array_equal(self.q, other.q))

    def inverse(self):
        qc = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(-rotation_matrix(qc) @ self.t, qc)

    def compose(self, other):
        """Pose applying ``other`` first, then ``self``."""
        return Pose(rotation_matrix(self.q) @ other.t + self.t, quat_multiply(self.q, other.q))


@dataclass(frozen=True, eq=False)
class Scene:
    """Two identified objects, each a local point cloud with a world pose."""

    scene_id: str
    object_a_id: str
    object_b_id: str
    cloud_a: PointCloud
    cloud_b: PointCloud
    pose_a: Pose
    pose_b: Pose

    def __post_init__(self):
        for name in ("scene_id", "object_a_id", "object_b_id"):
            value = getattr(self, name)
            if not value or any(ch.isspace() for ch in value):
                raise FormatError(f"{name} must be a non-empty token without whitespace: {value!r}")
        if self.object_a_id == self.object_b_id:
            raise FormatError(f"object ids must differ within a scene ({self.object_a_id})")

    def __eq__(self, other):
        return isinstance(other, Scene) and all(
            getattr(self, f) == getattr(other, f)
            for f in ("scene_id", "object_a_id", "object_b_id", "cloud_a", "cloud_b", "pose_a", "pose_b"))

    def with_poses(self, pose_a, pose_b, scene_id=None):
        return Scene(scene_id or self.scene_id, self.object_a_id, self.object_b_id,
                     self.cloud_a, self.cloud_b, pose_a, pose_b)

    def world_points(self):
        """Transformed clouds ``(points_a, points_b)`` in the world frame."""
        return transform_cloud(self.cloud_a, self.pose_a), transform_cloud(self.cloud_b, self.pose_b)


@dataclass(frozen=True)
class UnitCubeFrame:
    """Similarity map ``p -> (p - offset) * scale`` into the unit cube."""

    scale: float
    offset: np.ndarray

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.offset) * self.scale


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis])


def rotation_matrix(q):
    """Matrix of ``p -> q p q*``; orthonormal when ``q`` is a unit quaternion."""
    w, x, y, z = q
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def _rotation_matrix_derivatives(q):
    """``dR/dw, dR/dx, dR/dy, dR/dz`` of :func:`rotation_matrix`, shape (4, 3, 3)."""
    w, x, y, z = q
    return 2.0 * np.array([
        [[w, -z, y], [z, w, -x], [-y, x, w]],
        [[x, y, z], [y, -x, -w], [z, w, -x]],
        [[-y, x, w], [x, y, z], [-w, z, -y]],
        [[-z, -w, x], [w, -z, y], [x, y, z]],
    ])


def _points_array(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def transform_cloud(cloud, pose):
    """Apply ``R(q) p + t`` to every point; returns an ``(N, 3)`` array."""
    pts = _points_array(cloud)
    with np.errstate(over="ignore", invalid="ignore"):
        out = pts @ rotation_matrix(pose.q).T + pose.t
    if not np.all(np.isfinite(out)):
        raise InvalidPoseError("transform produced non-finite coordinates")
    return out


def fit_unit_cube(points_a, points_b):
    """Frame mapping the joint bounding box into ``[0, 1]^3``.

    The longest axis spans exactly ``[0, 1]``; the other two are centered.
    """
    pts = np.vstack([_points_array(points_a), _points_array(points_b)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = hi - lo
    longest = float(extent.max())
    if not longest > 0.0:
        raise DegenerateSceneError("scene bounding box has zero extent on every axis")
    scale = 1.0 / longest
    offset = (lo + hi) / 2.0 - 0.5 * longest
    axis = int(np.argmax(extent))
    offset[axis] = lo[axis]
    return UnitCubeFrame(scale=scale, offset=offset)


def pose_jacobians(cloud, pose):
    """Per-point derivatives of ``R(q) p + t``.

    Returns:
        ``(d_dt, d_dq)`` with shapes ``(N, 3, 3)`` (identity blocks) and
        ``(N, 3, 4)``, column ``j`` of ``d_dq`` being the derivative with
        respect to quaternion component ``j`` of ``(w, x, y, z)``.
    """
    pts = _points_array(cloud)
    n = len(pts)
    d_dt = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    dR = _rotation_matrix_derivatives(pose.q)
    d_dq = np.einsum("kij,nj->nik", dR, pts)
    return d_dt, d_dq


def pose_gradients(cloud, pose, point_grads):
    """Chain per-point world gradients ``(N, 3)`` into ``(dC/dt, dC/dq)``."""
    pts = _points_array(cloud)
    g = np.asarray(point_grads, dtype=np.float64)
    dR = _rotation_matrix_derivatives(pose.q)
    # sum_n g_n . (dR_k p_n) == sum_ij dR_k[i, j] * (G^T P)[i, j]
    gp = g.T @ pts
    return g.sum(axis=0), np.einsum("kij,ij->k", dR, gp)


# -- scene text format -------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def format_scene(scene):
    lines = [f"scene {scene.scene_id} {scene.object_a_id} {scene.object_b_id}"]
    for pose in (scene.pose_a, scene.pose_b):
        lines.append("pose " + " ".join(_fmt(v) for v in (*pose.t, *pose.q)))
    for cloud in (scene.cloud_a, scene.cloud_b):
        lines.append(f"points {len(cloud)}")
        lines.extend(" ".join(_fmt(v) for v in p) for p in cloud.points)
    return "\n".join(lines) + "\n"


def parse_scene(text):
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    try:
        head = lines[0]
        if head[0] != "scene" or len(head) != 4:
            raise FormatError(f"bad scene header: {' '.join(head)}")
        poses = []
        for ln in lines[1:3]:
            if ln[0] != "pose" or len(ln) != 8:
                raise FormatError(f"bad pose line: {' '.join(ln)}")
            vals = [float(v) for v in ln[1:]]
            poses.append(Pose(vals[:3], vals[3:]))
        clouds = []
        pos = 3
        for _ in range(2):
            ln = lines[pos]
            if ln[0] != "points" or len(ln) != 2:
                raise FormatError(f"bad points line: {' '.join(ln)}")
            n = int(ln[1])
            block = lines[pos + 1:pos + 1 + n]
            if len(block) != n or any(len(row) != 3 for row in block):
                raise FormatError("point block shorter than declared or malformed")
            clouds.append(PointCloud(np.array(block, dtype=np.float64)))
            pos += 1 + n
        if pos != len(lines):
            raise FormatError("trailing content after second point block")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed scene file: {exc}") from exc
    return Scene(head[1], head[2], head[3], clouds[0], clouds[1], poses[0], poses[1])


def write_scene(path, scene):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_scene(scene))


def read_scene(path):
    with open(path, encoding="utf-8") as fh:
        return parse_scene(fh.read())
