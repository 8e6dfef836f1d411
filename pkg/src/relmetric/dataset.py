"""Synthetic two-object scenes for four spatial relations, plus dataset files.

Objects are sampled area-uniformly from simple parametric surfaces. Each
relation class has a sampler that places object A relative to object B and a
predicate that checks the arrangement on the transformed clouds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DatasetError, FormatError
from .geometry import (PointCloud, Pose, Scene, quat_from_axis_angle, quat_multiply,
                       read_scene, transform_cloud, write_scene)
from .training import SimilarityLabels

log = logging.getLogger(__name__)

KINDS = ("box", "cylinder", "bowl", "plate", "can")
CLASSES = ("on_top", "inside", "next_to", "on_top_inclined")
CONTACT_EPS = 1e-6
MIN_TEMPLATE_POINTS = 64


# -- surfaces ----------------------------------------------------------------

def _box_faces(lx, ly, lz):
    hx, hy, hz = lx / 2, ly / 2, lz / 2
    # (area, fixed axis, fixed value, free axes with half-lengths)
    return [
        (ly * lz, 0, -hx, (1, hy), (2, hz)), (ly * lz, 0, hx, (1, hy), (2, hz)),
        (lx * lz, 1, -hy, (0, hx), (2, hz)), (lx * lz, 1, hy, (0, hx), (2, hz)),
        (lx * ly, 2, -hz, (0, hx), (1, hy)), (lx * ly, 2, hz, (0, hx), (1, hy)),
    ]


def _sample_box(size, n, rng):
    faces = _box_faces(*size)
    areas = np.array([f[0] for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    for i, face in enumerate(faces):
        sel = which == i
        m = int(sel.sum())
        _, axis, value, (a1, h1), (a2, h2) = face
        block = np.empty((m, 3))
        block[:, axis] = value
        block[:, a1] = rng.uniform(-h1, h1, m)
        block[:, a2] = rng.uniform(-h2, h2, m)
        pts[sel] = block
    return pts


def _disc(r, z, m, rng):
    rad = r * np.sqrt(rng.random(m))
    ang = rng.uniform(0.0, 2 * np.pi, m)
    return np.column_stack([rad * np.cos(ang), rad * np.sin(ang), np.full(m, z)])


def _wall(r, h, m, rng):
    ang = rng.uniform(0.0, 2 * np.pi, m)
    return np.column_stack([r * np.cos(ang), r * np.sin(ang), rng.uniform(-h / 2, h / 2, m)])


def _sample_cylinder(radius, height, n, rng, top=True):
    parts = [("wall", 2 * np.pi * radius * height), ("bottom", np.pi * radius ** 2)]
    if top:
        parts.append(("top", np.pi * radius ** 2))
    areas = np.array([a for _, a in parts])
    which = rng.choice(len(parts), size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    for i, (name, _) in enumerate(parts):
        sel = which == i
        m = int(sel.sum())
        if name == "wall":
            pts[sel] = _wall(radius, height, m, rng)
        else:
            pts[sel] = _disc(radius, -height / 2 if name == "bottom" else height / 2, m, rng)
    return pts


@dataclass(frozen=True, eq=False)
class ObjectTemplate:
    """A named object model with its sampled surface cloud (local frame, centered bbox).

    ``size`` is ``(lx, ly, lz)`` for boxes and ``(radius, height)`` for the
    round kinds. Bowls are open at the top; plates and cans are closed.
    """

    name: str
    kind: str
    size: tuple
    cloud: PointCloud = field(repr=False)

    @classmethod
    def create(cls, name, kind, size, n_points=256, rng=None):
        if kind not in KINDS:
            raise ContractError(f"unknown object kind {kind!r}")
        if n_points < MIN_TEMPLATE_POINTS:
            raise ContractError(f"templates need at least {MIN_TEMPLATE_POINTS} points")
        rng = np.random.default_rng(0) if rng is None else rng
        size = tuple(float(s) for s in size)
        if kind == "box":
            pts = _sample_box(size, n_points, rng)
        else:
            pts = _sample_cylinder(size[0], size[1], n_points, rng, top=(kind != "bowl"))
        return cls(name, kind, size, PointCloud(pts))

    @property
    def height(self):
        return self.size[2] if self.kind == "box" else self.size[1]

    @property
    def footprint_radius(self):
        """Horizontal circumradius about the local z axis."""
        if self.kind == "box":
            return math.hypot(self.size[0], self.size[1]) / 2
        return self.size[0]

    def surface_residual(self, points=None):
        """Distance of each point to the template surface (0 for exact samples)."""
        p = self.cloud.points if points is None else np.asarray(points)
        if self.kind == "box":
            half = np.array(self.size) / 2
            q = np.abs(p) - half
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            return np.abs(outside + inside)
        r, h = self.size
        rho = np.hypot(p[:, 0], p[:, 1])
        d_wall = np.hypot(np.maximum(np.abs(p[:, 2]) - h / 2, 0.0), rho - r)
        d_bottom = np.hypot(np.maximum(rho - r, 0.0), p[:, 2] + h / 2)
        d = np.minimum(d_wall, d_bottom)
        if self.kind != "bowl":
            d = np.minimum(d, np.hypot(np.maximum(rho - r, 0.0), p[:, 2] - h / 2))
        return d


DEFAULT_TEMPLATE_SPECS = (
    ("box_cube", "box", (0.06, 0.06, 0.06)),
    ("box_long", "box", (0.14, 0.05, 0.04)),
    ("box_tall", "box", (0.05, 0.05, 0.11)),
    ("cylinder", "cylinder", (0.025, 0.12)),
    ("can", "can", (0.035, 0.10)),
    ("plate", "plate", (0.10, 0.015)),
    ("bowl", "bowl", (0.08, 0.06)),
    ("bowl_small", "bowl", (0.06, 0.05)),
)


def default_templates(n_points=256, seed=0):
    rng = np.random.default_rng(seed)
    return [ObjectTemplate.create(name, kind, size, n_points, rng)
            for name, kind, size in DEFAULT_TEMPLATE_SPECS]


# -- relation predicates -----------------------------------------------------

def _horizontal_centroid(points):
    return points[:, :2].mean(axis=0)


def tilt_degrees(q):
    """Angle between the object's local z axis and world z."""
    w, x, y, z = q
    zz = w * w - x * x - y * y + z * z
    return math.degrees(math.acos(max(-1.0, min(1.0, zz))))


def _on_top_geometry(scene, eps):
    pa, pb = scene.world_points()
    contact = abs(pa[:, 2].min() - pb[:, 2].max()) <= eps
    extent = pb[:, :2].max(axis=0) - pb[:, :2].min(axis=0)
    offset = np.abs(_horizontal_centroid(pa) - _horizontal_centroid(pb))
    return contact and bool(np.all(offset < extent.min() / 2)), pb


def on_top_predicate(scene, eps=CONTACT_EPS):
    """A rests upright on B: contact at B's top, centroid over B's support."""
    ok, pb = _on_top_geometry(scene, eps)
    return ok and abs(pb[:, 2].min()) <= eps and tilt_degrees(scene.pose_a.q) < 5.0


def on_top_inclined_predicate(scene, eps=CONTACT_EPS):
    """As :func:`on_top_predicate` but A is tilted between 15 and 40 degrees."""
    ok, pb = _on_top_geometry(scene, eps)
    return ok and abs(pb[:, 2].min()) <= eps and 15.0 <= tilt_degrees(scene.pose_a.q) <= 40.0


def inside_predicate(scene, container_radius, eps=CONTACT_EPS):
    """A stands on B's floor and lies within B's wall radius, B on the table."""
    pa, pb = scene.world_points()
    floor = pb[:, 2].min()
    axis = scene.pose_b.t[:2]
    radial = np.hypot(pa[:, 0] - axis[0], pa[:, 1] - axis[1]).max()
    return (abs(floor) <= eps and abs(pa[:, 2].min() - floor) <= eps
            and radial < container_radius)


def next_to_predicate(scene, gap=(0.01, 0.08), eps=CONTACT_EPS):
    """Both objects on the table, separated horizontally by a small gap.

    The gap is measured between the axis-aligned footprints along the axis
    of largest separation.
    """
    pa, pb = scene.world_points()
    if abs(pa[:, 2].min()) > eps or abs(pb[:, 2].min()) > eps:
        return False
    lo_a, hi_a = pa[:, :2].min(axis=0), pa[:, :2].max(axis=0)
    lo_b, hi_b = pb[:, :2].min(axis=0), pb[:, :2].max(axis=0)
    sep = np.maximum(lo_b - hi_a, lo_a - hi_b)
    g = sep.max()
    return bool(gap[0] <= g <= gap[1])


# -- samplers ----------------------------------------------------------------

def _yaw(rng):
    return quat_from_axis_angle([0, 0, 1], rng.uniform(0, 2 * np.pi))


def _rest_on(cloud, q, z, xy):
    """Translation placing the rotated cloud's lowest point at height ``z``."""
    rotated = transform_cloud(cloud, Pose(np.zeros(3), q))
    return np.array([xy[0], xy[1], z - rotated[:, 2].min()])


def _base_pose(b, rng):
    qb = _yaw(rng)
    return Pose(_rest_on(b.cloud, qb, 0.0, (0.0, 0.0)), qb)


def _place_on_top(a, b, rng, tilt):
    pose_b = _base_pose(b, rng)
    pb = transform_cloud(b.cloud, pose_b)
    qa = _yaw(rng)
    if tilt:
        axis_ang = rng.uniform(0, 2 * np.pi)
        tilt_q = quat_from_axis_angle([np.cos(axis_ang), np.sin(axis_ang), 0.0],
                                      np.radians(rng.uniform(20.0, 35.0)))
        qa = quat_multiply(tilt_q, qa)
    extent = pb[:, :2].max(axis=0) - pb[:, :2].min(axis=0)
    # offsets kept well inside the support so the centroid test has margin
    xy = rng.uniform(-0.2, 0.2, 2) * extent.min() + _horizontal_centroid(pb)
    rotated = transform_cloud(a.cloud, Pose(np.zeros(3), qa))
    xy = xy - _horizontal_centroid(rotated)
    pose_a = Pose(_rest_on(a.cloud, qa, pb[:, 2].max(), xy), qa)
    return pose_a, pose_b


def _place_inside(a, b, rng):
    pose_b = _base_pose(b, rng)
    qa = _yaw(rng)
    slack = b.size[0] - a.footprint_radius
    r = rng.uniform(0.0, 0.6) * slack
    ang = rng.uniform(0, 2 * np.pi)
    xy = pose_b.t[:2] + r * np.array([np.cos(ang), np.sin(ang)])
    pb = transform_cloud(b.cloud, pose_b)
    return Pose(_rest_on(a.cloud, qa, pb[:, 2].min(), xy), qa), pose_b


def _place_next_to(a, b, rng):
    pose_b = _base_pose(b, rng)
    # axis-aligned yaws keep footprints tight so the gap is predictable
    qa = quat_from_axis_angle([0, 0, 1], rng.integers(0, 4) * np.pi / 2)
    pose_b = Pose(pose_b.t, quat_from_axis_angle([0, 0, 1], rng.integers(0, 4) * np.pi / 2))
    pb = transform_cloud(b.cloud, pose_b)
    ra = transform_cloud(a.cloud, Pose(np.zeros(3), qa))
    gap = rng.uniform(0.02, 0.06)
    direction = rng.integers(0, 4)
    axis, sign = direction // 2, (1 if direction % 2 == 0 else -1)
    xy = np.zeros(2)
    if sign > 0:
        xy[axis] = pb[:, axis].max() + gap - ra[:, axis].min()
    else:
        xy[axis] = pb[:, axis].min() - gap - ra[:, axis].max()
    other = 1 - axis
    xy[other] = rng.uniform(-0.3, 0.3) * (pb[:, other].max() - pb[:, other].min())
    return Pose(_rest_on(a.cloud, qa, 0.0, xy), qa), pose_b


@dataclass(frozen=True)
class RelationClass:
    """A relation name plus the template-pair rule used by its sampler."""

    name: str

    def compatible(self, a, b):
        if a.name == b.name:
            return False
        if self.name in ("on_top", "on_top_inclined"):
            return b.kind != "bowl" and b.height <= 0.12
        if self.name == "inside":
            return b.kind == "bowl" and a.kind != "plate" and a.footprint_radius < 0.8 * b.size[0]
        return True

    def sample(self, a, b, rng):
        if self.name == "on_top":
            return _place_on_top(a, b, rng, tilt=False)
        if self.name == "on_top_inclined":
            return _place_on_top(a, b, rng, tilt=True)
        if self.name == "inside":
            return _place_inside(a, b, rng)
        return _place_next_to(a, b, rng)

    def check(self, scene, b):
        if self.name == "on_top":
            return on_top_predicate(scene)
        if self.name == "on_top_inclined":
            return on_top_inclined_predicate(scene)
        if self.name == "inside":
            return inside_predicate(scene, b.size[0])
        return next_to_predicate(scene)


RELATIONS = {name: RelationClass(name) for name in CLASSES}


def check_relation(scene, class_name, templates):
    by_name = {t.name: t for t in templates}
    return RELATIONS[class_name].check(scene, by_name[scene.object_b_id])


def generate_dataset(n_scenes, classes=CLASSES, templates=None, seed=0, max_tries=50):
    """Class-balanced synthetic scenes and their similarity labels.

    Scene ``i`` gets id ``s{i:04d}``; classes are assigned round-robin so
    counts differ by at most one. Template pairs that cannot realize a class
    are skipped (logged).

    Returns:
        ``(scenes, labels)``.
    """
    classes = tuple(classes)
    if not classes or any(c not in RELATIONS for c in classes):
        raise ContractError(f"classes must be a non-empty subset of {CLASSES}")
    if n_scenes < 10 * len(classes):
        raise ContractError(f"need at least {10 * len(classes)} scenes for {len(classes)} classes")
    templates = default_templates() if templates is None else list(templates)
    rng = np.random.default_rng(seed)

    pairs = {}
    for c in classes:
        rel = RELATIONS[c]
        ok = []
        for a in templates:
            for b in templates:
                if a.name == b.name:
                    continue
                if rel.compatible(a, b):
                    ok.append((a, b))
                else:
                    log.debug("skipping pair %s/%s for %s: relation not realizable", a.name, b.name, c)
        if not ok:
            raise DatasetError(f"no template pair can realize class {c}")
        pairs[c] = ok

    scenes, tags = [], []
    for i in range(n_scenes):
        c = classes[i % len(classes)]
        rel = RELATIONS[c]
        for _ in range(max_tries):
            a, b = pairs[c][rng.integers(len(pairs[c]))]
            pose_a, pose_b = rel.sample(a, b, rng)
            scene = Scene(f"s{i:04d}", a.name, b.name, a.cloud, b.cloud, pose_a, pose_b)
            if rel.check(scene, b):
                break
            log.info("rejected %s sample for %s/%s", c, a.name, b.name)
        else:
            raise DatasetError(f"could not sample a valid {c} scene in {max_tries} tries")
        scenes.append(scene)
        tags.append(c)
    labels = SimilarityLabels.from_classes([s.scene_id for s in scenes], tags, classes)
    return scenes, labels


# -- splits ------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    test: tuple
    seed: int = 0

    def __post_init__(self):
        if not self.train or not self.test:
            raise ContractError("train and test sets must be non-empty")
        if set(self.train) & set(self.test):
            raise ContractError("train and test sets overlap")


def make_splits(labels, n_splits=5, test_fraction=0.2, seed=0):
    """Stratified random train/test splits (per-class shuffles)."""
    rng = np.random.default_rng(seed)
    splits = []
    for k in range(n_splits):
        train, test = [], []
        for c in labels.classes:
            ids = [sid for sid in labels.scene_ids if labels.class_of(sid) == c]
            ids = [ids[j] for j in rng.permutation(len(ids))]
            n_test = max(1, int(round(test_fraction * len(ids))))
            test.extend(ids[:n_test])
            train.extend(ids[n_test:])
        splits.append(DatasetSplit(tuple(sorted(train)), tuple(sorted(test)), seed=seed + k))
    return splits


# -- dataset directory -------------------------------------------------------

def write_labels(path, labels):
    lines = ["classes " + " ".join(labels.classes)]
    lines += [f"label {sid} {labels.class_of(sid)}" for sid in labels.scene_ids]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_labels(path):
    classes, ids, tags = None, [], []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "classes":
            classes = tuple(parts[1:])
        elif parts[0] == "label" and len(parts) == 3:
            ids.append(parts[1])
            tags.append(parts[2])
        else:
            raise FormatError(f"bad labels line: {ln!r}")
    if classes is None:
        raise FormatError("labels file has no classes line")
    return SimilarityLabels.from_classes(ids, tags, classes)


def write_split(path, split):
    Path(path).write_text(" ".join(split.train) + "\n" + " ".join(split.test) + "\n", encoding="utf-8")


def read_split(path, seed=0):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) != 2:
        raise FormatError(f"split file {path} must have exactly two lines")
    return DatasetSplit(tuple(lines[0].split()), tuple(lines[1].split()), seed=seed)


def write_dataset(directory, scenes, labels, splits=(), info=None):
    """Write ``scenes/<id>.scene``, ``labels.txt``, ``splits/<k>.txt`` and ``dataset_info.txt``."""
    directory = Path(directory)
    (directory / "scenes").mkdir(parents=True, exist_ok=True)
    for s in scenes:
        write_scene(directory / "scenes" / f"{s.scene_id}.scene", s)
    write_labels(directory / "labels.txt", labels)
    if splits:
        (directory / "splits").mkdir(exist_ok=True)
        for k, split in enumerate(splits):
            write_split(directory / "splits" / f"{k}.txt", split)
    if info:
        (directory / "dataset_info.txt").write_text(
            "".join(f"{k}={v}\n" for k, v in info.items()), encoding="utf-8")


@dataclass
class Dataset:
    scenes: list
    labels: SimilarityLabels
    splits: list
    info: dict

    def by_id(self):
        return {s.scene_id: s for s in self.scenes}


def read_dataset(directory):
    directory = Path(directory)
    labels = read_labels(directory / "labels.txt")
    scenes = [read_scene(directory / "scenes" / f"{sid}.scene") for sid in labels.scene_ids]
    for sid, s in zip(labels.scene_ids, scenes):
        if s.scene_id != sid:
            raise FormatError(f"scene file {sid}.scene declares id {s.scene_id}")
    splits = []
    split_dir = directory / "splits"
    if split_dir.is_dir():
        k = 0
        while (split_dir / f"{k}.txt").exists():
            splits.append(read_split(split_dir / f"{k}.txt", seed=k))
            k += 1
    info = {}
    info_path = directory / "dataset_info.txt"
    if info_path.exists():
        for ln in info_path.read_text(encoding="utf-8").splitlines():
            if "=" in ln:
                key, _, value = ln.partition("=")
                info[key.strip()] = value.strip()
    return Dataset(scenes, labels, splits, info)
