"""Triplet sampling, scene augmentation and the metric training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DatasetError, FormatError, TrainingAborted
from .geometry import Pose, quat_from_axis_angle, quat_multiply, rotation_matrix
from .network import NetworkParams, scene_depth, triplet_loss
from .tensor.optim import LrSchedule, SGDState, lr_at, sgd_momentum_step

log = logging.getLogger(__name__)


class SimilarityLabels:
    """Binary similarity matrix over scenes (0 similar, 1 dissimilar, NaN unknown).

    Args:
        scene_ids: ordered scene identifiers.
        matrix: ``(n, n)`` array with entries in {0, 1, nan}.
        classes: optional ordered class names.
        tags: optional per-scene class name (same order as ``scene_ids``).
    """

    def __init__(self, scene_ids, matrix, classes=None, tags=None):
        self.scene_ids = tuple(scene_ids)
        y = np.array(matrix, dtype=np.float64)
        n = len(self.scene_ids)
        if y.shape != (n, n):
            raise ContractError(f"label matrix shape {y.shape} != ({n}, {n})")
        if len(set(self.scene_ids)) != n:
            raise ContractError("duplicate scene ids")
        defined = ~np.isnan(y)
        if not np.all(np.isin(y[defined], (0.0, 1.0))):
            raise ContractError("label entries must be 0, 1 or undefined")
        if not np.array_equal(defined, defined.T) or not np.array_equal(y[defined], y.T[defined]):
            raise ContractError("label matrix must be symmetric where defined")
        diag = np.diag(y)
        if np.any(diag[~np.isnan(diag)] != 0.0):
            raise ContractError("label diagonal must be 0 where defined")
        self.matrix = y
        self.tags = tuple(tags) if tags is not None else None
        if self.tags is not None and len(self.tags) != n:
            raise ContractError("one class tag per scene required")
        if classes is None and self.tags is not None:
            classes = tuple(dict.fromkeys(self.tags))
        self.classes = tuple(classes) if classes is not None else ()
        self._index = {sid: i for i, sid in enumerate(self.scene_ids)}

    @classmethod
    def from_classes(cls, scene_ids, tags, classes=None):
        """Same class -> 0, different class -> 1."""
        tags = list(tags)
        if classes is not None:
            unknown = set(tags) - set(classes)
            if unknown:
                raise FormatError(f"labels reference undeclared classes {sorted(unknown)}")
        arr = np.array(tags, dtype=object)
        y = (arr[:, None] != arr[None, :]).astype(np.float64)
        return cls(scene_ids, y, classes, tags)

    def __len__(self):
        return len(self.scene_ids)

    def index(self, scene_id):
        return self._index[scene_id]

    def class_of(self, scene_id):
        if self.tags is None:
            raise DatasetError("labels carry no class tags")
        return self.tags[self._index[scene_id]]

    def subset(self, scene_ids):
        idx = [self._index[s] for s in scene_ids]
        tags = [self.tags[i] for i in idx] if self.tags is not None else None
        return SimilarityLabels(scene_ids, self.matrix[np.ix_(idx, idx)], self.classes, tags)


def _valid_anchors(labels):
    y = labels.matrix
    n = len(labels)
    off = ~np.eye(n, dtype=bool)
    has_pos = np.any((y == 0.0) & off, axis=1)
    has_neg = np.any(y == 1.0, axis=1)
    return np.flatnonzero(has_pos & has_neg)


def sample_triplet(labels, rng, anchors=None):
    """Indices ``(anchor, positive, negative)`` with ``Y[a, p] = 0`` and ``Y[a, n] = 1``.

    With class tags the anchor's class is drawn uniformly over the classes
    that have a valid anchor, then the anchor uniformly within that class;
    without tags the anchor is uniform over valid anchors.
    """
    if anchors is None:
        anchors = _valid_anchors(labels)
    if len(anchors) == 0:
        raise DatasetError("no valid triplet: no scene has both a similar and a dissimilar partner")
    if labels.tags is not None:
        anchor_classes = sorted({labels.tags[i] for i in anchors}, key=labels.classes.index)
        c = anchor_classes[rng.integers(len(anchor_classes))]
        members = [i for i in anchors if labels.tags[i] == c]
        a = members[rng.integers(len(members))]
    else:
        a = anchors[rng.integers(len(anchors))]
    row = labels.matrix[a]
    pos = np.flatnonzero(row == 0.0)
    pos = pos[pos != a]
    neg = np.flatnonzero(row == 1.0)
    return int(a), int(pos[rng.integers(len(pos))]), int(neg[rng.integers(len(neg))])


def _random_unit_vector(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def augment(scene, rng, noise_t=0.005, noise_deg=2.0, z_angle=None):
    """Perturb both object poses, then rotate the whole scene about world z.

    Each object gets translation noise ``N(0, noise_t^2)`` per axis and a
    rotation about a random axis by an angle uniform in ``[0, noise_deg]``.
    The scene is then rotated by ``z_angle`` (uniform in ``[0, 2 pi)`` when
    omitted) about the centroid of all its world points.
    """
    poses = []
    for pose in (scene.pose_a, scene.pose_b):
        t = pose.t + rng.normal(0.0, noise_t, 3) if noise_t > 0 else pose.t
        q = pose.q
        if noise_deg > 0:
            dq = quat_from_axis_angle(_random_unit_vector(rng), math.radians(rng.uniform(0.0, noise_deg)))
            q = quat_multiply(dq, q)
        poses.append(Pose(t, q))
    if z_angle is None:
        z_angle = rng.uniform(0.0, 2.0 * math.pi)
    moved = scene.with_poses(*poses)
    if z_angle == 0.0:
        return moved
    pa, pb = moved.world_points()
    center = np.vstack([pa, pb]).mean(axis=0)
    qz = quat_from_axis_angle([0.0, 0.0, 1.0], z_angle)
    rz = rotation_matrix(qz)
    rotated = [Pose(rz @ (p.t - center) + center, quat_multiply(qz, p.q)) for p in poses]
    return scene.with_poses(*rotated)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``pool_per_class`` selects how a batch is built: ``None`` draws three
    fresh scenes for every triplet; an integer draws that many scenes per
    class into a shared pool, embeds each pooled scene once and samples all
    ``batch_triplets`` triplets from the pool.
    """

    iterations: int = 14000
    batch_triplets: int = 100
    momentum: float = 0.9
    schedule: LrSchedule = field(default_factory=LrSchedule)
    dropout: float = 0.5
    noise_t: float = 0.005
    noise_deg: float = 2.0
    seed: int = 0
    pool_per_class: int | None = None
    augment: bool = True

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.iterations < 0 or self.batch_triplets < 1:
            raise ConfigError("iterations must be >= 0 and batch_triplets >= 1")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("dropout and momentum must lie in [0, 1)")
        if self.noise_t < 0 or self.noise_deg < 0:
            raise ConfigError("noise scales must be non-negative")
        if self.pool_per_class is not None and self.pool_per_class < 2:
            raise ConfigError("pool_per_class must be at least 2")


PAPER_TRAIN = TrainConfig()
DESK_TRAIN = TrainConfig(iterations=2000, pool_per_class=2)
TRAIN_PRESETS = {"paper": PAPER_TRAIN, "desk": DESK_TRAIN}


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def append(self, step, lr, loss):
        self.steps.append(step)
        self.lrs.append(lr)
        self.losses.append(loss)

    def __len__(self):
        return len(self.steps)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "lr", "loss"])
            for row in zip(self.steps, self.lrs, self.losses):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def read_train_log(path):
    out = TrainLog()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(int(row["step"]), float(row["lr"]), float(row["loss"]))
    return out


def _class_pool(labels, per_class, rng, candidates):
    pool = []
    for c in labels.classes:
        members = [i for i in candidates if labels.tags[i] == c]
        if len(members) < 2:
            continue
        take = min(per_class, len(members))
        pool.extend(int(members[j]) for j in rng.choice(len(members), size=take, replace=False))
    return pool


def _draw_batch(labels, config, rng, anchors):
    """Scene indices to embed and the triplets (as positions into that list)."""
    if config.pool_per_class is None:
        scenes, triplets = [], []
        for _ in range(config.batch_triplets):
            a, p, n = sample_triplet(labels, rng, anchors)
            base = len(scenes)
            scenes.extend((a, p, n))
            triplets.append((base, base + 1, base + 2))
        return scenes, triplets
    if labels.tags is None:
        raise DatasetError("pooled batches need class tags")
    pool = _class_pool(labels, config.pool_per_class, rng, range(len(labels)))
    sub = labels.subset([labels.scene_ids[i] for i in pool])
    sub_anchors = _valid_anchors(sub)
    triplets = [sample_triplet(sub, rng, sub_anchors) for _ in range(config.batch_triplets)]
    return pool, triplets


def _render_batch(scenes, indices, config, rng, resolution, use_augment):
    images = np.empty((len(indices), 3, 2, resolution, resolution))
    for j, i in enumerate(indices):
        s = scenes[i]
        if use_augment:
            s = augment(s, rng, config.noise_t, config.noise_deg)
        assignment = "AB" if rng.random() < 0.5 else "BA"
        images[j] = scene_depth(s, resolution, assignment)[0].images
    return images


def batch_loss(params, images, triplets, training, rng, dropout):
    """Mean triplet loss over ``triplets`` indexing rows of the embedded batch."""
    emb = params.forward(images, training=training, rng=rng, dropout_p=dropout)
    idx = np.array(triplets)
    e = T.take_rows(emb, idx[:, 0])
    ep = T.take_rows(emb, idx[:, 1])
    em = T.take_rows(emb, idx[:, 2])
    return T.mean(triplet_loss(e, ep, em))


def train(scenes, labels, config, params=None, arch=None, log_every=0, overfit_one_batch=False,
          callback=None):
    """Optimize network parameters with SGD momentum under the warm-restart schedule.

    Args:
        scenes: scenes aligned with ``labels.scene_ids``.
        labels: :class:`SimilarityLabels`.
        config: :class:`TrainConfig`.
        params: starting :class:`NetworkParams`; initialized from ``arch``
            with the config seed when omitted.
        overfit_one_batch: draw one batch (with its augmentation, channel
            assignment and dropout mask) and reuse it every step.

    Returns:
        ``(params, TrainLog, SGDState)``.
    """
    if len(scenes) == 0:
        raise ContractError("training needs a non-empty dataset")
    if [s.scene_id for s in scenes] != list(labels.scene_ids):
        raise ContractError("scenes must be aligned with labels.scene_ids")
    rng = np.random.default_rng(config.seed)
    if params is None:
        if arch is None:
            raise ContractError("pass either params or arch")
        params = NetworkParams.initialize(arch, rng)
    res = params.config.resolution
    state = SGDState(lr=config.schedule.initial_lr, momentum=config.momentum)
    tensors = list(params)
    history = TrainLog()
    anchors = _valid_anchors(labels)
    if len(anchors) == 0:
        raise DatasetError("no valid triplet: no scene has both a similar and a dissimilar partner")

    fixed = None
    if overfit_one_batch:
        indices, triplets = _draw_batch(labels, config, rng, anchors)
        images = _render_batch(scenes, indices, config, rng, res, config.augment)
        feat = 3 * params.config.feature_dim
        mask = rng.random((len(indices), feat)) >= config.dropout
        fixed = (indices, triplets, images, mask)

    for step in range(config.iterations):
        lr = lr_at(config.schedule, step)
        if fixed is None:
            indices, triplets = _draw_batch(labels, config, rng, anchors)
            images = _render_batch(scenes, indices, config, rng, res, config.augment)
            mask = None
        else:
            indices, triplets, images, mask = fixed
        params.zero_grad()
        try:
            if mask is not None:
                emb = params.forward(images, training=True, dropout_p=config.dropout, dropout_mask=mask)
                idx = np.array(triplets)
                loss = T.mean(triplet_loss(T.take_rows(emb, idx[:, 0]), T.take_rows(emb, idx[:, 1]),
                                           T.take_rows(emb, idx[:, 2])))
            else:
                loss = batch_loss(params, images, triplets, True, rng, config.dropout)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError("non-finite loss")
            loss.backward()
        except FloatingPointError as exc:
            ids = sorted({labels.scene_ids[i] for i in indices})
            raise TrainingAborted(f"training aborted at step {step} (lr={lr}): {exc}; batch {ids}",
                                  step=step, lr=lr, batch_ids=ids) from exc
        sgd_momentum_step([t.data for t in tensors], [t.grad for t in tensors], state, lr=lr)
        history.append(step, lr, value)
        if log_every and step % log_every == 0:
            log.info("step %d lr %.6g loss %.6g", step, lr, value)
        if callback is not None:
            callback(step, lr, value)
    params.zero_grad()
    return params, history, state


def with_overrides(config, **kwargs):
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})
