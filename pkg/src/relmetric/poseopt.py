"""Generalizing a reference relation by optimizing the poses of a test scene.

The test objects' translations and quaternions are moved with Adam to
minimize ``0.5 * d**2``, where ``d`` is the metric distance between the test
scene and a frozen reference embedding. Gradients flow from the loss through
the network into the three depth images, through the Sobel-derived backward
projection onto the points and finally onto the two poses. Adam runs on
pose variables rescaled to pixel units (see :func:`variable_units`).
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (ConfigError, DegenerateSceneError, InvalidPoseError, NonFiniteError,
                     OptimizationAborted, ProjectionDomainError)
from .geometry import Pose, pose_gradients
from .network import EVAL_ASSIGNMENT, embed_many, scene_depth
from .projection import make_grad_kernels, scene_point_gradients, write_pgm_dumps

log = logging.getLogger(__name__)

SUCCESS_DISTANCE = 0.1
TRACE_COLUMNS = ("step", "distance",
                 "txA", "tyA", "tzA", "qwA", "qxA", "qyA", "qzA",
                 "txB", "tyB", "tzB", "qwB", "qxB", "qyB", "qzB")


@dataclass(frozen=True)
class GeneralizationConfig:
    """Adam pose optimization settings.

    ``lr`` is measured in the units of :func:`variable_units`. ``threshold``
    stops the run once ``d < threshold``; ``max_steps`` bounds the number of
    Adam updates.
    """

    lr: float = 0.1
    max_steps: int = 300
    kernel_size: int = 5
    threshold: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be non-negative, got {self.max_steps}")
        if self.threshold < 0:
            raise ConfigError("threshold must be non-negative")
        make_grad_kernels(self.kernel_size)


@dataclass
class OptimizationTrace:
    """Distance and both poses at every evaluated step (step 0 is the input)."""

    steps: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    poses_a: list = field(default_factory=list)
    poses_b: list = field(default_factory=list)

    def append(self, step, distance, pose_a, pose_b):
        if not distance >= 0:
            raise ValueError(f"distance must be non-negative, got {distance}")
        self.steps.append(step)
        self.distances.append(float(distance))
        self.poses_a.append(pose_a)
        self.poses_b.append(pose_b)

    def __len__(self):
        return len(self.steps)

    @property
    def initial_distance(self):
        return self.distances[0]

    @property
    def best_index(self):
        # first occurrence of the minimum
        return int(np.argmin(self.distances))

    @property
    def best_distance(self):
        return self.distances[self.best_index]

    def rows(self):
        for s, d, pa, pb in zip(self.steps, self.distances, self.poses_a, self.poses_b):
            yield [s, d, *pa.t, *pa.q, *pb.t, *pb.q]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def read_trace(path):
    trace = OptimizationTrace()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            v = {k: float(x) for k, x in row.items()}
            pa = Pose([v["txA"], v["tyA"], v["tzA"]], [v["qwA"], v["qxA"], v["qyA"], v["qzA"]])
            pb = Pose([v["txB"], v["tyB"], v["tzB"]], [v["qwB"], v["qxB"], v["qyB"], v["qzB"]])
            trace.append(int(row["step"]), v["distance"], pa, pb)
    return trace


def scene_pose_gradients(scene, depth, frame, grad_images, kernels):
    """Pose gradients ``[dt_a, dq_a, dt_b, dq_b]`` from image gradients of one render."""
    ga, gb = scene_point_gradients(grad_images, depth, kernels, frame,
                                   (len(scene.cloud_a), len(scene.cloud_b)))
    dta, dqa = pose_gradients(scene.cloud_a, scene.pose_a, ga)
    dtb, dqb = pose_gradients(scene.cloud_b, scene.pose_b, gb)
    return [dta, dqa, dtb, dqb]


def _distance_and_image_grad(params, images, e_ref, need_grad):
    x = T.Tensor(images[None], requires_grad=need_grad)
    emb = params.forward(x)
    d = T.euclidean_distance(T.reshape(emb, (-1,)), e_ref)
    if not need_grad:
        return d.item(), None
    loss = T.mul(0.5, T.square(d))
    loss.backward()
    return d.item(), x.grad[0]


def variable_units(frame, resolution):
    """Per-variable units ``(translation, quaternion)`` Adam works in.

    One translation unit is one pixel of the initial unit-cube frame. One
    quaternion unit is ``1 / resolution``: a unit step turns an object by
    about ``2 / resolution`` rad, moving a point half a cube away by one
    pixel. This makes the learning rate a resolution-relative step size.
    """
    return 1.0 / (frame.scale * resolution), 1.0 / resolution


def _render(scene, resolution):
    depth, frame, _ = scene_depth(scene, resolution, EVAL_ASSIGNMENT)
    return depth, frame


def generalize(reference, test, params, config=None, dump_dir=None, grad_hook=None):
    """Move the test objects so the test scene embeds close to the reference.

    Args:
        reference: scene whose relation is to be reproduced.
        test: scene whose two poses are optimized (its clouds stay fixed).
        params: trained :class:`~relmetric.network.NetworkParams`.
        config: :class:`GeneralizationConfig`.
        dump_dir: when given, PGM projections of every evaluated step are
            written there as ``<scene_id>_step<NNNN>_<plane>_<channel>.pgm``.
        grad_hook: optional callable applied to the pose gradient list
            ``[dt_a, dq_a, dt_b, dq_b]`` before each update (diagnostics).

    Returns:
        ``(best scene, OptimizationTrace)``; the returned scene is the one
        with the smallest distance encountered.

    Raises:
        OptimizationAborted: non-finite gradients, or a second degenerate
            unit-cube fit after the learning rate was already halved.
    """
    config = config or GeneralizationConfig()
    params.zero_grad()
    kernels = make_grad_kernels(config.kernel_size)
    res = params.config.resolution
    e_ref = T.Tensor(embed_many([reference], params)[0])
    state = T.AdamState(lr=config.lr)
    trace = OptimizationTrace()
    scene = test
    best_scene, best_d = test, math.inf
    lr_halved = False
    depth, frame = _render(scene, res)
    u_t, u_q = variable_units(frame, res)
    units = [u_t, u_q, u_t, u_q]
    variables = [np.array(v) / u for v, u in
                 zip((test.pose_a.t, test.pose_a.q, test.pose_b.t, test.pose_b.q), units)]
    step = 0
    while True:
        need_grad = step < config.max_steps
        try:
            d, g_img = _distance_and_image_grad(params, depth.images, e_ref, need_grad)
        except NonFiniteError as exc:
            raise OptimizationAborted(f"non-finite values at step {step}: {exc}", trace) from exc
        finally:
            params.zero_grad()
        trace.append(step, d, scene.pose_a, scene.pose_b)
        if dump_dir is not None:
            write_pgm_dumps(dump_dir, f"{test.scene_id}_step{step:04d}", depth)
        if d < best_d:
            best_scene, best_d = scene, d
        if d < config.threshold or d == 0.0 or not need_grad:
            break

        grads = scene_pose_gradients(scene, depth, frame, g_img, kernels)
        if grad_hook is not None:
            grads = [np.asarray(g, dtype=np.float64) for g in grad_hook(grads)]
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise OptimizationAborted(f"non-finite pose gradient at step {step}", trace)
        grads = [g * u for g, u in zip(grads, units)]

        while True:
            saved = ([v.copy() for v in variables], copy.deepcopy(state))
            T.adam_step(variables, grads, state)
            try:
                for qi in (1, 3):
                    n = np.linalg.norm(variables[qi]) * u_q
                    if not np.isfinite(n) or n == 0.0:
                        raise InvalidPoseError("quaternion collapsed to zero")
                    variables[qi] /= n
                candidate = test.with_poses(Pose(variables[0] * u_t, variables[1] * u_q),
                                            Pose(variables[2] * u_t, variables[3] * u_q))
                depth, frame = _render(candidate, res)
                break
            except (DegenerateSceneError, ProjectionDomainError, InvalidPoseError) as exc:
                variables, state = saved
                if lr_halved:
                    raise OptimizationAborted(
                        f"degenerate scene again at step {step} after halving lr: {exc}", trace) from exc
                lr_halved = True
                state.lr *= 0.5
                log.warning("step %d rejected (%s); lr halved to %g", step, exc, state.lr)
        scene = candidate
        step += 1
    return best_scene, trace


def scene_distance_report(reference, candidates, params):
    """``(scene_id, d)`` pairs sorted by distance to ``reference``, ties by id."""
    if not candidates:
        return []
    emb = embed_many([reference] + list(candidates), params)
    d = np.sqrt(np.sum((emb[1:] - emb[0]) ** 2, axis=1))
    pairs = [(c.scene_id, float(x)) for c, x in zip(candidates, d)]
    return sorted(pairs, key=lambda p: (p[1], p[0]))


def write_distance_report(path, report):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id", "distance"])
        for sid, d in report:
            w.writerow([sid, repr(d)])

