"""Orthographic depth images of a normalized scene and their approximate backward pass.

Three planes are rendered, each with one channel per object:

========  ===========  ===========  ====================  ==============
plane     image col    image row    depth                 d value/d depth
========  ===========  ===========  ====================  ==============
top       world x      world y (-)  1 - z (to z = 1)      -100 per z
front     world x      world z (-)  y     (to y = 0)      +100 per y
side      world y      world z (-)  x     (to x = 0)      +100 per x
========  ===========  ===========  ====================  ==============

``(-)`` marks image rows running opposite the world axis, so world ``z``
points up in the front and side images. Pixel ``(row, col)`` covers the
half-open cell ``[col/W, (col+1)/W) x [row/H, (row+1)/H)`` of the plane
coordinates ``(u, 1 - v)``; coordinates equal to 1.0 clamp into the last
cell. Background pixels are 0 and object pixels hold ``100 * d + 100`` for
the smallest depth ``d`` among the points landing in the pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate

from .errors import ConfigError, ContractError, ProjectionDomainError

DOMAIN_TOL = 1e-6
DEPTH_SCALE = 100.0
OBJECT_BIAS = 100.0

PLANES = ("top", "front", "side")
# (column axis, row axis, depth axis, depth slope sign); depth = 1 - coord when sign < 0
PLANE_AXES = (
    (0, 1, 2, -1.0),
    (0, 2, 1, +1.0),
    (1, 2, 0, +1.0),
)

ASSIGNMENTS = ("AB", "BA")


@dataclass(frozen=True, eq=False)
class DepthImageTriple:
    """Rendered planes.

    Attributes:
        images: ``(3, 2, H, W)`` array; plane order top, front, side.
        ownership: ``(3, 2, H, W)`` int array, index of the point (within
            the channel's object cloud) that set each pixel, ``-1`` for
            background.
        assignment: ``"AB"`` (object A in channel 0) or ``"BA"``.
    """

    images: np.ndarray
    ownership: np.ndarray
    assignment: str = "AB"

    @property
    def resolution(self):
        return self.images.shape[-1]

    def channel_objects(self):
        """Object index (0 = A, 1 = B) rendered into channel 0 and 1."""
        return (0, 1) if self.assignment == "AB" else (1, 0)


@dataclass(frozen=True)
class GradKernelPair:
    s_y: np.ndarray
    s_x: np.ndarray
    smooth_sum: float


def _check_domain(points):
    if len(points) and (points.min() < -DOMAIN_TOL or points.max() > 1.0 + DOMAIN_TOL):
        raise ProjectionDomainError(
            f"points outside the unit cube: range [{points.min()}, {points.max()}]")


def pixel_coords(points, resolution):
    """Per-plane ``(rows, cols, depths)`` for unit-cube points, each ``(3, N)``."""
    rows = np.empty((3, len(points)), dtype=np.int64)
    cols = np.empty_like(rows)
    depths = np.empty((3, len(points)))
    for k, (ca, ra, da, sign) in enumerate(PLANE_AXES):
        cols[k] = np.clip(np.floor(points[:, ca] * resolution), 0, resolution - 1)
        rows[k] = np.clip(np.floor((1.0 - points[:, ra]) * resolution), 0, resolution - 1)
        depths[k] = 1.0 - points[:, da] if sign < 0 else points[:, da]
    return rows, cols, depths


def _render_channel(points, resolution, image, owner):
    rows, cols, depths = pixel_coords(points, resolution)
    values = DEPTH_SCALE * depths + OBJECT_BIAS
    idx = np.arange(len(points))
    for k in range(3):
        flat = rows[k] * resolution + cols[k]
        # sort by pixel, then value, then point index; first entry per pixel wins
        order = np.lexsort((idx, values[k], flat))
        first = np.unique(flat[order], return_index=True)[1]
        winners = order[first]
        image[k].flat[flat[winners]] = values[k][winners]
        owner[k].flat[flat[winners]] = winners


def project_points(points_a, points_b, resolution=100, assignment="AB"):
    """Render two clouds already mapped into the unit cube."""
    if assignment not in ASSIGNMENTS:
        raise ContractError(f"channel assignment must be one of {ASSIGNMENTS}")
    if resolution < 1:
        raise ConfigError("resolution must be positive")
    clouds = [np.asarray(points_a, dtype=np.float64), np.asarray(points_b, dtype=np.float64)]
    for pts in clouds:
        _check_domain(pts)
    if assignment == "BA":
        clouds.reverse()
    images = np.zeros((3, 2, resolution, resolution))
    owner = np.full((3, 2, resolution, resolution), -1, dtype=np.int64)
    for ch, pts in enumerate(clouds):
        _render_channel(pts, resolution, images[:, ch], owner[:, ch])
    return DepthImageTriple(images, owner, assignment)


def project(scene, frame, channel_assignment="AB", resolution=100):
    """Render ``scene`` after applying its poses and ``frame``."""
    pa, pb = scene.world_points()
    return project_points(frame.apply(pa), frame.apply(pb), resolution, channel_assignment)


def make_grad_kernels(size=5):
    """Sobel-style derivative kernels of odd ``size`` in {3, 5, 7}.

    ``S_y = outer(derivative, smoothing)`` differentiates along rows and
    ``S_x`` is its transpose. The smoothing vector holds binomial
    coefficients; the derivative vector is the size-2 binomial row convolved
    with ``[1, 0, -1]``.
    """
    if size not in (3, 5, 7):
        raise ConfigError(f"gradient kernel size must be 3, 5 or 7, got {size}")
    smooth = np.array([comb(size - 1, i) for i in range(size)], dtype=np.float64)
    deriv = np.convolve([comb(size - 3, i) for i in range(size - 2)], [1.0, 0.0, -1.0])
    s_y = np.outer(deriv, smooth)
    return GradKernelPair(s_y=s_y, s_x=s_y.T.copy(), smooth_sum=float(smooth.sum()))


def sobel_responses(grad_image, kernels):
    """Zero-padded same-size correlations ``(S_y * U', S_x * U')``."""
    g = np.asarray(grad_image, dtype=np.float64)
    return (correlate(g, kernels.s_y, mode="constant", cval=0.0),
            correlate(g, kernels.s_x, mode="constant", cval=0.0))


def backward_project(grad_images, depth, kernels, n_points):
    """Route image gradients to the points that own each pixel.

    Args:
        grad_images: ``(3, 2, H, W)`` derivatives of the loss w.r.t. pixels.
        depth: the :class:`DepthImageTriple` from the same forward pass.
        kernels: :class:`GradKernelPair`.
        n_points: ``(len(points_a), len(points_b))``.

    Returns:
        ``(grad_a, grad_b)``, per-point gradients w.r.t. the unit-cube
        coordinates of each object's points, shapes ``(N_a, 3)`` and
        ``(N_b, 3)``.
    """
    grad_images = np.asarray(grad_images, dtype=np.float64)
    if grad_images.shape != depth.images.shape:
        raise ContractError(
            f"gradient images {grad_images.shape} do not match projection {depth.images.shape}")
    res = depth.resolution
    grads = [np.zeros((n_points[0], 3)), np.zeros((n_points[1], 3))]
    unit = res / kernels.smooth_sum
    for ch, obj in enumerate(depth.channel_objects()):
        out = grads[obj]
        for k, (ca, ra, da, sign) in enumerate(PLANE_AXES):
            owner = depth.ownership[k, ch]
            mask = owner >= 0
            if not mask.any():
                continue
            g = grad_images[k, ch]
            r_y, r_x = sobel_responses(g, kernels)
            idx = owner[mask]
            np.add.at(out[:, da], idx, sign * DEPTH_SCALE * g[mask])
            # correlation with the [1, 0, -1] profile is the negative forward difference;
            # rows also run against the world axis, which flips the row term back
            np.add.at(out[:, ca], idx, -unit * r_x[mask])
            np.add.at(out[:, ra], idx, unit * r_y[mask])
    return grads[0], grads[1]


def scene_point_gradients(grad_images, depth, kernels, frame, n_points):
    """World-frame per-point gradients: unit-cube gradients chained through ``frame``."""
    ga, gb = backward_project(grad_images, depth, kernels, n_points)
    return ga * frame.scale, gb * frame.scale


def pgm_bytes(image):
    """Binary PGM (maxval 255) with 0 -> 0 and [100, 200] -> [55, 255]."""
    img = np.asarray(image, dtype=np.float64)
    out = np.where(img > 0, 55.0 + 2.0 * (np.clip(img, 100.0, 200.0) - 100.0), 0.0)
    data = np.rint(out).astype(np.uint8)
    h, w = data.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def write_pgm_dumps(directory, scene_id, depth):
    """Write ``<scene_id>_<plane>_<channel>.pgm`` for every plane and channel."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, plane in enumerate(PLANES):
        for ch in range(2):
            path = directory / f"{scene_id}_{plane}_{ch}.pgm"
            path.write_bytes(pgm_bytes(depth.images[k, ch]))
            paths.append(path)
    return paths
