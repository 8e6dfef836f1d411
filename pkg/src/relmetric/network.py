"""Triplet metric network over three depth planes.

Each plane image of a scene runs through one shared convolutional subnet; the
three feature vectors are concatenated and fused by a fully-connected layer
into a 64-d embedding. Distances between embeddings define the scene metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .geometry import fit_unit_cube
from .projection import project_points

EVAL_ASSIGNMENT = "AB"
FC_INIT_GAIN = 0.1


@dataclass(frozen=True)
class ArchitectureConfig:
    """Input resolution and the per-plane conv stack.

    ``layers`` holds ``(kernel, channels, pool)`` triples. ``padding`` applies
    to every conv layer. ``input_scale`` multiplies raw pixel values (0 or
    100..200) before the first convolution.
    """

    resolution: int = 32
    layers: tuple = ((5, 32, True), (3, 42, True), (3, 64, False), (3, 64, False), (2, 128, False))
    embedding_dim: int = 64
    padding: str = "valid"
    input_scale: float = 0.01
    in_channels: int = 2

    def __post_init__(self):
        if self.resolution < 1 or self.embedding_dim < 1:
            raise ConfigError("resolution and embedding width must be positive")
        if self.padding not in ("valid", "same"):
            raise ConfigError(f"unknown padding {self.padding!r}")
        object.__setattr__(self, "layers", tuple(tuple(l) for l in self.layers))
        self.layer_shapes()

    def layer_shapes(self):
        """Output ``(channels, H, W)`` after each conv(+pool) layer."""
        size, shapes = self.resolution, []
        for i, (k, ch, pool) in enumerate(self.layers):
            if self.padding == "valid":
                if size < k:
                    raise ConfigError(
                        f"layer {i}: spatial size {size} smaller than kernel {k} at resolution "
                        f"{self.resolution}")
                size = size - k + 1
            if pool:
                if size < 2:
                    raise ConfigError(f"layer {i}: spatial size {size} too small to pool")
                size //= 2
            shapes.append((ch, size, size))
        return shapes

    @property
    def feature_dim(self):
        ch, h, w = self.layer_shapes()[-1]
        return ch * h * w

    def to_dict(self):
        return {
            "resolution": str(self.resolution),
            "layers": ";".join(f"{k},{c},{int(p)}" for k, c, p in self.layers),
            "embedding_dim": str(self.embedding_dim),
            "padding": self.padding,
            "input_scale": repr(self.input_scale),
        }

    @classmethod
    def from_dict(cls, d):
        layers = tuple((int(k), int(c), bool(int(p)))
                       for k, c, p in (item.split(",") for item in d["layers"].split(";")))
        return cls(resolution=int(d["resolution"]), layers=layers,
                   embedding_dim=int(d["embedding_dim"]), padding=d["padding"],
                   input_scale=float(d["input_scale"]))


DESK = ArchitectureConfig()
PAPER = ArchitectureConfig(
    resolution=100,
    layers=((10, 32, True), (8, 42, True), (6, 64, True), (4, 64, True), (4, 128, True),
            (4, 128, False), (2, 128, False)),
    padding="same",
)
PRESETS = {"desk": DESK, "paper": PAPER}


@dataclass
class NetworkParams:
    """Shared subnet and fusion weights, keyed by name in creation order."""

    config: ArchitectureConfig
    tensors: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config, rng):
        """He-style fan-in normal weights, zero biases.

        The fusion layer is scaled down by ``FC_INIT_GAIN`` so initial
        embedding distances are on the order of the unit hinge margin.
        """
        params = {}
        cin = config.in_channels
        for i, (k, ch, _) in enumerate(config.layers):
            fan_in = cin * k * k
            params[f"conv{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (ch, cin, k, k))
            params[f"conv{i}.bias"] = np.zeros(ch)
            cin = ch
        fin = 3 * config.feature_dim
        params["fc.weight"] = rng.normal(0.0, FC_INIT_GAIN * np.sqrt(2.0 / fin),
                                         (config.embedding_dim, fin))
        params["fc.bias"] = np.zeros(config.embedding_dim)
        return cls.from_arrays(config, params)

    @classmethod
    def from_arrays(cls, config, arrays):
        expected = cls.expected_shapes(config)
        if list(arrays) != list(expected):
            raise ContractError(f"parameter names {list(arrays)} do not match {list(expected)}")
        tensors = {}
        for name, arr in arrays.items():
            arr = np.array(arr, dtype=np.float64)
            if arr.shape != expected[name]:
                raise ContractError(f"{name}: shape {arr.shape} != expected {expected[name]}")
            tensors[name] = T.parameter(arr, name=name)
        return cls(config, tensors)

    @staticmethod
    def expected_shapes(config):
        shapes, cin = {}, config.in_channels
        for i, (k, ch, _) in enumerate(config.layers):
            shapes[f"conv{i}.weight"] = (ch, cin, k, k)
            shapes[f"conv{i}.bias"] = (ch,)
            cin = ch
        shapes["fc.weight"] = (config.embedding_dim, 3 * config.feature_dim)
        shapes["fc.bias"] = (config.embedding_dim,)
        return shapes

    def arrays(self):
        return {name: t.data for name, t in self.tensors.items()}

    def copy(self):
        return NetworkParams.from_arrays(self.config, {k: v.copy() for k, v in self.arrays().items()})

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def __iter__(self):
        return iter(self.tensors.values())

    # -- forward -------------------------------------------------------------
    def subnet(self, x):
        """Shared per-plane path: ``(N, 2, H, W)`` -> ``(N, feature_dim)``."""
        cfg = self.config
        for i, (_, _, pool) in enumerate(cfg.layers):
            x = T.conv2d(x, self.tensors[f"conv{i}.weight"], self.tensors[f"conv{i}.bias"],
                         padding=cfg.padding)
            x = T.elu(x)
            if pool:
                x = T.maxpool2d(x)
        return x.reshape(x.shape[0], -1)

    def forward(self, images, training=False, rng=None, dropout_p=0.5, dropout_mask=None):
        """Embed a batch of plane triples.

        Args:
            images: ``(B, 3, 2, H, W)`` array or Tensor (raw pixel values).
            training: enables dropout on the fusion layer input.

        Returns:
            Tensor ``(B, embedding_dim)``.
        """
        images = T.as_tensor(images)
        if images.ndim != 5 or images.shape[1:3] != (3, 2):
            raise ContractError(f"expected (B, 3, 2, H, W) images, got {images.shape}")
        b, _, _, h, w = images.shape
        if h != self.config.resolution or w != self.config.resolution:
            raise ContractError(
                f"image resolution {h}x{w} does not match network resolution {self.config.resolution}")
        x = T.mul(images.reshape(b * 3, 2, h, w), self.config.input_scale)
        feats = self.subnet(x).reshape(b, 3 * self.config.feature_dim)
        feats = T.dropout(feats, dropout_p, training=training, rng=rng, mask=dropout_mask)
        return T.fully_connected(feats, self.tensors["fc.weight"], self.tensors["fc.bias"])

    def summary(self):
        """Text table of layer output shapes and parameter counts."""
        cfg = self.config
        lines = [f"input: 3 planes x (2, {cfg.resolution}, {cfg.resolution})  padding={cfg.padding}"]
        total = 0
        for i, ((k, ch, pool), shape) in enumerate(zip(cfg.layers, cfg.layer_shapes())):
            n = self.tensors[f"conv{i}.weight"].size + self.tensors[f"conv{i}.bias"].size
            total += n
            tag = ", pool" if pool else ""
            lines.append(f"conv{i}: {k}x{k} conv, {ch}, elu{tag} -> {shape}  params={n}")
        n = self.tensors["fc.weight"].size + self.tensors["fc.bias"].size
        total += n
        lines.append(f"fc: {3 * cfg.feature_dim} -> {cfg.embedding_dim}  params={n}")
        lines.append(f"total params (shared subnet counted once): {total}")
        return "\n".join(lines) + "\n"


def scene_depth(scene, resolution, assignment=EVAL_ASSIGNMENT):
    """Apply poses, fit the unit cube and render; returns ``(depth, frame, points)``."""
    pa, pb = scene.world_points()
    frame = fit_unit_cube(pa, pb)
    depth = project_points(frame.apply(pa), frame.apply(pb), resolution, assignment)
    return depth, frame, (pa, pb)


def embed(scene, params, mode="eval", rng=None, assignment=None):
    """Embedding of one scene as a length-``embedding_dim`` ndarray."""
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    if assignment is None:
        assignment = EVAL_ASSIGNMENT if mode == "eval" else ("AB" if rng.random() < 0.5 else "BA")
    depth, _, _ = scene_depth(scene, params.config.resolution, assignment)
    out = params.forward(depth.images[None], training=(mode == "train"), rng=rng)
    return out.data[0].copy()


def embed_many(scenes, params, batch_size=64):
    """Eval-mode embeddings, ``(len(scenes), embedding_dim)``."""
    res = params.config.resolution
    out = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        images = np.stack([scene_depth(s, res)[0].images for s in chunk])
        out.append(params.forward(images).data)
    if not out:
        return np.zeros((0, params.config.embedding_dim))
    return np.concatenate(out)


def metric_distance(s_i, s_j, params):
    """Euclidean distance between eval-mode embeddings of two scenes."""
    e = embed_many([s_i, s_j], params)
    return float(np.sqrt(np.sum((e[0] - e[1]) ** 2)))


def triplet_loss(e, e_plus, e_minus):
    """Hinge triplet loss ``0.5 d+^2 + 0.5 max(0, 1 - d-)^2``.

    Accepts single embeddings ``(D,)`` or batches ``(B, D)`` (arrays or
    Tensors) and returns the per-triplet loss Tensor.
    """
    d_plus = T.euclidean_distance(e, e_plus)
    d_minus = T.euclidean_distance(e, e_minus)
    hinge = T.relu(T.sub(1.0, d_minus))
    return T.add(T.mul(0.5, T.square(d_plus)), T.mul(0.5, T.square(hinge)))
