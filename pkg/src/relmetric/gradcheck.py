"""Central finite-difference checks for every autodiff op and for composed graphs.

Each check draws seeded random instances, contracts the op output with a
random weight array to get a scalar, and compares the backpropagated input
gradients with central differences. The relative error of one instance is
``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|, 1e-6)`` in the
Euclidean norm over all checked entries.
"""

from __future__ import annotations

import csv
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .network import ArchitectureConfig, NetworkParams, triplet_loss
from .tensor import nn as _nn

STEP = 1e-5
OP_TOL = 1e-5
COMPOSED_TOL = 1e-4
N_INSTANCES = 20
DENOM_FLOOR = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    kind: str
    instances: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tolerance)


def relative_error(analytic, numeric):
    a = np.ravel(analytic)
    b = np.ravel(numeric)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), DENOM_FLOOR))


def numeric_gradient(f, x, h=STEP, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    ``indices`` restricts the check to those flat positions; the result then
    has one entry per index.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out if indices is not None else out.reshape(x.shape)


def _check_instance(fn, inputs, rng, max_entries=None):
    """Worst relative error over the inputs of one op instance."""
    tensors = [T.Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*tensors)
    w = rng.normal(size=out.shape)
    T.tsum(T.mul(out, w)).backward()

    def scalar():
        return float(np.sum(w * fn(*[T.Tensor(x) for x in inputs]).data))

    worst = 0.0
    for x, t in zip(inputs, tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(x)
        if max_entries is not None and x.size > max_entries:
            idx = rng.choice(x.size, size=max_entries, replace=False)
            numeric = numeric_gradient(scalar, x, indices=idx)
            analytic = analytic.reshape(-1)[idx]
        else:
            numeric = numeric_gradient(scalar, x)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# -- op instance builders: rng -> (fn, [inputs]) ------------------------------

def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x) * gap + x, x)


def _tie_free(rng, shape, spacing=0.01):
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing + rng.uniform(0, spacing / 4, n)).reshape(shape) - n * spacing / 2


def _small_shape(rng):
    return tuple(int(v) for v in rng.integers(2, 5, size=int(rng.integers(1, 4))))


def _b_add(rng):
    s = _small_shape(rng)
    return T.add, [rng.normal(size=s), rng.normal(size=s[-1:])]


def _b_sub(rng):
    s = _small_shape(rng)
    return T.sub, [rng.normal(size=s), rng.normal(size=s)]


def _b_mul(rng):
    s = _small_shape(rng)
    return T.mul, [rng.normal(size=s), rng.normal(size=(1,) * (len(s) - 1) + s[-1:])]


def _b_square(rng):
    return T.square, [rng.normal(size=_small_shape(rng))]


def _b_relu(rng):
    return T.relu, [_away_from_zero(rng, _small_shape(rng))]


def _b_sum(rng):
    s = _small_shape(rng)
    axis = int(rng.integers(len(s)))
    return (lambda x: T.tsum(x, axis)), [rng.normal(size=s)]


def _b_mean(rng):
    return T.mean, [rng.normal(size=_small_shape(rng))]


def _b_reshape(rng):
    s = _small_shape(rng)
    return (lambda x: T.reshape(x, (-1,))), [rng.normal(size=s)]


def _b_concat(rng):
    s = (int(rng.integers(1, 4)), 3)
    return (lambda a, b: T.concat([a, b], axis=0)), [rng.normal(size=s), rng.normal(size=(2, 3))]


def _b_conv_valid(rng):
    c, co, k = (int(v) for v in rng.integers(1, 4, size=3))
    h = int(rng.integers(k + 1, k + 5))
    n = int(rng.integers(1, 3))
    x = rng.normal(size=(n, c, h, h)) if rng.random() < 0.5 else rng.normal(size=(c, h, h))
    return (lambda a, w, b: T.conv2d(a, w, b, padding="valid")), \
        [x, rng.normal(size=(co, c, k, k)), rng.normal(size=co)]


def _b_conv_same(rng):
    c, co = (int(v) for v in rng.integers(1, 4, size=2))
    k = int(rng.integers(2, 5))
    h = int(rng.integers(k, k + 4))
    return (lambda a, w, b: T.conv2d(a, w, b, padding="same")), \
        [rng.normal(size=(2, c, h, h)), rng.normal(size=(co, c, k, k)), rng.normal(size=co)]


def _b_maxpool(rng):
    c = int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(2, 9, size=2))
    return T.maxpool2d, [_tie_free(rng, (c, h, w))]


def _b_elu(rng):
    return (lambda x: T.elu(x)), [2.0 * _away_from_zero(rng, _small_shape(rng), gap=1e-3)]


def _b_fc(rng):
    n, m = (int(v) for v in rng.integers(2, 9, size=2))
    x = rng.normal(size=(3, n)) if rng.random() < 0.5 else rng.normal(size=n)
    return T.fully_connected, [x, rng.normal(size=(m, n)), rng.normal(size=m)]


def _b_dropout(rng):
    s = _small_shape(rng)
    mask = rng.random(s) >= 0.5
    return (lambda x: T.dropout(x, 0.5, training=True, mask=mask)), [rng.normal(size=s)]


def _b_take_rows(rng):
    x = rng.normal(size=(5, 3))
    idx = rng.integers(0, 5, size=7)
    return (lambda a: T.take_rows(a, idx)), [x]


def _b_distance(rng):
    shape = (64,) if rng.random() < 0.5 else (4, 16)
    return T.euclidean_distance, [rng.normal(size=shape), rng.normal(size=shape)]


OP_BUILDERS = {
    "add": _b_add,
    "sub": _b_sub,
    "mul": _b_mul,
    "square": _b_square,
    "relu": _b_relu,
    "sum": _b_sum,
    "mean": _b_mean,
    "reshape": _b_reshape,
    "concat": _b_concat,
    "conv2d": _b_conv_valid,
    "conv2d_same": _b_conv_same,
    "maxpool2d": _b_maxpool,
    "elu": _b_elu,
    "fully_connected": _b_fc,
    "dropout": _b_dropout,
    "take_rows": _b_take_rows,
    "euclidean_distance": _b_distance,
}


# -- composed graphs ----------------------------------------------------------

def _b_toy_net(rng):
    """conv-elu-pool, conv-elu, fully-connected on a small random image batch."""
    def fn(x, w0, b0, w1, b1, wf, bf):
        h = T.maxpool2d(T.elu(T.conv2d(x, w0, b0)))
        h = T.elu(T.conv2d(h, w1, b1))
        return T.fully_connected(T.reshape(h, (h.shape[0], -1)), wf, bf)

    return fn, [rng.normal(size=(2, 2, 10, 10)),
                0.4 * rng.normal(size=(3, 2, 3, 3)), 0.1 * rng.normal(size=3),
                0.4 * rng.normal(size=(4, 3, 2, 2)), 0.1 * rng.normal(size=4),
                0.3 * rng.normal(size=(5, 4 * 3 * 3)), 0.1 * rng.normal(size=5)]


TINY_ARCH = ArchitectureConfig(resolution=12, layers=((3, 4, True), (3, 6, False)), embedding_dim=8)


def _b_network_triplet(rng):
    """Triplet loss of the metric network over three random plane triples.

    Images are continuous random values so no pooling window holds a tie.
    """
    arch = TINY_ARCH
    names = list(NetworkParams.expected_shapes(arch))
    init = NetworkParams.initialize(arch, rng).arrays()
    arrays = [init[n] + (0.1 * rng.normal(size=init[n].shape) if n.endswith("bias") else 0.0)
              for n in names]
    images = rng.uniform(0.0, 200.0, size=(3, 3, 2, arch.resolution, arch.resolution))
    mask = rng.random((3, 3 * arch.feature_dim)) >= 0.5

    def fn(x, *weights):
        params = NetworkParams(arch, dict(zip(names, weights)))
        e = params.forward(x, training=True, dropout_mask=mask)
        return triplet_loss(T.take_rows(e, [0]), T.take_rows(e, [1]), T.take_rows(e, [2]))

    return fn, [images] + arrays


COMPOSED_BUILDERS = {
    "toy_net": _b_toy_net,
    "network_triplet": _b_network_triplet,
}


def run_check(name, builder, kind, n_instances=N_INSTANCES, seed=0, tol=None, max_entries=None):
    rng = np.random.default_rng([seed, sum(name.encode())])
    worst = 0.0
    for _ in range(n_instances):
        fn, inputs = builder(rng)
        worst = max(worst, _check_instance(fn, inputs, rng, max_entries))
    tol = tol if tol is not None else (OP_TOL if kind == "op" else COMPOSED_TOL)
    return CheckResult(name, kind, n_instances, worst, tol)


def run_gradcheck(seed=0, n_instances=N_INSTANCES, ops=None, composed=True, max_entries=48):
    """Run every op check (or the subset ``ops``) and the composed checks."""
    names = list(OP_BUILDERS) if ops is None else list(ops)
    unknown = [n for n in names if n not in OP_BUILDERS]
    if unknown:
        raise ConfigError(f"unknown ops {unknown}")
    results = [run_check(n, OP_BUILDERS[n], "op", n_instances, seed) for n in names]
    if composed:
        results += [run_check(n, b, "composed", n_instances, seed, max_entries=max_entries)
                    for n, b in COMPOSED_BUILDERS.items()]
    return results


def format_report(results):
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.kind} {r.name} max_rel_err={r.max_rel_error:.3e} "
                     f"tol={r.tolerance:.0e} instances={r.instances}")
    failed = [r.name for r in results if not r.passed]
    lines.append("all checks passed" if not failed else "failed: " + " ".join(failed))
    return "\n".join(lines) + "\n"


def write_report_csv(path, results):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "kind", "instances", "max_rel_error", "tolerance", "passed"])
        for r in results:
            w.writerow([r.name, r.kind, r.instances, repr(r.max_rel_error), repr(r.tolerance),
                        int(r.passed)])


@contextmanager
def inject_fault(op="elu", factor=1.1):
    """Temporarily scale the backward pass of ``op`` by ``factor`` (test hook)."""
    if op != "elu":
        raise ConfigError(f"fault injection is only available for elu, not {op!r}")
    original = _nn.elu

    def broken(x, alpha=1.0):
        out = original(x, alpha)
        inner = out._backward
        if inner is not None:
            out._backward = lambda g: (inner(g)[0] * factor,)
        return out

    _nn.elu = broken
    T.elu = broken
    try:
        yield
    finally:
        _nn.elu = original
        T.elu = original
