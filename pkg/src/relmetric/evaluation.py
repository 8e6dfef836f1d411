"""Nearest-neighbor retrieval accuracy and cross-validation over seeded splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DatasetError, TrainingAborted
from .network import embed_many
from .training import train, with_overrides

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievalResult:
    """Fractions of evaluated test scenes passing the 3-of-5 and 5-of-5 rules.

    ``excluded`` lists test scenes whose class has fewer than ``k`` train
    members; they do not enter either fraction.
    """

    acc_3of5: float
    acc_5of5: float
    n_evaluated: int
    excluded: tuple = ()
    k: int = 5


def _split_ids(split):
    if hasattr(split, "train"):
        return tuple(split.train), tuple(split.test)
    train_ids, test_ids = split
    return tuple(train_ids), tuple(test_ids)


def _embedding_table(embeddings, labels):
    if isinstance(embeddings, dict):
        return {sid: np.asarray(v, dtype=np.float64) for sid, v in embeddings.items()}
    arr = np.asarray(embeddings, dtype=np.float64)
    if arr.ndim != 2 or len(arr) != len(labels):
        raise ContractError(
            f"embeddings must be a mapping or an (n_scenes, dim) array aligned with labels, got {arr.shape}")
    return dict(zip(labels.scene_ids, arr))


def majority_needed(k):
    """Neighbors that must share the query's class; 3 for ``k = 5``."""
    return math.ceil(3 * k / 5)


def nearest_ids(query, train_ids, table, k, exclude=None):
    """The ``k`` train ids closest to ``query`` (Euclidean), ties broken by id."""
    pool = [sid for sid in train_ids if sid != exclude]
    vecs = np.stack([table[sid] for sid in pool])
    d = np.sqrt(np.sum((vecs - query) ** 2, axis=1))
    order = sorted(range(len(pool)), key=lambda i: (d[i], pool[i]))
    return [pool[i] for i in order[:k]]


def knn_retrieval(embeddings, labels, split, k=5, exclude_self=True):
    """3-of-5 / 5-of-5 nearest-neighbor accuracy of test scenes against train scenes.

    Args:
        embeddings: mapping scene id -> vector, or an array aligned with
            ``labels.scene_ids``.
        labels: :class:`~relmetric.training.SimilarityLabels` with class tags.
        split: a :class:`~relmetric.dataset.DatasetSplit` or a
            ``(train_ids, test_ids)`` pair.
        k: neighbors per query. A query passes the first rule when at least
            ``ceil(3k/5)`` neighbors share its class and the second when all do.
        exclude_self: skip a train entry carrying the query's own id.

    Returns:
        :class:`RetrievalResult`.
    """
    train_ids, test_ids = _split_ids(split)
    if not test_ids:
        raise ContractError("empty test set")
    if k < 1 or k > len(train_ids):
        raise ContractError(f"k={k} must lie in [1, {len(train_ids)}] (train set size)")
    if labels.tags is None:
        raise DatasetError("retrieval needs class tags")
    table = _embedding_table(embeddings, labels)
    missing = [sid for sid in train_ids + test_ids if sid not in table]
    if missing:
        raise ContractError(f"no embedding for scenes {missing[:5]}")
    counts = {}
    for sid in train_ids:
        c = labels.class_of(sid)
        counts[c] = counts.get(c, 0) + 1
    need = majority_needed(k)
    hits3 = hits5 = 0
    excluded = []
    for sid in test_ids:
        c = labels.class_of(sid)
        available = counts.get(c, 0) - (1 if exclude_self and sid in train_ids else 0)
        if available < k:
            excluded.append(sid)
            continue
        nn = nearest_ids(table[sid], train_ids, table, k, exclude=sid if exclude_self else None)
        same = sum(labels.class_of(n) == c for n in nn)
        hits3 += same >= need
        hits5 += same == k
    n = len(test_ids) - len(excluded)
    if excluded:
        log.info("excluded %d test scenes with fewer than %d same-class train members: %s",
                 len(excluded), k, " ".join(excluded))
    if n == 0:
        raise ContractError("no test scene has enough same-class train members")
    return RetrievalResult(hits3 / n, hits5 / n, n, tuple(excluded), k)


def aggregate(values):
    """Mean and sample standard deviation; the deviation of one value is 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ContractError("nothing to aggregate")
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return float(np.mean(v)), std


@dataclass
class CrossValidationResult:
    per_split: list = field(default_factory=list)

    @property
    def acc_3of5(self):
        return aggregate([r.acc_3of5 for r in self.per_split])

    @property
    def acc_5of5(self):
        return aggregate([r.acc_5of5 for r in self.per_split])

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split", "acc3of5", "acc5of5", "n_evaluated", "n_excluded"])
            for i, r in enumerate(self.per_split):
                w.writerow([i, repr(r.acc_3of5), repr(r.acc_5of5), r.n_evaluated, len(r.excluded)])
            for name, (m, s) in (("mean", (self.acc_3of5[0], self.acc_5of5[0])),
                                 ("std", (self.acc_3of5[1], self.acc_5of5[1]))):
                w.writerow([name, repr(m), repr(s), "", ""])


def train_and_evaluate(scenes, labels, split, config, arch, k=5, split_id=0):
    """Train on the split's train scenes, then score its test scenes.

    Returns ``(RetrievalResult, params, TrainLog)``.
    """
    by_id = {s.scene_id: s for s in scenes}
    train_ids, test_ids = _split_ids(split)
    train_labels = labels.subset(train_ids)
    try:
        params, history, _ = train([by_id[i] for i in train_ids], train_labels,
                                   with_overrides(config, seed=config.seed + split_id), arch=arch)
    except TrainingAborted as exc:
        raise TrainingAborted(f"split {split_id}: {exc}", exc.step, exc.lr, exc.batch_ids) from exc
    ids = train_ids + test_ids
    emb = dict(zip(ids, embed_many([by_id[i] for i in ids], params)))
    return knn_retrieval(emb, labels, (train_ids, test_ids), k=k), params, history


def cross_validate(scenes, labels, splits, config, arch, k=5, callback=None):
    """Train and evaluate every split; ``callback(i, result)`` after each one."""
    if not splits:
        raise ContractError("cross-validation needs at least one split")
    out = CrossValidationResult()
    for i, split in enumerate(splits):
        result, _, _ = train_and_evaluate(scenes, labels, split, config, arch, k, split_id=i)
        out.per_split.append(result)
        if callback is not None:
            callback(i, result)
    return out
