"""Similarity labels, triplet sampling, augmentation and the training loop."""

import math

import numpy as np
import pytest

from relmetric import tensor as T
from relmetric.errors import ConfigError, ContractError, DatasetError, FormatError
from relmetric.network import DESK, ArchitectureConfig, NetworkParams, scene_depth, triplet_loss
from relmetric.training import (DESK_TRAIN, SimilarityLabels, TrainConfig, augment, batch_loss,
                                read_train_log, sample_triplet, train, with_overrides)

from conftest import box_scene, random_scene

TINY = ArchitectureConfig(resolution=12, layers=((3, 4, True), (3, 6, False)), embedding_dim=8)


def _labels(tags):
    return SimilarityLabels.from_classes([f"s{i}" for i in range(len(tags))], tags)


def _tiny_data(rng, per_class=3, classes=("a", "b")):
    tags = [c for c in classes for _ in range(per_class)]
    scenes = [random_scene(rng, scene_id=f"s{i}") for i in range(len(tags))]
    return scenes, _labels(tags)


class TestSimilarityLabels:
    def test_from_classes(self):
        lab = _labels(["a", "a", "b"])
        np.testing.assert_array_equal(lab.matrix, [[0, 0, 1], [0, 0, 1], [1, 1, 0]])
        assert lab.classes == ("a", "b")
        assert lab.class_of("s2") == "b"

    def test_asymmetric_rejected(self):
        with pytest.raises(ContractError):
            SimilarityLabels(["x", "y"], [[0, 1], [0, 0]])

    def test_nonzero_diagonal_rejected(self):
        with pytest.raises(ContractError):
            SimilarityLabels(["x", "y"], [[1, 1], [1, 0]])

    def test_undefined_entries_allowed(self):
        lab = SimilarityLabels(["x", "y"], [[0, np.nan], [np.nan, 0]])
        assert np.isnan(lab.matrix[0, 1])

    def test_undeclared_class(self):
        with pytest.raises(FormatError):
            SimilarityLabels.from_classes(["x"], ["c"], classes=("a",))

    def test_subset(self):
        sub = _labels(["a", "b", "a", "b"]).subset(["s3", "s0"])
        assert sub.scene_ids == ("s3", "s0") and sub.tags == ("b", "a")
        np.testing.assert_array_equal(sub.matrix, [[0, 1], [1, 0]])


class TestSampleTriplet:
    def test_two_classes_only_valid_assignment(self, rng):
        lab = _labels(["A", "A", "B"])
        for _ in range(50):
            a, p, n = sample_triplet(lab, rng)
            assert lab.tags[a] == lab.tags[p] == "A" and a != p and lab.tags[n] == "B"

    def test_anchor_class_frequencies(self):
        lab = _labels([c for c in "abcd" for _ in range(5)])
        rng = np.random.default_rng(0)
        counts = {c: 0 for c in "abcd"}
        for _ in range(10_000):
            counts[lab.tags[sample_triplet(lab, rng)[0]]] += 1
        for c in counts.values():
            assert abs(c / 10_000 - 0.25) <= 0.02

    def test_fully_similar_is_error(self, rng):
        with pytest.raises(DatasetError):
            sample_triplet(_labels(["a", "a", "a"]), rng)

    def test_untagged_matrix(self, rng):
        y = np.array([[0, 0, 1], [0, 0, 1], [1, 1, 0]], dtype=float)
        lab = SimilarityLabels(["x", "y", "z"], y)
        a, p, n = sample_triplet(lab, rng)
        assert y[a, p] == 0 and a != p and y[a, n] == 1


class TestAugment:
    def test_zero_noise_identity(self, rng):
        s = random_scene(rng)
        out = augment(s, rng, noise_t=0.0, noise_deg=0.0, z_angle=0.0)
        assert out == s

    def test_z_rotation_rigid(self, rng):
        s = box_scene()
        out = augment(s, rng, noise_t=0.0, noise_deg=0.0, z_angle=math.pi)
        pa0, pb0 = s.world_points()
        pa1, pb1 = out.world_points()
        d0 = np.linalg.norm(pa0[:, None] - pb0[None], axis=-1)
        d1 = np.linalg.norm(pa1[:, None] - pb1[None], axis=-1)
        np.testing.assert_allclose(d1, d0, atol=1e-9)
        np.testing.assert_allclose(pa1[:, 2], pa0[:, 2], atol=1e-12)

    def test_on_top_vertical_offset(self, small_dataset):
        scenes, labels = small_dataset
        s = scenes[labels.tags.index("on_top")]

        def offset(sc):
            pa, pb = sc.world_points()
            return pa[:, 2].mean() - pb[:, 2].mean()

        rng = np.random.default_rng(4)
        changes = np.array([offset(augment(s, rng)) - offset(s) for _ in range(100)])
        noise_t = 0.005
        assert np.sqrt(np.mean(changes ** 2)) < 3 * noise_t
        assert np.abs(changes).max() < 6 * noise_t

    def test_clouds_untouched(self, rng):
        s = random_scene(rng)
        out = augment(s, rng)
        assert out.cloud_a is s.cloud_a and out.cloud_b is s.cloud_b


class TestTrainConfig:
    @pytest.mark.parametrize("kwargs", [{"seed": None}, {"iterations": -1}, {"dropout": 1.0},
                                        {"pool_per_class": 1}, {"noise_t": -0.1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_desk_preset(self):
        assert DESK_TRAIN.iterations == 2000 and DESK_TRAIN.momentum == 0.9
        assert DESK_TRAIN.schedule.initial_lr == 0.001 and DESK_TRAIN.schedule.period == 1500


class TestTrain:
    def _config(self, **kw):
        base = TrainConfig(iterations=5, batch_triplets=6, seed=3)
        return with_overrides(base, **kw)

    def test_zero_iterations_returns_initial(self, rng):
        scenes, labels = _tiny_data(rng)
        init = NetworkParams.initialize(TINY, np.random.default_rng(0))
        before = {k: v.copy() for k, v in init.arrays().items()}
        params, log, _ = train(scenes, labels, self._config(iterations=0), params=init)
        assert len(log) == 0
        for k, v in params.arrays().items():
            assert v.tobytes() == before[k].tobytes()

    def test_deterministic(self, rng):
        scenes, labels = _tiny_data(rng)
        a, la, _ = train(scenes, labels, self._config(), arch=TINY)
        b, lb, _ = train(scenes, labels, self._config(), arch=TINY)
        assert la.losses == lb.losses
        for k in a.tensors:
            assert a.tensors[k].data.tobytes() == b.tensors[k].data.tobytes()

    def test_lr_log_matches_schedule(self, rng):
        scenes, labels = _tiny_data(rng)
        cfg = self._config(iterations=8, schedule=T.LrSchedule(0.01, 3, 2.0))
        _, log, _ = train(scenes, labels, cfg, arch=TINY)
        assert log.lrs == [T.lr_at(cfg.schedule, k) for k in range(8)]

    def test_pooled_batches(self, rng):
        scenes, labels = _tiny_data(rng, per_class=4, classes="abc")
        _, log, _ = train(scenes, labels, self._config(pool_per_class=2), arch=TINY)
        assert len(log) == 5 and all(np.isfinite(log.losses))

    def test_misaligned_scenes(self, rng):
        scenes, labels = _tiny_data(rng)
        with pytest.raises(ContractError):
            train(scenes[::-1], labels, self._config(), arch=TINY)

    def test_overfit_one_batch(self, small_dataset):
        scenes, labels = small_dataset
        cfg = with_overrides(DESK_TRAIN, iterations=200, batch_triplets=20)
        _, log, _ = train(scenes, labels, cfg, arch=DESK, overfit_one_batch=True)
        assert log.losses[-1] < log.losses[0]

    def test_log_round_trip(self, rng, tmp_path):
        scenes, labels = _tiny_data(rng)
        _, log, _ = train(scenes, labels, self._config(), arch=TINY)
        log.write_csv(tmp_path / "log.csv")
        back = read_train_log(tmp_path / "log.csv")
        assert back.losses == log.losses and back.lrs == log.lrs and back.steps == log.steps


class TestBatchLoss:
    def _batch(self, rng):
        scenes = [random_scene(rng, scene_id=f"s{i}") for i in range(4)]
        images = np.stack([scene_depth(s, 12)[0].images for s in scenes])
        return images, [(0, 1, 2), (1, 0, 3), (2, 3, 0)]

    def test_mean_of_per_triplet_losses(self, rng):
        params = NetworkParams.initialize(TINY, rng)
        images, triplets = self._batch(rng)
        loss = batch_loss(params, images, triplets, False, None, 0.0).item()
        emb = params.forward(images).data
        per = [triplet_loss(emb[a], emb[p], emb[n]).item() for a, p, n in triplets]
        assert loss == pytest.approx(np.mean(per), rel=1e-14)

    def test_frozen_batch_gradients_repeat(self, rng):
        params = NetworkParams.initialize(TINY, rng)
        images, triplets = self._batch(rng)
        grads = []
        for _ in range(2):
            params.zero_grad()
            batch_loss(params, images, triplets, False, None, 0.0).backward()
            grads.append([t.grad.copy() for t in params])
        for g0, g1 in zip(*grads):
            assert g0.tobytes() == g1.tobytes()
