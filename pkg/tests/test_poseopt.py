"""Pose optimization plumbing, traces and the distance report."""

import numpy as np
import pytest

from relmetric import tensor as T
from relmetric.errors import ConfigError
from relmetric.geometry import Pose, fit_unit_cube
from relmetric.network import embed_many
from relmetric.poseopt import (TRACE_COLUMNS, GeneralizationConfig, OptimizationTrace, generalize,
                               read_trace, scene_distance_report, variable_units,
                               write_distance_report)
from relmetric.projection import project
from relmetric.training import augment

from oracles import planted_shift_gradient


@pytest.fixture(scope="module")
def pair(small_dataset):
    scenes, _ = small_dataset
    ref = scenes[0]
    return ref, augment(ref, np.random.default_rng(8))


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"max_steps": -1}, {"threshold": -1.0},
                                        {"kernel_size": 4}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            GeneralizationConfig(**kwargs)


class TestGeneralize:
    def test_identical_scene_returns_immediately(self, pair, desk_params):
        ref, _ = pair
        best, trace = generalize(ref, ref, desk_params)
        assert len(trace) == 1 and trace.initial_distance == 0.0
        assert best.pose_a == ref.pose_a and best.pose_b == ref.pose_b

    def test_zero_gradients_keep_poses(self, pair, desk_params):
        ref, test = pair
        cfg = GeneralizationConfig(max_steps=3)
        _, trace = generalize(ref, test, desk_params, cfg, grad_hook=lambda g: [np.zeros_like(x) for x in g])
        for pa, pb in zip(trace.poses_a, trace.poses_b):
            np.testing.assert_allclose(pa.t, test.pose_a.t, rtol=0, atol=1e-15)
            np.testing.assert_allclose(pb.q, test.pose_b.q, rtol=0, atol=1e-15)

    def test_unit_quaternions_and_best_so_far(self, pair, desk_params):
        ref, test = pair
        best, trace = generalize(ref, test, desk_params, GeneralizationConfig(max_steps=15))
        assert len(trace) == 16
        for p in trace.poses_a + trace.poses_b:
            assert abs(np.linalg.norm(p.q) - 1.0) < 1e-6
        assert trace.best_distance == min(trace.distances)
        d_best = np.linalg.norm(np.subtract(*embed_many([best, ref], desk_params)))
        assert d_best == pytest.approx(trace.best_distance, rel=1e-12)

    def test_zero_steps(self, pair, desk_params):
        ref, test = pair
        best, trace = generalize(ref, test, desk_params, GeneralizationConfig(max_steps=0))
        assert len(trace) == 1 and best is test

    def test_clouds_fixed(self, pair, desk_params):
        ref, test = pair
        best, _ = generalize(ref, test, desk_params, GeneralizationConfig(max_steps=3))
        assert best.cloud_a is test.cloud_a and best.cloud_b is test.cloud_b

    def test_pgm_dump(self, pair, desk_params, tmp_path):
        ref, test = pair
        generalize(ref, test, desk_params, GeneralizationConfig(max_steps=1), dump_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert len(names) == 12 and names[0].startswith(f"{test.scene_id}_step0000_")

    def test_units(self, pair):
        frame = fit_unit_cube(*pair[0].world_points())
        u_t, u_q = variable_units(frame, 32)
        assert u_t * frame.scale * 32 == pytest.approx(1.0) and u_q == 1 / 32


class TestOneStepDirection:
    def test_adam_step_reduces_planted_loss(self, small_dataset):
        """One Adam step on the common translation, restricted to the shifted axis."""
        scenes, _ = small_dataset
        rng = np.random.default_rng(21)
        hits = 0
        for i in range(100):
            s = augment(scenes[i % len(scenes)], rng)
            axis, k = i % 3, 1 + (i // 3) % 3
            g, loss, frame, _ = planted_shift_gradient(s, axis, k)
            t = [np.zeros(1)]
            T.adam_step(t, [np.array([g[axis]])], T.AdamState(lr=1.0))
            step = np.zeros(3)
            step[axis] = t[0][0] / (32 * frame.scale)
            moved = s.with_poses(Pose(s.pose_a.t + step, s.pose_a.q), Pose(s.pose_b.t + step, s.pose_b.q))
            shift = np.zeros(3)
            shift[axis] = k / 32 / frame.scale
            target = s.with_poses(Pose(s.pose_a.t + shift, s.pose_a.q), Pose(s.pose_b.t + shift, s.pose_b.q))
            goal = project(target, frame, "AB", 32).images
            new_loss = 0.5 * float(np.sum((project(moved, frame, "AB", 32).images - goal) ** 2))
            hits += new_loss < loss
        assert hits >= 90


class TestTrace:
    def _trace(self):
        tr = OptimizationTrace()
        for k, d in enumerate([0.5, 0.2, 0.3]):
            tr.append(k, d, Pose([k, 0, 0], [1, 0, 0, 0]), Pose([0, k, 0], [0, 1, 0, 0]))
        return tr

    def test_best(self):
        tr = self._trace()
        assert tr.best_index == 1 and tr.best_distance == 0.2 and tr.initial_distance == 0.5

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            OptimizationTrace().append(0, -0.1, Pose(), Pose())

    def test_csv_round_trip(self, tmp_path):
        tr = self._trace()
        tr.write_csv(tmp_path / "t.csv")
        header = (tmp_path / "t.csv").read_text().splitlines()[0]
        assert header == ",".join(TRACE_COLUMNS)
        back = read_trace(tmp_path / "t.csv")
        assert back.distances == tr.distances and back.steps == tr.steps
        assert back.poses_b == tr.poses_b


class TestDistanceReport:
    def test_reference_first(self, small_dataset, desk_params):
        scenes, _ = small_dataset
        rep = scene_distance_report(scenes[0], scenes[:5], desk_params)
        assert rep[0] == (scenes[0].scene_id, 0.0)
        assert [d for _, d in rep] == sorted(d for _, d in rep)

    def test_singleton_and_empty(self, small_dataset, desk_params):
        scenes, _ = small_dataset
        assert len(scene_distance_report(scenes[0], [scenes[1]], desk_params)) == 1
        assert scene_distance_report(scenes[0], [], desk_params) == []

    def test_matches_brute_force_sort(self, small_dataset, desk_params, tmp_path):
        scenes, _ = small_dataset
        cands = scenes[3:6]
        e = embed_many([scenes[0]] + cands, desk_params)
        brute = sorted((float(np.linalg.norm(e[i + 1] - e[0])), c.scene_id) for i, c in enumerate(cands))
        rep = scene_distance_report(scenes[0], cands, desk_params)
        assert [sid for sid, _ in rep] == [sid for _, sid in brute]
        write_distance_report(tmp_path / "r.csv", rep)
        assert len((tmp_path / "r.csv").read_text().splitlines()) == 4
