"""Depth-image rendering, Sobel kernels and the approximate backward pass."""

import numpy as np
import pytest
from scipy.special import comb

from relmetric.errors import ConfigError, ContractError, ProjectionDomainError
from relmetric.geometry import UnitCubeFrame, fit_unit_cube
from relmetric.projection import (PLANES, backward_project, make_grad_kernels, pgm_bytes, project,
                                  project_points, scene_point_gradients, sobel_responses,
                                  write_pgm_dumps)

from conftest import random_scene
from oracles import brute_force_render, planted_shift_gradient


def _points(*rows):
    """Pad a few points to a cloud; repeats keep the rendered set unchanged."""
    return np.array(list(rows), dtype=float)


def _random_unit_points(rng, n):
    pts = rng.uniform(0, 1, (n, 3))
    # put some points exactly on cell boundaries and on the far faces
    k = max(1, n // 5)
    pts[:k] = np.floor(pts[:k] * 8) / 8
    pts[-1] = [1.0, 1.0, 1.0]
    return pts


class TestRender:
    def test_single_point_top_and_front(self):
        p = _points([0.5, 0.5, 1.0])
        d = project_points(p, p, resolution=10)
        top = d.images[0, 0]
        assert top[5, 5] == 100.0
        assert np.count_nonzero(top) == 1
        front = d.images[1, 0]
        assert front[0, 5] == 150.0
        side = d.images[2, 0]
        assert side[0, 5] == 150.0

    def test_min_distance_wins(self):
        p = _points([0.5, 0.5, 0.9], [0.5, 0.5, 0.4])
        d = project_points(p, p, resolution=10)
        assert d.images[0, 0, 5, 5] == pytest.approx(110.0, abs=1e-12)
        assert d.ownership[0, 0, 5, 5] == 0

    def test_empty_channel_background(self):
        p = _points([0.2, 0.2, 0.2])
        d = project_points(p, np.zeros((0, 3)), resolution=8)
        assert np.all(d.images[:, 1] == 0.0)
        assert np.all(d.ownership[:, 1] == -1)

    def test_value_range(self, rng):
        d = project_points(rng.uniform(0, 1, (50, 3)), rng.uniform(0, 1, (50, 3)), 16)
        obj = d.images[d.images != 0]
        assert obj.min() >= 100 and obj.max() <= 200

    def test_domain_error(self):
        with pytest.raises(ProjectionDomainError):
            project_points(_points([0.5, 0.5, 1.01]), _points([0.5, 0.5, 0.5]))

    def test_domain_tolerance(self):
        d = project_points(_points([1.0 + 5e-7, 0.5, 0.5]), _points([-5e-7, 0.5, 0.5]), 4)
        assert np.count_nonzero(d.images) == 6

    def test_bad_assignment(self):
        with pytest.raises(ContractError):
            project_points(_points([0.5, 0.5, 0.5]), _points([0.5, 0.5, 0.5]), 4, "XY")

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(100):
            na, nb = rng.integers(1, 26, size=2)
            a, b = _random_unit_points(rng, na), _random_unit_points(rng, nb)
            res = int(rng.integers(3, 12))
            d = project_points(a, b, res)
            np.testing.assert_array_equal(d.images, brute_force_render(a, b, res))

    def test_owner_reproduces_pixel(self, rng):
        a, b = rng.uniform(0, 1, (60, 3)), rng.uniform(0, 1, (40, 3))
        d = project_points(a, b, 12)
        depth_of = [lambda p: 1 - p[2], lambda p: p[1], lambda p: p[0]]
        for k in range(3):
            for ch, pts in enumerate((a, b)):
                rows, cols = np.nonzero(d.ownership[k, ch] >= 0)
                for r, c in zip(rows, cols):
                    p = pts[d.ownership[k, ch, r, c]]
                    assert d.images[k, ch, r, c] == 100.0 * depth_of[k](p) + 100.0

    def test_deterministic(self, rng):
        s = random_scene(rng)
        f = fit_unit_cube(*s.world_points())
        a, b = project(s, f), project(s, f)
        assert a.images.tobytes() == b.images.tobytes()

    def test_channel_swap_symmetry(self, rng):
        s = random_scene(rng)
        f = fit_unit_cube(*s.world_points())
        ab, ba = project(s, f, "AB", 20), project(s, f, "BA", 20)
        np.testing.assert_array_equal(ab.images, ba.images[:, ::-1])
        np.testing.assert_array_equal(ab.ownership, ba.ownership[:, ::-1])
        assert ba.channel_objects() == (1, 0)


class TestKernels:
    def test_size3_matches_displayed_kernels(self):
        k = make_grad_kernels(3)
        np.testing.assert_array_equal(k.s_y, [[1, 2, 1], [0, 0, 0], [-1, -2, -1]])
        np.testing.assert_array_equal(k.s_x, [[1, 0, -1], [2, 0, -2], [1, 0, -1]])

    @pytest.mark.parametrize("size", [3, 5, 7])
    def test_antisymmetric_zero_sum(self, size):
        k = make_grad_kernels(size)
        np.testing.assert_array_equal(k.s_y, -k.s_y[::-1])
        np.testing.assert_array_equal(k.s_x, -k.s_x[:, ::-1])
        assert k.s_x.sum(axis=1).tolist() == [0] * size
        assert k.s_y.sum() == 0

    def test_size5_binomial_construction(self):
        smooth = np.array([comb(4, i) for i in range(5)])
        # derivative: size-2 difference convolved with the size-3 binomial row
        deriv = np.convolve([1, -1], [comb(3, i) for i in range(4)])
        k = make_grad_kernels(5)
        np.testing.assert_array_equal(k.s_y, np.outer(deriv, smooth))
        assert k.smooth_sum == smooth.sum()

    @pytest.mark.parametrize("size", [1, 2, 4, 9])
    def test_unsupported(self, size):
        with pytest.raises(ConfigError):
            make_grad_kernels(size)


class TestBackwardProject:
    def _scene_depth(self, rng, res=16):
        a, b = rng.uniform(0.1, 0.9, (80, 3)), rng.uniform(0.1, 0.9, (60, 3))
        return a, b, project_points(a, b, res)

    def test_zero_gradients(self, rng):
        a, b, d = self._scene_depth(rng)
        ga, gb = backward_project(np.zeros_like(d.images), d, make_grad_kernels(3), (80, 60))
        assert not ga.any() and not gb.any()

    def test_shape_mismatch(self, rng):
        a, b, d = self._scene_depth(rng)
        with pytest.raises(ContractError):
            backward_project(np.zeros((3, 2, 4, 4)), d, make_grad_kernels(3), (80, 60))

    def test_single_top_pixel_hand_stencil(self):
        res = 8
        pts = _points([0.55, 0.55, 0.7], [0.1, 0.1, 0.1], [0.1, 0.1, 0.1], [0.1, 0.1, 0.1])
        d = project_points(pts, pts[1:], res)
        row, col = 3, 4
        assert d.ownership[0, 0, row, col] == 0
        g = np.zeros_like(d.images)
        g[0, 0, row, col] = 1.0
        k = make_grad_kernels(3)
        ga, _ = backward_project(g, d, k, (4, 3))
        # depth channel: top plane depth is 1 - z, slope -100
        assert ga[0, 2] == -100.0
        # correlating a unit impulse with a 3x3 kernel gives its centre entry (0) at the impulse
        assert ga[0, 0] == 0.0 and ga[0, 1] == 0.0

    def test_neighbor_pixel_stencil(self):
        """Owner of the pixel right of an impulse receives the S_x entry that reaches it."""
        res = 8
        pts = _points([0.55, 0.55, 0.7], [0.68, 0.55, 0.7], [0.1, 0.1, 0.1], [0.1, 0.1, 0.1])
        d = project_points(pts, pts[2:], res)
        assert d.ownership[0, 0, 3, 5] == 1
        g = np.zeros_like(d.images)
        g[0, 0, 3, 4] = 1.0
        k = make_grad_kernels(3)
        ga, _ = backward_project(g, d, k, (4, 2))
        # correlation at (3, 5) reads g at (3, 4) through kernel entry [1, 0] of S_x = 2
        scale = res / k.smooth_sum
        assert ga[1, 0] == pytest.approx(-scale * 2.0)
        assert ga[1, 1] == pytest.approx(scale * 0.0)

    def test_conservation(self, rng):
        a, b, d = self._scene_depth(rng, 20)
        g = rng.normal(size=d.images.shape)
        k = make_grad_kernels(5)
        ga, gb = backward_project(g, d, k, (80, 60))
        unit = 20 / k.smooth_sum
        axes = [(0, 1, 2, -1.0), (0, 2, 1, 1.0), (1, 2, 0, 1.0)]
        total = {(o, ax): 0.0 for o in (0, 1) for ax in range(3)}
        for plane, (ca, ra, da, sign) in enumerate(axes):
            for ch in (0, 1):
                mask = d.ownership[plane, ch] >= 0
                r_y, r_x = sobel_responses(g[plane, ch], k)
                total[ch, ca] += -unit * r_x[mask].sum()
                total[ch, ra] += unit * r_y[mask].sum()
                total[ch, da] += sign * 100.0 * g[plane, ch][mask].sum()
        for o, grad in enumerate((ga, gb)):
            for ax in range(3):
                assert grad[:, ax].sum() == pytest.approx(total[o, ax], rel=1e-12, abs=1e-9)

    def test_world_gradients_scale(self, rng):
        a, b, d = self._scene_depth(rng)
        g = rng.normal(size=d.images.shape)
        k = make_grad_kernels(3)
        frame = UnitCubeFrame(scale=4.0, offset=np.zeros(3))
        ua, ub = backward_project(g, d, k, (80, 60))
        wa, wb = scene_point_gradients(g, d, k, frame, (80, 60))
        np.testing.assert_allclose(wa, 4.0 * ua)
        np.testing.assert_allclose(wb, 4.0 * ub)


class TestDirectionalProperty:
    def test_planted_shift_descent_sign(self, small_dataset):
        from relmetric.training import augment
        scenes, _ = small_dataset
        rng = np.random.default_rng(0)
        hits = 0
        for i in range(60):
            s = augment(scenes[i % len(scenes)], rng)
            axis, k = i % 3, 1 + (i // 3) % 3
            g, loss, _, _ = planted_shift_gradient(s, axis, k)
            assert loss > 0
            hits += g[axis] < 0
        assert hits >= 54


class TestPgm:
    def test_mapping(self):
        img = np.array([[0.0, 100.0], [150.0, 200.0]])
        data = pgm_bytes(img)
        assert data.startswith(b"P5\n2 2\n255\n")
        assert list(data[-4:]) == [0, 55, 155, 255]

    def test_dump_names(self, tmp_path):
        p = _points([0.5, 0.5, 0.5])
        paths = write_pgm_dumps(tmp_path, "s1", project_points(p, p, 4))
        assert sorted(x.name for x in paths) == sorted(
            f"s1_{plane}_{ch}.pgm" for plane in PLANES for ch in (0, 1))
