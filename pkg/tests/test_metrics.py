import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqfit.errors import InvalidInputError, MetricUnavailable
from seqfit.metrics import (
    TriMesh, build_aabb_tree, closest_point, closest_point_brute_force, icosphere, icp_align, is_watertight,
    jitter_statistic, kabsch, mean_joint_error, mean_volume_error, mesh_volume, unit_cube, vertex_to_surface_error,
)
from seqfit.rotation import rodrigues


def _box(scale=1.0):
    m = unit_cube()
    return TriMesh(m.vertices * scale, m.faces)


def _random_rotation(rng, angle=None):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rodrigues(axis * (rng.uniform(0, np.pi) if angle is None else angle))


class TestVolume:
    def test_unit_cube_exact(self):
        assert mesh_volume(unit_cube()) == 1.0

    def test_icosphere(self):
        assert mesh_volume(icosphere(3)) == pytest.approx(4 / 3 * math.pi, rel=0.02)

    def test_translation_invariance(self, rng):
        for mesh in (unit_cube(), icosphere(2, 0.4)):
            shift = rng.normal(scale=5, size=3)
            assert abs(mesh_volume(mesh.transformed(np.eye(3), shift)) - mesh_volume(mesh)) < 1e-12

    def test_rotation_invariance(self, rng):
        m = icosphere(2)
        assert mesh_volume(m.transformed(_random_rotation(rng), [1, 2, 3])) == pytest.approx(mesh_volume(m), rel=1e-12)

    def test_open_mesh_unavailable(self):
        m = unit_cube()
        opened = TriMesh(m.vertices, m.faces[:-1])
        assert not opened.watertight
        with pytest.raises(MetricUnavailable):
            mesh_volume(opened)

    def test_body_mesh(self, body):
        m = TriMesh(body.template_vertices, body.faces)
        assert is_watertight(body.faces) and mesh_volume(m) > 0


class TestVolumeError:
    def test_identical(self):
        seq = [unit_cube(), _box(1.1)]
        assert mean_volume_error(seq, seq) == 0.0

    def test_constant_offset(self):
        # 2 dm^3 = 0.002 m^3; a cube of side s has volume s^3
        base = [_box(0.2), _box(0.3)]
        bigger = [_box((0.2**3 + 0.002) ** (1 / 3)), _box((0.3**3 + 0.002) ** (1 / 3))]
        assert mean_volume_error(bigger, base) == pytest.approx(2.0, abs=1e-9)

    def test_mixed_offsets(self):
        side = lambda v: v ** (1 / 3)
        base = [_box(0.25)] * 3
        est = [_box(side(0.25**3 + d / 1000.0)) for d in (1.0, 3.0, 5.0)]
        assert mean_volume_error(est, base) == pytest.approx(3.0, abs=1e-9)

    def test_missing_truth_skipped(self):
        assert mean_volume_error([_box(0.2), unit_cube()], [None, unit_cube()]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            mean_volume_error([unit_cube()], [])


class TestClosestPoint:
    def test_point_on_face(self):
        tree = build_aabb_tree(unit_cube())
        _, d = closest_point(tree, [0.3, 0.6, 1.0])
        assert d < 1e-12

    def test_height_above_face(self):
        square = TriMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
        tree = build_aabb_tree(square)
        for h in (0.01, 0.5, 3.0):
            p, d = closest_point(tree, [0.4, 0.7, h])
            assert d == pytest.approx(h, abs=1e-15)
            assert np.allclose(p, [0.4, 0.7, 0.0])

    def test_matches_brute_force(self, rng, body):
        mesh = TriMesh(body.template_vertices, body.faces)
        tree = build_aabb_tree(mesh)
        q = rng.uniform(mesh.vertices.min(0) - 0.2, mesh.vertices.max(0) + 0.2, (1000, 3))
        _, d_tree = closest_point(tree, q)
        _, d_brute = closest_point_brute_force(mesh, q)
        assert np.abs(d_tree - d_brute).max() <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
    def test_vertex_regions(self, q):
        tri = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        _, d = closest_point(build_aabb_tree(tri), q)
        # dense sampling of the triangle gives an upper bound close to the exact distance
        u = np.linspace(0, 1, 61)
        uu, vv = np.meshgrid(u, u)
        keep = uu + vv <= 1
        pts = np.stack([uu[keep], vv[keep], np.zeros(keep.sum())], axis=1)
        approx = np.linalg.norm(pts - np.asarray(q), axis=1).min()
        assert d <= approx + 1e-12
        assert approx - d < 0.02


class TestIcp:
    def test_known_transform(self):
        target = icosphere(2, 0.5)
        stretch = np.diag([1.0, 0.7, 1.3])  # remove symmetry so the optimum is unique
        target = TriMesh(target.vertices @ stretch, target.faces)
        rot = rodrigues(np.array([0.0, 0.0, 1.0]) * math.radians(20.0))
        source = target.transformed(rot, [0.3, 0.0, 0.0])
        res = icp_align(source, target)
        assert res.rms < 1e-6
        assert np.allclose(res.apply(source.vertices), target.vertices, atol=1e-5)

    def test_identity(self):
        m = icosphere(2)
        res = icp_align(m, m)
        assert np.allclose(res.rotation, np.eye(3)) and np.allclose(res.translation, 0)
        assert res.rms == 0.0

    def test_scaled_source_has_residual(self):
        m = icosphere(2)
        res = icp_align(TriMesh(m.vertices * 1.1, m.faces), m)
        assert res.rms > 0

    def test_kabsch(self, rng):
        src = rng.normal(size=(20, 3))
        rot = _random_rotation(rng)
        t = rng.normal(size=3)
        r, tt = kabsch(src, src @ rot.T + t)
        assert np.allclose(r, rot, atol=1e-12) and np.allclose(tt, t, atol=1e-12)


class TestVertexToSurface:
    def test_identical(self, body):
        m = TriMesh(body.template_vertices, body.faces)
        assert vertex_to_surface_error(m, m) < 1e-9

    def test_offset_sphere(self):
        # a fine tessellation keeps the facet sag of the outer sphere far below 1 cm
        inner = icosphere(5, 0.5)
        outer = icosphere(5, 0.51)
        assert vertex_to_surface_error(inner, outer) == pytest.approx(1.0, rel=0.05)

    def test_rigid_invariance(self):
        truth = icosphere(2, 0.5)
        truth = TriMesh(truth.vertices @ np.diag([1.0, 0.8, 1.2]), truth.faces)
        est = TriMesh(truth.vertices * 1.0, truth.faces)
        moved = est.transformed(rodrigues(np.array([0.1, 0.2, -0.1])), [0.05, 0.0, -0.02])
        assert abs(vertex_to_surface_error(moved, truth) - vertex_to_surface_error(est, truth)) < 1e-9


class TestMotionMetrics:
    def test_constant_and_linear(self):
        assert jitter_statistic(np.zeros((5, 3))) == 0.0
        lin = np.outer(np.arange(6), [0.1, -0.2, 0.3])
        assert jitter_statistic(lin) < 1e-15

    def test_hand_case(self):
        assert jitter_statistic([[0, 0, 0], [1, 0, 0], [0, 0, 0]]) == 2.0

    def test_multi_joint(self, rng):
        x = rng.normal(size=(7, 4, 3))
        ref = np.mean([np.linalg.norm(x[i + 1, j] - 2 * x[i, j] + x[i - 1, j])
                       for i in range(1, 6) for j in range(4)])
        assert jitter_statistic(x) == pytest.approx(ref, rel=1e-12)

    def test_too_short(self):
        with pytest.raises(InvalidInputError):
            jitter_statistic(np.zeros((2, 3)))

    def test_joint_error_root_aligned(self, rng):
        gt = rng.normal(size=(3, 5, 3))
        assert mean_joint_error(gt + [1.0, 2.0, 3.0], gt) < 1e-12
        shifted = gt.copy()
        shifted[:, 1:] += [0.0, 0.03, 0.04]
        assert mean_joint_error(shifted, gt) == pytest.approx(0.05 * 4 / 5, rel=1e-12)
