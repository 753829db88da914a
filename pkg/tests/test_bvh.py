import numpy as np
import pytest

from utrice.bvh import Bvh
from utrice.errors import EmptyScene
from utrice.frames import SceneFrames
from utrice.geometry import TriangleSoup

from conftest import random_soup


def _soup_from_vertices(verts):
    n = verts.shape[0]
    return TriangleSoup(verts, np.zeros((n, 3, 16)), np.zeros(n), np.ones(n))


def test_single_triangle_leaf_aabb():
    v = np.array([[[0.0, 0, 0], [2.0, 0, 0], [0.0, 3, 1]]])
    frames = SceneFrames(_soup_from_vertices(v))
    bvh = Bvh(frames)
    assert bvh.n_nodes == 1
    assert np.allclose(bvh.node_min[0], v[0].min(axis=0))
    assert np.allclose(bvh.node_max[0], v[0].max(axis=0))
    bvh.validate(frames)


def test_disjoint_clusters_split_at_root():
    rng = np.random.default_rng(0)
    a = rng.normal(scale=0.3, size=(40, 3, 3))
    b = rng.normal(scale=0.3, size=(40, 3, 3)) + np.array([50.0, 0, 0])
    frames = SceneFrames(_soup_from_vertices(np.concatenate([a, b])))
    bvh = Bvh(frames)
    left, right = bvh.node_left[0], bvh.node_right[0]
    lo1, hi1 = bvh.node_min[left], bvh.node_max[left]
    lo2, hi2 = bvh.node_min[right], bvh.node_max[right]
    overlap = np.all(np.maximum(lo1, lo2) <= np.minimum(hi1, hi2))
    assert not overlap


def test_partition_covers_every_triangle_once():
    rng = np.random.default_rng(1)
    for n in (1, 2, 5, 33, 257):
        soup = random_soup(n, rng)
        frames = SceneFrames(soup)
        bvh = Bvh(frames)
        bvh.validate(frames)
        total = sum(c for _, c in bvh.leaf_ranges())
        assert total == len(frames)


def test_deterministic_build():
    rng = np.random.default_rng(2)
    soup = random_soup(120, rng)
    frames = SceneFrames(soup)
    b1, b2 = Bvh(frames), Bvh(frames)
    assert np.array_equal(b1.prim_order, b2.prim_order)
    assert np.array_equal(b1.node_min, b2.node_min)
    assert np.array_equal(b1.node_left, b2.node_left)


def test_empty_scene_raises():
    soup = TriangleSoup(np.zeros((0, 3, 3)), np.zeros((0, 3, 16)),
                        np.zeros(0), np.zeros(0))
    with pytest.raises(EmptyScene):
        Bvh(SceneFrames(soup))


def test_degenerate_triangles_excluded():
    rng = np.random.default_rng(3)
    soup = random_soup(10, rng)
    soup.vertices[3, 1] = soup.vertices[3, 0]  # zero area
    soup.vertices[7] = np.nan
    frames = SceneFrames(soup)
    assert len(frames) == 8
    assert 3 not in frames.tri_index and 7 not in frames.tri_index
    Bvh(frames).validate(frames)
