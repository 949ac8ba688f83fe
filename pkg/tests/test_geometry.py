import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curvewalk.geometry import (PointCloud, augment, ball_query_knn, farthest_point_sample,
                                farthest_point_sample_batch, interpolate_3nn, knn, knn_indices,
                                normalize_unit_sphere, three_nn_weights)


def brute_knn(pts, k, exclude_self):
    """Plain-python reference: sort (distance, index) pairs per row."""
    out = []
    for i, p in enumerate(pts):
        cand = []
        for j, q in enumerate(pts):
            if exclude_self and i == j:
                continue
            d = sum((float(p[c]) - float(q[c])) ** 2 for c in range(3))
            cand.append((d, j))
        cand.sort()
        out.append([j for _, j in cand[:k]])
    return np.array(out)


def greedy_fps(pts, m, seed=0):
    chosen = [seed]
    while len(chosen) < m:
        best_j, best_d = None, -1.0
        for j in range(len(pts)):
            d = min(sum((pts[j][c] - pts[i][c]) ** 2 for c in range(3)) for i in chosen)
            if d > best_d:
                best_j, best_d = j, d
        chosen.append(best_j)
    return chosen


def test_fps_colinear_example():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [10.0, 0, 0]])
    assert farthest_point_sample(pts, 3).tolist() == [0, 3, 2]


@pytest.mark.parametrize("p", range(2, 11))
def test_fps_matches_greedy_oracle_small(p):
    rng = np.random.default_rng(p)
    for _ in range(5):
        pts = rng.normal(size=(p, 3))
        for m in range(1, p + 1):
            assert farthest_point_sample(pts, m).tolist() == greedy_fps(pts.tolist(), m)


def test_fps_batch_equals_per_cloud(rng):
    pts = rng.normal(size=(3, 64, 3))
    batch = farthest_point_sample_batch(pts, 16)
    for b in range(3):
        np.testing.assert_array_equal(batch[b], farthest_point_sample(pts[b], 16))


def test_fps_rejects_bad_m(rng):
    with pytest.raises(ValueError):
        farthest_point_sample(rng.normal(size=(4, 3)), 5)


@pytest.mark.parametrize("exclude_self", [True, False])
def test_knn_matches_brute_force(rng, exclude_self):
    pts = rng.normal(size=(60, 3))
    np.testing.assert_array_equal(knn_indices(pts, pts, 7, exclude_self), brute_knn(pts, 7, exclude_self))


def test_knn_ties_prefer_lower_index():
    # integer grid: many equal distances
    g = np.stack(np.meshgrid(range(4), range(4), range(2), indexing="ij"), -1).reshape(-1, 3).astype(float)
    np.testing.assert_array_equal(knn(g, k=6).indices, brute_knn(g, 6, True))


@given(st.integers(2, 40), st.integers(0, 2 ** 31 - 1))
def test_knn_never_returns_self(p, seed):
    pts = np.random.default_rng(seed).integers(0, 3, size=(p, 3)).astype(float)
    k = min(p - 1, 5)
    idx = knn_indices(pts, pts, k, exclude_self=True)
    assert not (idx == np.arange(p)[:, None]).any()
    np.testing.assert_array_equal(idx, brute_knn(pts, k, True))


def test_knn_batched_equals_per_cloud(rng):
    pts = rng.normal(size=(2, 30, 3))
    batch = knn_indices(pts, pts, 5, True)
    for b in range(2):
        np.testing.assert_array_equal(batch[b], knn_indices(pts[b], pts[b], 5, True))


def test_knn_rejects_k_too_large(rng):
    with pytest.raises(ValueError):
        knn(rng.normal(size=(5, 3)), k=5)


def test_ball_query_within_radius_and_padded():
    pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [5.0, 0, 0]])
    g = ball_query_knn(pts, radius=0.15, k_max=3)
    assert g.indices[0].tolist() == [0, 1, 0]           # self, neighbour, pad with nearest
    assert g.indices[3].tolist() == [3, 3, 3]
    g = ball_query_knn(pts, radius=0.15, k_max=3, exclude_self=True)
    assert g.indices[3].tolist() == [2, 2, 2]           # nothing inside: nearest outside


def test_normalize_unit_sphere(rng):
    c = normalize_unit_sphere(PointCloud(rng.normal(5.0, 3.0, size=(100, 3))))
    np.testing.assert_allclose(c.coords.mean(0), 0.0, atol=1e-12)
    assert np.linalg.norm(c.coords, axis=1).max() == pytest.approx(1.0)


def test_augment_keeps_normals_perpendicular_to_surface(rng):
    # plane x + y + z = 0 with its normal; tangent directions must stay orthogonal
    n = np.tile(np.array([1.0, 1.0, 1.0]) / np.sqrt(3), (3, 1))
    t = np.array([[1.0, -1.0, 0.0], [0.0, 1.0, -1.0], [1.0, 0.0, -1.0]])
    cloud, scale, shift = augment(PointCloud(t, normals=n), rng, return_params=True)
    assert ((0.66 <= scale) & (scale <= 1.5)).all() and ((-0.2 <= shift) & (shift <= 0.2)).all()
    moved_t = t * scale
    np.testing.assert_allclose((moved_t * cloud.normals).sum(1), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0)


def test_interpolate_3nn_weights(rng):
    src = rng.normal(size=(10, 3))
    dst = rng.normal(size=(4, 3))
    feats = rng.normal(size=(10, 2))
    idx, w = three_nn_weights(src, dst)
    np.testing.assert_allclose(w.sum(-1), 1.0)
    out = interpolate_3nn(src, feats, dst)
    for i in range(4):
        d = np.linalg.norm(src - dst[i], axis=1)
        near = np.argsort(d, kind="stable")[:3]
        inv = 1.0 / d[near]
        np.testing.assert_allclose(out[i], (feats[near] * inv[:, None]).sum(0) / inv.sum(), rtol=1e-12)


def test_interpolate_3nn_copies_coincident_source(rng):
    src = rng.normal(size=(6, 3))
    feats = rng.normal(size=(6, 4))
    np.testing.assert_array_equal(interpolate_3nn(src, feats, src[[2, 5]]), feats[[2, 5]])
