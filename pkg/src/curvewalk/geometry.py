"""Coordinate-space utilities: normalisation, augmentation, sampling, neighbourhoods.

Distance ties are always broken towards the lower point index.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass
class PointCloud:
    coords: np.ndarray
    labels: int | np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or len(self.coords) < 1:
            raise ValueError(f"coords must be P x 3 with P >= 1, got {self.coords.shape}")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.coords.shape:
                raise ValueError("normals must match coords shape")

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class NeighborGraph:
    k: int
    indices: np.ndarray
    exclude_self: bool = True
    meta: dict = field(default_factory=dict)


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    centroid = cloud.coords.mean(axis=0)
    centered = cloud.coords - centroid
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    coords = centered / radius if radius > 0 else np.zeros_like(centered)
    return replace(cloud, coords=coords)


def augment(cloud: PointCloud, rng: np.random.Generator, scale_range=(0.66, 1.5),
            shift_range=(-0.2, 0.2), return_params: bool = False):
    """Per-axis random scaling followed by per-axis random translation.

    Normals, when present, follow the inverse-transpose of the scaling.
    """
    scale = rng.uniform(scale_range[0], scale_range[1], size=3)
    shift = rng.uniform(shift_range[0], shift_range[1], size=3)
    coords = cloud.coords * scale + shift
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals / scale
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    out = replace(cloud, coords=coords, normals=normals)
    return (out, scale, shift) if return_params else out


def _sq_dists(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    # per-axis accumulation, same summation order as a row-wise (dx^2 + dy^2) + dz^2
    out = None
    for axis in range(query.shape[-1]):
        diff = query[..., :, None, axis] - ref[..., None, :, axis]
        out = diff * diff if out is None else out + diff * diff
    return out


def farthest_point_sample(coords, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``m`` indices starting at ``seed_index``."""
    pts = coords.coords if isinstance(coords, PointCloud) else np.asarray(coords)
    p = len(pts)
    if not 1 <= m <= p:
        raise ValueError(f"cannot sample {m} of {p} points")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    best = np.full(p, np.inf)
    for i in range(1, m):
        d = pts - pts[chosen[i - 1]]
        best = np.minimum(best, (d * d).sum(axis=1))
        chosen[i] = int(np.argmax(best))
    return chosen


def farthest_point_sample_batch(coords: np.ndarray, m: int) -> np.ndarray:
    """FPS for ``[B, P, 3]`` coordinates, seed index 0 in every cloud."""
    b, p, _ = coords.shape
    if not 1 <= m <= p:
        raise ValueError(f"cannot sample {m} of {p} points")
    chosen = np.zeros((b, m), dtype=np.int64)
    best = np.full((b, p), np.inf)
    rows = np.arange(b)
    for i in range(1, m):
        d = coords - coords[rows, chosen[:, i - 1]][:, None, :]
        best = np.minimum(best, (d * d).sum(axis=-1))
        chosen[:, i] = np.argmax(best, axis=1)
    return chosen


def knn_indices(query: np.ndarray, ref: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
    """Exact k nearest rows of ``ref`` for each row of ``query``; batched on leading axes.

    ``exclude_self`` assumes ``query`` and ``ref`` are the same set and removes
    each point's own index.
    """
    n_ref = ref.shape[-2]
    limit = n_ref - 1 if exclude_self else n_ref
    if k > limit or k < 1:
        raise ValueError(f"k={k} invalid for {n_ref} reference points (exclude_self={exclude_self})")
    d = _sq_dists(query, ref)
    if exclude_self:
        diag = np.arange(query.shape[-2])
        d[..., diag, diag] = np.inf
    return _smallest_k(d, k)


def _smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries per row, ordered by (value, index)."""
    n = d.shape[-1]
    if k >= n:
        return np.argsort(d, axis=-1, kind="stable")
    part = np.argpartition(d, k - 1, axis=-1)[..., :k]
    vals = np.take_along_axis(d, part, axis=-1)
    kth = vals.max(axis=-1, keepdims=True)
    # a tie straddling the partition boundary may have kept a higher index
    ambiguous = (d <= kth).sum(axis=-1) > k
    order = np.lexsort((part, vals), axis=-1)
    out = np.take_along_axis(part, order, axis=-1)
    if ambiguous.any():
        out[ambiguous] = np.argsort(d[ambiguous], axis=-1, kind="stable")[..., :k]
    return out


def knn(cloud, k: int = 20, exclude_self: bool = True) -> NeighborGraph:
    pts = cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if k >= len(pts):
        raise ValueError(f"k={k} must be smaller than the number of points {len(pts)}")
    return NeighborGraph(k=k, indices=knn_indices(pts, pts, k, exclude_self), exclude_self=exclude_self)


def ball_query_knn(cloud, radius: float, k_max: int = 32, exclude_self: bool = False) -> NeighborGraph:
    """Neighbours within ``radius``, nearest first, capped at ``k_max``.

    Rows with fewer hits are padded by repeating their nearest neighbour; a row
    with no hit at all uses its nearest neighbour outside the radius.
    """
    pts = cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    p = len(pts)
    d = _sq_dists(pts, pts)
    if exclude_self:
        d[np.arange(p), np.arange(p)] = np.inf
    order = np.argsort(d, axis=1, kind="stable")
    out = np.empty((p, k_max), dtype=np.int64)
    r2 = radius * radius
    for i in range(p):
        row = order[i]
        hits = row[d[i, row] <= r2][:k_max]
        if len(hits) == 0:
            hits = row[:1]
        out[i, :len(hits)] = hits
        out[i, len(hits):] = hits[0]
    return NeighborGraph(k=k_max, indices=out, exclude_self=exclude_self, meta={"radius": radius})


def three_nn_weights(src_coords: np.ndarray, dst_coords: np.ndarray):
    """Indices and inverse-distance weights of the (up to) 3 nearest sources.

    A destination coinciding with a source copies that source exactly.
    Works on ``[P, 3]`` or batched ``[B, P, 3]`` inputs.
    """
    n_src = src_coords.shape[-2]
    kk = min(3, n_src)
    d2 = _sq_dists(dst_coords, src_coords)
    idx = np.argsort(d2, axis=-1, kind="stable")[..., :kk]
    dist = np.sqrt(np.take_along_axis(d2, idx, axis=-1))
    exact = dist[..., :1] == 0.0
    with np.errstate(divide="ignore"):
        inv = 1.0 / dist
    inv = np.where(exact, 0.0, inv)
    w = inv / np.where(exact, 1.0, inv.sum(axis=-1, keepdims=True))
    onehot = np.zeros_like(w)
    onehot[..., 0] = 1.0
    w = np.where(exact, onehot, w)
    return idx, w


def interpolate_3nn(src_coords: np.ndarray, src_feats: np.ndarray, dst_coords: np.ndarray) -> np.ndarray:
    idx, w = three_nn_weights(np.asarray(src_coords, float), np.asarray(dst_coords, float))
    src = np.asarray(src_feats)
    if src.ndim == 2:
        return (src[idx] * w[..., None]).sum(axis=-2)
    rows = np.arange(src.shape[0])[:, None, None]
    return (src[rows, idx] * w[..., None]).sum(axis=-2)
