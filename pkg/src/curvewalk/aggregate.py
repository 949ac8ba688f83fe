"""Feature aggregation: local (edge-difference) aggregation, LPFA, attentive
pooling, curve aggregation and the CIC block that composes them."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .geometry import farthest_point_sample_batch, knn_indices
from .nn import Layer, Mlp, Module, uniform_init
from .walk import CurveSet, WalkPolicy, group_curves


def _check_graph(feats: Tensor, graph_idx: np.ndarray, n_ref: int) -> None:
    if graph_idx.shape[0] != feats.shape[0] or graph_idx.max(initial=-1) >= n_ref:
        raise DimensionError(f"graph {graph_idx.shape} does not fit features {feats.shape}")


def local_aggregate(feats: Tensor, graph_idx: np.ndarray, mlp: Mlp, pooling: str = "max") -> Tensor:
    """``pool_k MLP(f_i - f_j)`` over each point's neighbours ``graph_idx [B, P, k]``."""
    _check_graph(feats, graph_idx, feats.shape[-2])
    nbrs = ad.gather(feats, graph_idx)                                   # [B, P, k, C]
    diff = ad.sub(ad.expand_dims(feats, -2), nbrs)
    return ad.pool(mlp(diff), axis=-2, kind=pooling)


def lpfa(feats: Tensor, graph_idx: np.ndarray, mlp: Mlp, centers: Tensor | None = None) -> Tensor:
    """Local point-feature aggregation: mean over neighbours of ``MLP([f_j - f_i, f_i])``.

    ``graph_idx [B, M, k]`` indexes rows of ``feats``; ``centers [B, M, C]``
    defaults to ``feats`` itself. The first linear layer is split into its
    neighbour and centre halves so that it runs per point instead of per edge.
    """
    centers = feats if centers is None else centers
    c = feats.shape[-1]
    if mlp.in_dim != 2 * c:
        raise DimensionError(f"LPFA MLP expects {2 * c} inputs, got {mlp.in_dim}")
    _check_graph(feats, graph_idx, feats.shape[-2])
    first = mlp.layers[0]
    w_nbr = ad.getitem(first.weight, (slice(None), slice(0, c)))
    w_ctr = ad.sub(ad.getitem(first.weight, (slice(None), slice(c, 2 * c))), w_nbr)
    per_nbr = ad.gather(ad.linear(feats, w_nbr), graph_idx)             # [B, M, k, out]
    per_ctr = ad.linear(centers, w_ctr, first.bias)                     # [B, M, out]
    x = ad.add(per_nbr, ad.expand_dims(per_ctr, -2))
    if first.norm is not None:
        x = first.norm(x)
    x = ad.activation(x, first.activation)
    for layer in mlp.layers[1:]:
        x = layer(x)
    return ad.mean(x, axis=-2)


def attentive_pool(x: Tensor, score_mlp: Mlp, axis: int) -> Tensor:
    """Per-channel softmax over ``axis`` of ``score_mlp(x)``, then weighted sum."""
    if x.shape[axis] == 0:
        raise DimensionError("attentive pooling over an empty axis")
    scores = ad.softmax(score_mlp(x), axis=axis)
    return ad.sum_(ad.mul(x, scores), axis=axis)


class CurveAggregation(Module):
    """Fuses intra-curve and inter-curve features into every point, residually."""

    def __init__(self, channels: int, rng: np.random.Generator, rho: int = 4, dtype=np.float32):
        red = max(channels // rho, 1)
        lin = dict(rng=rng, last_activation="none", dtype=dtype)
        self.score_inter = Mlp.build([channels, channels], **lin)
        self.score_intra = Mlp.build([channels, channels], **lin)
        self.reduce_point = Mlp.build([channels, red], rng, dtype=dtype)
        self.reduce_intra = Mlp.build([channels, red], rng, dtype=dtype)
        self.reduce_inter = Mlp.build([channels, red], rng, dtype=dtype)
        self.value_intra = Mlp.build([red, channels], **lin)
        self.value_inter = Mlp.build([red, channels], **lin)
        self.fuse = Mlp.build([2 * channels, channels], **lin)

    def __call__(self, feats: Tensor, curves: Tensor) -> Tensor:
        return curve_aggregate(feats, curves, self)


def curve_aggregate(feats: Tensor, curves: Tensor, params: CurveAggregation, return_parts=False):
    """``feats [B, P, C]`` + ``curves [B, n, l, C]`` -> ``[B, P, C]``."""
    if curves.ndim != 4 or curves.shape[-1] != feats.shape[-1] or curves.shape[0] != feats.shape[0]:
        raise DimensionError(f"curves {curves.shape} incompatible with features {feats.shape}")
    f_inter = attentive_pool(curves, params.score_inter, axis=1)        # [B, l, C]
    f_intra = attentive_pool(curves, params.score_intra, axis=2)        # [B, n, C]
    point_red = params.reduce_point(feats)                              # [B, P, C/rho]
    intra_red = params.reduce_intra(f_intra)
    inter_red = params.reduce_inter(f_inter)
    score_intra = ad.softmax(ad.matmul(point_red, ad.swap_last(intra_red)), axis=-1)   # [B, P, n]
    score_inter = ad.softmax(ad.matmul(point_red, ad.swap_last(inter_red)), axis=-1)   # [B, P, l]
    intra = ad.matmul(score_intra, params.value_intra(intra_red))       # [B, P, C]
    inter = ad.matmul(score_inter, params.value_inter(inter_red))
    out = ad.add(feats, params.fuse(ad.concat([intra, inter], axis=-1)))
    if return_parts:
        return out, {"f_intra": f_intra, "f_inter": f_inter,
                     "score_intra": score_intra, "score_inter": score_inter}
    return out


@dataclass
class CicConfig:
    in_channels: int
    out_channels: int
    npoint: int | None = None          # FPS target; None keeps the resolution
    k: int = 20
    curves: tuple[int, int] | None = None   # (n, l)
    rho: int = 4
    residual: bool = True
    norm: str = "batch"
    theta_bar: float = np.pi / 2
    momentum: bool = True
    suppression: bool = True

    def __post_init__(self):
        if self.out_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.curves is not None:
            n, l = self.curves
            if n < 1 or l < 1:
                raise ValueError("curve quantity and length must be >= 1")


class CicBlock(Module):
    """Downsample (optional) -> LPFA -> curve grouping + aggregation -> residual."""

    def __init__(self, config: CicConfig, rng: np.random.Generator, dtype=np.float32):
        cfg = self.config = config
        self.encode = Mlp.build([2 * cfg.in_channels, cfg.out_channels], rng, norm=cfg.norm, dtype=dtype)
        self.policy = None
        self.aggregate = None
        if cfg.curves is not None:
            self.policy = WalkPolicy.build(cfg.out_channels, rng, theta_bar=cfg.theta_bar,
                                           momentum=cfg.momentum, suppression=cfg.suppression, dtype=dtype)
            self.aggregate = CurveAggregation(cfg.out_channels, rng, cfg.rho, dtype)
        w, b = uniform_init(rng, cfg.out_channels, cfg.out_channels, dtype)
        self.conv = Layer(w, b, activation="none", norm=cfg.norm, dtype=dtype)
        self.shortcut = None
        if cfg.residual and cfg.in_channels != cfg.out_channels:
            w, _ = uniform_init(rng, cfg.out_channels, cfg.in_channels, dtype)
            self.shortcut = Layer(w, None, activation="none", norm=cfg.norm, dtype=dtype)

    def __call__(self, coords: np.ndarray, feats: Tensor, graph_idx: np.ndarray | None = None,
                 trace: dict | None = None):
        return cic_block(coords, feats, self, graph_idx, trace)


def cic_block(coords: np.ndarray, feats: Tensor, block: CicBlock, graph_idx: np.ndarray | None = None,
              trace: dict | None = None):
    """Returns ``(coords', feats', curves)``.

    ``graph_idx`` may pass a precomputed self-excluding KNN graph at the
    current resolution (only used when the block does not downsample).
    ``trace``, if given, receives the intermediate ``coords``, ``encoded``
    (curve-aggregation input) and ``aggregated`` features.
    """
    cfg = block.config
    if feats.shape[-1] != cfg.in_channels:
        raise DimensionError(f"CIC expects {cfg.in_channels} channels, got {feats.shape[-1]}")
    if cfg.npoint is not None and cfg.npoint < coords.shape[1]:
        sel = farthest_point_sample_batch(coords, cfg.npoint)
        rows = np.arange(coords.shape[0])[:, None]
        new_coords = coords[rows, sel]
        centers = ad.gather(feats, sel)
        enc_idx = knn_indices(new_coords, coords, cfg.k)
        walk_idx = None
    else:
        new_coords, centers = coords, feats
        walk_idx = graph_idx if graph_idx is not None else knn_indices(coords, coords, cfg.k, True)
        enc_idx = walk_idx
    h = lpfa(feats, enc_idx, block.encode, centers)
    curves = None
    if block.policy is not None:
        if walk_idx is None:
            walk_idx = knn_indices(new_coords, new_coords, cfg.k, True)
        n, l = cfg.curves
        curves = group_curves(h, walk_idx, min(n, h.shape[1]), l, block.policy)
        aggregated = curve_aggregate(h, curves.features, block.aggregate)
        if trace is not None:
            trace.update(coords=new_coords, encoded=h, aggregated=aggregated, walk_idx=walk_idx)
        h = aggregated
    elif trace is not None:
        trace.update(coords=new_coords, encoded=h)
    out = block.conv(h)
    if cfg.residual:
        out = ad.add(out, block.shortcut(centers) if block.shortcut is not None else centers)
    return new_coords, ad.leaky_relu(out, 0.2), curves


def channel_variance_map(feats: np.ndarray) -> dict:
    """Per-channel variance across points and per-point channel mean of ``[P, C]``."""
    f = np.asarray(feats, dtype=np.float64)
    return {"channel_variance": f.var(axis=0), "point_channel_mean": f.mean(axis=1)}


def write_channel_variance_csv(path, coords: np.ndarray, feats: np.ndarray, per_channel: bool = False) -> None:
    stats = channel_variance_map(feats)
    f = np.asarray(feats, dtype=np.float64)
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["point_id", "x", "y", "z", "channel_mean"]
        if per_channel:
            header += [f"c{j}" for j in range(f.shape[1])]
        writer.writerow(header)
        for i, (p, m) in enumerate(zip(coords, stats["point_channel_mean"])):
            row = [i, f"{p[0]:.9g}", f"{p[1]:.9g}", f"{p[2]:.9g}", f"{m:.9g}"]
            if per_channel:
                row += [f"{v:.9g}" for v in f[i]]
            writer.writerow(row)
