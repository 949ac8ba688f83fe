"""Curve grouping: learnable guided walks on a KNN graph.

Curves start at the top-scoring points of a sigmoid-gated selector and take
``l - 1`` transitions. Each transition scores the head's neighbours from
``[neighbour, curve descriptor]`` and picks one with a straight-through hard
softmax, so the forward value is exactly the chosen neighbour's feature while
gradients reach the policy MLP. The curve descriptor is updated with a learned
(dynamic) momentum, and candidate steps that turn back against the curve's
direction have their logits scaled down.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .nn import Mlp, Module

SUPPRESSION_EPS = 1e-8


class WalkPolicy(Module):
    """Walk policy parameters: logit, momentum and start-selector MLPs."""

    def __init__(self, logit_mlp: Mlp, momentum_mlp: Mlp, selector: Mlp,
                 theta_bar: float = np.pi / 2, momentum: bool = True, suppression: bool = True):
        if not 0.0 < theta_bar <= np.pi:
            raise ValueError(f"theta_bar must lie in (0, pi], got {theta_bar}")
        if logit_mlp.out_dim != 1 or momentum_mlp.out_dim != 2 or selector.out_dim != 1:
            raise DimensionError("walk MLPs must end in 1 (logit), 2 (momentum) and 1 (selector) outputs")
        self.logit_mlp = logit_mlp
        self.momentum_mlp = momentum_mlp
        self.selector = selector
        self.theta_bar = float(theta_bar)
        self.momentum = momentum
        self.suppression = suppression

    @classmethod
    def build(cls, channels: int, rng: np.random.Generator, hidden: int | None = None,
              theta_bar: float = np.pi / 2, momentum: bool = True, suppression: bool = True,
              dtype=np.float32) -> "WalkPolicy":
        hidden = hidden or max(channels, 16)
        return cls(
            Mlp.build([2 * channels, hidden, 1], rng, last_activation="none", dtype=dtype),
            Mlp.build([2 * channels, 2], rng, last_activation="none", dtype=dtype),
            Mlp.build([channels, 1], rng, last_activation="none", dtype=dtype),
            theta_bar, momentum, suppression,
        )

    @property
    def channels(self) -> int:
        return self.selector.in_dim

    @property
    def variant(self) -> str:
        if not self.momentum:
            return "naive+cs" if self.suppression else "naive"
        return "momentum+cs" if self.suppression else "momentum"


def policy_for_variant(policy: WalkPolicy, variant: str) -> WalkPolicy:
    """Same parameters, descriptor/suppression switched to ``variant``."""
    flags = {
        "naive": (False, False),
        "momentum": (True, False),
        "momentum+cs": (True, True),
        "naive+cs": (False, True),
    }
    if variant not in flags:
        raise ValueError(f"unknown walk policy {variant!r}")
    mom, cs = flags[variant]
    return WalkPolicy(policy.logit_mlp, policy.momentum_mlp, policy.selector, policy.theta_bar, mom, cs)


@dataclass
class CurveSet:
    indices: np.ndarray        # [B, n, l]
    features: Tensor           # [B, n, l, C]
    start_scores: Tensor       # [B, P]
    betas: list = field(default_factory=list)


def select_starts(feats: Tensor, n: int, selector: Mlp):
    """Gate ``feats [B, P, C]`` by sigmoid scores and pick the top-``n`` points.

    Returns ``(gated, starts [B, n], scores [B, P])``; equal scores prefer the
    lower index.
    """
    p = feats.shape[-2]
    if n > p:
        raise ValueError(f"cannot start {n} curves on {p} points")
    scores = ad.sigmoid(selector(feats))                       # [B, P, 1]
    gated = ad.mul(feats, scores)
    starts = ad.frozen(lambda: np.argsort(-scores.data[..., 0], axis=-1, kind="stable")[..., :n])
    return gated, starts, ad.reshape(scores, scores.shape[:-1])


def state_descriptor(neighbors: Tensor, descriptor: Tensor) -> Tensor:
    """``[neighbour, r]`` for every neighbour; ``r`` is broadcast over the k axis."""
    if neighbors.shape[-1] != descriptor.shape[-1]:
        raise DimensionError("neighbour and descriptor widths differ")
    if neighbors.ndim == descriptor.ndim + 1:
        descriptor = ad.broadcast_to(ad.expand_dims(descriptor, -2), neighbors.shape)
    return ad.concat([neighbors, descriptor], axis=-1)


def policy_logits(neighbors: Tensor, descriptor: Tensor, logit_mlp: Mlp) -> Tensor:
    """One selection logit per neighbour: ``neighbors [..., k, C]`` -> ``[..., k]``."""
    if neighbors.shape[-2] == 0:
        raise DimensionError("empty neighbourhood")
    h = state_descriptor(neighbors, descriptor)
    out = logit_mlp(h)
    return ad.reshape(out, out.shape[:-1])


def suppression_multiplier(support: Tensor, candidates: Tensor, theta_bar: float) -> Tensor:
    """Crossover suppression factor in [0, 1] per candidate.

    1 when the included angle is within ``theta_bar``; otherwise the cosine
    shifted by +1 and clipped to [0, 1]. A zero support vector disables
    suppression for that curve.
    """
    support_k = ad.expand_dims(support, -2)
    dot = ad.sum_(ad.mul(candidates, support_k), axis=-1)
    denom = ad.add(ad.mul(ad.norm(support_k, -1), ad.norm(candidates, -1)), SUPPRESSION_EPS)
    cos = ad.div(dot, denom)

    def decide():
        keep = cos.data >= np.cos(theta_bar)
        keep |= (np.linalg.norm(support.data, axis=-1) == 0)[..., None]
        return keep.astype(cos.dtype)

    keep = ad.frozen(decide)
    shifted = ad.clip(ad.add(cos, 1.0), 0.0, 1.0)
    return ad.add(ad.mul(shifted, 1.0 - keep), keep)


def momentum_update(r_prev: Tensor, head: Tensor, momentum_mlp: Mlp):
    """``beta = softmax(MLP([r_prev, head]))[0]``; ``r = beta r_prev + (1 - beta) head``."""
    logits = momentum_mlp(ad.concat([r_prev, head], axis=-1))
    weights = ad.softmax(logits, axis=-1)
    beta = ad.getitem(weights, (Ellipsis, slice(0, 1)))
    r = ad.add(ad.mul(beta, r_prev), ad.mul(ad.sub(1.0, beta), head))
    return beta, r


def neighbor_rows(graph_idx: np.ndarray, head_idx: np.ndarray) -> np.ndarray:
    """Neighbour indices of each head: ``[B, P, k]`` x ``[B, n]`` -> ``[B, n, k]``."""
    rows = np.arange(graph_idx.shape[0])[:, None]
    return graph_idx[rows, head_idx]


def walk_step(feats: Tensor, graph_idx: np.ndarray, head_idx: np.ndarray, head: Tensor,
              descriptor: Tensor, support: Tensor | None, policy: WalkPolicy):
    """Advance every curve by one transition.

    Returns ``(next_feature [B, n, C], next_idx [B, n], effective_logits)``.
    """
    nbr_idx = neighbor_rows(graph_idx, head_idx)
    nbrs = ad.gather(feats, nbr_idx)                           # [B, n, k, C]
    alpha = policy_logits(nbrs, descriptor, policy.logit_mlp)
    if not np.all(np.isfinite(alpha.data)):
        raise ad.NonFiniteError("walk logits contain NaN/inf")
    if support is not None:
        cand = ad.sub(nbrs, ad.expand_dims(head, -2))
        alpha = ad.mul(alpha, suppression_multiplier(support, cand, policy.theta_bar))
    sel = ad.hard_softmax_st(alpha, axis=-1)
    nxt = ad.sum_(ad.mul(nbrs, ad.expand_dims(sel, -1)), axis=-2)
    choice = np.argmax(sel.data, axis=-1)
    next_idx = np.take_along_axis(nbr_idx, choice[..., None], axis=-1)[..., 0]
    return nxt, next_idx, alpha


def argmax_gather_step(feats: np.ndarray, graph_idx: np.ndarray, head_idx: np.ndarray,
                       alpha: np.ndarray) -> np.ndarray:
    """Reference transition ``F[argmax(softmax(alpha))]`` with plain indexing."""
    nbr_idx = neighbor_rows(graph_idx, head_idx)
    probs = np.exp(alpha - alpha.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    choice = np.argmax(probs, axis=-1)
    picked = np.take_along_axis(nbr_idx, choice[..., None], axis=-1)[..., 0]
    rows = np.arange(feats.shape[0])[:, None]
    return feats[rows, picked]


def group_curves(feats: Tensor, graph_idx: np.ndarray, n: int, length: int,
                 policy: WalkPolicy) -> CurveSet:
    """Group ``n`` curves of ``length`` states (start included) from ``feats [B, P, C]``."""
    if length < 1:
        raise ValueError("curve length must be >= 1")
    if feats.ndim != 3:
        raise DimensionError("group_curves expects batched features [B, P, C]")
    gated, starts, scores = select_starts(feats, n, policy.selector)
    head_idx = starts
    head = ad.gather(gated, starts)
    states, indices, betas = [head], [starts], []
    r = None
    for _ in range(1, length):
        if r is None:
            r_new, support = head, None
        else:
            if policy.momentum:
                beta, r_new = momentum_update(r, head, policy.momentum_mlp)
                betas.append(beta.data[..., 0])
            else:
                r_new = head
            support = ad.sub(head, r) if policy.suppression else None
        head, head_idx, _ = walk_step(gated, graph_idx, head_idx, head, r_new, support, policy)
        r = r_new
        states.append(head)
        indices.append(head_idx)
    return CurveSet(
        indices=np.stack(indices, axis=-1),
        features=ad.stack(states, axis=2),
        start_scores=scores,
        betas=betas,
    )


# --------------------------------------------------------------------------
# instrumentation


@dataclass
class CurveStats:
    indices: np.ndarray            # [n, l]
    dist_to_start: np.ndarray      # [n, l]
    dist_to_last: np.ndarray       # [n, l]; distance to the previously visited node
    revisits: np.ndarray           # [n]
    mean_turn_deg: np.ndarray      # [n]

    def aggregate(self) -> dict:
        return {
            "n_curves": int(len(self.indices)),
            "length": int(self.indices.shape[1]),
            "mean_dist_to_start": self.dist_to_start.mean(axis=0).tolist(),
            "mean_dist_to_last": self.dist_to_last.mean(axis=0).tolist(),
            "mean_revisits": float(self.revisits.mean()),
            "mean_turn_deg": float(self.mean_turn_deg.mean()),
        }

    def to_json(self) -> dict:
        curves = [
            {
                "indices": self.indices[i].tolist(),
                "dist_to_start": self.dist_to_start[i].tolist(),
                "dist_to_last": self.dist_to_last[i].tolist(),
                "revisits": int(self.revisits[i]),
                "mean_turn_deg": float(self.mean_turn_deg[i]),
            }
            for i in range(len(self.indices))
        ]
        return {"curves": curves, "aggregate": self.aggregate()}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def curve_stats(indices: np.ndarray, coords: np.ndarray) -> CurveStats:
    indices = np.asarray(indices)
    pts = np.asarray(coords, dtype=np.float64)[indices]           # [n, l, 3]
    to_start = np.linalg.norm(pts - pts[:, :1], axis=-1)
    to_last = np.zeros_like(to_start)
    to_last[:, 1:] = np.linalg.norm(pts[:, 1:] - pts[:, :-1], axis=-1)
    revisits = np.array([row.size - np.unique(row).size for row in indices], dtype=np.int64)
    turns = np.zeros(len(indices))
    steps = pts[:, 1:] - pts[:, :-1]
    for i, seg in enumerate(steps):
        a, b = seg[:-1], seg[1:]
        na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
        ok = (na > 0) & (nb > 0)
        if ok.any():
            cos = np.clip((a[ok] * b[ok]).sum(-1) / (na[ok] * nb[ok]), -1.0, 1.0)
            turns[i] = float(np.degrees(np.arccos(cos)).mean())
    return CurveStats(indices, to_start, to_last, revisits, turns)
