"""CurveNet assembly, task heads, SGD training and voting evaluation."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .aggregate import CicBlock, CicConfig, lpfa, local_aggregate
from .autodiff import Tape, Tensor
from .dataio import Dataset
from .geometry import knn_indices, three_nn_weights
from .nn import Layer, Mlp, Module, load_checkpoint, save_checkpoint, uniform_init

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class CurveNetConfig:
    blocks: list[CicConfig]
    task: str = "classify"              # classify | pointwise
    num_classes: int = 4
    out_dims: int = 3
    stem_channels: int = 32
    stem_k: int = 20
    stem: str = "lpfa"                  # lpfa | local
    head_hidden: int = 256
    dropout: float = 0.5
    norm: str = "batch"

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("CurveNet needs at least one block")
        width = self.stem_channels
        for i, b in enumerate(self.blocks):
            if b.in_channels != width:
                raise ValueError(f"block {i} expects {b.in_channels} channels but receives {width}")
            width = b.out_channels
        if self.task not in ("classify", "pointwise"):
            raise ValueError(f"unknown task {self.task!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for b in d["blocks"]:
            b["curves"] = list(b["curves"]) if b["curves"] is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CurveNetConfig":
        d = dict(d)
        blocks = []
        for b in d.pop("blocks"):
            b = dict(b)
            if b.get("curves") is not None:
                b["curves"] = tuple(b["curves"])
            blocks.append(CicConfig(**b))
        return cls(blocks=blocks, **d)


def _stage_k(k: int, points: int) -> int:
    # a downsampled stage may hold fewer than k + 1 points
    return max(1, min(k, points - 1))


def desk_config(num_classes: int = 4, n_points: int = 256, curves: tuple[int, int] | None = (16, 16),
                k: int = 20, task: str = "classify", theta_bar: float = math.pi / 2,
                momentum: bool = True, suppression: bool = True, norm: str = "batch") -> CurveNetConfig:
    """Two groups of one CIC each (64 and 128 channels); curves in group 1 only."""
    walk = dict(theta_bar=theta_bar, momentum=momentum, suppression=suppression, norm=norm)
    m = max(n_points // 4, 2)
    return CurveNetConfig(
        blocks=[
            CicConfig(32, 64, None, _stage_k(k, n_points), curves, **walk),
            CicConfig(64, 128, m, _stage_k(k, m), None, **walk),
        ],
        task=task, num_classes=num_classes, stem_k=_stage_k(k, n_points), norm=norm,
    )


def full_config(num_classes: int = 40, n_points: int = 1024, curves: tuple[int, int] | None = (100, 5),
                k: int = 20, task: str = "classify") -> CurveNetConfig:
    """Eight CIC blocks in four groups of two; curves in groups 1 and 2."""
    widths = [(32, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256), (256, 512), (512, 512)]
    targets = [None, None, n_points // 4, None, n_points // 16, None, n_points // 64, None]
    blocks, points = [], n_points
    for i, ((cin, cout), m) in enumerate(zip(widths, targets)):
        if m is not None:
            m = max(m, 2)
            points = m
        blocks.append(CicConfig(cin, cout, m, _stage_k(k, points), curves if i < 4 else None))
    return CurveNetConfig(blocks=blocks, task=task, num_classes=num_classes, stem_k=_stage_k(k, n_points))


class CurveNet(Module):
    def __init__(self, config: CurveNetConfig, seed: int = 0, dtype=np.float32):
        self.config = cfg = config
        rng = np.random.default_rng(seed)
        self._dropout_rng = np.random.default_rng([seed, 1])
        if cfg.stem == "lpfa":
            self.stem = Mlp.build([6, cfg.stem_channels], rng, norm=cfg.norm, dtype=dtype)
        elif cfg.stem == "local":
            self.stem = Mlp.build([3, cfg.stem_channels], rng, norm=cfg.norm, dtype=dtype)
        else:
            raise ValueError(f"unknown stem {cfg.stem!r}")
        self.blocks = [CicBlock(b, rng, dtype) for b in cfg.blocks]
        last = cfg.blocks[-1].out_channels
        if cfg.task == "classify":
            w, b = uniform_init(rng, cfg.head_hidden, 2 * last, dtype)
            self.fc1 = Layer(w, b, activation="relu", norm=cfg.norm, dtype=dtype)
            w, b = uniform_init(rng, cfg.num_classes, cfg.head_hidden, dtype)
            self.fc2 = Layer(w, b, activation="none", dtype=dtype)
        else:
            self.decoders = []
            widths = [cfg.stem_channels] + [b.out_channels for b in cfg.blocks]
            for i in reversed(range(len(cfg.blocks))):
                if cfg.blocks[i].npoint is not None:
                    self.decoders.append(Mlp.build([widths[i + 1] + widths[i], widths[i]], rng,
                                                   norm=cfg.norm, dtype=dtype))
            down = [i for i, b in enumerate(cfg.blocks) if b.npoint is not None]
            width = widths[min(down)] if down else last
            self.point_head = Mlp.build([width, 64, cfg.out_dims], rng, activation="relu",
                                        norm=cfg.norm, last_activation="none", last_norm="none",
                                        dtype=dtype)

    @property
    def dtype(self):
        return self.stem.layers[0].weight.dtype


def build(config: CurveNetConfig, seed: int = 0, dtype=np.float32) -> CurveNet:
    model = CurveNet(config, seed, dtype)
    log.info("built CurveNet with %d parameters", model.num_parameters())
    return model


def forward_features(model: CurveNet, coords: np.ndarray, keep_curves: bool = False,
                     traces: list | None = None):
    """Stage outputs ``[(coords, feats [B, P_s, C_s], curves), ...]`` starting at the stem.

    ``traces`` collects one intermediate-feature dict per block (see ``cic_block``).
    """
    cfg = model.config
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 2:
        coords = coords[None]
    xyz = Tensor(coords.astype(model.dtype))
    graph = knn_indices(coords, coords, cfg.stem_k, exclude_self=True)
    if cfg.stem == "lpfa":
        f = lpfa(xyz, graph, model.stem)
    else:
        f = local_aggregate(xyz, graph, model.stem, "max")
    stages = [(coords, f, None)]
    cur = coords
    for block in model.blocks:
        same = block.config.npoint is None or block.config.npoint >= cur.shape[1]
        g = graph if same and cur is coords and block.config.k == cfg.stem_k else None
        trace = {} if traces is not None else None
        cur, f, curves = block(cur, f, g, trace)
        if traces is not None:
            traces.append(trace)
        stages.append((cur, f, curves if keep_curves else None))
    return stages


def forward_classify(model: CurveNet, coords: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
    """Class logits ``[B, classes]``: global max+avg pooling, FC, dropout, FC."""
    f = forward_features(model, coords)[-1][1]
    pooled = ad.concat([ad.amax(f, axis=1), ad.mean(f, axis=1)], axis=-1)
    h = model.fc1(pooled)
    h = ad.dropout(h, model.config.dropout, model.training, rng if rng is not None else model._dropout_rng)
    return model.fc2(h)


def forward_pointwise(model: CurveNet, coords: np.ndarray) -> Tensor:
    """Unit-norm per-point outputs ``[B, P, D]`` via 3-NN upsampling with skips."""
    stages = forward_features(model, coords)
    cur_xyz, cur = stages[-1][0], stages[-1][1]
    dec = iter(model.decoders)
    for i in reversed(range(len(model.config.blocks))):
        if model.config.blocks[i].npoint is None:
            continue
        skip_xyz, skip = stages[i][0], stages[i][1]
        cur = interpolate_features(cur_xyz, cur, skip_xyz)
        cur = next(dec)(ad.concat([cur, skip], axis=-1))
        cur_xyz = skip_xyz
    return ad.l2_normalize(model.point_head(cur), axis=-1)


def interpolate_features(src_xyz: np.ndarray, src: Tensor, dst_xyz: np.ndarray) -> Tensor:
    """Differentiable inverse-distance 3-NN interpolation (weights are constants)."""
    idx, w = three_nn_weights(src_xyz, dst_xyz)
    picked = ad.gather(src, idx)                                   # [B, M, 3, C]
    return ad.sum_(ad.mul(picked, w[..., None].astype(src.dtype)), axis=-2)


def predict(model: CurveNet, coords: np.ndarray) -> Tensor:
    if model.config.task == "classify":
        return forward_classify(model, coords)
    return forward_pointwise(model, coords)


# --------------------------------------------------------------------------
# optimisation


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 0.1
    lr_floor: float = 0.001
    schedule: str = "cosine"            # cosine | step
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    votes: int = 1
    augment: bool = True
    shards: int = 1
    eval_batch_size: int = 16

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.schedule not in ("cosine", "step"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def cosine_schedule(step: int, total: int, lr0: float, lr_floor: float) -> float:
    if total <= 0:
        return lr0
    t = min(max(step, 0), total) / total
    return lr_floor + 0.5 * (lr0 - lr_floor) * (1.0 + math.cos(math.pi * t))


def step_schedule(step: int, total: int, lr0: float) -> float:
    """x0.1 at 70% and again at 90% of ``total``."""
    lr = lr0
    if step >= int(0.7 * total):
        lr *= 0.1
    if step >= int(0.9 * total):
        lr *= 0.1
    return lr


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        if self.lr == 0.0:
            return
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _batch_loss(model: CurveNet, coords: np.ndarray, targets: np.ndarray, rng) -> tuple[Tensor, float]:
    if model.config.task == "classify":
        logits = forward_classify(model, coords, rng)
        loss = ad.cross_entropy(logits, targets, axis=1)
        correct = float((np.argmax(logits.data, axis=1) == targets).sum())
        return loss, correct
    pred = forward_pointwise(model, coords)
    return ad.cosine_error(pred, targets.astype(pred.dtype), axis=-1), 0.0


def train_step(model: CurveNet, opt: SGD, coords: np.ndarray, targets: np.ndarray,
               rng: np.random.Generator, shards: int = 1) -> tuple[float, float]:
    """One optimisation step; shards run on separate tapes and are reduced in order."""
    chunks = [c for c in np.array_split(np.arange(len(coords)), max(1, min(shards, len(coords)))) if len(c)]
    seeds = rng.integers(0, 2 ** 63, size=len(chunks))

    def run(i: int):
        part = chunks[i]
        with Tape() as tape:
            loss, correct = _batch_loss(model, coords[part], targets[part], np.random.default_rng(seeds[i]))
            scaled = ad.mul(loss, len(part) / len(coords))
        if not np.isfinite(loss.data):
            raise DivergenceError(f"loss became {float(loss.data)}")
        grads = ad.backward(tape, scaled, accumulate=False)
        return float(loss.data), correct, grads, tape

    if len(chunks) == 1:
        results = [run(0)]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(run, range(len(chunks))))
    opt.zero_grad()
    for _, _, grads, tape in results:
        for leaf, g in grads:
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        tape.commit()
    opt.step()
    for p in opt.params:
        if not np.isfinite(p.data).all():
            raise DivergenceError("parameters became non-finite after the optimiser step")
    loss = sum(r[0] * len(c) for r, c in zip(results, chunks)) / len(coords)
    return loss, sum(r[1] for r in results)


def _targets(model: CurveNet, ds: Dataset, idx) -> np.ndarray:
    if model.config.task == "classify":
        return ds.labels[idx]
    return ds.normals(idx)


def _augment_batch(coords: np.ndarray, normals: np.ndarray | None, rng: np.random.Generator):
    scale = rng.uniform(0.66, 1.5, size=(len(coords), 1, 3))
    shift = rng.uniform(-0.2, 0.2, size=(len(coords), 1, 3))
    out = coords * scale + shift
    if normals is None:
        return out, None
    n = normals / scale
    return out, n / np.linalg.norm(n, axis=-1, keepdims=True)


def evaluate(model: CurveNet, ds: Dataset, votes: int = 1, seed: int = 0, batch_size: int = 16) -> float:
    """Accuracy (classify) or mean cosine error (pointwise).

    With ``votes > 1`` softmax outputs are averaged over randomly re-scaled copies.
    """
    model.eval()
    rng = np.random.default_rng([seed, 7])
    if model.config.task == "classify":
        correct = 0
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            coords = ds.coords(idx)
            if votes <= 1:
                with ad.no_grad():
                    probs = ad.softmax(forward_classify(model, coords), axis=-1).data
            else:
                probs = 0.0
                for _ in range(votes):
                    scaled = coords * rng.uniform(0.66, 1.5, size=(len(idx), 1, 3))
                    with ad.no_grad():
                        probs = probs + ad.softmax(forward_classify(model, scaled), axis=-1).data
            correct += int((np.argmax(probs, axis=1) == ds.labels[idx]).sum())
        return correct / len(ds)
    total = 0.0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        with ad.no_grad():
            pred = forward_pointwise(model, ds.coords(idx))
            total += float(ad.cosine_error(pred, ds.normals(idx).astype(pred.dtype), axis=-1).data) * len(idx)
    return total / len(ds)


def save_model(model: CurveNet, path) -> None:
    save_checkpoint(path, model.state())


def load_model(path, config: CurveNetConfig) -> CurveNet:
    model = CurveNet(config)
    model.load_state(load_checkpoint(path))
    return model


def train(model: CurveNet, train_ds: Dataset, val_ds: Dataset | None, cfg: TrainConfig,
          out_dir=None, on_epoch: Callable[[dict], None] | None = None,
          row_extra: dict | None = None) -> list[dict]:
    """SGD training; returns one metrics row per epoch.

    Classification keeps the highest validation accuracy as ``best.cwt``;
    pointwise keeps the lowest validation cosine error.
    """
    out = Path(out_dir) if out_dir is not None else None
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    classify = model.config.task == "classify"
    history, best = [], None
    if out is not None:
        save_model(model, out / "initial.cwt")
        if cfg.epochs > 0:
            (out / "metrics.jsonl").write_text("", encoding="utf-8")
    for epoch in range(cfg.epochs):
        if cfg.schedule == "cosine":
            opt.lr = cosine_schedule(epoch, cfg.epochs, cfg.lr, cfg.lr_floor)
        else:
            opt.lr = step_schedule(epoch, cfg.epochs, cfg.lr)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_ds))
        model.train()
        loss_sum, correct, seen = 0.0, 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and model.config.norm == "batch":
                continue
            coords = train_ds.coords(idx)
            targets = _targets(model, train_ds, idx)
            if cfg.augment:
                coords, normals = _augment_batch(coords, None if classify else targets, rng)
                targets = targets if classify else normals
            loss, hits = train_step(model, opt, coords, targets, rng, cfg.shards)
            loss_sum += loss * len(idx)
            correct += hits
            seen += len(idx)
        val = evaluate(model, val_ds, cfg.votes, cfg.seed, cfg.eval_batch_size) if val_ds is not None else None
        row = {
            "epoch": epoch,
            "lr": opt.lr,
            "train_loss": loss_sum / max(seen, 1),
            "train_acc": correct / max(seen, 1) if classify else None,
            "val_metric": val,
            **(row_extra or {}),
        }
        history.append(row)
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            better = val is not None and (best is None or (val > best if classify else val < best))
            if better:
                best = val
                save_model(model, out / "best.cwt")
            save_model(model, out / "last.cwt")
        if on_epoch is not None:
            on_epoch(row)
    return history
