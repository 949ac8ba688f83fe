import math

import numpy as np
import pytest

from curvewalk import autodiff as ad
from curvewalk.aggregate import CicConfig
from curvewalk.autodiff import Tape
from curvewalk.dataio import synth_splits
from curvewalk.model import (SGD, CurveNet, CurveNetConfig, DivergenceError, TrainConfig, build, cosine_schedule,
                             desk_config, evaluate, forward_classify, forward_pointwise, full_config, load_model,
                             save_model, step_schedule, train, train_step)
from curvewalk.nn import CheckpointError, load_checkpoint, save_checkpoint


def lin(i, o, bias=True, bn=False):
    return i * o + (o if bias else 0) + (2 * o if bn else 0)


def hand_count(cfg: CurveNetConfig) -> int:
    """Parameter count straight from the layer widths."""
    total = lin(6, cfg.stem_channels, bn=True)
    for b in cfg.blocks:
        c = b.out_channels
        total += lin(2 * b.in_channels, c, bn=True) + lin(c, c, bn=True)
        if b.in_channels != c:
            total += lin(b.in_channels, c, bias=False, bn=True)
        if b.curves is not None:
            h, r = max(c, 16), max(c // b.rho, 1)
            total += lin(2 * c, h) + lin(h, 1) + lin(2 * c, 2) + lin(c, 1)
            total += 2 * lin(c, c) + 3 * lin(c, r) + 2 * lin(r, c) + lin(2 * c, c)
    last = cfg.blocks[-1].out_channels
    return total + lin(2 * last, cfg.head_hidden, bn=True) + lin(cfg.head_hidden, cfg.num_classes)


@pytest.fixture(scope="module")
def toy():
    return synth_splits(n_train=16, n_test=8, n_points=64, seed=3)


def tiny_config(task="classify", curves=(4, 5)):
    return desk_config(4, 64, curves, k=8, task=task)


# ---- construction --------------------------------------------------------------

@pytest.mark.parametrize("cfg", [full_config(), desk_config(), desk_config(curves=None)], ids=["full", "desk", "off"])
def test_parameter_count_matches_hand_sum(cfg):
    assert CurveNet(cfg).num_parameters() == hand_count(cfg)


def test_single_block_builds_and_classifies(rng):
    cfg = CurveNetConfig(blocks=[CicConfig(32, 16, None, k=4, curves=(2, 3))], num_classes=5, stem_k=4)
    logits = forward_classify(build(cfg).eval(), rng.normal(size=(2, 20, 3)))
    assert logits.shape == (2, 5) and np.isfinite(logits.data).all()


def test_invalid_chaining_rejected():
    with pytest.raises(ValueError):
        CurveNetConfig(blocks=[CicConfig(32, 64), CicConfig(32, 64)])
    with pytest.raises(ValueError):
        CurveNetConfig(blocks=[])


def test_stage_k_clamped_to_available_points():
    cfg = full_config(n_points=256)
    assert [b.k for b in cfg.blocks] == [20, 20, 20, 20, 15, 15, 3, 3]
    assert [b.npoint for b in cfg.blocks] == [None, None, 64, None, 16, None, 4, None]


def test_full_config_forward_at_default_size(rng):
    model = build(full_config(10, 256, (4, 3), k=8)).eval()
    assert forward_classify(model, rng.normal(size=(1, 256, 3))).shape == (1, 10)


def test_config_dict_round_trip():
    cfg = desk_config(curves=(3, 7))
    assert CurveNetConfig.from_dict(cfg.to_dict()) == cfg


# ---- forward passes --------------------------------------------------------------

def test_eval_forward_repeatable_and_per_cloud(rng):
    model = build(tiny_config(), seed=1).eval()
    x = rng.normal(size=(3, 64, 3))
    a = forward_classify(model, x).data
    np.testing.assert_array_equal(a, forward_classify(model, x).data)
    alone = np.concatenate([forward_classify(model, x[i:i + 1]).data for i in range(3)])
    np.testing.assert_allclose(alone, a, rtol=1e-5, atol=1e-6)


def test_same_seed_same_model(rng):
    x = rng.normal(size=(1, 64, 3))
    a = forward_classify(build(tiny_config(), seed=4).eval(), x).data
    b = forward_classify(build(tiny_config(), seed=4).eval(), x).data
    np.testing.assert_array_equal(a, b)


def test_pointwise_outputs_unit_norm(rng):
    model = build(tiny_config("pointwise")).eval()
    out = forward_pointwise(model, rng.normal(size=(2, 64, 3))).data
    assert out.shape == (2, 64, 3)
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-5)


@pytest.mark.parametrize("task", ["classify", "pointwise"])
def test_every_parameter_gets_gradient_in_first_epoch(task, toy):
    train_ds, _ = toy
    model = build(tiny_config(task), seed=0, dtype=np.float64).train()
    seen = {id(p): False for p in model.parameters()}
    for start in range(0, len(train_ds), 4):
        idx = np.arange(start, start + 4)
        with Tape() as tape:
            if task == "classify":
                out = ad.cross_entropy(forward_classify(model, train_ds.coords(idx)), train_ds.labels[idx], axis=1)
            else:
                out = ad.cosine_error(forward_pointwise(model, train_ds.coords(idx)), train_ds.normals(idx), axis=-1)
        for leaf, g in ad.backward(tape, out, accumulate=False):
            seen[id(leaf)] |= bool(np.any(g != 0))
    dead = [n for n, p in model.named_parameters() if not seen[id(p)]]
    assert not dead


# ---- schedules and optimiser ---------------------------------------------------------

def test_cosine_schedule_endpoints_and_midpoint():
    assert cosine_schedule(0, 60, 0.1, 0.001) == 0.1
    assert cosine_schedule(60, 60, 0.1, 0.001) == pytest.approx(0.001, abs=1e-15)
    assert abs(cosine_schedule(30, 60, 0.1, 0.001) - (0.1 + 0.001) / 2) <= 1e-9


def test_step_schedule():
    assert [step_schedule(s, 10, 1.0) for s in (0, 6, 7, 8, 9)] == pytest.approx([1, 1, 0.1, 0.1, 0.01])


def test_sgd_momentum_and_weight_decay_by_hand():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = SGD([p], lr=0.5, momentum=0.9, weight_decay=0.1)
    p.grad = np.array([0.2, 0.4])
    opt.step()
    v1 = np.array([0.2 + 0.1, 0.4 - 0.2])
    np.testing.assert_allclose(p.data, [1.0, -2.0] - 0.5 * v1)
    x1 = p.data.copy()
    p.grad = np.array([0.0, 0.0])
    opt.step()
    v2 = 0.9 * v1 + 0.1 * x1
    np.testing.assert_allclose(p.data, x1 - 0.5 * v2)


def test_zero_lr_leaves_parameters(toy):
    train_ds, _ = toy
    model = build(tiny_config())
    before = [p.data.copy() for p in model.parameters()]
    train(model, train_ds, None, TrainConfig(epochs=1, batch_size=8, lr=0.0))
    for a, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(schedule="linear")


def test_divergence_raises(toy):
    train_ds, _ = toy
    model = build(tiny_config())
    coords = train_ds.coords(range(4))
    coords[0, 0, 0] = np.inf
    opt = SGD(model.parameters(), 0.1)
    with pytest.raises((DivergenceError, ad.NonFiniteError, ValueError)):
        train_step(model, opt, coords, train_ds.labels[:4], np.random.default_rng(0))


def test_nan_loss_is_divergence(toy, monkeypatch):
    import curvewalk.model as m
    train_ds, _ = toy
    model = build(tiny_config())
    monkeypatch.setattr(m, "_batch_loss", lambda *a: (ad.mul(ad.Tensor(np.array(np.nan)), 1.0), 0.0))
    with pytest.raises(DivergenceError):
        train_step(model, SGD(model.parameters(), 0.1), train_ds.coords(range(4)), train_ds.labels[:4],
                   np.random.default_rng(0))


# ---- training, evaluation and checkpoints -------------------------------------------

def test_small_training_is_deterministic_and_logs_rows(toy, tmp_path):
    train_ds, test_ds = toy
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        out.mkdir()
        hist = train(build(tiny_config(), seed=2), train_ds, test_ds, TrainConfig(epochs=2, batch_size=8), out)
        runs.append((hist, (out / "metrics.jsonl").read_bytes()))
    assert runs[0][1] == runs[1][1]
    hist = runs[0][0]
    assert [r["epoch"] for r in hist] == [0, 1]
    assert set(hist[0]) == {"epoch", "lr", "train_loss", "train_acc", "val_metric"}
    assert {p.name for p in (tmp_path / "a").iterdir()} == {"initial.cwt", "best.cwt", "last.cwt", "metrics.jsonl"}


def test_best_checkpoint_reproduces_logged_metric(toy, tmp_path):
    train_ds, test_ds = toy
    cfg = tiny_config()
    hist = train(build(cfg, seed=2), train_ds, test_ds, TrainConfig(epochs=3, batch_size=8), tmp_path)
    best = max(r["val_metric"] for r in hist)
    assert abs(evaluate(load_model(tmp_path / "best.cwt", cfg), test_ds) - best) <= 1e-6
    assert abs(evaluate(load_model(tmp_path / "last.cwt", cfg), test_ds) - hist[-1]["val_metric"]) <= 1e-6


def test_single_vote_is_argmax_accuracy(toy):
    _, test_ds = toy
    model = build(tiny_config(), seed=5)
    model.eval()
    with ad.no_grad():
        pred = np.argmax(forward_classify(model, test_ds.coords()).data, axis=1)
    assert evaluate(model, test_ds, votes=1, batch_size=3) == pytest.approx(float((pred == test_ds.labels).mean()))


def test_pointwise_evaluate_is_mean_cosine_error(toy):
    _, test_ds = toy
    model = build(tiny_config("pointwise"), seed=5).eval()
    with ad.no_grad():
        pred = forward_pointwise(model, test_ds.coords()).data
    cos = np.abs((pred * test_ds.normals()).sum(-1))
    assert evaluate(model, test_ds) == pytest.approx(float((1 - cos).mean()), rel=1e-5)


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = tiny_config()
    model = build(cfg, seed=9)
    model.blocks[0].encode.layers[0].norm.running_mean[:] = rng.normal(size=64)
    save_model(model, tmp_path / "m.cwt")
    back = load_model(tmp_path / "m.cwt", cfg)
    for (na, a), (nb, b) in zip(model.state(), back.state()):
        assert na == nb
        np.testing.assert_array_equal(a, b)


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad.cwt").write_bytes(b"XXXX\x00\x00\x00\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.cwt")
    save_checkpoint(tmp_path / "ok.cwt", [("w", np.ones((2, 3)))])
    raw = (tmp_path / "ok.cwt").read_bytes()
    (tmp_path / "cut.cwt").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.cwt")
    (tmp_path / "name.cwt").write_bytes(raw.replace(b"w", b"\xff", 1))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "name.cwt")
    assert math.isclose(float(load_checkpoint(tmp_path / "ok.cwt")["w"].sum()), 6.0)
