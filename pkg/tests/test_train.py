import json
import math

import numpy as np
import pytest

from lorsu import numcore as nc
from lorsu.adapt import FullFineTune, Frozen, LoRSU
from lorsu.dataio import SyntheticSpec, generate
from lorsu.encoder import DualEncoder
from lorsu.numcore import Tensor
from lorsu.train import Adam, ScheduleConfig, TrainConfig, TrainingError, clip_loss, lr_at, train_session

from conftest import tiny_config


def unit(rows):
    rows = np.asarray(rows, float)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def naive_clip(img, txt, tau):
    B = len(img)
    logits = tau * img @ txt.T
    row = col = 0.0
    for i in range(B):
        row -= logits[i, i] - math.log(sum(math.exp(logits[i, j]) for j in range(B)))
        col -= logits[i, i] - math.log(sum(math.exp(logits[j, i]) for j in range(B)))
    return 0.5 * (row + col) / B


# ----------------------------------------------------------------- loss

def test_clip_loss_single_pair_is_zero():
    e = Tensor(unit([[1.0, 2.0, 3.0]]))
    assert clip_loss(e, Tensor(unit([[0.0, 1.0, 0.0]])), 14.0).item() == 0.0


def test_clip_loss_two_orthogonal_pairs_closed_form():
    tau = 1 / 0.07
    e = Tensor(np.eye(2, 4))
    expect = -math.log(math.exp(tau) / (math.exp(tau) + 1))
    assert abs(clip_loss(e, e, tau).item() - expect) < 1e-12


def test_clip_loss_matches_naive_loop():
    rng = np.random.default_rng(0)
    for B in (2, 3, 7):
        img, txt = unit(rng.normal(size=(B, 5))), unit(rng.normal(size=(B, 5)))
        assert abs(clip_loss(Tensor(img), Tensor(txt), 10.0).item() - naive_clip(img, txt, 10.0)) < 1e-12


def test_clip_loss_permutation_invariant():
    rng = np.random.default_rng(1)
    img, txt = unit(rng.normal(size=(6, 4))), unit(rng.normal(size=(6, 4)))
    p = rng.permutation(6)
    a = clip_loss(Tensor(img), Tensor(txt), 5.0).item()
    assert abs(a - clip_loss(Tensor(img[p]), Tensor(txt[p]), 5.0).item()) < 1e-12


def test_clip_loss_errors():
    with pytest.raises(nc.DimensionError):
        clip_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), 1.0)
    with pytest.raises(ValueError):
        clip_loss(Tensor(np.ones((0, 3))), Tensor(np.ones((0, 3))), 1.0)


# ----------------------------------------------------------------- Adam

def test_adam_zero_gradient():
    q = Tensor(np.array([3.0]), requires_grad=True)
    q.grad = np.zeros(1)
    Adam([("q", q)]).step(0.1)
    assert q.data.tolist() == [3.0]
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([("p", p)])
    p.grad = np.array([1.0, 1.0])
    opt.step(0.1)
    m1, v1 = opt.m[0].copy(), opt.v[0].copy()
    p.grad = np.zeros(2)
    opt.step(0.1)
    assert np.array_equal(opt.m[0], 0.9 * m1) and np.array_equal(opt.v[0], 0.999 * v1)


def test_adam_first_step_is_minus_lr():
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([1.0])
    Adam([("p", p)]).step(0.01)
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert abs(p.data[0] - (0.5 - 0.01 / (1 + 1e-8))) < 1e-15


def test_adam_descends_quadratic():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([("p", p)])
    prev = abs(p.data[0])
    for _ in range(10):
        p.grad = 2 * p.data
        opt.step(0.05)
        assert abs(p.data[0]) < prev
        prev = abs(p.data[0])


def test_adam_rejects_non_finite():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([np.inf])
    with pytest.raises(TrainingError, match="non-finite"):
        Adam([("p", p)]).step(0.1)


# ----------------------------------------------------------------- schedule

def test_schedule_endpoints():
    s = ScheduleConfig(peak_lr=1e-3, warmup_steps=10, total_steps=100, min_lr=1e-6)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 10) == 1e-3
    assert abs(lr_at(s, 100) - 1e-6) <= 1e-15
    assert lr_at(s, 5) == pytest.approx(5e-4)


def test_schedule_is_continuous_and_bounded():
    s = ScheduleConfig(peak_lr=2e-4, warmup_steps=7, total_steps=60, min_lr=1e-5)
    lrs = [lr_at(s, i) for i in range(61)]
    assert max(lrs) == 2e-4 and min(lrs[7:]) == pytest.approx(1e-5)
    assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) < 2e-4 / 6
    assert all(a >= b for a, b in zip(lrs[7:], lrs[8:]))


def test_schedule_errors_and_fraction():
    with pytest.raises(ValueError):
        ScheduleConfig(warmup_steps=5, total_steps=3)
    with pytest.raises(ValueError):
        lr_at(ScheduleConfig(total_steps=3), 4)
    assert ScheduleConfig.with_warmup_fraction(1e-3, 60).warmup_steps == 6


# ----------------------------------------------------------------- sessions

def two_class_task():
    return generate(SyntheticSpec(num_classes=2, samples_per_class=8, image_size=8, noise_std=0.05, seed=4))


def test_zero_epochs_leaves_model_unchanged():
    model = DualEncoder(tiny_config(), seed=0)
    before = model.snapshot()
    assert train_session(model, FullFineTune(), two_class_task(), TrainConfig(epochs=0), 0) == []
    assert all(before[n].tobytes() == t.data.tobytes() for n, t in model.named_parameters())


def test_frozen_strategy_trains_nothing():
    model = DualEncoder(tiny_config(), seed=0)
    before = model.snapshot()
    assert train_session(model, Frozen(), two_class_task(), TrainConfig(epochs=3), 0) == []
    assert all(before[n].tobytes() == t.data.tobytes() for n, t in model.named_parameters())


def test_same_seed_same_trace(tmp_path):
    data, logs = two_class_task(), []
    for _ in range(2):
        model = DualEncoder(tiny_config(), seed=0)
        log = train_session(model, LoRSU(rank=2), data, TrainConfig(epochs=3, batch_size=4, lr=1e-3), 7,
                            tmp_path / "log.jsonl")
        logs.append([(r["epoch"], r["mean_loss"], r["lr"]) for r in log])
    assert logs[0] == logs[1]
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 6 and set(json.loads(lines[0])) == {"epoch", "mean_loss", "lr", "wall_ms"}


def test_training_reduces_loss_on_separable_task():
    model = DualEncoder(tiny_config(), seed=0)
    log = train_session(model, FullFineTune(), two_class_task(), TrainConfig(epochs=20, batch_size=4, lr=1e-3), 0)
    assert len(log) == 20
    assert log[-1]["mean_loss"] < log[0]["mean_loss"]


def test_empty_session_rejected():
    with pytest.raises(ValueError):
        train_session(DualEncoder(tiny_config()), Frozen(), two_class_task().subset([]), TrainConfig(), 0)
