import numpy as np
import pytest

from lorsu.adapt import Frozen, LoRSU
from lorsu.encoder import DualEncoder
from lorsu.harness import (
    AccuracyMatrix, SplitError, control_eval_set, make_splits, metric_acc_bwt, metric_cc, metric_ti, run_continual,
    summarize,
)
from lorsu.train import TrainConfig

from conftest import tiny_config, tiny_dataset

# reference control accuracies over nine control sets: zero-shot and after LoRSU
ZERO_SHOT_CONTROLS = [53.1, 82.7, 60.4, 76.1, 91.1, 51.5, 61.2, 58.0, 31.3]
LORSU_CONTROLS = [53.5, 82.4, 60.8, 66.6, 91.5, 51.6, 61.7, 59.8, 31.6]


# ----------------------------------------------------------------- splits

def test_even_partition_and_disjointness():
    ds = tiny_dataset(classes=10, per_class=5)
    splits = make_splits(ds, 5, 3, seed=0)
    assert [len(s.classes) for s in splits] == [2] * 5
    assert sorted(c for s in splits for c in s.classes) == list(range(10))
    for s in splits:
        assert len(s.train_idx) == 6 and len(s.test_idx) == 4
        assert not set(s.train_idx) & set(s.test_idx)
        assert set(ds.labels[s.train_idx]) == set(s.classes)


def test_full_shots_use_every_sample():
    ds = tiny_dataset(classes=4, per_class=5)
    for s in make_splits(ds, 2, 5, seed=1):
        assert sorted(s.train_idx) == sorted(np.flatnonzero(np.isin(ds.labels, s.classes)))
        assert len(s.test_idx) == 0


def test_splits_deterministic():
    ds = tiny_dataset(classes=6, per_class=5)
    a, b = make_splits(ds, 3, 2, seed=4), make_splits(ds, 3, 2, seed=4)
    for x, y in zip(a, b):
        assert x.classes == y.classes and np.array_equal(x.train_idx, y.train_idx)


def test_split_errors():
    ds = tiny_dataset(classes=3, per_class=2)
    with pytest.raises(SplitError):
        make_splits(ds, 4, 1, 0)
    with pytest.raises(SplitError, match="needs 3"):
        make_splits(ds, 1, 3, 0)
    with pytest.raises(SplitError):
        make_splits(ds, 1, 0, 0)


# ----------------------------------------------------------------- metrics

def test_metric_ti():
    assert metric_ti(0.820, 0.756) == pytest.approx(6.4, abs=1e-9)
    assert metric_ti(0.5, 0.5) == 0.0
    assert metric_ti(0.666, 0.761) == pytest.approx(-9.5, abs=1e-9)


def test_metric_cc():
    assert metric_cc([0.4, 0.7], [0.4, 0.7]) == 0.0
    assert metric_cc([0.51, 0.47], [0.50, 0.50]) == pytest.approx(-1.0, abs=1e-9)
    cc = metric_cc([v / 100 for v in LORSU_CONTROLS], [v / 100 for v in ZERO_SHOT_CONTROLS])
    assert cc == pytest.approx(-5.9 / 9, abs=1e-9)
    assert abs(cc - (-0.7)) <= 0.05
    with pytest.raises(ValueError):
        metric_cc([0.1], [0.1, 0.2])
    with pytest.raises(ValueError):
        metric_cc([], [])


def test_metric_acc_bwt():
    acc, bwt = metric_acc_bwt([[0.8, None], [0.7, 0.9]])
    assert acc == pytest.approx(0.8) and bwt == pytest.approx(-0.1)
    assert metric_acc_bwt([[0.6, None, None], [0.6, 0.5, None], [0.6, 0.5, 0.9]])[1] == 0.0
    with pytest.raises(ValueError):
        metric_acc_bwt([[0.5]])


def test_metric_acc_bwt_matches_naive_loop():
    rng = np.random.default_rng(0)
    for T in range(2, 7):
        R = [[float(rng.random()) if i <= t else None for i in range(T)] for t in range(T)]
        acc = sum(R[T - 1]) / T
        bwt = 0.0
        for i in range(T - 1):
            bwt += R[T - 1][i] - R[i][i]
        acc2, bwt2 = metric_acc_bwt(AccuracyMatrix(T, R))
        assert acc2 == pytest.approx(acc, abs=1e-15) and bwt2 == pytest.approx(bwt / (T - 1), abs=1e-15)


def test_accuracy_matrix_round_trip():
    M = AccuracyMatrix(2, [[0.5, None], [0.4, 0.6]], {"target": 0.3}, {"c": 0.2}, 0.5)
    assert AccuracyMatrix.from_dict(M.to_dict()).to_dict() == M.to_dict()


# ----------------------------------------------------------------- protocol

def setup(classes=4, sessions=2):
    ds = tiny_dataset(classes=classes, per_class=6, seed=2)
    control = control_eval_set("ctrl", tiny_dataset(classes=3, per_class=4, seed=3, first_class=10))
    return DualEncoder(tiny_config(), seed=0), ds, make_splits(ds, sessions, 3, seed=0), [control]


def test_frozen_run_reproduces_zero_shot():
    model, ds, splits, controls = setup()
    M = run_continual(model, Frozen(), ds, splits, controls, TrainConfig(epochs=2, batch_size=4), seed=0)
    for t in range(2):
        for i in range(t + 1):
            assert M.R[t][i] == M.zero_shot[f"session_{i + 1}"]
    m = summarize(M)
    assert m["TI"] == 0.0 and m["CC"] == 0.0 and m["BWT"] == 0.0


def test_single_session_fills_one_cell():
    model, ds, splits, controls = setup(classes=2, sessions=1)
    M = run_continual(model, LoRSU(rank=2), ds, splits, controls, TrainConfig(epochs=1, batch_size=4), seed=0)
    assert M.R[0][0] is not None and M.sessions == 1
    m = summarize(M)
    assert m["BWT"] is None and m["ACC"] == 100 * M.R[0][0]


def test_run_is_deterministic_and_reports_sessions():
    seen = []
    runs = []
    for _ in range(2):
        model, ds, splits, controls = setup()
        M = run_continual(model, LoRSU(rank=2), ds, splits, controls, TrainConfig(epochs=2, batch_size=4, lr=1e-3),
                          seed=5, on_session=lambda t, s: seen.append(t))
        runs.append(M.to_dict())
    assert runs[0] == runs[1] and seen == [0, 1, 0, 1]
    assert M.completed() == 2 and len(M.logs) == 2
