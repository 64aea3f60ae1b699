"""Few-shot continual-learning protocol and its metrics (TI, CC, ACC, BWT)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset
from .encoder import DualEncoder, accuracy
from .train import TrainConfig, train_session


class SplitError(ValueError):
    pass


@dataclass
class SessionSplit:
    session_id: int
    classes: list[int]
    train_idx: np.ndarray
    test_idx: np.ndarray


def make_splits(dataset: Dataset, sessions: int, shots: int, seed: int) -> list[SessionSplit]:
    """Partition classes into ``sessions`` disjoint groups and draw ``shots`` training samples per class.

    Remaining samples of each class form its test split.
    """
    n_classes = len(dataset.class_names)
    if sessions < 1 or n_classes < sessions:
        raise SplitError(f"cannot split {n_classes} classes into {sessions} sessions")
    if shots < 1:
        raise SplitError(f"shots must be >= 1, got {shots}")
    rng = np.random.default_rng(seed)
    by_class = {c: np.flatnonzero(dataset.labels == c) for c in range(n_classes)}
    for c, idx in by_class.items():
        if len(idx) < shots:
            raise SplitError(f"class {c} ({dataset.class_names[c]}) has {len(idx)} samples, needs {shots}")
    order = rng.permutation(n_classes)
    groups = np.array_split(order, sessions)
    splits = []
    seen: set[int] = set()
    for t, group in enumerate(groups, start=1):
        classes = sorted(int(c) for c in group)
        assert seen.isdisjoint(classes)
        seen.update(classes)
        train, test = [], []
        for c in classes:
            idx = by_class[c]
            pick = np.sort(rng.choice(len(idx), size=shots, replace=False))
            keep = np.ones(len(idx), dtype=bool)
            keep[pick] = False
            train.append(idx[pick])
            test.append(idx[keep])
        splits.append(SessionSplit(t, classes, np.concatenate(train), np.concatenate(test)))
    return splits


@dataclass
class AccuracyMatrix:
    """``R[t][i]``: accuracy on session i's test split after training session t (0-based here)."""

    sessions: int
    R: list[list[float | None]] = field(default_factory=list)
    zero_shot: dict[str, float] = field(default_factory=dict)
    control: dict[str, float] = field(default_factory=dict)
    target_final: float | None = None
    logs: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.R:
            self.R = [[None] * self.sessions for _ in range(self.sessions)]

    def completed(self) -> int:
        return sum(1 for row in self.R if row[0] is not None)

    def to_dict(self) -> dict:
        return {"R": self.R, "zero_shot": self.zero_shot, "control": self.control, "target_final": self.target_final}

    @classmethod
    def from_dict(cls, d: dict) -> "AccuracyMatrix":
        return cls(len(d["R"]), [list(r) for r in d["R"]], dict(d["zero_shot"]), dict(d["control"]), d["target_final"])


def metric_ti(final_target_acc: float, zero_shot_target_acc: float) -> float:
    """Target improvement in percentage points."""
    return 100.0 * (final_target_acc - zero_shot_target_acc)


def metric_cc(control_final, control_zero_shot) -> float:
    """Mean control-set accuracy change in percentage points."""
    if len(control_final) != len(control_zero_shot):
        raise ValueError(f"{len(control_final)} final vs {len(control_zero_shot)} zero-shot control accuracies")
    if not control_final:
        raise ValueError("no control datasets")
    return 100.0 * float(np.mean(np.asarray(control_final, float) - np.asarray(control_zero_shot, float)))


def metric_acc_bwt(R) -> tuple[float, float]:
    """Average final accuracy and backward transfer over a completed ``T x T`` matrix."""
    R = R.R if isinstance(R, AccuracyMatrix) else R
    T = len(R)
    if T < 2:
        raise ValueError("backward transfer needs at least two sessions")
    last = R[T - 1]
    acc = sum(last[i] for i in range(T)) / T
    bwt = sum(last[i] - R[i][i] for i in range(T - 1)) / (T - 1)
    return acc, bwt


@dataclass
class EvalSet:
    name: str
    images: np.ndarray
    labels: np.ndarray
    prompts: list[list[int]]


def control_eval_set(name: str, ds: Dataset) -> EvalSet:
    return EvalSet(name, ds.images, ds.labels, ds.prompts())


def run_continual(model: DualEncoder, strategy, dataset: Dataset, splits: list[SessionSplit],
                  controls: list[EvalSet], cfg: TrainConfig, seed: int, log_path=None,
                  on_session=None) -> AccuracyMatrix:
    """Train through every session, filling the accuracy matrix as it goes.

    Every evaluation on the target uses the prompts of all target classes, so
    each prediction is a closed-set choice over the full class list.
    """
    T = len(splits)
    prompt_emb = model.encode_texts(dataset.prompts()).data
    control_emb = {c.name: model.encode_texts(c.prompts).data for c in controls}
    all_test = np.concatenate([s.test_idx for s in splits])

    def acc_on(idx):
        return accuracy(model, dataset.images[idx], dataset.labels[idx], prompt_emb)

    M = AccuracyMatrix(T)
    M.zero_shot["target"] = acc_on(all_test)
    for s in splits:
        M.zero_shot[f"session_{s.session_id}"] = acc_on(s.test_idx)
    for c in controls:
        M.zero_shot[c.name] = accuracy(model, c.images, c.labels, control_emb[c.name])

    rng = np.random.default_rng(seed)
    logs = []
    for t, split in enumerate(splits):
        data = dataset.subset(split.train_idx)
        log = train_session(model, strategy, data, cfg, int(rng.integers(2**31)), log_path)
        logs.append(log)
        for i in range(t + 1):
            M.R[t][i] = acc_on(splits[i].test_idx)
        if on_session is not None:
            on_session(t, strategy)
    M.target_final = acc_on(all_test)
    for c in controls:
        M.control[c.name] = accuracy(model, c.images, c.labels, control_emb[c.name])
    M.logs = logs
    return M


def summarize(M: AccuracyMatrix) -> dict:
    """Headline metrics for one run; ACC and BWT in percent."""
    out = {"TI": metric_ti(M.target_final, M.zero_shot["target"])}
    names = sorted(M.control)
    out["CC"] = metric_cc([M.control[n] for n in names], [M.zero_shot[n] for n in names]) if names else None
    if M.sessions >= 2:
        acc, bwt = metric_acc_bwt(M.R)
        out["ACC"], out["BWT"] = 100.0 * acc, 100.0 * bwt
    else:
        out["ACC"], out["BWT"] = 100.0 * M.R[0][0], None
    return out
