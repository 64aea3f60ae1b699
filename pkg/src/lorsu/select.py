"""Gradient-guided structured selection: TOP-C, group-constrained masks, head scores, fc1 masks."""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np


class SelectionError(ValueError):
    pass


class GradientStateError(RuntimeError):
    """Selection was asked for before any gradient was accumulated."""


def _top_indices(values: np.ndarray, count: int) -> np.ndarray:
    # stable sort on the negated key keeps the lower index first among ties
    return np.argsort(-values, kind="stable")[:count]


def top_c(x, C: int) -> np.ndarray:
    """Binary mask of the ``C`` largest-magnitude entries of ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if not 0 <= C <= x.size:
        raise SelectionError(f"budget C={C} outside [0, {x.size}]")
    mask = np.zeros(x.size, dtype=np.int8)
    mask[_top_indices(np.abs(x), C)] = 1
    return mask


@dataclass
class GroupSpec:
    """Disjoint coordinate groups, each with its own selection budget."""

    groups: list[np.ndarray]
    budgets: list[int]

    def __post_init__(self):
        self.groups = [np.asarray(g, dtype=np.int64).reshape(-1) for g in self.groups]
        self.budgets = [int(c) for c in self.budgets]
        if len(self.groups) != len(self.budgets):
            raise SelectionError(f"{len(self.groups)} groups but {len(self.budgets)} budgets")
        seen: set[int] = set()
        for i, (g, c) in enumerate(zip(self.groups, self.budgets)):
            if len(set(g.tolist())) != g.size:
                raise SelectionError(f"group {i} repeats a coordinate")
            if seen.intersection(g.tolist()):
                raise SelectionError(f"group {i} overlaps an earlier group")
            seen.update(g.tolist())
            if not 0 <= c <= g.size:
                raise SelectionError(f"budget {c} for group {i} outside [0, {g.size}]")

    @property
    def total(self) -> int:
        return sum(self.budgets)


def optimal_group_mask(grad, spec: GroupSpec) -> np.ndarray:
    """Mask maximising masked-gradient energy with at most ``c_l`` picks inside each group.

    Groups are disjoint, so the problem splits into one unit-weight knapsack
    per group, each solved by TOP-c on that group's coordinates.
    """
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    mask = np.zeros(grad.size, dtype=np.int8)
    for g, c in zip(spec.groups, spec.budgets):
        if g.size and (g.min() < 0 or g.max() >= grad.size):
            raise SelectionError(f"group index outside [0, {grad.size})")
        mask[g[top_c(grad[g], c).astype(bool)]] = 1
    return mask


def masked_energy(grad, mask) -> float:
    """Fraction of squared gradient norm kept by ``mask``."""
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    total = float(grad @ grad)
    return float((np.asarray(mask).reshape(-1) * grad) @ grad) / total if total else 0.0


def head_scores(grad_qkv, num_heads: int) -> np.ndarray:
    """Per-head sum of squared query/key/value gradients from the head-grouped qkv gradient."""
    if grad_qkv is None:
        raise GradientStateError("no qkv gradient available; run a backward pass first")
    g = np.asarray(grad_qkv, dtype=np.float64)
    if g.shape[0] % (3 * num_heads):
        raise SelectionError(f"qkv gradient with {g.shape[0]} rows cannot split into {num_heads} heads")
    if not np.all(np.isfinite(g)):
        raise SelectionError("qkv gradient is not finite")
    return (g.reshape(num_heads, -1) ** 2).sum(axis=1)


def select_heads(scores, k: int) -> list[int]:
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= scores.size:
        raise SelectionError(f"k={k} outside [1, {scores.size}]")
    return sorted(int(i) for i in _top_indices(scores, k))


def fc1_budget(sparsity: float, d_ff: int, width: int) -> int:
    return int(math.floor(sparsity * d_ff * width + 1e-9))


def fc1_mask(grad_fc1, sparsity: float) -> np.ndarray:
    """Keep the largest squared fc1 gradients, a ``sparsity`` fraction of all entries."""
    if grad_fc1 is None:
        raise GradientStateError("no fc1 gradient available; run a backward pass first")
    g = np.asarray(grad_fc1, dtype=np.float64)
    if not 0 < sparsity <= 1:
        raise SelectionError(f"sparsity {sparsity} outside (0, 1]")
    count = fc1_budget(sparsity, *g.shape)
    if count == 0:
        raise SelectionError(f"sparsity {sparsity} selects no entries of a {g.shape[0]}x{g.shape[1]} matrix")
    mask = np.zeros(g.size, dtype=np.int8)
    mask[_top_indices((g**2).reshape(-1), count)] = 1
    return mask.reshape(g.shape)


@dataclass
class BlockSelection:
    heads: list[int]
    scores: np.ndarray
    fc1: np.ndarray | None  # binary [d_ff, D], None when fc1 is not adapted


@dataclass
class SelectionPlan:
    top_k: int
    sparsity: float
    blocks: list[BlockSelection] = field(default_factory=list)

    def qkv_row_mask(self, block: int, num_heads: int, head_dim: int) -> np.ndarray:
        m = np.zeros(3 * num_heads * head_dim, dtype=np.int8)
        for h in self.blocks[block].heads:
            m[3 * h * head_dim : 3 * (h + 1) * head_dim] = 1
        return m

    def report(self) -> str:
        lines = [f"selection plan: top_k={self.top_k} fc1_sparsity={self.sparsity:g}"]
        for i, b in enumerate(self.blocks):
            density = float(b.fc1.mean()) if b.fc1 is not None else 0.0
            scores = " ".join(f"{s:.4e}" for s in b.scores)
            lines.append(f"block {i}: heads={b.heads} fc1_density={density:.4f} scores=[{scores}]")
        return "\n".join(lines) + "\n"

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(struct.pack("<Id I", self.top_k, self.sparsity, len(self.blocks)))
        for b in self.blocks:
            out.write(struct.pack(f"<I{len(b.heads)}I", len(b.heads), *b.heads))
            out.write(struct.pack(f"<I{len(b.scores)}d", len(b.scores), *b.scores))
            if b.fc1 is None:
                out.write(struct.pack("<II", 0, 0))
            else:
                out.write(struct.pack("<II", *b.fc1.shape))
                out.write(np.packbits(b.fc1.reshape(-1).astype(np.uint8)).tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SelectionPlan":
        r = io.BytesIO(buf)

        def unpack(fmt):
            size = struct.calcsize(fmt)
            chunk = r.read(size)
            if len(chunk) != size:
                raise SelectionError("truncated selection plan")
            return struct.unpack(fmt, chunk)

        top_k, sparsity, nb = unpack("<Id I")
        plan = cls(top_k, sparsity)
        for _ in range(nb):
            (nh,) = unpack("<I")
            heads = list(unpack(f"<{nh}I"))
            (ns,) = unpack("<I")
            scores = np.array(unpack(f"<{ns}d"))
            rows, cols = unpack("<II")
            fc1 = None
            if rows:
                nbytes = (rows * cols + 7) // 8
                bits = np.unpackbits(np.frombuffer(r.read(nbytes), dtype=np.uint8))[: rows * cols]
                fc1 = bits.astype(np.int8).reshape(rows, cols)
            plan.blocks.append(BlockSelection(heads, scores, fc1))
        return plan

    def __eq__(self, other):
        if not isinstance(other, SelectionPlan) or len(self.blocks) != len(other.blocks):
            return False
        if (self.top_k, self.sparsity) != (other.top_k, other.sparsity):
            return False
        for a, b in zip(self.blocks, other.blocks):
            if a.heads != b.heads or not np.array_equal(a.scores, b.scores):
                return False
            if (a.fc1 is None) != (b.fc1 is None) or (a.fc1 is not None and not np.array_equal(a.fc1, b.fc1)):
                return False
        return True


def accumulate_gradients(model, dataset, params, batch_size: int, weight_fn=None) -> int:
    """One pass over ``dataset`` in order, summing CLIP-loss gradients into ``params``; no update.

    Returns the number of batches processed.
    """
    from .train import clip_loss
    from . import numcore as nc

    n = len(dataset)
    if n == 0:
        raise SelectionError("cannot select from an empty dataset")
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    text = model.encode_texts(dataset.prompts()).data
    batches = 0
    try:
        for s in range(0, n, batch_size):
            sl = slice(s, s + batch_size)
            img = model.encode_images(dataset.images[sl], weight_fn)
            loss = clip_loss(img, nc.Tensor(text[dataset.labels[sl]]), model.temperature)
            if loss.requires_grad:
                nc.backward(loss)
            batches += 1
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag
    return batches


def build_selection_plan(model, dataset, top_k: int, sparsity: float | None, batch_size: int = 16) -> SelectionPlan:
    """Score heads and fc1 entries from one full-dataset gradient pass.

    ``top_k=0`` skips head selection and ``sparsity=None`` skips the fc1
    mask.  Gradients are cleared again before returning.
    """
    cfg = model.cfg
    if top_k and not 1 <= top_k <= cfg.heads:
        raise SelectionError(f"top_k={top_k} outside [1, {cfg.heads}]")
    params = []
    for b in model.blocks:
        if top_k:
            params.append(b.W_qkv)
        if sparsity is not None:
            params.append(b.W_fc1)
    accumulate_gradients(model, dataset, params, batch_size)
    plan = SelectionPlan(top_k, 0.0 if sparsity is None else sparsity)
    try:
        for b in model.blocks:
            if top_k:
                scores = head_scores(b.W_qkv.grad, cfg.heads)
                heads = select_heads(scores, top_k)
            else:
                scores, heads = np.zeros(cfg.heads), []
            mask = fc1_mask(b.W_fc1.grad, sparsity) if sparsity is not None else None
            plan.blocks.append(BlockSelection(heads, scores, mask))
    finally:
        for p in params:
            p.grad = None
    return plan
