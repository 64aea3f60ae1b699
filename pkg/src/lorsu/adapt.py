"""Fine-tuning strategies behind one interface: what trains, how weights are formed, how grads are masked.

All strategies share the training loop in :mod:`lorsu.train`; they differ in
the tensors handed to the optimiser (``trainable``), the forward-time weight
hook (``weight_fn``), an optional loss penalty and gradient masking.
"""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .encoder import DualEncoder, EncoderConfig
from .numcore import Tensor
from .select import SelectionPlan, accumulate_gradients, build_selection_plan, fc1_budget

STRATEGIES = ("frozen", "ln", "fft", "fewc", "lora", "spu", "lorsu")
MASK_MODES = ("delta", "grad", "per_head")


class StrategyStateError(RuntimeError):
    pass


class AdapterState:
    """LoRA factors on one block's concatenated qkv matrix, restricted to the chosen heads.

    ``mode`` controls how the restriction is enforced:

    * ``delta``: the product ``A @ B`` is row-masked in the forward pass, so
      unselected rows never move;
    * ``grad``: only A's gradient rows are masked; B is shared, so unselected
      rows drift once B becomes non-zero;
    * ``per_head``: separate factor pairs for each selected head's q, k and v.
    """

    def __init__(self, cfg: EncoderConfig, heads: list[int], rank: int, rng: np.random.Generator,
                 mode: str = "delta", init_std: float = 0.02):
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        if mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {mode!r}")
        D, dh = cfg.width, cfg.head_dim
        self.cfg, self.heads, self.rank, self.mode = cfg, sorted(heads), rank, mode
        self.row_mask = np.zeros(3 * D, dtype=np.int8)
        for h in self.heads:
            self.row_mask[3 * h * dh : 3 * (h + 1) * dh] = 1
        if mode == "per_head":
            self.factors = {
                (h, a): (Tensor(rng.normal(0, init_std, (dh, rank))), Tensor(np.zeros((rank, D))))
                for h in self.heads for a in range(3)
            }
        else:
            self.A = Tensor(rng.normal(0, init_std, (3 * D, rank)))
            self.B = Tensor(np.zeros((rank, D)))
            self._mask_full = Tensor(np.repeat(self.row_mask[:, None].astype(np.float64), D, axis=1))

    def parameters(self) -> list[tuple[str, Tensor]]:
        if self.mode == "per_head":
            out = []
            for (h, a), (A, B) in self.factors.items():
                out += [(f"A[{h},{'qkv'[a]}]", A), (f"B[{h},{'qkv'[a]}]", B)]
            return out
        return [("A", self.A), ("B", self.B)]

    def delta(self) -> Tensor:
        D, dh = self.cfg.width, self.cfg.head_dim
        if self.mode == "per_head":
            zero = Tensor(np.zeros((dh, D)))
            parts = []
            for h in range(self.cfg.heads):
                for a in range(3):
                    f = self.factors.get((h, a))
                    parts.append(nc.matmul(*f) if f else zero)
            return nc.concat(parts, axis=0)
        ab = nc.matmul(self.A, self.B)
        return nc.mul(ab, self._mask_full) if self.mode == "delta" else ab

    def delta_array(self) -> np.ndarray:
        if self.mode == "per_head":
            return self.delta().data
        ab = self.A.data @ self.B.data
        return ab * self.row_mask[:, None] if self.mode == "delta" else ab

    def mask_gradients(self):
        if self.mode == "grad" and self.A.grad is not None:
            self.A.grad = self.A.grad * self.row_mask[:, None]


def effective_qkv(block, adapter: AdapterState | None) -> Tensor:
    if adapter is None:
        return block.W_qkv
    return nc.add(block.W_qkv, adapter.delta())


def ewc_penalty(params: list[Tensor], anchor: list[np.ndarray], fisher: list[np.ndarray], lam: float) -> Tensor:
    """``lam/2 * sum_j F_j (theta_j - theta*_j)^2`` as a differentiable scalar."""
    if not (len(params) == len(anchor) == len(fisher)):
        raise nc.DimensionError("ewc_penalty: params, anchor and fisher lists differ in length")
    total = None
    for p, a, f in zip(params, anchor, fisher):
        if p.shape != np.shape(a) or p.shape != np.shape(f):
            raise nc.DimensionError(f"ewc_penalty: shapes {p.shape}, {np.shape(a)}, {np.shape(f)} differ")
        d = nc.sub(p, Tensor(a))
        term = nc.sum(nc.mul(nc.mul(d, d), Tensor(f)))
        total = term if total is None else nc.add(total, term)
    if total is None:
        return Tensor(0.0)
    return nc.scale(total, lam / 2.0)


class Strategy:
    key = "frozen"
    weight_fn = None

    def __init__(self):
        self._trainable: list[tuple[str, Tensor]] = []

    def begin_session(self, model: DualEncoder, data, batch_size: int, rng: np.random.Generator):
        model.freeze()
        self._trainable = self._select_trainable(model, data, batch_size, rng)
        for _, t in self._trainable:
            t.requires_grad = True

    def _select_trainable(self, model, data, batch_size, rng) -> list[tuple[str, Tensor]]:
        return []

    def trainable(self) -> list[tuple[str, Tensor]]:
        return list(self._trainable)

    def penalty(self, model) -> Tensor | None:
        return None

    def mask_gradients(self):
        pass

    def end_session(self, model: DualEncoder, data, batch_size: int):
        model.freeze()
        self._trainable = []

    def trainable_count(self, cfg: EncoderConfig) -> int:
        return 0

    def updatable_coordinates(self) -> int:
        """Probe the live trainable view: coordinates that survive gradient masking of a dense gradient."""
        saved = [t.grad for _, t in self._trainable]
        for _, t in self._trainable:
            t.grad = np.ones_like(t.data)
        self.mask_gradients()
        count = int(sum(np.count_nonzero(t.grad) for _, t in self._trainable))
        for (_, t), g in zip(self._trainable, saved):
            t.grad = g
        return count

    def describe(self) -> dict:
        return {"strategy": self.key}


class Frozen(Strategy):
    key = "frozen"


class LayerNormOnly(Strategy):
    key = "ln"

    def _select_trainable(self, model, data, batch_size, rng):
        return model.layernorm_parameters()

    def trainable_count(self, cfg):
        return 2 * cfg.width * (2 * cfg.layers + 1)


def vision_parameter_count(cfg: EncoderConfig) -> int:
    D, f = cfg.width, cfg.d_ff
    per_block = 3 * D * D + D * D + f * D + f + D * f + D + 4 * D
    stem = D * cfg.channels * cfg.patch_size**2 + D + D + cfg.num_tokens * D
    return stem + cfg.layers * per_block + 2 * D + cfg.embed_dim * D


class FullFineTune(Strategy):
    key = "fft"

    def _select_trainable(self, model, data, batch_size, rng):
        return model.vision_parameters()

    def trainable_count(self, cfg):
        return vision_parameter_count(cfg)


class FullEWC(FullFineTune):
    key = "fewc"

    def __init__(self, ewc_lambda: float = 100.0):
        super().__init__()
        self.lam = ewc_lambda
        self.anchor: list[np.ndarray] | None = None
        self.fisher: list[np.ndarray] | None = None

    def penalty(self, model):
        if self.anchor is None:
            return None
        return ewc_penalty([t for _, t in self._trainable], self.anchor, self.fisher, self.lam)

    def end_session(self, model, data, batch_size):
        params = [t for _, t in model.vision_parameters()]
        fisher = empirical_fisher(model, data, params, batch_size)
        self.fisher = fisher if self.fisher is None else [a + b for a, b in zip(self.fisher, fisher)]
        self.anchor = [t.data.copy() for t in params]
        super().end_session(model, data, batch_size)

    def describe(self):
        return {"strategy": self.key, "ewc_lambda": self.lam}


def empirical_fisher(model, data, params: list[Tensor], batch_size: int) -> list[np.ndarray]:
    """Diagonal Fisher estimate: mean over mini-batches of squared CLIP-loss gradients."""
    model.freeze()
    fisher = [np.zeros_like(p.data) for p in params]
    count = 0
    for s in range(0, len(data), batch_size):
        chunk = data.subset(np.arange(s, min(s + batch_size, len(data))))
        accumulate_gradients(model, chunk, params, batch_size)
        for f, p in zip(fisher, params):
            if p.grad is not None:
                f += p.grad**2
            p.grad = None
        count += 1
    return [f / max(count, 1) for f in fisher]


LORA_TARGETS = ("qkv", "o", "fc1", "fc2")


def _lora_shape(cfg: EncoderConfig, name: str) -> tuple[int, int]:
    D = cfg.width
    return {"qkv": (3 * D, D), "o": (D, D), "fc1": (cfg.d_ff, D), "fc2": (D, cfg.d_ff)}[name]


class LoRAAll(Strategy):
    """Plain LoRA on every weight matrix of every block, merged after each session."""

    key = "lora"

    def __init__(self, rank: int = 3, init_std: float = 0.02):
        super().__init__()
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        self.rank, self.init_std = rank, init_std
        self.factors: dict[tuple[int, str], tuple[Tensor, Tensor]] = {}

    def _select_trainable(self, model, data, batch_size, rng):
        self.factors = {}
        out = []
        for i in range(model.cfg.layers):
            for name in LORA_TARGETS:
                rows, cols = _lora_shape(model.cfg, name)
                A = Tensor(rng.normal(0, self.init_std, (rows, self.rank)))
                B = Tensor(np.zeros((self.rank, cols)))
                self.factors[(i, name)] = (A, B)
                out += [(f"blocks.{i}.{name}.A", A), (f"blocks.{i}.{name}.B", B)]
        return out

    def weight_fn(self, block: int, name: str, w: Tensor) -> Tensor:
        f = self.factors.get((block, name))
        return w if f is None else nc.add(w, nc.matmul(*f))

    def end_session(self, model, data, batch_size):
        attr = {"qkv": "W_qkv", "o": "W_o", "fc1": "W_fc1", "fc2": "W_fc2"}
        for (i, name), (A, B) in self.factors.items():
            w = getattr(model.blocks[i], attr[name])
            w.data = w.data + A.data @ B.data
        self.factors = {}
        super().end_session(model, data, batch_size)

    def trainable_count(self, cfg):
        return self.rank * cfg.layers * sum(sum(_lora_shape(cfg, n)) for n in LORA_TARGETS)

    def describe(self):
        return {"strategy": self.key, "lora_rank": self.rank}


class SPU(Strategy):
    """Gradient-selected sparse updates of fc1 only."""

    key = "spu"

    def __init__(self, sparsity: float = 0.15):
        super().__init__()
        self.sparsity = sparsity
        self.plan: SelectionPlan | None = None

    def _plan(self, model, data, batch_size):
        return build_selection_plan(model, data, 0, self.sparsity, batch_size)

    def _select_trainable(self, model, data, batch_size, rng):
        self.plan = self._plan(model, data, batch_size)
        self._fc1 = [(b.W_fc1, sel.fc1) for b, sel in zip(model.blocks, self.plan.blocks)]
        return [(f"blocks.{i}.W_fc1", b.W_fc1) for i, b in enumerate(model.blocks)]

    def mask_gradients(self):
        if self.plan is None:
            raise StrategyStateError("no selection plan; begin_session was not called")
        for w, m in self._fc1:
            if w.grad is not None:
                w.grad = w.grad * m

    def trainable_count(self, cfg):
        return cfg.layers * fc1_budget(self.sparsity, cfg.d_ff, cfg.width)

    def describe(self):
        return {"strategy": self.key, "spu_sparsity": self.sparsity}


def lorsu_count(cfg: EncoderConfig, rank: int, sparsity: float) -> int:
    """``L * (r * (3D + D) + floor(sparsity * d_ff * D))``: shared qkv factors plus the fc1 budget."""
    return cfg.layers * (rank * (3 * cfg.width + cfg.width) + fc1_budget(sparsity, cfg.d_ff, cfg.width))


class LoRSU(SPU):
    """LoRA on the top-k gradient-scored heads of each block plus sparse fc1 updates."""

    key = "lorsu"

    def __init__(self, rank: int = 4, top_k_heads: int = 2, fc1_sparsity: float = 0.1,
                 mask_mode: str = "delta", init_std: float = 0.02):
        super().__init__(fc1_sparsity)
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        if mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {mask_mode!r}")
        self.rank, self.top_k, self.mask_mode, self.init_std = rank, top_k_heads, mask_mode, init_std
        self.adapters: list[AdapterState] = []

    def _plan(self, model, data, batch_size):
        return build_selection_plan(model, data, self.top_k, self.sparsity, batch_size)

    def _select_trainable(self, model, data, batch_size, rng):
        out = super()._select_trainable(model, data, batch_size, rng)
        self.adapters = [
            AdapterState(model.cfg, sel.heads, self.rank, rng, self.mask_mode, self.init_std)
            for sel in self.plan.blocks
        ]
        for i, ad in enumerate(self.adapters):
            out += [(f"blocks.{i}.qkv.{n}", t) for n, t in ad.parameters()]
        return out

    def weight_fn(self, block: int, name: str, w: Tensor) -> Tensor:
        if name != "qkv" or not self.adapters:
            return w
        return nc.add(w, self.adapters[block].delta())

    def mask_gradients(self):
        super().mask_gradients()
        for ad in self.adapters:
            ad.mask_gradients()

    def end_session(self, model, data, batch_size):
        for b, ad in zip(model.blocks, self.adapters):
            delta = ad.delta_array()
            if ad.mode == "grad":
                b.W_qkv.data = b.W_qkv.data + delta
            else:
                rows = ad.row_mask.astype(bool)
                merged = b.W_qkv.data.copy()
                merged[rows] = merged[rows] + delta[rows]
                b.W_qkv.data = merged
        self.adapters = []
        Strategy.end_session(self, model, data, batch_size)

    def trainable_count(self, cfg):
        fc1 = fc1_budget(self.sparsity, cfg.d_ff, cfg.width)
        rows = 3 * self.top_k * cfg.head_dim
        if self.mask_mode == "per_head":
            return cfg.layers * (3 * self.top_k * self.rank * (cfg.head_dim + cfg.width) + fc1)
        if self.mask_mode == "grad":
            # unselected rows of A are masked out of every update
            return cfg.layers * (self.rank * (rows + cfg.width) + fc1)
        return lorsu_count(cfg, self.rank, self.sparsity)

    def describe(self):
        return {"strategy": self.key, "rank": self.rank, "top_k_heads": self.top_k,
                "fc1_sparsity": self.sparsity, "mask_mode": self.mask_mode}


def make_strategy(key: str, rank: int = 4, top_k_heads: int = 2, fc1_sparsity: float = 0.1,
                  spu_sparsity: float = 0.15, lora_rank: int = 3, ewc_lambda: float = 100.0,
                  mask_mode: str = "delta") -> Strategy:
    if key == "frozen":
        return Frozen()
    if key == "ln":
        return LayerNormOnly()
    if key == "fft":
        return FullFineTune()
    if key == "fewc":
        return FullEWC(ewc_lambda)
    if key == "lora":
        return LoRAAll(lora_rank)
    if key == "spu":
        return SPU(spu_sparsity)
    if key == "lorsu":
        return LoRSU(rank, top_k_heads, fc1_sparsity, mask_mode)
    raise ValueError(f"unknown strategy {key!r}; expected one of {', '.join(STRATEGIES)}")


def trainable_count(strategy: Strategy, cfg: EncoderConfig) -> int:
    return strategy.trainable_count(cfg)
