"""Toy CLIP-style dual encoder: a pre-LN vision transformer and a frozen bag-of-words text tower."""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import numcore as nc
from .numcore import DimensionError, Tensor

# weight hook: (block index, matrix name, stored weight) -> weight used in the forward pass
WeightFn = Callable[[int, str, Tensor], Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    width: int = 64           # D
    heads: int = 8            # H
    layers: int = 4           # L
    d_ff: int = 256           # rows of fc1
    patch_size: int = 4
    image_size: int = 32
    channels: int = 3
    vocab_size: int = 16
    max_tokens: int = 8
    embed_dim: int = 64
    temperature: float = 1 / 0.07
    init_std: float = 0.02

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name not in ("temperature", "init_std") and v < 1:
                raise ValueError(f"{f.name} must be >= 1, got {v}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1


class TransformerBlock:
    """One pre-LN block.

    ``W_qkv`` rows are grouped per head: rows ``[3*i*Dh, 3*(i+1)*Dh)`` hold
    head i's query, key and value projections in that order.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        D, s = cfg.width, cfg.init_std
        self.cfg = cfg
        self.W_qkv = Tensor(rng.normal(0, s, (3 * D, D)))
        self.W_o = Tensor(rng.normal(0, s, (D, D)))
        self.W_fc1 = Tensor(rng.normal(0, s, (cfg.d_ff, D)))
        self.b_fc1 = Tensor(np.zeros(cfg.d_ff))
        self.W_fc2 = Tensor(rng.normal(0, s, (D, cfg.d_ff)))
        self.b_fc2 = Tensor(np.zeros(D))
        self.ln1_g, self.ln1_b = Tensor(np.ones(D)), Tensor(np.zeros(D))
        self.ln2_g, self.ln2_b = Tensor(np.ones(D)), Tensor(np.zeros(D))

    PARAMS = ("W_qkv", "W_o", "W_fc1", "b_fc1", "W_fc2", "b_fc2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for n in self.PARAMS:
            yield n, getattr(self, n)

    def head_rows(self, head: int) -> slice:
        dh = self.cfg.head_dim
        return slice(3 * head * dh, 3 * (head + 1) * dh)


def self_attention(block: TransformerBlock, Z: Tensor, W_qkv: Tensor | None = None, W_o: Tensor | None = None) -> Tensor:
    """Multi-head self-attention over the last two axes of ``Z`` (``[..., N, D]``)."""
    cfg = block.cfg
    D, H, dh = cfg.width, cfg.heads, cfg.head_dim
    if Z.ndim < 2 or Z.shape[-1] != D:
        raise DimensionError(f"self_attention: expected [..., N, {D}], got {Z.shape}")
    W_qkv = block.W_qkv if W_qkv is None else W_qkv
    W_o = block.W_o if W_o is None else W_o
    lead, N = Z.shape[:-2], Z.shape[-2]
    nl = len(lead)
    qkv = nc.matmul(Z, nc.transpose(W_qkv))                       # [..., N, 3D]
    qkv = nc.reshape(qkv, lead + (N, H, 3, dh))
    qkv = nc.transpose(qkv, tuple(range(nl)) + (nl + 2, nl + 1, nl, nl + 3))  # [..., 3, H, N, dh]
    q, k, v = (nc.select(qkv, i, axis=nl) for i in range(3))
    att = nc.softmax_rows(nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / math.sqrt(dh)))
    heads = nc.matmul(att, v)                                      # [..., H, N, dh]
    heads = nc.transpose(heads, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    heads = nc.reshape(heads, lead + (N, H * dh))                  # Concat[SA_1..SA_H]
    return nc.matmul(heads, W_o)


def _identity(_block: int, _name: str, w: Tensor) -> Tensor:
    return w


def block_forward(block: TransformerBlock, x: Tensor, index: int = 0, weight_fn: WeightFn | None = None) -> Tensor:
    wf = weight_fn or _identity
    h = nc.layernorm(x, block.ln1_g, block.ln1_b)
    x = nc.add(x, self_attention(block, h, wf(index, "qkv", block.W_qkv), wf(index, "o", block.W_o)))
    h = nc.layernorm(x, block.ln2_g, block.ln2_b)
    h = nc.gelu(nc.add(nc.matmul(h, nc.transpose(wf(index, "fc1", block.W_fc1))), block.b_fc1))
    h = nc.add(nc.matmul(h, nc.transpose(wf(index, "fc2", block.W_fc2))), block.b_fc2)
    return nc.add(x, h)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, C, W, W]`` -> ``[B, P, C*patch*patch]`` in row-major patch order."""
    B, C, W, _ = images.shape
    g = W // patch
    x = images.reshape(B, C, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, g * g, C * patch * patch)


class DualEncoder:
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        D, s = cfg.width, cfg.init_std
        pdim = cfg.channels * cfg.patch_size**2
        self.patch_W = Tensor(rng.normal(0, s, (D, pdim)))
        self.patch_b = Tensor(np.zeros(D))
        self.cls = Tensor(rng.normal(0, s, (D,)))
        self.pos = Tensor(rng.normal(0, s, (cfg.num_tokens, D)))
        self.blocks = [TransformerBlock(cfg, rng) for _ in range(cfg.layers)]
        self.ln_post_g, self.ln_post_b = Tensor(np.ones(D)), Tensor(np.zeros(D))
        self.proj = Tensor(rng.normal(0, s, (cfg.embed_dim, D)))
        # text tower: frozen, never handed to an optimizer
        self.tok_emb = Tensor(rng.normal(0, 1.0, (cfg.vocab_size, D)))
        self.text_proj = Tensor(rng.normal(0, 1.0 / math.sqrt(D), (cfg.embed_dim, D)))
        self.temperature = cfg.temperature

    # ------------------------------------------------------------ parameters
    def vision_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("patch_W", self.patch_W), ("patch_b", self.patch_b), ("cls", self.cls), ("pos", self.pos)]
        for i, b in enumerate(self.blocks):
            out += [(f"blocks.{i}.{n}", t) for n, t in b.named_parameters()]
        out += [("ln_post_g", self.ln_post_g), ("ln_post_b", self.ln_post_b), ("proj", self.proj)]
        return out

    def text_parameters(self) -> list[tuple[str, Tensor]]:
        return [("tok_emb", self.tok_emb), ("text_proj", self.text_proj)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.vision_parameters() + self.text_parameters()

    def layernorm_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.vision_parameters() if n.split(".")[-1].startswith("ln")]

    def freeze(self):
        for _, t in self.named_parameters():
            t.requires_grad = False
            t.grad = None

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_snapshot(self, snap: dict[str, np.ndarray]):
        for n, t in self.named_parameters():
            t.data = snap[n].copy()

    def copy(self) -> "DualEncoder":
        other = DualEncoder(self.cfg)
        other.load_snapshot(self.snapshot())
        return other

    # ------------------------------------------------------------ forward
    def encode_images(self, images: np.ndarray, weight_fn: WeightFn | None = None) -> Tensor:
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        expect = (cfg.channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expect:
            raise DimensionError(f"expected images of shape [B, {expect[0]}, {expect[1]}, {expect[2]}], got {images.shape}")
        B = images.shape[0]
        x = nc.matmul(Tensor(patchify(images, cfg.patch_size)), nc.transpose(self.patch_W))
        x = nc.add(x, self.patch_b)
        cls = nc.expand(nc.reshape(self.cls, (1, cfg.width)), B)
        x = nc.add(nc.concat([cls, x], axis=1), self.pos)
        for i, block in enumerate(self.blocks):
            x = block_forward(block, x, i, weight_fn)
        x = nc.layernorm(nc.select(x, 0, axis=1), self.ln_post_g, self.ln_post_b)
        return nc.l2_normalize(nc.matmul(x, nc.transpose(self.proj)))

    def encode_image(self, image: np.ndarray, weight_fn: WeightFn | None = None) -> Tensor:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3:
            raise DimensionError(f"expected a single [C, W, W] image, got {image.shape}")
        return nc.reshape(self.encode_images(image[None], weight_fn), (self.cfg.embed_dim,))

    def encode_texts(self, token_lists) -> Tensor:
        """Mean of non-pad token embeddings, projected and normalised; no gradient."""
        rows = []
        for ids in token_lists:
            ids = [int(i) for i in ids]
            bad = [i for i in ids if not 0 <= i < self.cfg.vocab_size]
            if bad:
                raise ValueError(f"token id {bad[0]} outside vocabulary of {self.cfg.vocab_size}")
            real = [i for i in ids if i != 0]
            rows.append(self.tok_emb.data[real].mean(axis=0) if real else self.tok_emb.data[0])
        if not rows:
            return Tensor(np.zeros((0, self.cfg.embed_dim)))
        e = np.stack(rows) @ self.text_proj.data.T
        return Tensor(e / np.linalg.norm(e, axis=1, keepdims=True))

    def encode_text(self, token_ids) -> Tensor:
        return Tensor(self.encode_texts([token_ids]).data[0])


def encode_image(model: DualEncoder, image, weight_fn: WeightFn | None = None) -> Tensor:
    return model.encode_image(image, weight_fn)


def encode_text(model: DualEncoder, token_ids) -> Tensor:
    return model.encode_text(token_ids)


def classify(model: DualEncoder, images: np.ndarray, prompt_emb: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Zero-shot predictions for a stack of images against precomputed prompt embeddings."""
    preds = []
    for s in range(0, len(images), batch_size):
        img = model.encode_images(images[s : s + batch_size]).data
        preds.append(np.argmax(img @ prompt_emb.T, axis=1))  # argmax keeps the lowest index on ties
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def zero_shot_classify(model: DualEncoder, image, class_prompts) -> int:
    if len(class_prompts) == 0:
        raise ValueError("zero_shot_classify needs at least one class prompt")
    emb = model.encode_texts(class_prompts).data
    return int(classify(model, np.asarray(image, dtype=np.float64)[None], emb)[0])


def accuracy(model: DualEncoder, images: np.ndarray, labels: np.ndarray, prompt_emb: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(classify(model, images, prompt_emb) == labels))


# ------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"LSCK"
CKPT_VERSION = 1
_INT_FIELDS = [f.name for f in fields(EncoderConfig) if f.type in ("int", int)]
_FLOAT_FIELDS = [f.name for f in fields(EncoderConfig) if f.type in ("float", float)]


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: DualEncoder, path: str | Path, plan_blob: bytes = b""):
    """Write config, every parameter in declaration order, and an optional opaque plan section."""
    cfg = asdict(model.cfg)
    out = bytearray(CKPT_MAGIC) + struct.pack("<I", CKPT_VERSION)
    out += struct.pack(f"<{len(_INT_FIELDS)}I", *(cfg[n] for n in _INT_FIELDS))
    out += struct.pack(f"<{len(_FLOAT_FIELDS)}d", *(cfg[n] for n in _FLOAT_FIELDS))
    params = model.named_parameters()
    out += struct.pack("<I", len(params))
    for _, t in params:
        out += struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape)
        out += t.data.astype("<f8").tobytes()
    out += struct.pack("<I", len(plan_blob)) + plan_blob
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[DualEncoder, bytes]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: need {pos + n} bytes, have {len(buf)}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise CheckpointError("bad magic: not an LSCK checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    ints = struct.unpack(f"<{len(_INT_FIELDS)}I", take(4 * len(_INT_FIELDS)))
    floats = struct.unpack(f"<{len(_FLOAT_FIELDS)}d", take(8 * len(_FLOAT_FIELDS)))
    cfg = EncoderConfig(**dict(zip(_INT_FIELDS, ints)), **dict(zip(_FLOAT_FIELDS, floats)))
    model = DualEncoder(cfg)
    params = model.named_parameters()
    (count,) = struct.unpack("<I", take(4))
    if count != len(params):
        raise CheckpointError(f"checkpoint holds {count} tensors, model expects {len(params)}")
    for name, t in params:
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if tuple(shape) != t.shape:
            raise CheckpointError(f"{name}: stored shape {tuple(shape)} != expected {t.shape}")
        t.data = np.frombuffer(take(8 * t.size), dtype="<f8").reshape(shape).astype(np.float64)
    (plen,) = struct.unpack("<I", take(4))
    return model, take(plen)
