"""Synthetic image-caption datasets, a closed-vocabulary tokenizer and the LSDS file format.

LSDS layout (all integers little-endian)::

    b"LSDS" | version u32 | channels u32 | image_size u32 | max_tokens u32
    caption template: len u16 + utf-8 bytes ("{}" marks the class name)
    vocab:   count u32, then per word: len u16 + utf-8 bytes
    classes: count u32, then per class: len u16 + utf-8 name
    samples: count u32, then per sample:
             class id u16 | n tokens u16 | tokens u16 * n | pixels f64 * (C*W*W)
    crc32 u32 over every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LSDS"
VERSION = 1
PAD = "<pad>"

SHAPES = ("square", "circle", "cross", "hstripes", "vstripes", "triangle", "ring", "diamond")
COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "magenta": (0.9, 0.15, 0.85),
    "cyan": (0.1, 0.85, 0.9),
}
DEFAULT_TEMPLATE = "a photo of a {}"


class DatasetFormatError(ValueError):
    """Base class for LSDS parse failures."""


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedError(DatasetFormatError):
    pass


class CorruptPayloadError(DatasetFormatError):
    pass


def all_descriptors() -> list[tuple[str, str]]:
    """Every (color, shape) pair in canonical class order.

    Consecutive runs of eight classes cover every shape once, with the
    color assignment rotating between runs.
    """
    colors = list(COLORS)
    return [(colors[(s + j) % len(colors)], SHAPES[s]) for j in range(len(colors)) for s in range(len(SHAPES))]


def class_name(descriptor: tuple[str, str]) -> str:
    return f"{descriptor[0]} {descriptor[1]}"


# ------------------------------------------------------------------ tokenizer

class Tokenizer:
    """Whitespace tokenizer over a frozen vocabulary; id 0 is padding."""

    def __init__(self, vocab: list[str], max_tokens: int = 8):
        if not vocab or vocab[0] != PAD:
            raise ValueError(f"vocabulary must start with {PAD!r}")
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary has duplicate words")
        self.vocab = list(vocab)
        self.max_tokens = max_tokens
        self._ids = {w: i for i, w in enumerate(self.vocab)}

    @classmethod
    def for_template(cls, template: str = DEFAULT_TEMPLATE, max_tokens: int = 8) -> "Tokenizer":
        words = [PAD]
        for w in template.replace("{}", " ").lower().split() + list(COLORS) + list(SHAPES):
            if w not in words:
                words.append(w)
        return cls(words, max_tokens)

    def __len__(self):
        return len(self.vocab)

    def encode(self, caption: str) -> list[int]:
        ids = []
        for w in caption.lower().split():
            if w not in self._ids:
                raise ValueError(f"unknown word {w!r}")
            ids.append(self._ids[w])
        ids = ids[: self.max_tokens]
        return ids + [0] * (self.max_tokens - len(ids))

    def decode(self, ids) -> str:
        return " ".join(self.vocab[i] for i in ids if i != 0)


def tokenize(caption: str, tokenizer: Tokenizer) -> list[int]:
    return tokenizer.encode(caption)


def detokenize(ids, tokenizer: Tokenizer) -> str:
    return tokenizer.decode(ids)


# ------------------------------------------------------------------ generation

@dataclass
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 40
    image_size: int = 32
    noise_std: float = 0.05
    seed: int = 0
    first_class: int = 0
    jitter: int = 0
    background: float = 0.1
    template: str = DEFAULT_TEMPLATE
    max_tokens: int = 8
    descriptors: list[tuple[str, str]] | None = None

    def resolved_descriptors(self) -> list[tuple[str, str]]:
        if self.descriptors is not None:
            descs = [tuple(d) for d in self.descriptors]
        else:
            pool = all_descriptors()
            if self.first_class < 0 or self.first_class + self.num_classes > len(pool):
                raise ValueError(
                    f"classes [{self.first_class}, {self.first_class + self.num_classes}) exceed the {len(pool)} available"
                )
            descs = pool[self.first_class : self.first_class + self.num_classes]
        if len(set(descs)) != len(descs):
            raise ValueError("class descriptors must be pairwise distinct")
        for color, shape in descs:
            if color not in COLORS or shape not in SHAPES:
                raise ValueError(f"unknown descriptor ({color}, {shape})")
        return descs


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, W, W]
    labels: np.ndarray  # [n] class index into class_names
    tokens: list[list[int]]
    class_names: list[str]
    vocab: list[str]
    max_tokens: int
    template: str = DEFAULT_TEMPLATE
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.vocab, self.max_tokens)

    def prompts(self) -> list[list[int]]:
        tok = self.tokenizer
        return [tok.encode(self.template.format(c)) for c in self.class_names]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.images[idx], self.labels[idx], [self.tokens[i] for i in idx],
            self.class_names, self.vocab, self.max_tokens, self.template, dict(self.meta),
        )

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and np.array_equal(self.labels, other.labels)
            and self.tokens == other.tokens
            and self.class_names == other.class_names
            and self.vocab == other.vocab
            and self.max_tokens == other.max_tokens
            and self.template == other.template
        )


def shape_mask(shape: str, size: int, dx: int = 0, dy: int = 0) -> np.ndarray:
    """Boolean ``size x size`` footprint of a shape, optionally shifted."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    y, x = (yy - c - dy) / size, (xx - c - dx) / size
    r = np.sqrt(x**2 + y**2)
    if shape == "square":
        m = (np.abs(x) < 0.3) & (np.abs(y) < 0.3)
    elif shape == "circle":
        m = r < 0.32
    elif shape == "cross":
        m = ((np.abs(x) < 0.09) & (np.abs(y) < 0.38)) | ((np.abs(y) < 0.09) & (np.abs(x) < 0.38))
    elif shape == "hstripes":
        m = (np.abs(x) < 0.4) & (np.abs(y) < 0.4) & (np.floor((y + 0.5) * 6) % 2 == 0)
    elif shape == "vstripes":
        m = (np.abs(x) < 0.4) & (np.abs(y) < 0.4) & (np.floor((x + 0.5) * 6) % 2 == 0)
    elif shape == "triangle":
        m = (y < 0.3) & (y > -0.35) & (np.abs(x) < (y + 0.35) * 0.6)
    elif shape == "ring":
        m = (r < 0.38) & (r > 0.22)
    elif shape == "diamond":
        m = np.abs(x) + np.abs(y) < 0.38
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def render(descriptor: tuple[str, str], size: int, rng: np.random.Generator | None = None,
           noise_std: float = 0.0, jitter: int = 0, background: float = 0.1) -> np.ndarray:
    color, shape = descriptor
    dx = dy = 0
    if jitter and rng is not None:
        dx, dy = rng.integers(-jitter, jitter + 1, size=2)
    m = shape_mask(shape, size, int(dx), int(dy))
    img = np.full((3, size, size), background)
    for ch, v in enumerate(COLORS[color]):
        img[ch][m] = v
    if noise_std > 0 and rng is not None:
        img = img + rng.normal(0.0, noise_std, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(spec: SyntheticSpec) -> Dataset:
    descs = spec.resolved_descriptors()
    tok = Tokenizer.for_template(spec.template, spec.max_tokens)
    rng = np.random.default_rng(spec.seed)
    names = [class_name(d) for d in descs]
    images, labels, tokens = [], [], []
    for ci, d in enumerate(descs):
        ids = tok.encode(spec.template.format(names[ci]))
        for _ in range(spec.samples_per_class):
            images.append(render(d, spec.image_size, rng, spec.noise_std, spec.jitter, spec.background))
            labels.append(ci)
            tokens.append(list(ids))
    shape = (0, 3, spec.image_size, spec.image_size)
    return Dataset(
        np.stack(images) if images else np.zeros(shape),
        np.asarray(labels, dtype=np.int64), tokens, names, tok.vocab, spec.max_tokens, spec.template,
    )


# ------------------------------------------------------------------ LSDS file format

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def dumps(ds: Dataset) -> bytes:
    n, c, w, _ = ds.images.shape
    out = bytearray(MAGIC)
    out += struct.pack("<IIII", VERSION, c, w, ds.max_tokens)
    out += _pack_str(ds.template)
    out += struct.pack("<I", len(ds.vocab))
    for word in ds.vocab:
        out += _pack_str(word)
    out += struct.pack("<I", len(ds.class_names))
    for name in ds.class_names:
        out += _pack_str(name)
    out += struct.pack("<I", n)
    pix = ds.images.astype("<f8")
    for i in range(n):
        toks = ds.tokens[i]
        out += struct.pack(f"<HH{len(toks)}H", int(ds.labels[i]), len(toks), *toks)
        out += pix[i].tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise TruncatedError(
                f"truncated while reading {what}: expected at least {end} bytes, got {len(self.buf)}"
            )
        chunk = self.buf[self.pos : end]
        self.pos = end
        return chunk

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        raw = self.take(self.u16(what), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptPayloadError(f"{what} is not valid utf-8") from e


def loads(buf: bytes) -> Dataset:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError("bad magic: not an LSDS dataset file")
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported LSDS version {version} (expected {VERSION})")
    c, w, max_tokens = r.u32("channels"), r.u32("image size"), r.u32("max tokens")
    if c == 0 or w == 0 or max_tokens == 0:
        raise CorruptPayloadError(f"degenerate header: channels={c} size={w} max_tokens={max_tokens}")
    template = r.string("caption template")
    if template.count("{}") != 1:
        raise CorruptPayloadError("caption template must contain exactly one {} slot")
    # every count is bounded by the bytes that remain, so corrupt counts cannot trigger huge allocations
    n_vocab = r.u32("vocab count")
    if n_vocab * 2 > len(buf) - r.pos:
        raise TruncatedError(f"vocab count {n_vocab} needs at least {r.pos + 2 * n_vocab} bytes, got {len(buf)}")
    vocab = [r.string("vocab word") for _ in range(n_vocab)]
    n_classes = r.u32("class count")
    if n_classes * 2 > len(buf) - r.pos:
        raise TruncatedError(f"class count {n_classes} needs at least {r.pos + 2 * n_classes} bytes, got {len(buf)}")
    names = [r.string("class name") for _ in range(n_classes)]
    n = r.u32("sample count")
    pix_bytes = 8 * c * w * w
    min_len = r.pos + n * (4 + pix_bytes) + 4
    if min_len > len(buf):
        raise TruncatedError(f"{n} samples need at least {min_len} bytes, got {len(buf)}")
    labels = np.zeros(n, dtype=np.int64)
    tokens: list[list[int]] = []
    images = np.zeros((n, c, w, w))
    for i in range(n):
        label, ntok = struct.unpack("<HH", r.take(4, "sample header"))
        if label >= n_classes:
            raise CorruptPayloadError(f"sample {i}: class id {label} >= {n_classes}")
        if ntok > max_tokens:
            raise CorruptPayloadError(f"sample {i}: {ntok} tokens exceeds max_tokens {max_tokens}")
        toks = list(struct.unpack(f"<{ntok}H", r.take(2 * ntok, "tokens")))
        if any(t >= n_vocab for t in toks):
            raise CorruptPayloadError(f"sample {i}: token id outside vocabulary of {n_vocab}")
        labels[i] = label
        tokens.append(toks)
        images[i] = np.frombuffer(r.take(pix_bytes, "pixels"), dtype="<f8").reshape(c, w, w)
    body_end = r.pos
    crc = r.u32("checksum")
    if r.pos != len(buf):
        raise CorruptPayloadError(f"{len(buf) - r.pos} trailing bytes after checksum")
    if zlib.crc32(buf[:body_end]) != crc:
        raise CorruptPayloadError("checksum mismatch")
    if not vocab or vocab[0] != PAD or len(set(vocab)) != len(vocab):
        raise CorruptPayloadError("vocabulary is malformed")
    return Dataset(images, labels, tokens, names, vocab, max_tokens, template)


def write_dataset(ds: Dataset, path: str | Path):
    Path(path).write_bytes(dumps(ds))


def read_dataset(path: str | Path) -> Dataset:
    return loads(Path(path).read_bytes())
