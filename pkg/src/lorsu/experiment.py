"""Run configuration and the end-to-end continual-learning pipeline behind ``lorsu run``."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .adapt import MASK_MODES, STRATEGIES, make_strategy
from .dataio import Dataset, read_dataset
from .encoder import DualEncoder, EncoderConfig, load_checkpoint, save_checkpoint
from .harness import AccuracyMatrix, control_eval_set, make_splits, run_continual, summarize
from .train import TrainConfig, train_session

SCHEMA = "lorsu-results/1"
METRICS = ("TI", "CC", "ACC", "BWT")


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class RunConfig:
    strategy: str = "lorsu"
    rank: int = 4
    top_k_heads: int = 2
    fc1_sparsity: float = 0.1
    spu_sparsity: float = 0.15
    lora_rank: int = 3
    ewc_lambda: float = 100.0
    mask_mode: str = "delta"
    lr: float = 1e-5
    min_lr: float = 0.0
    warmup_fraction: float = 0.1
    epochs: int = 20
    batch: int = 16
    shots: int = 5
    sessions: int = 5
    seeds: list[int] = field(default_factory=lambda: [0])
    data: str = ""
    control: list[str] = field(default_factory=list)
    pretrain_data: str = ""
    pretrain_epochs: int = 30
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 32
    init_checkpoint: str = ""
    width: int = 64
    heads: int = 8
    layers: int = 4
    d_ff: int = 256
    patch_size: int = 4
    embed_dim: int = 64
    model_seed: int = 0
    out: str = "runs/out"

    # ---------------------------------------------------------- parsing
    @classmethod
    def parse_value(cls, key: str, raw: str):
        types = {f.name: f.type for f in fields(cls)}
        if key not in types:
            raise ConfigError(key, "unknown configuration key")
        t = types[key]
        raw = raw.strip()
        try:
            if t == "int":
                return int(raw)
            if t == "float":
                return float(raw)
            if t == "list[int]":
                return [int(x) for x in raw.replace(",", " ").split()]
            if t == "list[str]":
                return [x for x in raw.replace(",", " ").split()]
        except ValueError:
            raise ConfigError(key, f"cannot parse {raw!r} as {t}") from None
        return raw

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}", f"expected key = value, got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = cls.parse_value(k, v)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, overrides: dict) -> "RunConfig":
        d = asdict(self)
        for k, v in overrides.items():
            if v is None:
                continue
            d[k] = self.parse_value(k, v) if isinstance(v, str) else v
        return RunConfig(**d)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}")
        return "\n".join(lines) + "\n"

    # ---------------------------------------------------------- validation
    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"{self.strategy!r} not one of {', '.join(STRATEGIES)}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError("mask_mode", f"{self.mask_mode!r} not one of {', '.join(MASK_MODES)}")
        positive = ["rank", "lora_rank", "epochs", "batch", "shots", "sessions", "width", "heads", "layers",
                    "d_ff", "patch_size", "embed_dim", "pretrain_batch"]
        for k in positive:
            if getattr(self, k) < 1 and not (k == "epochs" and self.epochs == 0):
                raise ConfigError(k, f"must be >= 1, got {getattr(self, k)}")
        if not 1 <= self.top_k_heads <= self.heads:
            raise ConfigError("top_k_heads", f"must lie in [1, heads={self.heads}]")
        for k in ("fc1_sparsity", "spu_sparsity"):
            if not 0 < getattr(self, k) <= 1:
                raise ConfigError(k, "must lie in (0, 1]")
        for k in ("lr", "pretrain_lr"):
            if getattr(self, k) <= 0:
                raise ConfigError(k, "must be positive")
        if self.min_lr < 0 or self.min_lr > self.lr:
            raise ConfigError("min_lr", "must lie in [0, lr]")
        if not 0 <= self.warmup_fraction <= 1:
            raise ConfigError("warmup_fraction", "must lie in [0, 1]")
        if self.ewc_lambda < 0:
            raise ConfigError("ewc_lambda", "must be non-negative")
        if self.width % self.heads:
            raise ConfigError("heads", f"width {self.width} is not divisible by {self.heads}")
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if not self.data:
            raise ConfigError("data", "a target dataset path is required")
        for key, paths in (("data", [self.data]), ("control", self.control),
                           ("pretrain_data", [self.pretrain_data] if self.pretrain_data else []),
                           ("init_checkpoint", [self.init_checkpoint] if self.init_checkpoint else [])):
            for p in paths:
                if not Path(p).is_file():
                    raise ConfigError(key, f"file not found: {p}")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch, self.lr, self.min_lr, self.warmup_fraction)

    def strategy_obj(self):
        return make_strategy(self.strategy, self.rank, self.top_k_heads, self.fc1_sparsity,
                             self.spu_sparsity, self.lora_rank, self.ewc_lambda, self.mask_mode)


def _check_compatible(ref: Dataset, other: Dataset, key: str):
    if other.vocab != ref.vocab:
        raise ConfigError(key, "vocabulary differs from the target dataset")
    if other.images.shape[1:] != ref.images.shape[1:]:
        raise ConfigError(key, f"image shape {other.images.shape[1:]} differs from target {ref.images.shape[1:]}")


def build_base_model(cfg: RunConfig, target: Dataset) -> DualEncoder:
    """Fresh or checkpointed encoder, optionally pretrained with full CLIP-loss fine-tuning."""
    if cfg.init_checkpoint:
        model, _ = load_checkpoint(cfg.init_checkpoint)
        if model.cfg.vocab_size != len(target.vocab) or model.cfg.image_size != target.images.shape[-1]:
            raise ConfigError("init_checkpoint", "checkpoint does not match the dataset vocabulary or image size")
        return model
    _, c, w, _ = target.images.shape
    enc = EncoderConfig(width=cfg.width, heads=cfg.heads, layers=cfg.layers, d_ff=cfg.d_ff,
                        patch_size=cfg.patch_size, image_size=w, channels=c, vocab_size=len(target.vocab),
                        max_tokens=target.max_tokens, embed_dim=cfg.embed_dim)
    model = DualEncoder(enc, seed=cfg.model_seed)
    if cfg.pretrain_data:
        base = read_dataset(cfg.pretrain_data)
        _check_compatible(target, base, "pretrain_data")
        train_session(model, make_strategy("fft"), base,
                      TrainConfig(cfg.pretrain_epochs, cfg.pretrain_batch, cfg.pretrain_lr), seed=cfg.model_seed)
    return model


def _mean_matrix(mats: list[list[list[float | None]]]):
    T = len(mats[0])
    return [[None if mats[0][t][i] is None else float(np.mean([m[t][i] for m in mats])) for i in range(T)]
            for t in range(T)]


def aggregate(cfg: dict, strategy: dict, count: int, per_seed: list[dict]) -> dict:
    metrics = [r["metrics"] for r in per_seed]
    out = {"schema": SCHEMA, "config": cfg, "strategy": strategy, "trainable_count": count, "seeds": per_seed}
    zs_keys = per_seed[0]["matrix"]["zero_shot"].keys()
    out["zero_shot"] = {k: float(np.mean([r["matrix"]["zero_shot"][k] for r in per_seed])) for k in zs_keys}
    out["R"] = _mean_matrix([r["matrix"]["R"] for r in per_seed])
    out["std"] = {}
    for m in METRICS:
        vals = [x[m] for x in metrics if x[m] is not None]
        out[m] = float(np.mean(vals)) if vals else None
        out["std"][m] = float(np.std(vals)) if vals else None
    return out


def execute_run(cfg: RunConfig, write: bool = True) -> dict:
    """Run every seed of one configuration; returns the results document."""
    cfg.validate()
    target = read_dataset(cfg.data)
    controls = []
    for p in cfg.control:
        ds = read_dataset(p)
        _check_compatible(target, ds, "control")
        controls.append(control_eval_set(Path(p).stem, ds))
    base = build_base_model(cfg, target)
    out_dir = Path(cfg.out)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(base, out_dir / "base.lsck")
    base_snap = base.snapshot()
    per_seed = []
    count = None
    for seed in cfg.seeds:
        model = DualEncoder(base.cfg)
        model.load_snapshot(base_snap)
        strategy = cfg.strategy_obj()
        count = strategy.trainable_count(model.cfg)
        splits = make_splits(target, cfg.sessions, cfg.shots, seed)
        plans = []

        def keep_plan(t, strat):
            plan = getattr(strat, "plan", None)
            if plan is not None:
                plans.append(plan)

        log_path = None
        if write:
            log_path = out_dir / f"seed{seed}_train.jsonl"
            log_path.write_text("")
        M = run_continual(model, strategy, target, splits, controls, cfg.train_config(), seed, log_path, keep_plan)
        if write:
            save_checkpoint(model, out_dir / f"seed{seed}.lsck", plans[-1].to_bytes() if plans else b"")
            if plans:
                (out_dir / f"seed{seed}_plans.txt").write_text(
                    "".join(f"# session {i + 1}\n{p.report()}" for i, p in enumerate(plans))
                )
        per_seed.append({
            "seed": seed,
            "splits": [s.classes for s in splits],
            "matrix": M.to_dict(),
            "metrics": summarize(M),
            "loss_traces": [[rec["mean_loss"] for rec in log] for log in M.logs],
        })
    doc = aggregate(_config_dict(cfg), strategy.describe(), count, per_seed)
    if write:
        (out_dir / "results.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        (out_dir / "results.txt").write_text(format_table([doc]))
        from . import plotting

        plotting.plot_run(doc, out_dir)
    return doc


def _config_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d.pop("out")
    return d


# ---------------------------------------------------------- reporting

def check_results(doc: dict, source: str = "results") -> None:
    """Validate the schema and recompute headline metrics from the stored matrices."""
    required = ("schema", "config", "strategy", "trainable_count", "seeds", "zero_shot", "R") + METRICS
    missing = [k for k in required if k not in doc]
    if missing or doc.get("schema") != SCHEMA:
        raise ConfigError(source, f"not a {SCHEMA} document (missing {', '.join(missing) or 'schema tag'})")
    for rec in doc["seeds"]:
        for k in ("seed", "matrix", "metrics"):
            if k not in rec:
                raise ConfigError(source, f"seed record lacks {k!r}")
        recomputed = summarize(AccuracyMatrix.from_dict(rec["matrix"]))
        for m in METRICS:
            a, b = recomputed[m], rec["metrics"][m]
            if (a is None) != (b is None) or (a is not None and abs(a - b) > 1e-9):
                raise ConfigError(source, f"stored {m}={b} disagrees with recomputed {a} for seed {rec['seed']}")
    agg = aggregate(doc["config"], doc["strategy"], doc["trainable_count"], doc["seeds"])
    for m in METRICS:
        a, b = agg[m], doc[m]
        if (a is None) != (b is None) or (a is not None and abs(a - b) > 1e-9):
            raise ConfigError(source, f"stored mean {m}={b} disagrees with recomputed {a}")


def _fmt(v, width=8):
    return f"{'n/a':>{width}}" if v is None else f"{v:>+{width}.1f}"


def format_table(docs: list[dict]) -> str:
    rows = sorted(docs, key=lambda d: (d["strategy"]["strategy"], json.dumps(d["strategy"], sort_keys=True)))
    head = f"{'method':<10}{'TI':>8}{'CC':>8}{'ACC':>8}{'BWT':>8}{'params':>10}{'seeds':>7}"
    lines = [head, "-" * len(head)]
    for d in rows:
        lines.append(
            f"{d['strategy']['strategy']:<10}{_fmt(d['TI'])}{_fmt(d['CC'])}{_fmt(d['ACC'])}{_fmt(d['BWT'])}"
            f"{d['trainable_count']:>10d}{len(d['seeds']):>7d}"
        )
    return "\n".join(lines) + "\n"


def format_delimited(docs: list[dict], sep: str = "\t") -> str:
    rows = sorted(docs, key=lambda d: (d["strategy"]["strategy"], json.dumps(d["strategy"], sort_keys=True)))
    cols = ["method", "TI", "TI_std", "CC", "CC_std", "ACC", "ACC_std", "BWT", "BWT_std", "params", "seeds"]
    lines = [sep.join(cols)]
    for d in rows:
        vals = [d["strategy"]["strategy"]]
        for m in METRICS:
            vals += ["" if d[m] is None else repr(d[m]), "" if d["std"][m] is None else repr(d["std"][m])]
        vals += [str(d["trainable_count"]), str(len(d["seeds"]))]
        lines.append(sep.join(vals))
    return "\n".join(lines) + "\n"
