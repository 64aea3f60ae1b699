"""``lorsu`` command line: generate | run | report | inspect.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataio import DatasetFormatError, SyntheticSpec, generate, read_dataset, write_dataset
from .encoder import CheckpointError, load_checkpoint
from .harness import SplitError
from .experiment import RunConfig, ConfigError, check_results, execute_run, format_delimited, format_table
from .numcore import ContractError, DimensionError
from .select import SelectionPlan
from .train import TrainingError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def cmd_generate(args) -> int:
    spec = SyntheticSpec(
        num_classes=args.classes,
        samples_per_class=args.shots + args.test_per_class,
        image_size=args.image_size,
        noise_std=args.noise,
        seed=args.seed,
        first_class=args.first_class,
        jitter=args.jitter,
        background=args.background,
        template=args.template,
    )
    try:
        ds = generate(spec)
    except ValueError as e:
        _err(str(e))
        return EXIT_INPUT
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples of {len(ds.class_names)} classes to {args.out}")
    return EXIT_OK


_RUN_KEYS = [
    "strategy", "rank", "top_k_heads", "fc1_sparsity", "spu_sparsity", "lora_rank", "ewc_lambda", "mask_mode",
    "lr", "min_lr", "warmup_fraction", "epochs", "batch", "shots", "sessions", "seeds", "data", "control",
    "pretrain_data", "pretrain_epochs", "pretrain_lr", "pretrain_batch", "init_checkpoint",
    "width", "heads", "layers", "d_ff", "patch_size", "embed_dim", "model_seed", "out",
]


def cmd_run(args) -> int:
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides({k: getattr(args, k) for k in _RUN_KEYS})
        doc = execute_run(cfg)
    except ConfigError as e:
        _err(f"invalid configuration: {e}")
        return EXIT_INPUT
    except (DatasetFormatError, CheckpointError, SplitError, OSError) as e:
        _err(str(e))
        return EXIT_INPUT
    except (TrainingError, FloatingPointError, ContractError, DimensionError) as e:
        _err(f"numeric failure: {e}")
        return EXIT_NUMERIC
    print(format_table([doc]), end="")
    print(f"results written to {cfg.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    docs = []
    for p in args.results:
        try:
            doc = json.loads(Path(p).read_text())
            check_results(doc, p)
        except (OSError, json.JSONDecodeError, ConfigError, KeyError, TypeError) as e:
            _err(f"{p}: {e}")
            return EXIT_INPUT
        docs.append(doc)
    table = format_table(docs)
    print(table, end="")
    if args.out:
        from .plotting import plot_comparison

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table)
        (out / "report.tsv").write_text(format_delimited(docs))
        ordered = sorted(docs, key=lambda d: (d["strategy"]["strategy"], json.dumps(d["strategy"], sort_keys=True)))
        plot_comparison(ordered, out / "report.png")
        print(f"report written to {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    try:
        head = path.read_bytes()[:4]
    except OSError as e:
        _err(str(e))
        return EXIT_INPUT
    try:
        if head == b"LSCK":
            model, plan_blob = load_checkpoint(path)
            cfg = model.cfg
            total = sum(t.size for _, t in model.vision_parameters())
            print(f"checkpoint {path}")
            print(f"  width={cfg.width} heads={cfg.heads} layers={cfg.layers} d_ff={cfg.d_ff} "
                  f"image={cfg.channels}x{cfg.image_size}x{cfg.image_size} patch={cfg.patch_size}")
            print(f"  vision parameters: {total}")
            if plan_blob:
                print(SelectionPlan.from_bytes(plan_blob).report(), end="")
            return EXIT_OK
        ds = read_dataset(path)
    except (DatasetFormatError, CheckpointError, ValueError) as e:
        _err(f"{path}: {e}")
        return EXIT_INPUT
    n, c, w, _ = ds.images.shape
    counts = [int((ds.labels == i).sum()) for i in range(len(ds.class_names))]
    print(f"dataset {path}")
    print(f"  samples={n} classes={len(ds.class_names)} image={c}x{w}x{w} vocab={len(ds.vocab)} "
          f"max_tokens={ds.max_tokens}")
    print(f"  template: {ds.template!r}")
    for i, name in enumerate(ds.class_names):
        print(f"  {i:3d} {name:<20} {counts[i]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lorsu", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic LSDS dataset")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--shots", type=int, default=20, help="training samples per class")
    g.add_argument("--test-per-class", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--first-class", type=int, default=0, help="offset into the canonical class list")
    g.add_argument("--jitter", type=int, default=0)
    g.add_argument("--background", type=float, default=0.1)
    g.add_argument("--template", default="a photo of a {}")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run a continual-learning experiment")
    r.add_argument("--config", help="flat key = value file; flags override it")
    for key in _RUN_KEYS:
        r.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="compare results files")
    rep.add_argument("results", nargs="+")
    rep.add_argument("--out", help="directory for report.tsv, report.txt and report.png")
    rep.set_defaults(func=cmd_report)

    i = sub.add_parser("inspect", help="summarise a dataset or checkpoint file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
