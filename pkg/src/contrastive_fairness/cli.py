"""Command-line entry point.

Exit codes: 0 success, 2 contract violation (bad input or configuration),
3 numerical failure (e.g. a diverged training run).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .contrastive import load_contrastives
from .data import split
from .errors import ContractViolation, NumericalFailure
from .experiments import (METHODS, ExperimentConfig, cmd_benchmark, cmd_mmd, cmd_prepare, cmd_sweep,
                          export_contrastives, load_any, parse_overrides, read_config, stamp, trend)
from .matching import build_index, nn_contrastives
from .stargan import generate_contrastives, load_checkpoint, save_checkpoint, train

log = logging.getLogger("contrastive_fairness")


def _csv_list(kind):
    def parse(text):
        try:
            return tuple(kind(v) for v in text.replace(",", " ").split())
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _settings(values):
    out = {}
    for item in values or ():
        if "=" not in item:
            raise ContractViolation(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def resolve_config(args) -> ExperimentConfig:
    pairs = read_config(args.config) if args.config else {}
    pairs.update(_settings(args.set))
    cfg = parse_overrides(pairs)
    direct = {k: getattr(args, k) for k in ("data", "out", "seeds", "methods", "counts", "alpha", "harden")
              if getattr(args, k, None) not in (None, False)}
    return replace(cfg, **direct)


def _split_part(cfg: ExperimentConfig, seed: int, part: str):
    ds = load_any(cfg.data)
    if part == "all" or cfg.test_n == 0:
        return ds
    train, test = split(ds, cfg.test_n, seed)
    return train if part == "train" else test


def run_prepare(args) -> int:
    ds = cmd_prepare(args.raw, args.out)
    print(f"{len(ds)} records, {ds.schema.total_dims} encoded columns -> {args.out}")
    return 0


def run_train_gan(args) -> int:
    cfg = resolve_config(args)
    train_part = _split_part(cfg, args.seed, "train")
    model = train(train_part, replace(cfg.gan, seed=args.seed),
                  callback=lambda step, h: log.info("step %d %s", step, json.dumps(h)))
    model = replace(model, meta={**model.meta, **stamp(cfg, args.seed)})
    save_checkpoint(model, args.checkpoint)
    print(f"checkpoint -> {args.checkpoint} ({len(model.history)} generator steps)")
    return 0


def run_gen(args) -> int:
    cfg = resolve_config(args)
    part = _split_part(cfg, args.seed, args.part)
    if args.mode == "gan":
        if not args.checkpoint:
            raise ContractViolation("--mode gan needs --checkpoint")
        model = load_checkpoint(args.checkpoint, part.schema)
        cs = generate_contrastives(model, part, args.harden)
    else:
        reference = _split_part(cfg, args.seed, "train") if args.part == "test" else part
        cs = nn_contrastives(build_index(reference), part)
    cs.meta.update(stamp(cfg, args.seed))
    cs.meta.update(part=args.part)
    export_contrastives(cs, part, args.out_file)
    print(f"{len(cs)} contrastive rows -> {args.out_file}")
    return 0


def run_benchmark(args) -> int:
    cfg = resolve_config(args)
    _, summary = cmd_benchmark(cfg)
    for s in summary:
        cells = [f"{s['method']:<22}"]
        for key in ("accuracy", "tpr_gap", "fpr_gap", "coverage"):
            m, sd = s[f"{key}_mean"], s[f"{key}_std"]
            cells.append(f"{key} {'n/a' if m is None else f'{m:.2f}+-{sd:.2f}'}")
        print("  ".join(cells))
    print(f"results -> {cfg.out}")
    return 0


def run_sweep(args) -> int:
    cfg = resolve_config(args)
    rows = cmd_sweep(cfg)
    for r in rows:
        print(", ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    for key in ("tpr_gap", "fpr_gap", "accuracy"):
        print(f"spearman(minority_count, {key}) = {trend(rows, key):.3f}")
    return 0


def run_mmd(args) -> int:
    cfg = resolve_config(args)
    part = _split_part(cfg, args.seed, args.part)
    cs = load_contrastives(args.contrastive, part.schema)
    out = Path(cfg.out) / "mmd.csv" if args.output is None else Path(args.output)
    results = cmd_mmd(part, cs, cfg, args.seed, args.columnwise, out)
    for r in results:
        print(f"{r.group:<28} stat={r.statistic:+.5f} p={r.p_value:.4f} {'reject' if r.reject else 'keep'}")
    print(f"results -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contrastive-fairness",
                                description="Contrastive-example de-biasing for tabular classification.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--data", help="prepared dataset directory or raw Adult files")
        sp.add_argument("--out", help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("prepare", help="clean and encode the raw Adult files")
    sp.add_argument("--raw", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=run_prepare)

    sp = sub.add_parser("train-gan", help="train the translation network on a train split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=run_train_gan)

    sp = sub.add_parser("gen-contrastive", help="write contrastive examples for a split part")
    common(sp)
    sp.add_argument("--mode", choices=("gan", "nn"), required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--harden", action="store_true")
    sp.add_argument("--part", choices=("train", "test", "all"), default="train")
    sp.add_argument("--output", dest="out_file", required=True)
    sp.set_defaults(func=run_gen)

    sp = sub.add_parser("benchmark", help="run the method x seed matrix")
    common(sp, seed=False)
    sp.add_argument("--methods", type=_csv_list(str), help=f"comma list from {', '.join(METHODS)}")
    sp.add_argument("--seeds", type=_csv_list(int))
    sp.set_defaults(func=run_benchmark)

    sp = sub.add_parser("sweep", help="minority-size sweep with the majority group held fixed")
    common(sp, seed=False)
    sp.add_argument("--counts", type=_csv_list(int))
    sp.add_argument("--seeds", type=_csv_list(int))
    sp.set_defaults(func=run_sweep)

    sp = sub.add_parser("mmd", help="per-feature-group two-sample tests, real vs contrastive")
    common(sp)
    sp.add_argument("--contrastive", required=True)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--part", choices=("train", "test", "all"), default="train")
    sp.add_argument("--columnwise", action="store_true")
    sp.add_argument("--output")
    sp.set_defaults(func=run_mmd)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
