"""Experiment orchestration: benchmark matrix, imbalance sweep and MMD analysis."""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .classify import DEFAULT_GRID, ClassifierConfig, reweighing_weights, train_plain, train_with_contrastives
from .contrastive import ContrastiveSet, save_contrastives
from .data import Dataset, load_adult, load_dataset, minority_group, save_dataset, split, subsample_group
from .errors import ContractViolation, TrainingDiverged
from .fairness import METRICS, ROW_FIELDS, consistency_evaluate, fairness_report
from .matching import build_index, nn_contrastives
from .stargan import GanConfig, generate_contrastives, save_checkpoint
from .stargan import train as train_gan
from .stats import feature_group_tests, write_results

log = logging.getLogger(__name__)

METHODS = ("real", "real+gan", "real+nn", "reweigh", "real+gan+consistency")
RESULT_FIELDS = ROW_FIELDS + ("reg_param", "status")
SWEEP_FIELDS = ("minority_count", "accuracy", "tpr_gap", "fpr_gap", "ar_gap", "ppv_gap", "npv_gap")


@dataclass(frozen=True)
class ExperimentConfig:
    data: str = "data/adult"
    out: str = "runs/default"
    seeds: tuple = (0, 1, 2, 3, 4)
    methods: tuple = METHODS
    test_n: int = 15000
    grid: tuple = DEFAULT_GRID
    folds: int = 10
    harden: bool = False
    signed_gaps: bool = False
    gan: GanConfig = field(default_factory=lambda: GanConfig(epochs=6, base_channels=8, lambda_cls=5.0))
    counts: tuple = (200, 600, 1000, 1400, 1800, 2200)
    majority: int = 2200
    alpha: float = 0.01
    n_perm: int = 999
    mmd_samples: int = 1500
    mmd_bandwidth: str = "reference"

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ContractViolation(f"unknown methods {bad}; choose from {list(METHODS)}")
        if not self.seeds:
            raise ContractViolation("need at least one seed")
        # canonical types so a config and its file snapshot hash alike
        object.__setattr__(self, "grid", tuple(float(c) for c in self.grid))
        object.__setattr__(self, "seeds", tuple(int(v) for v in self.seeds))
        object.__setattr__(self, "counts", tuple(int(v) for v in self.counts))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gan"] = self.gan.to_dict()
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def classifier(self, seed: int) -> ClassifierConfig:
        return ClassifierConfig(tuple(self.grid), self.folds, seed)


def _parse_value(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ContractViolation(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(like, tuple):
        items = [v for v in raw.replace(",", " ").split() if v]
        kind = type(like[0]) if like else str
        if kind is int and any("." in v for v in items):
            kind = float
        return tuple(kind(v) for v in items)
    if like is None:
        return None if raw.lower() in ("", "none") else int(raw)
    return type(like)(raw)


def parse_overrides(pairs: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply flat ``key=value`` settings; ``gan.<field>`` keys configure the network."""
    base = base or ExperimentConfig()
    top, gan = {}, {}
    top_fields = {f.name for f in fields(ExperimentConfig)} - {"gan"}
    gan_fields = {f.name for f in fields(GanConfig)}
    for key, raw in pairs.items():
        key = key.strip().replace("-", "_")
        if key.startswith("gan."):
            name = key[4:]
            if name not in gan_fields:
                raise ContractViolation(f"unknown config key {key!r}")
            gan[name] = _parse_value(raw, getattr(base.gan, name))
        elif key in top_fields:
            top[key] = _parse_value(raw, getattr(base, key))
        else:
            raise ContractViolation(f"unknown config key {key!r}")
    return replace(base, gan=replace(base.gan, **gan), **top)


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[run]\n" + Path(path).read_text())
    return dict(parser["run"])


def write_config(cfg: ExperimentConfig, path) -> Path:
    d = cfg.to_dict()
    gan = d.pop("gan")
    lines = [f"# contrastive-fairness {__version__}, config hash {cfg.hash()}"]
    for k, v in d.items():
        lines.append(f"{k} = {_fmt(v)}")
    for k, v in gan.items():
        lines.append(f"gan.{k} = {_fmt(v)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return "none" if v is None else str(v)


def stamp(cfg: ExperimentConfig, seed=None) -> dict:
    return {"tool_version": __version__, "config_hash": cfg.hash(),
            "seed": "" if seed is None else seed}


def write_rows(rows, path, fieldnames, stamp_: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for k, v in stamp_.items():
            fh.write(f"# {k}={v}\n")
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fieldnames})
    return path


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


# -- data ------------------------------------------------------------------------


def load_any(path) -> Dataset:
    """Prepared directory (schema.json present) or raw Adult files."""
    p = Path(path)
    if (p / "schema.json").exists():
        return load_dataset(p)
    return load_adult(p)


def cmd_prepare(raw, out_dir) -> Dataset:
    ds = load_adult(raw)
    save_dataset(ds, out_dir)
    return ds


# -- leakage guard ------------------------------------------------------------------


def assert_train_only(train: Dataset, test: Dataset, artifacts: dict) -> None:
    """Every fitted artifact must reference the train split and nothing else."""
    tr = train.fingerprint()
    if tr == test.fingerprint():
        raise ContractViolation("train and test splits are identical")
    for name, ref in artifacts.items():
        if ref != tr:
            raise ContractViolation(f"{name} was fitted on {ref}, not on the train split {tr}")


# -- benchmark --------------------------------------------------------------------


def _failed_row(method, seed, err) -> dict:
    return {"method": method, "seed": seed, "status": f"failed: {err}"}


def run_seed(ds: Dataset, cfg: ExperimentConfig, seed: int, repeat: int = 0, out_dir: Path | None = None):
    """All requested methods for one split. Returns (rows, reports)."""
    train, test = split(ds, cfg.test_n, seed, repeat=repeat)
    clf = cfg.classifier(seed)
    rows, reports, used = {}, {}, {}

    def record(method, model, sel, report, coverage=1.0):
        row = report.row(method, seed, coverage, cfg.signed_gaps)
        row.update(reg_param=sel.chosen, status="ok")
        rows[method] = row
        reports[method] = {"reg_param": sel.chosen, "coverage": coverage, **report.to_dict(),
                           "cv": [asdict(s) for s in sel.scores], "shortlisted": list(sel.shortlisted)}
        used[f"{method} classifier"] = model.metadata["trained_on"]

    if "real" in cfg.methods:
        model, sel = train_plain(train, clf)
        record("real", model, sel, fairness_report(model.predict(test.X), test.y, test.s))

    if "reweigh" in cfg.methods:
        w = reweighing_weights(train)
        model, sel = train_plain(train, clf, sample_weights=w)
        used["reweighing weights"] = train.fingerprint()
        record("reweigh", model, sel, fairness_report(model.predict(test.X), test.y, test.s))

    if "real+nn" in cfg.methods:
        index = build_index(train)
        cs = nn_contrastives(index)
        used["matching index"] = cs.meta["matched_from"]
        model, sel = train_with_contrastives(train, cs, clf)
        record("real+nn", model, sel, fairness_report(model.predict(test.X), test.y, test.s))

    gan_methods = [m for m in ("real+gan", "real+gan+consistency") if m in cfg.methods]
    if gan_methods:
        try:
            t0 = time.time()
            gan = train_gan(train, replace(cfg.gan, seed=seed))
            log.info("seed %d: translation network trained in %.0fs", seed, time.time() - t0)
            used["translation network"] = gan.meta["trained_on"]
            if out_dir is not None:
                save_checkpoint(gan, out_dir / f"gan_seed{seed}.json")
            cs = generate_contrastives(gan, train, cfg.harden)
            model, sel = train_with_contrastives(train, cs, clf)
            if "real+gan" in cfg.methods:
                record("real+gan", model, sel, fairness_report(model.predict(test.X), test.y, test.s))
            if "real+gan+consistency" in cfg.methods:
                test_cs = generate_contrastives(gan, test, cfg.harden)
                cons = consistency_evaluate(model, test, test_cs)
                if cons.report is None:
                    rows["real+gan+consistency"] = _failed_row("real+gan+consistency", seed, "no covered records")
                else:
                    record("real+gan+consistency", model, sel, cons.report, cons.coverage)
        except TrainingDiverged as exc:
            log.error("seed %d: %s", seed, exc)
            for m in gan_methods:
                rows[m] = _failed_row(m, seed, exc)

    assert_train_only(train, test, used)
    ordered = [rows[m] for m in cfg.methods if m in rows]
    return ordered, reports


def summarize(rows) -> list[dict]:
    """Mean and population std (ddof=0) per method over successful seeds."""
    out = []
    methods = list(dict.fromkeys(r["method"] for r in rows))
    for m in methods:
        ok = [r for r in rows if r["method"] == m and r.get("status", "ok") == "ok"]
        summary = {"method": m, "n_seeds": len(ok)}
        for key in ("accuracy",) + tuple(f"{x}_gap" for x in METRICS) + ("coverage",):
            vals = [float(r[key]) for r in ok if r.get(key) not in (None, "")]
            summary[f"{key}_mean"] = float(np.mean(vals)) if vals else None
            summary[f"{key}_std"] = float(np.std(vals)) if vals else None
        out.append(summary)
    return out


def summary_fields():
    keys = ("accuracy",) + tuple(f"{x}_gap" for x in METRICS) + ("coverage",)
    return ("method", "n_seeds") + tuple(f"{k}_{s}" for k in keys for s in ("mean", "std"))


def cmd_benchmark(cfg: ExperimentConfig, ds: Dataset | None = None) -> tuple[list[dict], list[dict]]:
    ds = ds if ds is not None else load_any(cfg.data)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.txt")
    rows, all_reports = [], {}
    for repeat, seed in enumerate(cfg.seeds):
        r, rep = run_seed(ds, cfg, seed, repeat, out)
        rows.extend(r)
        all_reports[str(seed)] = rep
        write_rows(rows, out / "results.csv", RESULT_FIELDS, stamp(cfg))
    rows.sort(key=lambda r: (cfg.methods.index(r["method"]), r["seed"]))
    summary = summarize(rows)
    write_rows(rows, out / "results.csv", RESULT_FIELDS, stamp(cfg))
    write_rows(summary, out / "summary.csv", summary_fields(), stamp(cfg))
    (out / "reports.json").write_text(json.dumps({"stamp": stamp(cfg), "reports": all_reports}, indent=2,
                                                 default=float) + "\n")
    return rows, summary


# -- imbalance sweep ----------------------------------------------------------------


def cmd_sweep(cfg: ExperimentConfig, ds: Dataset | None = None, counts=None) -> list[dict]:
    """Plain classifier on train splits whose minority group grows toward a fixed majority size.

    Metrics are averaged over ``cfg.seeds``; each seed uses nested minority
    subsamples so larger counts extend smaller ones.
    """
    ds = ds if ds is not None else load_any(cfg.data)
    counts = tuple(counts if counts is not None else cfg.counts)
    if list(counts) != sorted(counts) or not counts:
        raise ContractViolation("counts must be non-empty and ascending")
    per_count = {c: [] for c in counts}
    for repeat, seed in enumerate(cfg.seeds):
        train, test = split(ds, cfg.test_n, seed, repeat=repeat)
        minority = minority_group(train)
        majority = max(range(train.schema.n_groups), key=lambda g: (int(np.sum(train.s == g)), -g))
        base = subsample_group(train, majority, cfg.majority, seed)
        for c in counts:
            sub = subsample_group(base, minority, c, seed)
            model, sel = train_plain(sub, cfg.classifier(seed))
            rep = fairness_report(model.predict(test.X), test.y, test.s)
            per_count[c].append(rep.row("real", seed))
    rows = []
    for c in counts:
        row = {"minority_count": c}
        for key in SWEEP_FIELDS[1:]:
            vals = [r[key] for r in per_count[c] if r[key] is not None]
            row[key] = float(np.mean(vals)) if vals else None
        rows.append(row)
    out = Path(cfg.out)
    write_config(cfg, out / "config.txt")
    write_rows(rows, out / "sweep.csv", SWEEP_FIELDS, stamp(cfg))
    return rows


def trend(rows, key: str) -> float:
    """Spearman correlation of a sweep series with the minority count."""
    x = [r["minority_count"] for r in rows]
    y = [r[key] for r in rows]
    return float(spearmanr(x, y).statistic)


# -- MMD ----------------------------------------------------------------------------


def cmd_mmd(real: Dataset, contrastive: ContrastiveSet, cfg: ExperimentConfig, seed: int = 0,
            columnwise: bool = False, out_path=None):
    results = feature_group_tests(real, contrastive, cfg.alpha, seed, cfg.n_perm, cfg.mmd_samples, columnwise,
                                  cfg.mmd_bandwidth)
    if out_path is not None:
        write_results(results, out_path, stamp(cfg, seed))
    return results


def export_contrastives(cs: ContrastiveSet, ds: Dataset, path) -> Path:
    return save_contrastives(cs, ds.schema, path)
