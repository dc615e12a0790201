"""Group fairness metrics, pairwise gap summaries and the output-consistency protocol.

Rates live in [0, 1]. A rate whose denominator is zero is ``None`` rather than
0, and gaps skip any pair with an undefined side. Multiplying by 100 for
display is the caller's job (see :meth:`FairnessReport.row`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractViolation

METRICS = ("tpr", "fpr", "ar", "ppv", "npv")
ROW_FIELDS = ("method", "seed", "accuracy", "tpr_gap", "fpr_gap", "ar_gap", "ppv_gap", "npv_gap", "coverage")


@dataclass(frozen=True)
class Rate:
    num: int
    den: int

    @property
    def value(self) -> float | None:
        return self.num / self.den if self.den else None


@dataclass(frozen=True)
class GroupMetrics:
    groups: tuple[int, ...]
    rates: Mapping[int, Mapping[str, Rate]]
    support: Mapping[int, int]
    correct: Mapping[int, int]

    def value(self, group: int, metric: str) -> float | None:
        return self.rates[group][metric].value

    def relabel(self, mapping: Mapping[int, int]) -> GroupMetrics:
        return GroupMetrics(
            tuple(sorted(mapping[g] for g in self.groups)),
            {mapping[g]: r for g, r in self.rates.items()},
            {mapping[g]: n for g, n in self.support.items()},
            {mapping[g]: n for g, n in self.correct.items()},
        )


@dataclass(frozen=True)
class Gap:
    value: float | None
    pairs_used: int
    excluded: tuple[tuple[int, int], ...] = ()


def _as_int_array(a, name) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D")
    return a.astype(np.int64)


def group_metrics(preds, labels, groups) -> GroupMetrics:
    preds = _as_int_array(preds, "preds")
    labels = _as_int_array(labels, "labels")
    groups = _as_int_array(groups, "groups")
    if not (len(preds) == len(labels) == len(groups)):
        raise ContractViolation("preds, labels and groups differ in length")
    if len(groups) == 0:
        raise ContractViolation("need at least one sample")
    rates, support, correct = {}, {}, {}
    for g in np.unique(groups):
        m = groups == g
        p, y = preds[m], labels[m]
        tp = int(np.sum((p == 1) & (y == 1)))
        fp = int(np.sum((p == 1) & (y == 0)))
        tn = int(np.sum((p == 0) & (y == 0)))
        fn = int(np.sum((p == 0) & (y == 1)))
        n = int(m.sum())
        rates[int(g)] = {
            "tpr": Rate(tp, tp + fn),
            "fpr": Rate(fp, fp + tn),
            "ar": Rate(tp + fp, n),
            "ppv": Rate(tp, tp + fp),
            "npv": Rate(tn, tn + fn),
        }
        support[int(g)] = n
        correct[int(g)] = tp + tn
    return GroupMetrics(tuple(sorted(rates)), rates, support, correct)


def gap_summary(gm: GroupMetrics, signed: bool = False) -> dict[str, Gap]:
    """Mean over all group pairs of the rate difference, per metric.

    Absolute differences by default. ``signed`` gives the mean of
    ``rate(b) - rate(a)`` over pairs with a < b by group code.
    """
    out = {}
    for metric in METRICS:
        diffs, excluded = [], []
        for a, b in combinations(gm.groups, 2):
            va, vb = gm.value(a, metric), gm.value(b, metric)
            if va is None or vb is None:
                excluded.append((a, b))
                continue
            diffs.append(vb - va if signed else abs(vb - va))
        out[metric] = Gap(float(np.mean(diffs)) if diffs else None, len(diffs), tuple(excluded))
    return out


@dataclass(frozen=True)
class MulticlassGaps:
    tpr: float | None
    fpr: float | None
    per_class: Mapping[int, tuple[float | None, float | None]]
    excluded: tuple[int, ...]


def multiclass_gaps(preds, labels, groups, classes: Sequence[int] | None = None) -> MulticlassGaps:
    """One-vs-rest TPR/FPR gaps per class, averaged (unweighted) over classes.

    With exactly two classes this is the binary gap with the larger class as
    the positive one. Classes whose gap is undefined (e.g. absent from a
    group) are dropped from the mean and listed in ``excluded``.
    """
    preds = _as_int_array(preds, "preds")
    labels = _as_int_array(labels, "labels")
    if classes is None:
        classes = sorted(set(labels.tolist()) | set(preds.tolist()))
    classes = list(classes)
    if len(classes) < 2:
        raise ContractViolation("need at least two classes")
    targets = classes[-1:] if len(classes) == 2 else classes
    per_class, excluded = {}, []
    for c in targets:
        gaps = gap_summary(group_metrics(preds == c, labels == c, groups))
        per_class[c] = (gaps["tpr"].value, gaps["fpr"].value)
        if gaps["tpr"].value is None or gaps["fpr"].value is None or gaps["tpr"].excluded:
            excluded.append(c)
    kept = [per_class[c] for c in targets if c not in excluded]
    tpr = float(np.mean([t for t, _ in kept])) if kept else None
    fpr = float(np.mean([f for _, f in kept])) if kept else None
    return MulticlassGaps(tpr, fpr, per_class, tuple(excluded))


@dataclass(frozen=True)
class FairnessReport:
    accuracy: float
    n: int
    metrics: GroupMetrics
    gaps: Mapping[str, Gap]
    signed_gaps: Mapping[str, Gap] = field(default_factory=dict)

    def gap(self, metric: str) -> float | None:
        return self.gaps[metric].value

    def row(self, method: str, seed: int, coverage: float = 1.0, signed: bool = False) -> dict:
        """Flat result row, rates in percentage points."""
        source = self.signed_gaps if signed else self.gaps
        row = {"method": method, "seed": seed, "accuracy": 100.0 * self.accuracy}
        for m in METRICS:
            v = source[m].value
            row[f"{m}_gap"] = None if v is None else 100.0 * v
        row["coverage"] = coverage
        return row

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n": self.n,
            "groups": {
                str(g): {
                    "support": self.metrics.support[g],
                    **{m: {"value": r.value, "num": r.num, "den": r.den}
                       for m, r in self.metrics.rates[g].items()},
                }
                for g in self.metrics.groups
            },
            "gaps": {m: {"value": gp.value, "pairs": gp.pairs_used,
                         "excluded": [list(p) for p in gp.excluded]} for m, gp in self.gaps.items()},
            "signed_gaps": {m: gp.value for m, gp in self.signed_gaps.items()},
        }


def fairness_report(preds, labels, groups) -> FairnessReport:
    gm = group_metrics(preds, labels, groups)
    n = sum(gm.support.values())
    acc = sum(gm.correct.values()) / n
    return FairnessReport(acc, n, gm, gap_summary(gm), gap_summary(gm, signed=True))


def equalized_odds_bias(preds, labels, groups) -> float | None:
    """TPR gap + FPR gap; ``None`` when either is undefined."""
    gaps = gap_summary(group_metrics(preds, labels, groups))
    t, f = gaps["tpr"].value, gaps["fpr"].value
    if t is None or f is None:
        return None
    return t + f


@dataclass(frozen=True)
class ConsistencyReport:
    coverage: float
    n_covered: int
    n_total: int
    report: FairnessReport | None


def consistency_evaluate(model, test, test_contrastives) -> ConsistencyReport:
    """Abstain on every test record whose prediction changes on any of its contrastives.

    ``model`` needs a ``predict(X)`` method; ``test_contrastives`` must hold,
    for each test record, one entry per other protected group.
    """
    n = len(test)
    cs = test_contrastives
    needed = test.schema.n_groups - 1
    per_record = np.bincount(cs.source_index, minlength=n) if len(cs) else np.zeros(n, dtype=int)
    short = np.flatnonzero(per_record < needed)
    if len(short):
        raise ContractViolation(f"record {int(short[0])} has {int(per_record[short[0]])} contrastives, "
                                f"needs {needed}")
    base = np.asarray(model.predict(test.X))
    agree = np.ones(n, dtype=bool)
    if len(cs):
        other = np.asarray(model.predict(cs.x_bar))
        flips = other != base[cs.source_index]
        agree[np.unique(cs.source_index[flips])] = False
    covered = np.flatnonzero(agree)
    report = fairness_report(base[covered], test.y[covered], test.s[covered]) if len(covered) else None
    return ConsistencyReport(len(covered) / n if n else 0.0, len(covered), n, report)
