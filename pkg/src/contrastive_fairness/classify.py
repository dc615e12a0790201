"""L2-regularised logistic regression, two-step hyperparameter selection and reweighing.

The fitted objective is

    sum_i w_i * nll_i + ||weights||^2 / (2 * C)

with sample weights rescaled to mean 1 (so only their ratios matter) and the
bias left unpenalised. ``C`` is the inverse regularisation strength: larger
values penalise less. The optimiser works on that objective divided by the
sample count; convergence means the gradient norm of the scaled objective is
below ``tol``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .contrastive import ContrastiveSet
from .data import Dataset
from .errors import ContractViolation
from .fairness import equalized_odds_bias

log = logging.getLogger(__name__)

DEFAULT_GRID = (500, 100, 50, 10, 5, 1, 0.5, 0.1, 0.05, 0.01)
MODEL_VERSION = 1


@dataclass(frozen=True)
class LogRegModel:
    weights: np.ndarray
    bias: float
    reg_param: float
    converged: bool = True
    metadata: dict = field(default_factory=dict)

    def decision(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.weights):
            raise ContractViolation(f"expected {len(self.weights)} feature columns, got shape {X.shape}")
        return X @ self.weights + self.bias

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision(X))

    def predict(self, X) -> np.ndarray:
        # p >= 0.5 exactly when the margin is >= 0
        return (self.decision(X) >= 0).astype(np.int64)

    def to_json(self, schema_hash: str | None = None) -> str:
        return json.dumps({
            "version": MODEL_VERSION,
            "schema_hash": schema_hash,
            "weights": [float(v) for v in self.weights],
            "bias": float(self.bias),
            "reg_param": self.reg_param,
            "seed": self.metadata.get("seed"),
            "converged": self.converged,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> LogRegModel:
        d = json.loads(text)
        if d.get("version") != MODEL_VERSION:
            raise ContractViolation(f"unsupported model version {d.get('version')}")
        return cls(np.array(d["weights"]), float(d["bias"]), d["reg_param"], d.get("converged", True),
                   {"seed": d.get("seed"), "schema_hash": d.get("schema_hash")})


def predict(model: LogRegModel, X) -> np.ndarray:
    return model.predict(X)


def predict_proba(model: LogRegModel, X) -> np.ndarray:
    return model.predict_proba(X)


def _normalised_weights(n: int, sample_weights) -> np.ndarray:
    if sample_weights is None:
        return np.ones(n)
    w = np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (n,):
        raise ContractViolation("sample_weights length differs from X")
    if np.any(w < 0) or not np.any(w > 0):
        raise ContractViolation("sample weights must be non-negative and not all zero")
    return w * (n / w.sum())


def objective(theta: np.ndarray, X: np.ndarray, y: np.ndarray, w: np.ndarray, reg_param: float):
    """Scaled objective and gradient; ``theta`` is (weights..., bias)."""
    n = X.shape[0]
    coef, b = theta[:-1], theta[-1]
    z = X @ coef + b
    # nll = log(1 + e^z) - y z, evaluated stably
    nll = np.logaddexp(0.0, z) - y * z
    r = w * (expit(z) - y)
    value = (w @ nll + 0.5 * coef @ coef / reg_param) / n
    grad = np.empty_like(theta)
    grad[:-1] = (X.T @ r + coef / reg_param) / n
    grad[-1] = r.sum() / n
    return value, grad


def fit(X, y, sample_weights=None, reg_param: float = 1.0, seed: int = 0, tol: float = 1e-6,
        max_iter: int = 10_000, init: np.ndarray | None = None) -> LogRegModel:
    """Weighted L2 logistic regression by L-BFGS with a Wolfe line search."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0 or len(y) != len(X):
        raise ContractViolation("need a non-empty 2-D X with one label per row")
    if reg_param <= 0:
        raise ContractViolation("reg_param must be positive")
    w = _normalised_weights(len(X), sample_weights)
    theta0 = np.zeros(X.shape[1] + 1) if init is None else np.array(init, dtype=np.float64)
    trace = [objective(theta0, X, y, w, reg_param)[0]]
    res = minimize(objective, theta0, args=(X, y, w, reg_param), jac=True, method="L-BFGS-B",
                   callback=lambda intermediate_result: trace.append(float(intermediate_result.fun)),
                   options={"maxiter": max_iter, "gtol": tol / np.sqrt(len(theta0)), "ftol": 1e-16,
                            "maxcor": 20})
    _, g = objective(res.x, X, y, w, reg_param)
    gnorm = float(np.linalg.norm(g))
    converged = gnorm < tol
    if not converged:
        log.warning("logistic regression stopped at gradient norm %.3g (C=%s): %s", gnorm, reg_param, res.message)
    return LogRegModel(res.x[:-1].copy(), float(res.x[-1]), reg_param, converged,
                       {"seed": seed, "grad_norm": gnorm, "iterations": int(res.nit), "objective_trace": trace})


# -- cross-validation -----------------------------------------------------------


@dataclass(frozen=True)
class CandidateScore:
    reg_param: float
    cv_accuracy: float
    cv_bias: float | None
    undefined_folds: int = 0


@dataclass(frozen=True)
class CvSelection:
    grid: tuple
    scores: tuple[CandidateScore, ...]
    shortlisted: tuple
    chosen: float
    folds: int
    seed: int
    reg_convention: str = "inverse strength: objective = sum w*nll + ||w||^2 / (2C)"

    def score(self, reg_param) -> CandidateScore:
        return next(s for s in self.scores if s.reg_param == reg_param)


BiasMetric = Callable[[np.ndarray, np.ndarray, np.ndarray], "float | None"]


def fold_ids(n_units: int, folds: int, seed: int) -> np.ndarray:
    """Balanced random fold assignment of ``n_units`` items."""
    perm = np.random.default_rng(seed).permutation(n_units)
    ids = np.empty(n_units, dtype=np.int64)
    ids[perm] = np.arange(n_units) % folds
    return ids


def select_from_scores(scores: Sequence[CandidateScore], shortlist: int = 3) -> tuple[tuple, float]:
    """Keep the ``shortlist`` most accurate candidates, then take the least biased.

    Ties break on the candidate value so that grid order never matters.
    """
    ranked = sorted(scores, key=lambda s: (-s.cv_accuracy, s.reg_param))
    short = ranked[:shortlist]
    chosen = min(short, key=lambda s: (np.inf if s.cv_bias is None else s.cv_bias, -s.cv_accuracy, s.reg_param))
    return tuple(s.reg_param for s in short), chosen.reg_param


def cross_validate(X, y, s, grid, bias_metric: BiasMetric = equalized_odds_bias, folds: int = 10,
                   seed: int = 0, sample_weights=None, units=None, eval_mask=None) -> CvSelection:
    """Two-step selection over ``grid`` by k-fold cross-validation.

    ``units`` ties rows together so they always land in the same fold (an
    original and its contrastives); ``eval_mask`` limits validation scoring to
    a subset of rows. Fold results are reduced in fold order.
    """
    grid = tuple(grid)
    if not grid:
        raise ContractViolation("empty grid")
    if folds < 2:
        raise ContractViolation("need at least two folds")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    s = np.asarray(s)
    n = len(X)
    units = np.arange(n) if units is None else np.asarray(units)
    uniq, unit_of_row = np.unique(units, return_inverse=True)
    if len(uniq) < folds:
        raise ContractViolation(f"{len(uniq)} units cannot fill {folds} folds")
    row_fold = fold_ids(len(uniq), folds, seed)[unit_of_row]
    eval_mask = np.ones(n, dtype=bool) if eval_mask is None else np.asarray(eval_mask, dtype=bool)
    weights = None if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)

    acc = {c: [] for c in grid}
    bias = {c: [] for c in grid}
    undefined = {c: 0 for c in grid}
    order = sorted(set(grid), reverse=True)  # warm starts run from weak to strong penalty
    for k in range(folds):
        tr = row_fold != k
        va = (row_fold == k) & eval_mask
        init = None
        for c in order:
            model = fit(X[tr], y[tr], None if weights is None else weights[tr], c, seed, init=init)
            init = np.append(model.weights, model.bias)
            pred = model.predict(X[va])
            acc[c].append(float(np.mean(pred == y[va])))
            b = bias_metric(pred, y[va], s[va])
            if b is None:
                undefined[c] += 1
            else:
                bias[c].append(float(b))
    scores = []
    for c in grid:
        if undefined[c]:
            log.warning("bias undefined on %d folds for C=%s; averaging defined folds", undefined[c], c)
        scores.append(CandidateScore(c, float(np.mean(acc[c])),
                                     float(np.mean(bias[c])) if bias[c] else None, undefined[c]))
    shortlisted, chosen = select_from_scores(scores)
    return CvSelection(grid, tuple(scores), shortlisted, chosen, folds, seed)


def select_two_step(ds: Dataset, grid=DEFAULT_GRID, bias_metric: BiasMetric = equalized_odds_bias,
                    folds: int = 10, seed: int = 0, sample_weights=None) -> CvSelection:
    return cross_validate(ds.X, ds.y, ds.s, grid, bias_metric, folds, seed, sample_weights)


# -- reweighing -------------------------------------------------------------------


def reweighing_weights(ds: Dataset) -> np.ndarray:
    """Per-record weight P(s) P(y) / P(s, y) of the record's (s, y) cell."""
    n = len(ds)
    groups = np.unique(ds.s)
    w = np.empty(n)
    for g in groups:
        for yv in (0, 1):
            cell = (ds.s == g) & (ds.y == yv)
            n_cell = int(cell.sum())
            if n_cell == 0:
                raise ContractViolation(f"empty (s={ds.schema.group_label(int(g))}, y={yv}) cell")
            w[cell] = (np.sum(ds.s == g) * np.sum(ds.y == yv)) / (n * n_cell)
    return w


# -- training entry points ----------------------------------------------------------


@dataclass(frozen=True)
class ClassifierConfig:
    grid: tuple = DEFAULT_GRID
    folds: int = 10
    seed: int = 0
    bias_metric: BiasMetric = equalized_odds_bias


def train_plain(train: Dataset, cfg: ClassifierConfig = ClassifierConfig(),
                sample_weights=None) -> tuple[LogRegModel, CvSelection]:
    sel = select_two_step(train, cfg.grid, cfg.bias_metric, cfg.folds, cfg.seed, sample_weights)
    model = fit(train.X, train.y, sample_weights, sel.chosen, cfg.seed)
    model.metadata.update(trained_on=train.fingerprint(), selection=sel)
    return model, sel


def augment(train: Dataset, contrastives: ContrastiveSet):
    """Stack originals and contrastives; returns (X, y, s, units, is_original)."""
    contrastives.check_against(train)
    n = len(train)
    if len(contrastives) == 0:
        return train.X, train.y, train.s, np.arange(n), np.ones(n, dtype=bool)
    X = np.vstack([train.X, contrastives.x_bar])
    y = np.concatenate([train.y, contrastives.inherited_y])
    s = np.concatenate([train.s, contrastives.target_s])
    units = np.concatenate([np.arange(n), contrastives.source_index])
    original = np.concatenate([np.ones(n, dtype=bool), np.zeros(len(contrastives), dtype=bool)])
    return X, y, s, units, original


def train_with_contrastives(train: Dataset, contrastives: ContrastiveSet,
                            cfg: ClassifierConfig = ClassifierConfig()) -> tuple[LogRegModel, CvSelection]:
    """Fit on originals plus contrastives, each contrastive carrying its source's label.

    Selection runs on the augmented set with each original kept in the same
    fold as its contrastives; validation scores use the originals only.
    """
    X, y, s, units, original = augment(train, contrastives)
    sel = cross_validate(X, y, s, cfg.grid, cfg.bias_metric, cfg.folds, cfg.seed, units=units,
                         eval_mask=original)
    model = fit(X, y, None, sel.chosen, cfg.seed)
    model.metadata.update(trained_on=train.fingerprint(), selection=sel, augmented_rows=len(X))
    return model, sel


def save_model(model: LogRegModel, path, schema_hash: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.to_json(schema_hash) + "\n")
    return path
