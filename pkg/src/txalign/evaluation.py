"""Downstream evaluation: metrics, a linear probe, cross-validation and throughput."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax
from scipy.stats import rankdata
from threadpoolctl import threadpool_limits

from .data import EventSequence


class EvaluationError(ValueError):
    pass


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise EvaluationError("scores and labels differ in length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("roc_auc needs both classes present")
    ranks = rankdata(scores)  # average ranks, so ties contribute 1/2
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise EvaluationError("preds and labels differ in length")
    if preds.size == 0:
        raise EvaluationError("accuracy of an empty set")
    return float(np.mean(preds == labels))


@dataclass(frozen=True)
class ClassifierConfig:
    l2: float = 1e-2
    max_iter: int = 2000
    tol: float = 1e-8


def logistic_loss_and_grad(W: np.ndarray, X: np.ndarray, Y: np.ndarray, l2: float) -> tuple[float, np.ndarray]:
    """Mean multinomial cross-entropy plus (l2/2)|W|^2 (bias row excluded).

    ``X`` carries a trailing column of ones; ``Y`` is one-hot.
    """
    n = len(X)
    logits = X @ W
    loss = float(np.mean(logsumexp(logits, axis=1) - np.sum(logits * Y, axis=1)))
    reg = W.copy()
    reg[-1] = 0.0
    loss += 0.5 * l2 * float(np.sum(reg * reg))
    grad = X.T @ (softmax(logits, axis=1) - Y) / n + l2 * reg
    return loss, grad


class LinearClassifier:
    """Multinomial logistic regression on standardised features, fitted by L-BFGS."""

    def __init__(self, config: ClassifierConfig = ClassifierConfig()):
        self.config = config

    def _design(self, X: np.ndarray) -> np.ndarray:
        Xs = (X - self.mean_) / self.scale_
        return np.hstack([Xs, np.ones((len(Xs), 1))])

    def fit(self, X: np.ndarray, y: Sequence[int]) -> "LinearClassifier":
        X = np.asarray(X, dtype=np.float64)
        if not np.all(np.isfinite(X)):
            raise EvaluationError("non-finite features")
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        if len(self.classes_) < 2:
            raise EvaluationError("need at least two classes")
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        A = self._design(X)
        Y = np.eye(len(self.classes_))[y_idx]
        shape = (A.shape[1], len(self.classes_))

        def objective(w):
            loss, grad = logistic_loss_and_grad(w.reshape(shape), A, Y, self.config.l2)
            return loss, grad.ravel()

        res = minimize(objective, np.zeros(shape[0] * shape[1]), jac=True, method="L-BFGS-B",
                       options={"maxiter": self.config.max_iter, "gtol": self.config.tol})
        self.coef_ = res.x.reshape(shape)
        self.n_iter_ = int(res.nit)
        return self

    def gradient(self, X: np.ndarray, y: Sequence[int]) -> np.ndarray:
        """Gradient of the training objective at the fitted weights."""
        y_idx = np.searchsorted(self.classes_, np.asarray(y))
        Y = np.eye(len(self.classes_))[y_idx]
        return logistic_loss_and_grad(self.coef_, self._design(np.asarray(X, dtype=np.float64)), Y, self.config.l2)[1]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self._design(np.asarray(X, dtype=np.float64)) @ self.coef_, axis=1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def train_linear_classifier(X: np.ndarray, y: Sequence[int], config: ClassifierConfig = ClassifierConfig()) -> LinearClassifier:
    return LinearClassifier(config).fit(X, y)


@dataclass
class EvalReport:
    task: str
    metric: str
    fold_values: list[float]
    mean: float
    std: float
    variant: str
    holdout: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def stratified_folds(labels: Sequence[int], k: int, seed: int) -> np.ndarray:
    """Fold id per sample; classes are shuffled then dealt round-robin."""
    labels = np.asarray(labels)
    if k < 2:
        raise EvaluationError("k must be >= 2")
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < k):
        small = classes[counts < k].tolist()
        raise EvaluationError(f"classes {small} have fewer than k={k} members")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in classes])
    folds = np.empty(len(labels), dtype=np.int64)
    folds[order] = np.arange(len(labels)) % k
    return folds


def _score(clf: LinearClassifier, X, y) -> tuple[str, float]:
    if len(clf.classes_) == 2:
        return "roc_auc", roc_auc(clf.predict_proba(X)[:, 1], np.asarray(y) == clf.classes_[1])
    return "accuracy", accuracy(clf.predict(X), y)


def kfold_evaluate(
    embeddings: np.ndarray,
    labels: Sequence[int],
    k: int = 5,
    seed: int = 0,
    variant: str = "",
    task: str = "task",
    config: ClassifierConfig = ClassifierConfig(),
) -> EvalReport:
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    folds = stratified_folds(y, k, seed)
    values, metric = [], ""
    for v in range(k):
        test = folds == v
        clf = train_linear_classifier(X[~test], y[~test], config)
        metric, value = _score(clf, X[test], y[test])
        values.append(value)
    values_arr = np.array(values)
    return EvalReport(task, metric, values, float(values_arr.mean()), float(values_arr.std()), variant)


def holdout_score(X_train, y_train, X_test, y_test, config: ClassifierConfig = ClassifierConfig()) -> float:
    return _score(train_linear_classifier(X_train, y_train, config), X_test, y_test)[1]


# -- throughput -----------------------------------------------------------------


@dataclass
class BenchResult:
    variant: str
    samples_per_sec: float
    wall_seconds: float
    n_samples: int
    params_count: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Stage:
    """One timed piece of an embedding pipeline; ``run`` maps sequences to a matrix."""

    name: str
    run: Callable[[Sequence[EventSequence]], object]


def time_stages(stages: Sequence[Stage], sequences: Sequence[EventSequence], n_samples: int, warmup: int,
                batch_size: int = 64) -> dict[str, float]:
    """Wall-clock seconds per stage over ``n_samples`` sequences, after warmup."""
    if warmup < 10:
        raise EvaluationError("warmup must be >= 10")
    if n_samples < 100:
        raise EvaluationError("n_samples must be >= 100")
    pool = list(sequences)
    picked = [pool[i % len(pool)] for i in range(n_samples)]
    warm = [pool[i % len(pool)] for i in range(warmup)]
    timings = {}
    with threadpool_limits(limits=1):
        for stage in stages:
            stage.run(warm)
            start = time.perf_counter()
            for b in range(0, n_samples, batch_size):
                stage.run(picked[b : b + batch_size])
            timings[stage.name] = time.perf_counter() - start
    return timings


def throughput_benchmark(
    variant: str,
    stages: Sequence[Stage],
    sequences: Sequence[EventSequence],
    params_count: int,
    n_samples: int = 200,
    warmup: int = 10,
    batch_size: int = 64,
) -> BenchResult:
    """Time the stages that make up one variant end to end."""
    timings = time_stages(stages, sequences, n_samples, warmup, batch_size)
    wall = sum(timings.values())
    return BenchResult(variant, n_samples / wall, wall, n_samples, params_count)


def compose_results(timings: dict[str, float], variants: dict[str, tuple[Sequence[str], int]],
                    n_samples: int) -> list[BenchResult]:
    """Results for several variants built from one set of stage timings.

    ``variants`` maps a tag to (stage names, parameter count). Variants that
    share a stage share its measurement, so a variant whose stages are a
    superset of another's is never reported faster.
    """
    out = []
    for tag, (names, params) in variants.items():
        wall = sum(timings[n] for n in names)
        out.append(BenchResult(tag, n_samples / wall, wall, n_samples, params))
    return out


def fom_report(eval_reports: Sequence[EvalReport], bench_results: Sequence[BenchResult], out_path: str | Path,
               title: str | None = None) -> tuple[Path, Path]:
    """Write the figure-of-merit table (CSV) and scatter plot (SVG next to it)."""
    from .plotting import fom_scatter

    evals = {r.variant: r for r in eval_reports}
    benches = {b.variant: b for b in bench_results}
    orphans = sorted(set(evals) ^ set(benches))
    if orphans:
        raise EvaluationError(f"variants without a matching report: {', '.join(orphans)}")
    out_path = Path(out_path)
    rows = []
    for tag in evals:
        e, b = evals[tag], benches[tag]
        rows.append((tag, e.mean, e.std, b.samples_per_sec, b.params_count))
    with out_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "metric_mean", "metric_std", "samples_per_sec", "params"])
        for tag, mean, std, sps, params in rows:
            writer.writerow([tag, f"{mean:.6f}", f"{std:.6f}", f"{sps:.3f}", params])
    svg_path = out_path.with_suffix(".svg")
    metric = next(iter(evals.values())).metric if evals else "metric"
    fom_scatter(rows, svg_path, metric=metric, title=title)
    return out_path, svg_path
