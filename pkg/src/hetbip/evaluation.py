"""Native classifiers, binary classification metrics and stratified cross-validation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .pca import pca_fit, pca_transform

log = logging.getLogger(__name__)

METRICS = ("accuracy", "precision", "recall", "f1", "auroc")


class MetricError(ValueError):
    pass


# --------------------------------------------------------------------------- logistic regression


@dataclass
class LogRegModel:
    coef: np.ndarray
    intercept: float
    C: float
    l1_ratio: float
    n_iter: int = 0
    converged: bool = True
    # set when training saw a single class: every prediction is this probability
    constant: float | None = None
    history: list = field(default_factory=list, repr=False)

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.constant is not None:
            return np.full(len(X), self.constant)
        z = self.decision_function(X)
        return np.exp(-np.logaddexp(0.0, -z))

    def predict(self, X, threshold=0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(int)


def _smooth(X, y, w, b):
    z = X @ w + b
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    r = (np.exp(-np.logaddexp(0.0, -z)) - y) / len(y)
    return loss, X.T @ r, r.sum()


def logreg_fit(X, y, C: float = 0.5, l1_ratio: float = 1.0, max_iter: int = 10000, tol: float = 1e-8,
               record_history: bool = False) -> LogRegModel:
    """Penalised logistic regression by proximal gradient with backtracking.

    Minimises ``mean log-loss + lam * (l1_ratio * |w|_1 + (1 - l1_ratio) / 2 * |w|^2)``
    with ``lam = 1 / (C * n)``; the intercept is not penalised. Stops when the
    objective changes by less than ``tol`` or after ``max_iter`` steps.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("X must be (n, d) with n = len(y) > 0")
    if C <= 0:
        raise ValueError("C must be positive")
    if not 0.0 <= l1_ratio <= 1.0:
        raise ValueError("l1_ratio must be in [0, 1]")
    n, d = X.shape
    classes = np.unique(y)
    if len(classes) < 2:
        log.warning("logistic regression fit on a single class; predicting the class prior")
        return LogRegModel(np.zeros(d), 0.0, C, l1_ratio, constant=float(y.mean()))
    lam = 1.0 / (C * n)
    a, c = lam * l1_ratio, lam * (1.0 - l1_ratio)

    def penalty(w):
        return a * np.abs(w).sum() + 0.5 * c * (w @ w)

    w, b = np.zeros(d), 0.0
    f, gw, gb = _smooth(X, y, w, b)
    obj = f + penalty(w)
    history = [obj] if record_history else []
    t = 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        while True:
            v = w - t * gw
            w_new = np.sign(v) * np.maximum(np.abs(v) - t * a, 0.0) / (1.0 + t * c)
            b_new = b - t * gb
            f_new, gw_new, gb_new = _smooth(X, y, w_new, b_new)
            dw, db = w_new - w, b_new - b
            if f_new <= f + gw @ dw + gb * db + (dw @ dw + db * db) / (2 * t) + 1e-15 or t < 1e-12:
                break
            t *= 0.5
        obj_new = f_new + penalty(w_new)
        change = obj - obj_new
        w, b, f, gw, gb, obj = w_new, b_new, f_new, gw_new, gb_new, obj_new
        if record_history:
            history.append(obj)
        if abs(change) < tol:
            converged = True
            break
        t *= 2.0
    return LogRegModel(w, float(b), C, l1_ratio, it, converged, history=history)


# --------------------------------------------------------------------------- random forest


@dataclass
class Tree:
    """Flat CART tree; ``feature == -1`` marks a leaf whose ``value`` is P(y = 1)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return node

    def predict_proba(self, X) -> np.ndarray:
        return self.value[self.apply(np.asarray(X, dtype=np.float64))]

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


def _best_split(X, y, idx, features):
    """Lowest weighted Gini split over ``features``; ``None`` if no feature varies."""
    best = None
    n = len(idx)
    ys = y[idx]
    for f in features:
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs, yo = xs[order], ys[order]
        cand = np.nonzero(xs[1:] > xs[:-1])[0]
        if len(cand) == 0:
            continue
        pos = np.cumsum(yo)[cand]
        nl = cand + 1.0
        nr = n - nl
        tot = yo.sum()
        pl, pr = pos / nl, (tot - pos) / nr
        g = (nl * 2 * pl * (1 - pl) + nr * 2 * pr * (1 - pr)) / n
        j = int(np.argmin(g))
        if best is None or g[j] < best[0]:
            lo, hi = xs[cand[j]], xs[cand[j] + 1]
            thr = 0.5 * (lo + hi)
            if not lo <= thr < hi:
                thr = lo
            best = (g[j], f, thr)
    return best


def tree_fit(X, y, rng: np.random.Generator, max_features: int | None = None, max_depth: int | None = None) -> Tree:
    """CART classification tree grown until leaves are pure or unsplittable."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    m = d if max_features is None else max(1, min(d, max_features))
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        p = value[node]
        if p in (0.0, 1.0) or len(idx) < 2 or (max_depth is not None and depth >= max_depth):
            continue
        perm = rng.permutation(d)
        split = _best_split(X, y, idx, perm[:m])
        if split is None and m < d:
            # every sampled feature is constant here; fall back to the rest
            split = _best_split(X, y, idx, perm[m:])
        if split is None:
            continue
        _, f, thr = split
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = int(f), float(thr)
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(*(np.array(a) for a in (feature, threshold, left, right, value)))


@dataclass
class ForestModel:
    trees: list
    seed: int
    bootstrap: bool

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def votes(self, X) -> np.ndarray:
        """``(n_trees, n)`` hard 0/1 votes; a leaf at exactly 0.5 votes 0."""
        X = np.asarray(X, dtype=np.float64)
        return np.array([(t.predict_proba(X) > 0.5).astype(int) for t in self.trees])

    def predict_proba(self, X) -> np.ndarray:
        return self.votes(X).mean(axis=0)

    def predict(self, X, threshold=0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(int)


def forest_fit(X, y, n_trees: int = 100, seed: int = 0, max_features="sqrt", bootstrap: bool = True,
               max_depth: int | None = None) -> ForestModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(X) < 1:
        raise ValueError("need at least one example")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    d = X.shape[1]
    m = max(1, int(np.sqrt(d))) if max_features == "sqrt" else (d if max_features is None else int(max_features))
    trees = []
    for i in range(n_trees):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        idx = rng.integers(0, len(X), len(X)) if bootstrap else np.arange(len(X))
        trees.append(tree_fit(X[idx], y[idx], rng, m, max_depth))
    return ForestModel(trees, seed, bootstrap)


def forest_predict_proba(model: ForestModel, X) -> np.ndarray:
    return model.predict_proba(X)


# --------------------------------------------------------------------------- metrics


def auroc(y_true, scores) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg) + 0.5 P(tie)."""
    y = np.asarray(y_true).astype(int)
    s = np.asarray(scores, dtype=np.float64)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise MetricError("AUROC is undefined when only one class is present")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s))
    ss = s[order]
    i = 0
    while i < len(ss):
        j = i
        while j + 1 < len(ss) and ss[j + 1] == ss[i]:
            j += 1
        # average of 1-based ranks i+1 .. j+1, kept as an exact half-integer
        ranks[order[i : j + 1]] = (i + j + 2) / 2
        i = j + 1
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2
    return float(u / (n1 * n0))


def confusion(y_true, y_pred):
    y, p = np.asarray(y_true).astype(int), np.asarray(y_pred).astype(int)
    tp = int(np.sum((y == 1) & (p == 1)))
    fp = int(np.sum((y == 0) & (p == 1)))
    fn = int(np.sum((y == 1) & (p == 0)))
    tn = int(np.sum((y == 0) & (p == 0)))
    return tp, fp, fn, tn


def compute_metrics(y_true, scores, threshold: float = 0.5, y_pred=None) -> dict[str, float]:
    """Accuracy, precision, recall, F1 and AUROC.

    Labels are ``scores >= threshold`` unless ``y_pred`` is given. Precision and
    recall with an empty denominator are 0.
    """
    y = np.asarray(y_true).astype(int)
    if len(y) < 1 or not np.all((y == 0) | (y == 1)):
        raise MetricError("y_true must be a non-empty 0/1 vector")
    s = np.asarray(scores, dtype=np.float64)
    pred = (s >= threshold).astype(int) if y_pred is None else np.asarray(y_pred).astype(int)
    tp, fp, fn, tn = confusion(y, pred)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    # same value as 2PR / (P + R), but a single correctly rounded division
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return {
        "accuracy": (tp + tn) / len(y),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "auroc": auroc(y, s),
    }


# --------------------------------------------------------------------------- cross-validation


def stratified_folds(y, k: int, seed: int = 0) -> np.ndarray:
    """Fold index per example.

    Each class is shuffled and dealt round-robin, continuing the deal across
    classes, so per-fold class counts are within one of proportional. Every
    class needs at least ``k`` members, except that ``k == n`` gives
    leave-one-out.
    """
    y = np.asarray(y)
    n = len(y)
    if not 2 <= k <= n:
        raise ValueError(f"k must be in [2, {n}], got {k}")
    classes, counts = np.unique(y, return_counts=True)
    if k < n:
        for c, m in zip(classes.tolist(), counts.tolist()):
            if m < k:
                raise ValueError(f"class {c!r} has {m} members, fewer than k = {k}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D]))
    folds = np.empty(n, dtype=np.int64)
    offset = 0
    for c in classes:
        idx = rng.permutation(np.nonzero(y == c)[0])
        folds[idx] = (offset + np.arange(len(idx))) % k
        offset += len(idx)
    return folds


@dataclass
class ModelSpec:
    kind: str = "logreg"  # logreg | rf
    C: float = 0.5
    l1_ratio: float = 1.0
    n_trees: int = 100
    pca_dim: int | None = None
    standardize: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("logreg", "rf"):
            raise ValueError(f"unknown model kind {self.kind!r}")


class FittedModel:
    """Preprocessing (fit on training rows only) followed by a classifier."""

    def __init__(self, spec: ModelSpec, X, y, fold: int = 0):
        X = np.asarray(X, dtype=np.float64)
        self.mu = self.sd = None
        if spec.standardize:
            self.mu = X.mean(axis=0)
            self.sd = X.std(axis=0)
            self.sd[self.sd == 0] = 1.0
            X = (X - self.mu) / self.sd
        self.pca = None
        if spec.pca_dim is not None and spec.pca_dim < X.shape[1]:
            self.pca = pca_fit(X, min(spec.pca_dim, *X.shape))
            X = pca_transform(self.pca, X)
        if spec.kind == "logreg":
            self.clf = logreg_fit(X, y, spec.C, spec.l1_ratio)
        else:
            self.clf = forest_fit(X, y, spec.n_trees, seed=int(np.random.SeedSequence([spec.seed, fold]).generate_state(1)[0]))

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.mu is not None:
            X = (X - self.mu) / self.sd
        if self.pca is not None:
            X = pca_transform(self.pca, X)
        return X

    def predict_proba(self, X):
        return self.clf.predict_proba(self.transform(X))


@dataclass
class MetricReport:
    mean: dict
    std: dict
    per_fold: list
    pooled_auroc: float
    n: int
    k: int
    # per-example out-of-fold scores and predicted labels
    scores: np.ndarray = field(repr=False, default=None)
    predictions: np.ndarray = field(repr=False, default=None)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "k": self.k,
            "mean": self.mean,
            "std": self.std,
            "pooled_auroc": self.pooled_auroc,
            "per_fold": self.per_fold,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def table(self, title: str = "") -> str:
        head = f"{'metric':<10} {'mean':>8} {'std':>8}"
        rows = [f"{m:<10} {self.mean[m]:>8.4f} {self.std[m]:>8.4f}" for m in METRICS]
        return "\n".join(([title] if title else []) + [head] + rows)


def _check_f1(m):
    p, r = m["precision"], m["recall"]
    if p + r > 0 and abs(m["f1"] - 2 * p * r / (p + r)) > 1e-12:
        raise MetricError(f"inconsistent F1 {m['f1']} for precision {p} and recall {r}")


def run_folds(y, folds, predict_fold) -> MetricReport:
    """Evaluate ``predict_fold(train_idx, test_idx) -> (scores, labels)`` on each fold.

    Folds whose test part holds a single class (for example leave-one-out)
    have no AUROC of their own; the AUROC row then reports the pooled
    out-of-fold value for every fold.
    """
    y = np.asarray(y).astype(int)
    k = int(folds.max()) + 1
    scores = np.empty(len(y))
    preds = np.empty(len(y), dtype=int)
    per_fold, notes = [], []
    for f in range(k):
        test = np.nonzero(folds == f)[0]
        train = np.nonzero(folds != f)[0]
        s, p = predict_fold(train, test)
        scores[test], preds[test] = s, p
        yt = y[test]
        row = {"fold": f, "n_test": len(test)}
        tp, fp, fn, tn = confusion(yt, p)
        row["accuracy"] = (tp + tn) / len(test)
        row["precision"] = tp / (tp + fp) if tp + fp else 0.0
        row["recall"] = tp / (tp + fn) if tp + fn else 0.0
        row["f1"] = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        row["auroc"] = auroc(yt, s) if 0 < yt.sum() < len(yt) else None
        _check_f1(row)
        per_fold.append(row)
    pooled = auroc(y, scores) if 0 < y.sum() < len(y) else float("nan")
    if any(r["auroc"] is None for r in per_fold):
        notes.append("some test folds hold one class; fold AUROC replaced by the pooled out-of-fold AUROC")
        for r in per_fold:
            r["auroc"] = pooled
    mean = {m: float(np.mean([r[m] for r in per_fold])) for m in METRICS}
    std = {m: float(np.std([r[m] for r in per_fold])) for m in METRICS}
    return MetricReport(mean, std, per_fold, pooled, len(y), k, scores, preds, notes)


def cross_validate(X, y, spec: ModelSpec | None = None, k: int = 10, seed: int = 0) -> MetricReport:
    """Stratified k-fold CV; preprocessing is refit inside every training fold."""
    spec = spec or ModelSpec()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    folds = stratified_folds(y, k, seed)

    def predict_fold(train, test):
        model = FittedModel(spec, X[train], y[train], fold=int(folds[test[0]]))
        s = model.predict_proba(X[test])
        return s, (s >= 0.5).astype(int)

    return run_folds(y, folds, predict_fold)
