"""Polarization analysis: political scores, embedding clusters, activity and word tables."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .encoders import tokenize
from .graph import BipartiteGraph, Relation
from .pca import pca_fit, pca_transform

log = logging.getLogger(__name__)

MIN_FOLLOWS = 5


# --------------------------------------------------------------------------- political score


@dataclass(frozen=True)
class PoliticalScore:
    n_right: int
    n_left: int
    score: float | None
    eligible: bool

    @property
    def label(self) -> str | None:
        """``"Right"`` when the score is >= 0, ``"Left"`` below, ``None`` without a score."""
        if self.score is None:
            return None
        return "Right" if self.score >= 0 else "Left"


def political_score(n_right: int, n_left: int) -> PoliticalScore:
    if n_right < 0 or n_left < 0:
        raise ValueError("counts must be non-negative")
    total = n_right + n_left
    score = (n_right - n_left) / total if total else None
    return PoliticalScore(n_right, n_left, score, n_right >= MIN_FOLLOWS or n_left >= MIN_FOLLOWS)


# --------------------------------------------------------------------------- clustering


def _sq_dists(X, C):
    d = (X * X).sum(axis=1)[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(X, k, rng) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a center: pick an unused index
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[[nxt]])[:, 0])
    return X[chosen].copy()


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    n_iter: int
    inertia_trace: list = field(default_factory=list, repr=False)


def kmeans(X, k: int, rng, max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations from a k-means++ start until assignments stop changing.

    An emptied cluster takes the point farthest from its current center, so
    every cluster stays non-empty when ``k <= n``.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    C = kmeans_pp_init(X, k, rng)
    labels = np.full(n, -1)
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        D = _sq_dists(X, C)
        new = D.argmin(axis=1)
        counts = np.bincount(new, minlength=k)
        for c in np.nonzero(counts == 0)[0]:
            dist = D[np.arange(n), new]
            movable = counts[new] > 1
            j = int(np.nonzero(movable)[0][np.argmax(dist[movable])])
            counts[new[j]] -= 1
            new[j] = c
            counts[c] = 1
        trace.append(float(D[np.arange(n), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
        C = np.array([X[labels == c].mean(axis=0) for c in range(k)])
    inertia = float(((X - C[labels]) ** 2).sum())
    return KMeansResult(labels, C, inertia, it, trace)


def silhouette_samples(X, labels, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Per-point silhouette and a mask of degenerate points.

    Points in singleton clusters get 0 (the usual convention), as do points
    whose ``max(a, b)`` is 0, i.e. duplicates of all their comparison points.
    Both cases are flagged as degenerate.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    ks, inv = np.unique(labels, return_inverse=True)
    n, k = len(X), len(ks)
    sizes = np.bincount(inv, minlength=k)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), inv] = 1.0
    s = np.zeros(n)
    degenerate = np.zeros(n, dtype=bool)
    sq = (X * X).sum(axis=1)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        D = np.sqrt(np.maximum(sq[lo:hi, None] - 2.0 * X[lo:hi] @ X.T + sq[None, :], 0.0))
        D[np.arange(hi - lo), np.arange(lo, hi)] = 0.0
        sums = D @ onehot
        own = inv[lo:hi]
        rows = np.arange(hi - lo)
        own_size = sizes[own]
        a = np.where(own_size > 1, sums[rows, own] / np.maximum(own_size - 1, 1), 0.0)
        mean_other = sums / sizes[None, :]
        mean_other[rows, own] = np.inf
        b = mean_other.min(axis=1) if k > 1 else np.zeros(hi - lo)
        m = np.maximum(a, b)
        ok = (own_size > 1) & (m > 0)
        s[lo:hi] = np.where(ok, (b - a) / np.where(m > 0, m, 1.0), 0.0)
        degenerate[lo:hi] = ~ok
    return s, degenerate


def silhouette_score(X, labels) -> float:
    return float(silhouette_samples(X, labels)[0].mean())


@dataclass
class ClusterReport:
    k: int
    labels: np.ndarray
    silhouettes: dict  # k -> mean silhouette
    inertias: dict
    degenerate: dict  # k -> points whose silhouette was set to 0 (singleton or zero denominator)
    clusters: list = field(default_factory=list)  # per-cluster summaries, filled by summarize_clusters

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "silhouettes": {str(k): v for k, v in self.silhouettes.items()},
            "inertias": {str(k): v for k, v in self.inertias.items()},
            "degenerate": {str(k): v for k, v in self.degenerate.items()},
            "sizes": np.bincount(self.labels, minlength=self.k).tolist(),
            "clusters": self.clusters,
        }


def cluster_embeddings(X, k_range=range(2, 9), seed: int = 0, n_init: int = 5) -> ClusterReport:
    """K-means for each k, keeping the k with the highest mean silhouette.

    Each k keeps the lowest-inertia of ``n_init`` k-means++ restarts. Ties in
    silhouette go to the smaller k.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    ks = sorted(set(int(k) for k in k_range))
    if not ks or ks[0] < 2 or ks[-1] > n:
        raise ValueError(f"k values must lie in [2, {n}]")
    best = None
    sil, inertias, degen, all_labels = {}, {}, {}, {}
    for k in ks:
        runs = []
        for r in range(n_init):
            rng = np.random.default_rng(np.random.SeedSequence([seed, k, r]))
            runs.append(kmeans(X, k, rng))
        res = min(runs, key=lambda z: z.inertia)
        s, deg = silhouette_samples(X, res.labels)
        sil[k], inertias[k], degen[k] = float(s.mean()), res.inertia, int(deg.sum())
        if degen[k]:
            log.warning("k=%d: %d points have a degenerate silhouette (set to 0)", k, degen[k])
        all_labels[k] = res.labels
        if best is None or sil[k] > sil[best]:
            best = k
    return ClusterReport(best, all_labels[best], sil, inertias, degen)


# --------------------------------------------------------------------------- activity and words


def activity_stat(graph: BipartiteGraph, assignment, relations=(Relation.RETWEET, Relation.QUOTE)) -> dict:
    """Users per unique tweet for each cluster.

    ``assignment`` gives a cluster id per user index (negative = unassigned).
    Counts distinct (user, tweet) pairs over the chosen relations, divided by
    the distinct tweets those members touched. Clusters touching no tweet map
    to ``None``.
    """
    assignment = np.asarray(assignment)
    if len(assignment) != graph.n_users:
        raise ValueError("assignment must cover every user")
    keep = np.isin(graph.edge_relation, [int(r) for r in relations])
    pairs = np.unique(np.stack([graph.edge_user[keep], graph.edge_tweet[keep]], axis=1), axis=0)
    out = {}
    for c in sorted(set(assignment[assignment >= 0].tolist())):
        mine = pairs[assignment[pairs[:, 0]] == c] if len(pairs) else pairs
        tweets = len(np.unique(mine[:, 1])) if len(mine) else 0
        out[c] = len(mine) / tweets if tweets else None
    return out


def load_stopwords(path=None) -> frozenset:
    if path is None:
        text = resources.files("hetbip").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return frozenset(w.strip() for w in text.splitlines() if w.strip() and not w.startswith("#"))


def word_frequency(descriptions, stopwords=None, top_n: int | None = None) -> list[tuple[str, int]]:
    """Word counts sorted by count desc, then word asc."""
    stop = load_stopwords() if stopwords is None else frozenset(stopwords)
    counts = Counter(w for text in descriptions if text for w in tokenize(text) if w not in stop)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked if top_n is None else ranked[:top_n]


def project_2d(X) -> np.ndarray:
    """PCA coordinates on the top two components; missing components are 0."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) < 2:
        raise ValueError("need at least two points")
    Y = pca_transform(pca_fit(X, min(2, X.shape[1])), X)
    out = np.zeros((len(X), 2))
    out[:, : Y.shape[1]] = Y
    return out


def summarize_clusters(report: ClusterReport, graph: BipartiteGraph, user_rows, scores=None,
                       stopwords=None, top_n: int = 20) -> list[dict]:
    """Per-cluster size, mean political score, activity statistic and top words.

    ``user_rows`` maps each clustered row to a user index; ``scores`` maps user
    index to political score.
    """
    user_rows = np.asarray(user_rows)
    assign = np.full(graph.n_users, -1)
    assign[user_rows] = report.labels
    act = activity_stat(graph, assign)
    out = []
    for c in range(report.k):
        members = user_rows[report.labels == c]
        sc = [scores[int(u)] for u in members if scores is not None and int(u) in scores]
        words = word_frequency([graph.users[int(u)].description_text for u in members], stopwords, top_n)
        out.append({
            "cluster": c,
            "size": int(len(members)),
            "mean_score": float(np.mean(sc)) if sc else None,
            "activity": act.get(c),
            "top_words": words,
        })
    report.clusters = out
    return out
