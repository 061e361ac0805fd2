"""Comparison models: feature concatenations, per-tweet voting, late fusion and a GCN.

Per-tweet variants build one example per (user, tweet) interaction. A user's
label is the majority vote of the predictions on their interactions; the
user-level score used for AUROC is the share of Right votes.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .encoders import ScalarNormalizer, fit_normalizer, hash_encoder
from .evaluation import FittedModel, MetricReport, ModelSpec, compute_metrics, run_folds, stratified_folds
from .graph import BipartiteGraph, TweetRecord, UserRecord
from .pca import PcaModel, pca_fit, pca_transform  # noqa: F401  (re-exported)
from .sampling import positive_pair_arrays

LEFT, RIGHT = 0, 1


class BaselineVariant(enum.Enum):
    USER_INFO = "userinfo"
    TEXTUAL = "textual"
    VISUAL = "visual"
    TEXTUAL_VISUAL = "tv"
    USER_TEXTUAL_VISUAL = "utv"
    LATE_FUSION = "latefusion"
    GCN = "gcn"

    @property
    def per_tweet(self) -> bool:
        return self in (BaselineVariant.TEXTUAL, BaselineVariant.VISUAL, BaselineVariant.TEXTUAL_VISUAL,
                        BaselineVariant.USER_TEXTUAL_VISUAL)


@dataclass(frozen=True)
class FeatureSpace:
    """Modality dimensions plus what is needed to vectorise raw records."""

    normalizer: ScalarNormalizer
    text_dim: int = 384
    image_dim: int = 2048
    hash_seed: int = 0

    def user_info(self, user: UserRecord) -> np.ndarray:
        if user.description_vec is not None:
            desc = np.asarray(user.description_vec, dtype=np.float64)
        elif user.description_text is not None:
            desc = hash_encoder(self.text_dim, self.hash_seed)(user.description_text)
        else:
            desc = np.zeros(self.text_dim)
        return np.concatenate([self.normalizer.transform(user), desc])

    def text(self, tweet: TweetRecord) -> np.ndarray:
        if tweet.text_vec is not None:
            return np.asarray(tweet.text_vec, dtype=np.float64)
        return hash_encoder(self.text_dim, self.hash_seed)(tweet.text)

    def image(self, tweet: TweetRecord) -> np.ndarray:
        if tweet.image_vec is None:
            return np.zeros(self.image_dim)
        return np.asarray(tweet.image_vec, dtype=np.float64)

    def dim(self, variant: BaselineVariant) -> int:
        ui = 6 + self.text_dim
        return {
            BaselineVariant.USER_INFO: ui,
            BaselineVariant.TEXTUAL: self.text_dim,
            BaselineVariant.VISUAL: self.image_dim,
            BaselineVariant.TEXTUAL_VISUAL: self.text_dim + self.image_dim,
            BaselineVariant.USER_TEXTUAL_VISUAL: ui + self.text_dim + self.image_dim,
        }[variant]


def feature_space(graph: BipartiteGraph, text_dim=384, image_dim=2048, hash_seed=0) -> FeatureSpace:
    return FeatureSpace(fit_normalizer(graph.users), text_dim, image_dim, hash_seed)


def concat_features(variant: BaselineVariant, user: UserRecord | None, tweet: TweetRecord | None,
                    space: FeatureSpace) -> np.ndarray:
    """Feature vector of one example; a missing image becomes zeros."""
    variant = BaselineVariant(variant)
    parts = {
        BaselineVariant.USER_INFO: lambda: [space.user_info(user)],
        BaselineVariant.TEXTUAL: lambda: [space.text(tweet)],
        BaselineVariant.VISUAL: lambda: [space.image(tweet)],
        BaselineVariant.TEXTUAL_VISUAL: lambda: [space.text(tweet), space.image(tweet)],
        BaselineVariant.USER_TEXTUAL_VISUAL: lambda: [space.user_info(user), space.text(tweet), space.image(tweet)],
    }
    if variant not in parts:
        raise ValueError(f"{variant.value} has no concatenated feature vector")
    out = np.concatenate(parts[variant]())
    assert len(out) == space.dim(variant)
    return out


def interactions(graph: BipartiteGraph) -> tuple[np.ndarray, np.ndarray]:
    """Distinct (user index, tweet index) pairs, sorted."""
    pairs = np.unique(np.stack([graph.edge_user, graph.edge_tweet], axis=1), axis=0)
    return pairs[:, 0], pairs[:, 1]


def variant_matrix(graph: BipartiteGraph, variant: BaselineVariant, space: FeatureSpace, users=None,
                   tweets=None) -> np.ndarray:
    """Rows for user-level (``users``) or per-interaction (``users``, ``tweets``) examples."""
    variant = BaselineVariant(variant)
    if variant == BaselineVariant.USER_INFO:
        return np.array([space.user_info(graph.users[u]) for u in users]).reshape(len(users), -1)
    ui = {int(u): space.user_info(graph.users[u]) for u in np.unique(users)} if variant == \
        BaselineVariant.USER_TEXTUAL_VISUAL else {}
    txt = {int(t): space.text(graph.tweets[t]) for t in np.unique(tweets)}
    img = {int(t): space.image(graph.tweets[t]) for t in np.unique(tweets)}
    rows = []
    for u, t in zip(users, tweets):
        u, t = int(u), int(t)
        part = {
            BaselineVariant.TEXTUAL: [txt[t]],
            BaselineVariant.VISUAL: [img[t]],
            BaselineVariant.TEXTUAL_VISUAL: [txt[t], img[t]],
            BaselineVariant.USER_TEXTUAL_VISUAL: [ui.get(u), txt[t], img[t]],
        }[variant]
        rows.append(np.concatenate(part))
    return np.array(rows).reshape(len(rows), space.dim(variant))


# --------------------------------------------------------------------------- label rules


def vote_user_label(predictions, tie: int = LEFT) -> int:
    """Majority of per-tweet labels; a tie goes to ``tie``, normally the majority training class."""
    p = np.asarray(predictions).astype(int)
    if len(p) == 0:
        raise ValueError("need at least one prediction")
    right = int(p.sum())
    if right == len(p) - right:
        return tie
    return RIGHT if right > len(p) - right else LEFT


def late_fusion_predict(probabilities, f1_scores):
    """F1-weighted mean probability per example and the 0.5-threshold label."""
    P = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    w = np.asarray(f1_scores, dtype=np.float64)
    if len(w) != len(P):
        raise ValueError("one F1 score per model is required")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("late fusion needs at least one model with F1 > 0")
    fused = (w / w.sum()) @ P
    return fused, (fused >= 0.5).astype(int)


# --------------------------------------------------------------------------- evaluation drivers


def _user_votes(model, X, owner, n_users, tie=LEFT):
    """Right-vote share and voted label per user; users without rows get (nan, -1)."""
    pred = (model.predict_proba(X) >= 0.5).astype(int)
    share = np.full(n_users, np.nan)
    label = np.full(n_users, -1)
    order = np.argsort(owner, kind="stable")
    owner_s, pred_s = owner[order], pred[order]
    bounds = np.searchsorted(owner_s, np.arange(n_users + 1))
    for i in range(n_users):
        p = pred_s[bounds[i] : bounds[i + 1]]
        if len(p):
            share[i] = p.mean()
            label[i] = vote_user_label(p, tie)
    return share, label


class VariantEvaluator:
    """User-level out-of-fold scores for one concatenation variant."""

    def __init__(self, graph: BipartiteGraph, variant: BaselineVariant, space: FeatureSpace, spec: ModelSpec):
        self.variant = BaselineVariant(variant)
        self.spec = spec
        self.user_idx, self.y = graph.labeled_users()
        if self.variant == BaselineVariant.USER_INFO:
            self.X = variant_matrix(graph, self.variant, space, self.user_idx)
        else:
            iu, it = interactions(graph)
            pos = {int(u): k for k, u in enumerate(self.user_idx)}
            keep = np.array([int(u) in pos for u in iu], dtype=bool)
            self.owner = np.array([pos[int(u)] for u in iu[keep]], dtype=np.int64)
            self.X = variant_matrix(graph, self.variant, space, iu[keep], it[keep])

    def fit_predict(self, train, test, fold=0):
        """Scores and labels for ``test`` users from a model fit on ``train`` users.

        Returns train-set scores and labels too, for late-fusion weighting.
        """
        if self.variant == BaselineVariant.USER_INFO:
            model = FittedModel(self.spec, self.X[train], self.y[train], fold)
            s_test, s_train = model.predict_proba(self.X[test]), model.predict_proba(self.X[train])
            return (s_test, (s_test >= 0.5).astype(int)), (s_train, (s_train >= 0.5).astype(int))
        in_train = np.zeros(len(self.y), dtype=bool)
        in_train[train] = True
        rows = in_train[self.owner]
        model = FittedModel(self.spec, self.X[rows], self.y[self.owner[rows]], fold)
        prior = float(self.y[train].mean())
        majority = RIGHT if prior > 0.5 else LEFT
        share, label = _user_votes(model, self.X, self.owner, len(self.y), majority)
        # users with no interactions fall back to the training prior and the majority class
        share = np.where(np.isnan(share), prior, share)
        label = np.where(label < 0, majority, label)
        return (share[test], label[test]), (share[train], label[train])


def evaluate_variant(graph: BipartiteGraph, variant, space: FeatureSpace, spec: ModelSpec | None = None,
                     k: int = 10, seed: int = 0) -> MetricReport:
    """Stratified k-fold CV of a concatenation variant or of late fusion."""
    variant = BaselineVariant(variant)
    spec = spec or ModelSpec(pca_dim=128)
    if variant == BaselineVariant.LATE_FUSION:
        return evaluate_late_fusion(graph, space, spec, k, seed)
    if variant == BaselineVariant.GCN:
        raise ValueError("evaluate GCN embeddings with evaluation.cross_validate")
    ev = VariantEvaluator(graph, variant, space, spec)
    folds = stratified_folds(ev.y, k, seed)
    return run_folds(ev.y, folds, lambda tr, te: ev.fit_predict(tr, te, int(folds[te[0]]))[0])


def evaluate_late_fusion(graph, space, spec, k=10, seed=0) -> MetricReport:
    """User Info, Textual and Visual models fused with weights from their training-fold F1."""
    members = [VariantEvaluator(graph, v, space, spec) for v in
               (BaselineVariant.USER_INFO, BaselineVariant.TEXTUAL, BaselineVariant.VISUAL)]
    y = members[0].y
    folds = stratified_folds(y, k, seed)

    def predict_fold(train, test):
        probs, f1s = [], []
        for ev in members:
            (s_te, _), (s_tr, l_tr) = ev.fit_predict(train, test, int(folds[test[0]]))
            probs.append(s_te)
            m = compute_metrics(y[train], s_tr, y_pred=l_tr) if 0 < y[train].sum() < len(train) else {"f1": 0.0}
            f1s.append(m["f1"])
        if not any(f > 0 for f in f1s):
            f1s = [1.0] * len(f1s)
        return late_fusion_predict(np.array(probs), f1s)

    return run_folds(y, folds, predict_fold)


# --------------------------------------------------------------------------- GCN


def normalized_adjacency(n_nodes: int, src, dst) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` of the undirected simple graph on the given edges."""
    A = sp.coo_matrix((np.ones(len(src)), (np.asarray(src), np.asarray(dst))), shape=(n_nodes, n_nodes)).tocsr()
    A = A + A.T
    A.data[:] = 1.0
    A = A + sp.identity(n_nodes, format="csr")
    A.setdiag(1.0)
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = 1.0 / np.sqrt(deg)
    return sp.csr_matrix(sp.diags(inv) @ A @ sp.diags(inv))


def graph_adjacency(graph: BipartiteGraph) -> sp.csr_matrix:
    return normalized_adjacency(graph.n_nodes, graph.edge_user, graph.edge_tweet + graph.n_users)


@dataclass
class GcnConfig:
    dim: int = 128
    layers: int = 2
    tau: float = 0.1
    steps: int = 300
    batch_size: int = 256
    lr: float = 0.01
    window: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1 or self.dim < 1 or self.steps < 0 or self.batch_size < 2:
            raise ValueError("invalid GCN configuration")
        if self.tau <= 0 or self.lr <= 0:
            raise ValueError("tau and lr must be positive")


def gcn_init(in_dim: int, cfg: GcnConfig, rng) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    d_in = in_dim
    for _ in range(cfg.layers):
        bound = np.sqrt(6.0 / (d_in + cfg.dim))
        layers.append((rng.uniform(-bound, bound, (d_in, cfg.dim)), np.zeros(cfg.dim)))
        d_in = cfg.dim
    return layers


def gcn_forward(M, X, layers):
    """``H_{l+1} = tanh(M H_l W_l + b_l)``; returns the output and per-layer caches."""
    H = X
    cache = []
    for W, b in layers:
        P = M @ H
        H = np.tanh(P @ W + b)
        cache.append((P, H))
    return H, cache


def info_nce(Z, anchors, positives, tau):
    """Mean InfoNCE over a batch of pairs with in-batch negatives, on cosine similarity.

    Returns the loss and its gradient with respect to ``Z``.
    """
    za, zp = Z[anchors], Z[positives]
    # guard all-zero rows; their gradient is then taken at the zero vector
    na_ = np.maximum(np.linalg.norm(za, axis=1, keepdims=True), 1e-12)
    np_ = np.maximum(np.linalg.norm(zp, axis=1, keepdims=True), 1e-12)
    a, p = za / na_, zp / np_
    S = a @ p.T / tau
    S = S - S.max(axis=1, keepdims=True)
    logp = S - np.log(np.exp(S).sum(axis=1, keepdims=True))
    B = len(anchors)
    loss = -np.mean(np.diag(logp))
    dS = (np.exp(logp) - np.eye(B)) / B
    da = dS @ p / tau
    dp = dS.T @ a / tau
    dza = (da - a * np.sum(a * da, axis=1, keepdims=True)) / na_
    dzp = (dp - p * np.sum(p * dp, axis=1, keepdims=True)) / np_
    dZ = np.zeros_like(Z)
    np.add.at(dZ, anchors, dza)
    np.add.at(dZ, positives, dzp)
    return loss, dZ


def gcn_backward(M, X, layers, cache, dH):
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        P, H = cache[li]
        dA = dH * (1.0 - H * H)
        grads.append((P.T @ dA, dA.sum(axis=0)))
        if li:
            # M is symmetric
            dH = M @ (dA @ W.T)
    return grads[::-1]


def gcn_loss_and_grads(M, X, layers, anchors, positives, tau):
    Z, cache = gcn_forward(M, X, layers)
    loss, dZ = info_nce(Z, anchors, positives, tau)
    return loss, gcn_backward(M, X, layers, cache, dZ)


def gcn_embed(graph: BipartiteGraph, features, walks, cfg: GcnConfig | None = None, progress=None):
    """Train a GCN on walk co-occurrence pairs with InfoNCE; returns ``(N, dim)`` embeddings."""
    cfg = cfg or GcnConfig()
    X = np.asarray(features, dtype=np.float64)
    M = graph_adjacency(graph)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6C4E]))
    layers = gcn_init(X.shape[1], cfg, rng)
    centers, contexts = positive_pair_arrays(walks, cfg.window) if walks else (np.empty(0, int),) * 2
    m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]
    v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]
    b1, b2, eps = 0.9, 0.999, 1e-8
    n_steps = cfg.steps if len(centers) >= 2 else 0
    for step in range(1, n_steps + 1):
        pick = rng.choice(len(centers), size=min(cfg.batch_size, len(centers)), replace=False)
        loss, grads = gcn_loss_and_grads(M, X, layers, centers[pick], contexts[pick], cfg.tau)
        new_layers = []
        for i, ((W, b), (gW, gb)) in enumerate(zip(layers, grads)):
            out = []
            for j, (p, g) in enumerate(((W, gW), (b, gb))):
                mj = m[i][j]
                vj = v[i][j]
                mj *= b1
                mj += (1 - b1) * g
                vj *= b2
                vj += (1 - b2) * g * g
                out.append(p - cfg.lr * (mj / (1 - b1**step)) / (np.sqrt(vj / (1 - b2**step)) + eps))
            new_layers.append(tuple(out))
        layers = new_layers
        if progress is not None:
            progress(step, loss)
    Z, _ = gcn_forward(M, X, layers)
    return Z


def gcn_features(graph: BipartiteGraph, space: FeatureSpace, dim: int = 128) -> np.ndarray:
    """User Info rows for users and Textual+Visual rows for tweets, PCA-projected per type to ``dim``."""
    U = np.array([space.user_info(u) for u in graph.users])
    T = np.array([np.concatenate([space.text(t), space.image(t)]) for t in graph.tweets])
    out = np.zeros((graph.n_nodes, dim))
    for rows, block in ((slice(0, graph.n_users), U), (slice(graph.n_users, graph.n_nodes), T)):
        if len(block) == 0:
            continue
        Y = pca_transform(pca_fit(block, min(dim, *block.shape)), block)
        out[rows, : Y.shape[1]] = Y
    return out
