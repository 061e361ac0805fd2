"""Random walks with restart, typed neighbor sets, positive pairs and negatives."""
from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .graph import BipartiteGraph, NodeKind


@dataclass(frozen=True)
class WalkConfig:
    walk_length: int = 30
    window: int = 5
    walks_per_node: int = 10
    restart_prob: float = 0.5
    topk_user: int = 10
    topk_tweet: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.walk_length < 1 or self.walks_per_node < 1:
            raise ValueError("walk_length and walks_per_node must be positive")
        if not 0 < self.window < self.walk_length:
            raise ValueError("window must satisfy 0 < window < walk_length")
        if not 0.0 <= self.restart_prob <= 1.0:
            raise ValueError("restart_prob must be in [0, 1]")
        if self.topk_user < 0 or self.topk_tweet < 0:
            raise ValueError("top-k sizes must be non-negative")


def node_rng(seed: int, node: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one start node, so walks do not depend on scheduling."""
    return np.random.default_rng(np.random.SeedSequence([seed, node, stream]))


def rwr_walk(graph: BipartiteGraph, start: int, config: WalkConfig, rng: np.random.Generator) -> list[int]:
    adj = graph.adjacency_lists
    if not 0 <= start < graph.n_nodes:
        raise IndexError(f"node {start} not in graph")
    n_steps = config.walk_length - 1
    if not adj[start]:
        return [start] * config.walk_length
    restarts = rng.random(n_steps).tolist()
    picks = rng.random(n_steps).tolist()
    p = config.restart_prob
    walk = [start]
    cur = start
    for r, c in zip(restarts, picks):
        if r < p:
            cur = start
        else:
            nbrs = adj[cur]
            cur = nbrs[int(c * len(nbrs))]
        walk.append(cur)
    return walk


def _walks_from(graph, start, config):
    rng = node_rng(config.seed, start)
    return [rwr_walk(graph, start, config, rng) for _ in range(config.walks_per_node)]


def generate_walks(graph: BipartiteGraph, config: WalkConfig, threads: int = 1) -> list[list[int]]:
    """``walks_per_node`` walks from every node, grouped by start node in id order."""
    graph.adjacency_lists  # build the cache before any worker touches it
    starts = range(graph.n_nodes)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_node = list(pool.map(lambda s: _walks_from(graph, s, config), starts))
    else:
        per_node = [_walks_from(graph, s, config) for s in starts]
    return [w for ws in per_node for w in ws]


@dataclass
class NeighborSets:
    """Top-k visited users and tweets per node, as ``(node, count)`` lists."""

    user: list[list[tuple[int, int]]]
    tweet: list[list[tuple[int, int]]]

    def of_kind(self, kind: NodeKind):
        return self.user if kind == NodeKind.USER else self.tweet

    def as_array(self, kind: NodeKind) -> tuple[np.ndarray, np.ndarray]:
        """Padded ``(n_nodes, k)`` id matrix (-1 pads) and per-node lengths."""
        sets = self.of_kind(kind)
        k = max((len(s) for s in sets), default=0)
        ids = np.full((len(sets), max(k, 1)), -1, dtype=np.int64)
        lengths = np.zeros(len(sets), dtype=np.int64)
        for g, s in enumerate(sets):
            lengths[g] = len(s)
            if s:
                ids[g, : len(s)] = [n for n, _ in s]
        return ids, lengths


def _top(counter: Counter, k: int):
    return sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


def build_neighbor_sets(graph: BipartiteGraph, config: WalkConfig, walks=None) -> NeighborSets:
    if walks is None:
        walks = generate_walks(graph, config)
    n_users = graph.n_users
    user_sets, tweet_sets = [], []
    per = config.walks_per_node
    for start in range(graph.n_nodes):
        counts = Counter()
        for w in walks[start * per : (start + 1) * per]:
            counts.update(w)
        counts.pop(start, None)
        users = Counter({n: c for n, c in counts.items() if n < n_users})
        tweets = Counter({n: c for n, c in counts.items() if n >= n_users})
        user_sets.append(_top(users, config.topk_user))
        tweet_sets.append(_top(tweets, config.topk_tweet))
    return NeighborSets(user_sets, tweet_sets)


def positive_pairs(walks, window: int):
    """Yield ``(center, context)`` for positions at most ``window`` apart, skipping self-pairs."""
    for walk in walks:
        n = len(walk)
        for i, center in enumerate(walk):
            for j in range(max(0, i - window), min(n, i + window + 1)):
                if j != i and walk[j] != center:
                    yield center, walk[j]


def positive_pair_arrays(walks, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Same multiset as :func:`positive_pairs`, as two arrays (order differs)."""
    W = np.asarray(walks, dtype=np.int64)
    if W.ndim != 2 or W.shape[0] == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    centers, contexts = [], []
    for off in range(1, min(window, W.shape[1] - 1) + 1):
        a, b = W[:, :-off].ravel(), W[:, off:].ravel()
        centers += [a, b]
        contexts += [b, a]
    c, x = np.concatenate(centers), np.concatenate(contexts)
    keep = c != x
    return c[keep], x[keep]


class AliasTable:
    """Vose's alias method over a fixed discrete distribution."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0:
            raise ValueError("need at least one weight")
        if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
            raise ValueError("weights must be finite, non-negative and not all zero")
        n = len(w)
        self.p = w / w.sum()
        scaled = self.p * n
        prob = np.ones(n)
        alias = np.arange(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s, g = small.pop(), large.pop()
            prob[s] = scaled[s]
            alias[s] = g
            scaled[g] = scaled[g] + scaled[s] - 1.0
            (small if scaled[g] < 1.0 else large).append(g)
        # leftovers are 1 up to rounding
        self.prob = prob
        self.alias = alias

    def __len__(self):
        return len(self.prob)

    def sample(self, rng: np.random.Generator, size=None):
        i = rng.integers(0, len(self.prob), size=size)
        u = rng.random(size=size)
        return np.where(u < self.prob[i], i, self.alias[i])


class NegativeSampler:
    """Users weighted by ``statuses + 1``; tweets uniform."""

    def __init__(self, graph: BipartiteGraph):
        self.n_users = graph.n_users
        self.n_tweets = graph.n_tweets
        self.users = AliasTable([u.statuses + 1 for u in graph.users]) if graph.n_users else None

    def user_probabilities(self) -> np.ndarray:
        return self.users.p

    def sample(self, kind: NodeKind, rng: np.random.Generator, size=None):
        """Global node ids of negatives of the requested kind."""
        if kind == NodeKind.USER:
            if self.users is None:
                raise ValueError("no user nodes to sample negatives from")
            return self.users.sample(rng, size)
        if self.n_tweets == 0:
            raise ValueError("no tweet nodes to sample negatives from")
        return self.n_users + rng.integers(0, self.n_tweets, size=size)


def sample_negative(sampler: NegativeSampler, kind: NodeKind, rng: np.random.Generator) -> int:
    return int(sampler.sample(kind, rng))
