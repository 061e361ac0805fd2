from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hetbip.graph import EdgeRecord, NodeKind, Relation, TweetRecord, UserRecord, build_graph
from hetbip.sampling import (
    AliasTable,
    NegativeSampler,
    WalkConfig,
    build_neighbor_sets,
    generate_walks,
    node_rng,
    positive_pair_arrays,
    positive_pairs,
    rwr_walk,
    sample_negative,
)


def star(n_leaves, hub_is_tweet=True):
    """Tweet hub retweeted by ``n_leaves`` users (global ids: users 0.., hub last)."""
    users = [UserRecord(f"u{i}") for i in range(n_leaves)]
    tweets = [TweetRecord("t", "u0", text="x")]
    edges = [EdgeRecord(f"u{i}", "t", Relation.RETWEET) for i in range(n_leaves)]
    return build_graph(users, tweets, edges)


def path2():
    return build_graph([UserRecord("u")], [TweetRecord("t", "u", text="x")], [EdgeRecord("u", "t", Relation.POST)])


def expected_visits(graph, start, p, length):
    """Mean over walk positions of the exact position distribution."""
    n = graph.n_nodes
    T = np.zeros((n, n))
    for v in range(n):
        nb = graph.neighbors(v)
        if len(nb):
            T[v, nb] = 1.0 / len(nb)
        else:
            T[v, v] = 1.0
    x = np.zeros(n)
    x[start] = 1.0
    total = x.copy()
    e = x.copy()
    for _ in range(length - 1):
        x = p * e + (1 - p) * x @ T
        total += x
    return total / length


def test_forced_restart():
    g = star(3)
    w = rwr_walk(g, 3, WalkConfig(restart_prob=1.0), np.random.default_rng(0))
    assert w == [3] * 30


def test_alternation():
    w = rwr_walk(path2(), 0, WalkConfig(restart_prob=0.0, walk_length=9), np.random.default_rng(0))
    assert w == [0, 1] * 4 + [0]


def test_isolated_walk():
    g = build_graph([UserRecord("u"), UserRecord("v")], [], [])
    assert rwr_walk(g, 1, WalkConfig(), np.random.default_rng(0)) == [1] * 30


@pytest.mark.parametrize("start", [0, 3])
def test_star_visit_frequencies(start):
    g = star(3)
    cfg = WalkConfig(restart_prob=0.5)
    rng = np.random.default_rng(7)
    counts = np.zeros(g.n_nodes)
    n_walks = 20000
    for _ in range(n_walks):
        np.add.at(counts, rwr_walk(g, start, cfg, rng), 1)
    emp = counts / counts.sum()
    tv = 0.5 * np.abs(emp - expected_visits(g, start, 0.5, 30)).sum()
    assert tv < 0.02


def test_neighbor_sets_star_hub():
    g = star(5)
    cfg = WalkConfig(topk_user=3, seed=4)
    walks = generate_walks(g, cfg)
    ns = build_neighbor_sets(g, cfg, walks)
    hub = 5
    # brute-force recount from the same walks
    c = Counter(n for w in walks[hub * 10 : hub * 10 + 10] for n in w if n != hub)
    want = sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:3]
    assert ns.user[hub] == want
    assert len(ns.user[hub]) == 3
    counts = [n for _, n in ns.user[hub]]
    assert counts == sorted(counts, reverse=True)
    assert ns.tweet[hub] == []
    assert ns == build_neighbor_sets(g, cfg)


def test_neighbor_sets_properties():
    g = star(4)
    ns = build_neighbor_sets(g, WalkConfig(topk_user=2, topk_tweet=2))
    for v in range(g.n_nodes):
        assert all(n < g.n_users for n, _ in ns.user[v])
        assert all(n >= g.n_users for n, _ in ns.tweet[v])
        assert v not in [n for n, _ in ns.user[v] + ns.tweet[v]]
        assert len(ns.user[v]) <= 2 and len(ns.tweet[v]) <= 2
    iso = build_graph([UserRecord("u")], [], [])
    ns = build_neighbor_sets(iso, WalkConfig())
    assert ns.user == [[]] and ns.tweet == [[]]


def test_thread_count_independence():
    g = star(6)
    cfg = WalkConfig(seed=11)
    assert generate_walks(g, cfg, 1) == generate_walks(g, cfg, 3)


def test_positive_pairs_examples():
    assert list(positive_pairs([["a", "b", "c"]], 1)) == [("a", "b"), ("b", "a"), ("b", "c"), ("c", "b")]
    assert list(positive_pairs([[4] * 10], 5)) == []


def test_positive_pair_count_bound():
    rng = np.random.default_rng(0)
    walk = rng.permutation(100)[:30].tolist()  # distinct ids, no self pairs
    pairs = list(positive_pairs([walk], 5))
    bound = 2 * sum(30 - d for d in range(1, 6))
    assert bound == 2 * (29 + 28 + 27 + 26 + 25)
    assert len(pairs) == bound


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 4), min_size=6, max_size=6), min_size=1, max_size=4), st.integers(1, 5))
def test_pair_arrays_match_generator(walks, window):
    c, x = positive_pair_arrays(walks, window)
    assert Counter(zip(c.tolist(), x.tolist())) == Counter(positive_pairs(walks, window))


def test_negative_sampler_statuses():
    users = [UserRecord("A", statuses=3), UserRecord("B", statuses=1), UserRecord("C", statuses=0)]
    g = build_graph(users, [TweetRecord(f"t{i}", "A", text="x") for i in range(3)], [])
    s = NegativeSampler(g)
    exact = [Fraction(4, 7), Fraction(2, 7), Fraction(1, 7)]
    assert np.allclose(s.user_probabilities(), [float(f) for f in exact], atol=1e-15)
    rng = np.random.default_rng(1)
    draws = s.sample(NodeKind.USER, rng, 100_000)
    freq = np.bincount(draws, minlength=3) / 1e5
    assert np.all(np.abs(freq - [float(f) for f in exact]) < 0.02)
    tw = s.sample(NodeKind.TWEET, rng, 100_000) - g.n_users
    assert np.all(np.abs(np.bincount(tw, minlength=3) / 1e5 - 1 / 3) < 0.02)


def test_single_user_and_empty_type():
    g = build_graph([UserRecord("u", statuses=9)], [], [])
    s = NegativeSampler(g)
    rng = np.random.default_rng(0)
    assert all(sample_negative(s, NodeKind.USER, rng) == 0 for _ in range(20))
    with pytest.raises(ValueError):
        s.sample(NodeKind.TWEET, rng)
    with pytest.raises(ValueError):
        AliasTable([])


def test_alias_chi_square():
    rng = np.random.default_rng(2)
    w = rng.integers(0, 50, 40) + 1.0
    table = AliasTable(w)
    n = 100_000
    obs = np.bincount(table.sample(np.random.default_rng(3), n), minlength=len(w))
    assert stats.chisquare(obs, table.p * n).pvalue > 0.001


def test_alias_zero_weight_never_drawn():
    table = AliasTable([0.0, 1.0, 0.0, 2.0])
    draws = table.sample(np.random.default_rng(0), 20000)
    assert set(np.unique(draws).tolist()) == {1, 3}


def test_walk_config_validation():
    with pytest.raises(ValueError):
        WalkConfig(window=30)
    with pytest.raises(ValueError):
        WalkConfig(restart_prob=1.5)


def test_node_rng_streams_differ():
    assert node_rng(0, 1).random() != node_rng(0, 2).random()
