import json

import numpy as np
import pytest

from hetbip.synth import generate, profile


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def user(uid, **kw):
    row = {"id": uid, "followers": 1, "friends": 2, "listed": 0, "statuses": 3, "favorites": 4, "verified": False}
    row.update(kw)
    return row


def write_dataset(d, users, tweets, edges, labels=None):
    d.mkdir(parents=True, exist_ok=True)
    write_jsonl(d / "users.jsonl", users)
    write_jsonl(d / "tweets.jsonl", tweets)
    write_jsonl(d / "edges.jsonl", edges)
    if labels is not None:
        write_jsonl(d / "labels.jsonl", [{"user_id": k, "score": v} for k, v in labels.items()])
    return d


@pytest.fixture
def tiny_dir(tmp_path):
    """Two users, three tweets; t1 is a retweet star."""
    users = [user("u1", description="hello world"), user("u2", verified=True)]
    tweets = [
        {"id": "t1", "author_id": "u1", "text": "first post", "has_image": False},
        {"id": "t2", "author_id": "u2", "text": "second", "has_image": False},
        {"id": "t3", "author_id": "u1", "text": "third one", "has_image": False},
    ]
    edges = [
        {"user_id": "u1", "tweet_id": "t1", "relation": "post"},
        {"user_id": "u2", "tweet_id": "t1", "relation": "retweet"},
        {"user_id": "u2", "tweet_id": "t2", "relation": "post"},
        {"user_id": "u1", "tweet_id": "t3", "relation": "post"},
        {"user_id": "u2", "tweet_id": "t3", "relation": "quote"},
    ]
    return write_dataset(tmp_path / "tiny", users, tweets, edges, {"u1": -0.5, "u2": 1.0})


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A reduced synthetic dataset shared by the slower tests."""
    d = tmp_path_factory.mktemp("synth")
    cfg = profile("small", seed=3, n_users=30, n_tweets=60, p_in=0.1, p_out=0.01, text_dim=16, image_dim=8, vocab_size=200, shared_vocab_size=200)
    generate(cfg, d)
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, filled by tests/test_acceptance.py: number -> (passed, detail)
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
