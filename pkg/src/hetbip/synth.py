"""Seeded generator of two-community user/tweet datasets with known leanings.

Community 0 is labeled Left (score -1) and community 1 Right (score +1). Users
interact with tweets of their own community with probability ``p_in`` and
with the other community's tweets with probability ``p_out``; every tweet is
posted by a user of its own community. Text carries only a weak community
signal, controlled by ``content_signal``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .encoders import hash_embed
from .vectors import write_vectors


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 100  # per community
    n_tweets: int = 300  # per community
    p_in: float = 0.03
    p_out: float = 0.003
    statuses_mu: float = 6.0
    statuses_sigma: float = 1.5
    vocab_size: int = 2000  # community-specific tokens per community
    shared_vocab_size: int = 2000
    content_signal: float = 0.3
    description_rate: float = 0.9
    description_len: int = 8
    tweet_len: int = 12
    image_rate: float = 0.3
    image_signal: float = 0.5
    quote_rate: float = 0.3
    text_dim: int = 384
    image_dim: int = 2048
    hash_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_tweets", "vocab_size", "shared_vocab_size", "description_len",
                     "tweet_len", "text_dim", "image_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("p_in", "p_out", "content_signal", "description_rate", "image_rate", "quote_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.statuses_sigma < 0 or self.image_signal < 0:
            raise ValueError("statuses_sigma and image_signal must be >= 0")


PROFILES = {
    "small": SynthConfig(),
    "medium": SynthConfig(n_users=500, n_tweets=1500, p_in=0.006, p_out=0.0006),
}


def profile(name: str, seed: int = 0, **overrides) -> SynthConfig:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return replace(PROFILES[name], seed=seed, **overrides)


def _words(rng, cfg, community, n):
    own = rng.random(n) < cfg.content_signal
    ids = np.where(own, rng.integers(0, cfg.vocab_size, n), rng.integers(0, cfg.shared_vocab_size, n))
    prefix = "lw" if community == 0 else "rw"
    return " ".join(f"{prefix}{i}" if o else f"w{i}" for o, i in zip(own, ids))


def generate(cfg: SynthConfig, out_dir) -> dict:
    """Write users/tweets/edges/labels JSONL and vector sidecars to ``out_dir``.

    Returns a summary with the record counts.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x53594E]))
    U, T = 2 * cfg.n_users, 2 * cfg.n_tweets
    user_comm = np.repeat([0, 1], cfg.n_users)
    tweet_comm = np.repeat([0, 1], cfg.n_tweets)
    uid = [f"u{i:05d}" for i in range(U)]
    tid = [f"t{i:05d}" for i in range(T)]

    counts = {
        "statuses": rng.lognormal(cfg.statuses_mu, cfg.statuses_sigma, U),
        "followers": rng.lognormal(5.0, 2.0, U),
        "friends": rng.lognormal(5.0, 1.0, U),
        "listed": rng.lognormal(1.0, 1.5, U),
        "favorites": rng.lognormal(6.0, 2.0, U),
    }
    verified = rng.random(U) < 0.05
    has_desc = rng.random(U) < cfg.description_rate
    users, text_ids, text_vecs = [], [], []
    for i in range(U):
        rec = {"id": uid[i]}
        for k in ("followers", "friends", "listed", "statuses", "favorites"):
            rec[k] = int(counts[k][i])
        rec["verified"] = bool(verified[i])
        if has_desc[i]:
            rec["description"] = _words(rng, cfg, user_comm[i], cfg.description_len)
            text_ids.append(uid[i])
            text_vecs.append(hash_embed(rec["description"], cfg.text_dim, cfg.hash_seed))
        users.append(rec)

    # authors come from the tweet's own community
    author = np.where(
        tweet_comm == 0,
        rng.integers(0, cfg.n_users, T),
        cfg.n_users + rng.integers(0, cfg.n_users, T),
    )
    has_image = rng.random(T) < cfg.image_rate
    direction = rng.normal(size=cfg.image_dim)
    direction /= np.linalg.norm(direction)
    tweets, image_ids, image_vecs = [], [], []
    for j in range(T):
        text = _words(rng, cfg, tweet_comm[j], cfg.tweet_len)
        tweets.append({"id": tid[j], "author_id": uid[author[j]], "text": text, "has_image": bool(has_image[j])})
        text_ids.append(tid[j])
        text_vecs.append(hash_embed(text, cfg.text_dim, cfg.hash_seed))
        if has_image[j]:
            shift = cfg.image_signal * (1.0 if tweet_comm[j] else -1.0)
            image_ids.append(tid[j])
            image_vecs.append(rng.normal(size=cfg.image_dim) + shift * direction)

    same = user_comm[:, None] == tweet_comm[None, :]
    hit = rng.random((U, T)) < np.where(same, cfg.p_in, cfg.p_out)
    quote = rng.random((U, T)) < cfg.quote_rate
    hit[author, np.arange(T)] = False
    edges = [{"user_id": uid[author[j]], "tweet_id": tid[j], "relation": "post"} for j in range(T)]
    for i, j in zip(*np.nonzero(hit)):
        edges.append({"user_id": uid[i], "tweet_id": tid[j], "relation": "quote" if quote[i, j] else "retweet"})

    _write_jsonl(out / "users.jsonl", users)
    _write_jsonl(out / "tweets.jsonl", tweets)
    _write_jsonl(out / "edges.jsonl", edges)
    _write_jsonl(out / "labels.jsonl", [{"user_id": uid[i], "score": 1.0 if user_comm[i] else -1.0} for i in range(U)])
    write_vectors(out / "text_vectors.tsv", text_ids, np.array(text_vecs).reshape(len(text_ids), cfg.text_dim))
    write_vectors(out / "image_vectors.tsv", image_ids, np.array(image_vecs).reshape(len(image_ids), cfg.image_dim))
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), sort_keys=True, indent=1) + "\n")
    cross = int(hit[~same].sum())
    return {"users": U, "tweets": T, "edges": len(edges), "cross_edges": cross,
            "interactions": int(hit.sum())}


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
