"""Turning user and tweet records into ordered attribute-vector lists."""
from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass
from functools import partial

import numpy as np

from .graph import COUNT_FIELDS, BipartiteGraph, TweetRecord, UserRecord

SCALARS = "scalars"
DESCRIPTION = "description"
TEXT = "text"
IMAGE = "image"
AUTHOR_SCALARS = "author_scalars"
AUTHOR_DESCRIPTION = "author_description"

# fixed sequence order fed to the attribute Bi-LSTM
USER_TAGS = (SCALARS, DESCRIPTION)
TWEET_TAGS = (TEXT, IMAGE, AUTHOR_SCALARS, AUTHOR_DESCRIPTION)
ALL_TAGS = USER_TAGS + TWEET_TAGS

N_SCALARS = len(COUNT_FIELDS) + 1

_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


def _token_hash(token: str, seed: int) -> int:
    key = seed.to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def hash_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of a bag of words, L2-normalised."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokenize(text):
        h = _token_hash(tok, seed)
        vec[h % dim] += 1.0 if (h >> 63) & 1 == 0 else -1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def hash_encoder(dim: int = 384, seed: int = 0):
    return partial(hash_embed, dim=dim, seed=seed)


@dataclass(frozen=True)
class ScalarNormalizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, rec: UserRecord) -> np.ndarray:
        z = (np.log1p(np.asarray(rec.counts(), dtype=np.float64)) - self.mean) / self.std
        return np.append(z, 1.0 if rec.verified else 0.0)


def fit_normalizer(users) -> ScalarNormalizer:
    users = list(users)
    if not users:
        raise ValueError("cannot fit a normalizer on zero users")
    logs = np.log1p(np.array([u.counts() for u in users], dtype=np.float64))
    mean = logs.mean(axis=0)
    std = logs.std(axis=0)
    std[std == 0] = 1.0
    return ScalarNormalizer(mean, std)


# An attribute set is a list of (tag, vector) pairs in the fixed tag order.
AttributeSet = list


def encode_user(rec: UserRecord, normalizer: ScalarNormalizer, text_encoder=None) -> AttributeSet:
    attrs = [(SCALARS, normalizer.transform(rec))]
    if rec.description_vec is not None:
        attrs.append((DESCRIPTION, np.asarray(rec.description_vec, dtype=np.float64)))
    elif rec.description_text is not None and text_encoder is not None:
        attrs.append((DESCRIPTION, text_encoder(rec.description_text)))
    return attrs


def encode_tweet(rec: TweetRecord, author: AttributeSet, text_encoder=None) -> AttributeSet:
    if rec.text_vec is not None:
        text = np.asarray(rec.text_vec, dtype=np.float64)
    elif rec.text is not None and text_encoder is not None:
        text = text_encoder(rec.text)
    else:
        raise ValueError(f"tweet {rec.external_id}: no text vector and no text encoder for its text")
    attrs = [(TEXT, text)]
    if rec.image_vec is not None:
        attrs.append((IMAGE, np.asarray(rec.image_vec, dtype=np.float64)))
    author_tags = dict(author)
    attrs.append((AUTHOR_SCALARS, author_tags[SCALARS]))
    if DESCRIPTION in author_tags:
        attrs.append((AUTHOR_DESCRIPTION, author_tags[DESCRIPTION]))
    return attrs


def encode_graph(graph: BipartiteGraph, text_dim: int = 384, hash_seed: int = 0):
    """Attribute sets for every node, indexed by global node id."""
    encoder = hash_encoder(text_dim, hash_seed)
    normalizer = fit_normalizer(graph.users)
    user_attrs = [encode_user(u, normalizer, encoder) for u in graph.users]
    tweet_attrs = [
        encode_tweet(t, user_attrs[graph.user_index[t.author_external_id]], encoder)
        for t in graph.tweets
    ]
    return user_attrs + tweet_attrs, normalizer
