"""Records, dataset ingestion and the bipartite user/tweet graph."""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    BipartiteViolationError,
    DataError,
    DuplicateEdgeError,
    ParseError,
    ReferentialIntegrityError,
)
from .vectors import read_vectors

log = logging.getLogger(__name__)

COUNT_FIELDS = ("followers", "friends", "listed", "statuses", "favorites")


class NodeKind(enum.IntEnum):
    USER = 0
    TWEET = 1


class Relation(enum.IntEnum):
    POST = 0
    RETWEET = 1
    QUOTE = 2

    @classmethod
    def parse(cls, name: str) -> "Relation":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown relation {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True, order=True)
class NodeId:
    kind: NodeKind
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("node index must be non-negative")


@dataclass
class UserRecord:
    external_id: str
    followers: int = 0
    friends: int = 0
    listed: int = 0
    statuses: int = 0
    favorites: int = 0
    verified: bool = False
    description_text: str | None = None
    description_vec: np.ndarray | None = None
    # created from a tweet's embedded author block rather than users.jsonl
    synthetic: bool = False

    def __post_init__(self):
        for name in COUNT_FIELDS:
            value = getattr(self, name)
            if value < 0:
                raise DataError(f"user {self.external_id}: {name} must be >= 0")

    def counts(self) -> list[int]:
        return [getattr(self, name) for name in COUNT_FIELDS]


@dataclass
class TweetRecord:
    external_id: str
    author_external_id: str
    text: str | None = None
    text_vec: np.ndarray | None = None
    image_vec: np.ndarray | None = None
    has_image: bool = False

    def __post_init__(self):
        if self.text is None and self.text_vec is None:
            raise DataError(f"tweet {self.external_id}: needs text or a text vector")


@dataclass(frozen=True)
class EdgeRecord:
    user_external_id: str
    tweet_external_id: str
    relation: Relation


@dataclass
class VectorsConfig:
    text_vectors: Path | None = None
    image_vectors: Path | None = None
    text_dim: int = 384
    image_dim: int = 2048


# --------------------------------------------------------------------------- ingestion


def _read_jsonl(path):
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(path, lineno, "expected a JSON object")
            yield lineno, obj


def _count(obj, key, path, lineno):
    value = obj.get(key, 0)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
        raise ParseError(path, lineno, f"{key} must be a non-negative count")
    if isinstance(value, float):
        if not value.is_integer():
            raise ParseError(path, lineno, f"{key} must be an integer")
        value = int(value)
    return value


def _user_from_json(obj, path, lineno, synthetic=False) -> UserRecord:
    if "id" not in obj:
        raise ParseError(path, lineno, "missing key 'id'")
    desc = obj.get("description")
    if desc is not None and not isinstance(desc, str):
        raise ParseError(path, lineno, "description must be a string")
    verified = obj.get("verified", False)
    if not isinstance(verified, bool):
        raise ParseError(path, lineno, "verified must be a boolean")
    return UserRecord(
        external_id=str(obj["id"]),
        **{k: _count(obj, k, path, lineno) for k in COUNT_FIELDS},
        verified=verified,
        description_text=desc or None,
        synthetic=synthetic,
    )


def load_dataset(users_path, tweets_path, edges_path, vectors: VectorsConfig | None = None):
    """Parse the three JSON Lines files and attach sidecar vectors.

    Returns ``(users, tweets, edges)``. Tweets whose author is missing from
    ``users.jsonl`` but which carry an ``author`` object get a synthetic user
    record built from it; any other unresolved id raises
    :class:`ReferentialIntegrityError`.
    """
    vectors = vectors or VectorsConfig()
    text_vecs: dict[str, np.ndarray] = {}
    image_vecs: dict[str, np.ndarray] = {}
    if vectors.text_vectors is not None:
        ids, rows = read_vectors(vectors.text_vectors, expected_dim=vectors.text_dim)
        text_vecs = dict(zip(ids, rows))
    if vectors.image_vectors is not None:
        ids, rows = read_vectors(vectors.image_vectors, expected_dim=vectors.image_dim)
        image_vecs = dict(zip(ids, rows))

    users: list[UserRecord] = []
    user_ids: dict[str, int] = {}

    def add_user(rec):
        # an id present in both namespaces receives the text vector on both records
        rec.description_vec = text_vecs.get(rec.external_id)
        user_ids[rec.external_id] = len(users)
        users.append(rec)

    for lineno, obj in _read_jsonl(users_path):
        rec = _user_from_json(obj, users_path, lineno)
        if rec.external_id in user_ids:
            raise ParseError(users_path, lineno, f"duplicate user id {rec.external_id!r}")
        add_user(rec)

    tweets: list[TweetRecord] = []
    tweet_ids: dict[str, int] = {}
    missing_images = 0
    for lineno, obj in _read_jsonl(tweets_path):
        for key in ("id", "author_id"):
            if key not in obj:
                raise ParseError(tweets_path, lineno, f"missing key {key!r}")
        tid, aid = str(obj["id"]), str(obj["author_id"])
        if tid in tweet_ids:
            raise ParseError(tweets_path, lineno, f"duplicate tweet id {tid!r}")
        if aid not in user_ids:
            author = obj.get("author")
            if not isinstance(author, dict):
                raise ReferentialIntegrityError(
                    f"{tweets_path}:{lineno}: author {aid!r} of tweet {tid!r} is not a known user"
                )
            add_user(_user_from_json({**author, "id": aid}, tweets_path, lineno, synthetic=True))
        text = obj.get("text")
        if text is not None and not isinstance(text, str):
            raise ParseError(tweets_path, lineno, "text must be a string")
        has_image = obj.get("has_image", False)
        if not isinstance(has_image, bool):
            raise ParseError(tweets_path, lineno, "has_image must be a boolean")
        image_vec = image_vecs.get(tid)
        if has_image and image_vec is None:
            missing_images += 1
        try:
            rec = TweetRecord(tid, aid, text, text_vecs.get(tid), image_vec, has_image)
        except DataError as exc:
            raise ParseError(tweets_path, lineno, str(exc)) from None
        tweet_ids[tid] = len(tweets)
        tweets.append(rec)
    if missing_images:
        log.warning("%d tweets flagged has_image have no image vector", missing_images)

    edges: list[EdgeRecord] = []
    for lineno, obj in _read_jsonl(edges_path):
        for key in ("user_id", "tweet_id", "relation"):
            if key not in obj:
                raise ParseError(edges_path, lineno, f"missing key {key!r}")
        uid, tid = str(obj["user_id"]), str(obj["tweet_id"])
        try:
            rel = Relation.parse(str(obj["relation"]))
        except ValueError as exc:
            raise ParseError(edges_path, lineno, str(exc)) from None
        if uid not in user_ids:
            if uid in tweet_ids:
                raise BipartiteViolationError(f"{edges_path}:{lineno}: {uid!r} is a tweet, not a user")
            raise ReferentialIntegrityError(f"{edges_path}:{lineno}: unknown user {uid!r}")
        if tid not in tweet_ids:
            if tid in user_ids:
                raise BipartiteViolationError(
                    f"{edges_path}:{lineno}: user-user edge {uid!r} -> {tid!r}"
                )
            raise ReferentialIntegrityError(f"{edges_path}:{lineno}: unknown tweet {tid!r}")
        edges.append(EdgeRecord(uid, tid, rel))

    log.info("loaded %d users, %d tweets, %d edges", len(users), len(tweets), len(edges))
    return users, tweets, edges


def load_labels(path) -> dict[str, float]:
    scores: dict[str, float] = {}
    for lineno, obj in _read_jsonl(path):
        if "user_id" not in obj or "score" not in obj:
            raise ParseError(path, lineno, "expected keys user_id and score")
        score = obj["score"]
        if not isinstance(score, (int, float)) or isinstance(score, bool) or not -1 <= score <= 1:
            raise ParseError(path, lineno, "score must be a number in [-1, 1]")
        scores[str(obj["user_id"])] = float(score)
    return scores


@dataclass
class Dataset:
    users: list[UserRecord]
    tweets: list[TweetRecord]
    edges: list[EdgeRecord]
    labels: dict[str, float] | None = None


def load_dataset_dir(directory, text_dim=384, image_dim=2048) -> Dataset:
    """Load the standard file layout of a dataset directory."""
    d = Path(directory)
    vec = VectorsConfig(
        text_vectors=d / "text_vectors.tsv" if (d / "text_vectors.tsv").exists() else None,
        image_vectors=d / "image_vectors.tsv" if (d / "image_vectors.tsv").exists() else None,
        text_dim=text_dim,
        image_dim=image_dim,
    )
    users, tweets, edges = load_dataset(d / "users.jsonl", d / "tweets.jsonl", d / "edges.jsonl", vec)
    labels = load_labels(d / "labels.jsonl") if (d / "labels.jsonl").exists() else None
    return Dataset(users, tweets, edges, labels)


# --------------------------------------------------------------------------- graph


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Immutable user/tweet graph.

    Nodes have a global integer id: users occupy ``0 .. n_users-1`` and tweets
    follow. Adjacency is CSR over global ids, one entry per edge, sorted by
    counterpart id and then relation.
    """

    users: tuple
    tweets: tuple
    edge_user: np.ndarray
    edge_tweet: np.ndarray
    edge_relation: np.ndarray
    adj_ptr: np.ndarray
    adj_nbr: np.ndarray
    adj_rel: np.ndarray
    user_index: dict = field(repr=False)
    tweet_index: dict = field(repr=False)
    label_map: dict | None = field(default=None, repr=False)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_tweets(self) -> int:
        return len(self.tweets)

    @property
    def n_nodes(self) -> int:
        return len(self.users) + len(self.tweets)

    @property
    def n_edges(self) -> int:
        return len(self.edge_user)

    def kind(self, g: int) -> NodeKind:
        return NodeKind.USER if g < len(self.users) else NodeKind.TWEET

    def kinds(self) -> np.ndarray:
        out = np.ones(self.n_nodes, dtype=np.int8)
        out[: self.n_users] = 0
        return out

    def node_id(self, g: int) -> NodeId:
        if g < len(self.users):
            return NodeId(NodeKind.USER, g)
        return NodeId(NodeKind.TWEET, g - len(self.users))

    def global_id(self, node: NodeId) -> int:
        return node.index if node.kind == NodeKind.USER else len(self.users) + node.index

    def external_id(self, g: int) -> str:
        if g < len(self.users):
            return self.users[g].external_id
        return self.tweets[g - len(self.users)].external_id

    def neighbors(self, g: int) -> np.ndarray:
        return self.adj_nbr[self.adj_ptr[g] : self.adj_ptr[g + 1]]

    @cached_property
    def adjacency_lists(self) -> list[list[int]]:
        nbr = self.adj_nbr.tolist()
        ptr = self.adj_ptr.tolist()
        return [nbr[ptr[g] : ptr[g + 1]] for g in range(self.n_nodes)]

    def degree(self, g: int) -> int:
        return int(self.adj_ptr[g + 1] - self.adj_ptr[g])

    def degrees(self) -> np.ndarray:
        return np.diff(self.adj_ptr)

    def unlabeled(self) -> "BipartiteGraph":
        """View of the graph with the evaluation labels removed."""
        if self.label_map is None:
            return self
        kwargs = {f.name: getattr(self, f.name) for f in fields(self)}
        kwargs["label_map"] = None
        return BipartiteGraph(**kwargs)

    def labeled_users(self) -> tuple[np.ndarray, np.ndarray]:
        """Indices of labeled users and their binary labels (1 = Right)."""
        if self.label_map is None:
            raise DataError("graph has no labels")
        idx = np.array(sorted(self.label_map), dtype=np.int64)
        y = np.array([1 if self.label_map[i] >= 0 else 0 for i in idx], dtype=np.int64)
        return idx, y

    def serialize(self) -> bytes:
        """Canonical JSON encoding of the structure (vectors excluded)."""
        doc = {
            "users": [
                {
                    "id": u.external_id,
                    **{k: getattr(u, k) for k in ("followers", "friends", "listed", "statuses",
                                                  "favorites", "verified")},
                    "description": u.description_text,
                    "has_description_vec": u.description_vec is not None,
                    "synthetic": u.synthetic,
                }
                for u in self.users
            ],
            "tweets": [
                {
                    "id": t.external_id,
                    "author_id": t.author_external_id,
                    "text": t.text,
                    "has_text_vec": t.text_vec is not None,
                    "has_image_vec": t.image_vec is not None,
                }
                for t in self.tweets
            ],
            "edges": [
                [int(u), int(t), Relation(int(r)).label]
                for u, t, r in zip(self.edge_user, self.edge_tweet, self.edge_relation)
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def build_graph(users, tweets, edges, labels: dict[str, float] | None = None) -> BipartiteGraph:
    user_index = {u.external_id: i for i, u in enumerate(users)}
    tweet_index = {t.external_id: i for i, t in enumerate(tweets)}
    if len(user_index) != len(users) or len(tweet_index) != len(tweets):
        raise DataError("duplicate node ids")
    for t in tweets:
        if t.author_external_id not in user_index:
            raise ReferentialIntegrityError(f"tweet {t.external_id}: unknown author {t.author_external_id!r}")

    seen = set()
    triples = []
    for e in edges:
        u = user_index.get(e.user_external_id)
        t = tweet_index.get(e.tweet_external_id)
        if u is None or t is None:
            if (e.tweet_external_id in user_index and u is not None) or (
                e.user_external_id in tweet_index and t is not None
            ):
                raise BipartiteViolationError(
                    f"edge {e.user_external_id!r} -> {e.tweet_external_id!r} joins two nodes of one type"
                )
            raise ReferentialIntegrityError(f"edge {e.user_external_id!r} -> {e.tweet_external_id!r} is dangling")
        key = (u, t, int(e.relation))
        if key in seen:
            raise DuplicateEdgeError(
                f"duplicate {Relation(e.relation).label} edge {e.user_external_id!r} -> {e.tweet_external_id!r}"
            )
        seen.add(key)
        triples.append(key)
    triples.sort()
    n_users = len(users)
    n_nodes = n_users + len(tweets)
    eu = np.array([k[0] for k in triples], dtype=np.int64)
    et = np.array([k[1] for k in triples], dtype=np.int64)
    er = np.array([k[2] for k in triples], dtype=np.int8)

    # both endpoints of every edge, as (node, neighbor, relation), sorted
    src = np.concatenate([eu, et + n_users])
    dst = np.concatenate([et + n_users, eu])
    rel = np.concatenate([er, er])
    order = np.lexsort((rel, dst, src))
    src, dst, rel = src[order], dst[order], rel[order]
    ptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n_nodes), out=ptr[1:])

    label_map = None
    if labels is not None:
        label_map = {}
        for ext_id, score in labels.items():
            if ext_id not in user_index:
                raise ReferentialIntegrityError(f"label for unknown user {ext_id!r}")
            if not (-1 <= score <= 1) or math.isnan(score):
                raise DataError(f"label score for {ext_id!r} outside [-1, 1]")
            label_map[user_index[ext_id]] = float(score)

    graph = BipartiteGraph(
        users=tuple(users),
        tweets=tuple(tweets),
        edge_user=eu,
        edge_tweet=et,
        edge_relation=er,
        adj_ptr=ptr,
        adj_nbr=dst,
        adj_rel=rel,
        user_index=user_index,
        tweet_index=tweet_index,
        label_map=label_map,
    )
    check_bipartite(graph)
    return graph


def check_bipartite(graph: BipartiteGraph) -> None:
    """Exhaustive check that every adjacency entry joins a user and a tweet."""
    n_users = graph.n_users
    src = np.repeat(np.arange(graph.n_nodes), graph.degrees())
    if np.any((src < n_users) == (graph.adj_nbr < n_users)):
        raise BipartiteViolationError("edge between two nodes of the same type")


def graph_from_dataset(ds: Dataset, with_labels: bool = True) -> BipartiteGraph:
    return build_graph(ds.users, ds.tweets, ds.edges, ds.labels if with_labels else None)
