"""Heterogeneous bipartite GNN encoder: forward pass, gradients, training.

A node's content embedding ``f1`` is the mean-pooled Bi-LSTM output over its
projected attribute vectors. For each node type ``t`` the neighbor embedding
``f2_t`` is the mean-pooled Bi-LSTM output over ``f1`` of the sampled
neighbors of that type. The final embedding mixes ``f1``, ``f2_user`` and
``f2_tweet`` with softmax attention weights computed from
``LeakyReLU(u . [f1 ; candidate])``. Absent neighbor aggregates (no sampled
neighbor of that type) are left out of the softmax.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import lstm
from .encoders import ALL_TAGS, AttributeSet
from .errors import DataError, NumericalError
from .graph import BipartiteGraph, NodeKind
from .sampling import NegativeSampler, NeighborSets, positive_pair_arrays
from .vectors import read_vectors, write_vectors

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
# LSTM weights are stored stacked: "content.*" holds (forward, backward) and
# "neighbor.*" holds (user forward, user backward, tweet forward, tweet backward).
LSTM_BLOCKS = {"content": 2, "neighbor": 4}
NEIGHBOR_STACK = {NodeKind.USER: slice(0, 2), NodeKind.TWEET: slice(2, 4)}
CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------- parameters


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    d: int
    tag_dims: dict[str, int]

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.d, dict(self.tag_dims))

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def lstm(self, block: str, sel=slice(None)):
        """Stacked ``(W, U, b)`` of an LSTM block, optionally restricted to ``sel``."""
        return tuple(self.tensors[f"{block}.{k}"][sel] for k in "WUb")


def init_params(tag_dims: dict[str, int], d: int = 128, rng=None) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, forget-gate bias 1."""
    if d % 2:
        raise ValueError("embedding dimension must be even")
    rng = rng if rng is not None else np.random.default_rng(0)
    H = d // 2
    t: dict[str, np.ndarray] = {}
    for tag in ALL_TAGS:
        if tag not in tag_dims:
            continue
        df = tag_dims[tag]
        bound = 1.0 / math.sqrt(df)
        t[f"proj.{tag}.W"] = rng.uniform(-bound, bound, (df, d))
        t[f"proj.{tag}.b"] = np.zeros(d)
    bound = 1.0 / math.sqrt(d + H)
    for block, S in LSTM_BLOCKS.items():
        b = np.zeros((S, 4 * H))
        b[:, H : 2 * H] = 1.0
        t[f"{block}.W"] = rng.uniform(-bound, bound, (S, d, 4 * H))
        t[f"{block}.U"] = rng.uniform(-bound, bound, (S, H, 4 * H))
        t[f"{block}.b"] = b
    bound = 1.0 / math.sqrt(2 * d)
    t["att.u"] = rng.uniform(-bound, bound, 2 * d)
    return ModelParams(t, d, dict(tag_dims))


# --------------------------------------------------------------------------- graph tensors


@dataclass
class GraphTensors:
    """Packed attribute and neighbor arrays indexed by global node id."""

    feats: dict[str, np.ndarray]
    attr_tag: np.ndarray  # (N, T) index into ALL_TAGS, -1 padding
    attr_row: np.ndarray  # (N, T) row into feats[tag]
    attr_len: np.ndarray  # (N,)
    nbr: dict[NodeKind, np.ndarray] = field(default_factory=dict)  # (N, k), -1 padding
    nbr_len: dict[NodeKind, np.ndarray] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.attr_len)

    def tag_dims(self) -> dict[str, int]:
        return {tag: m.shape[1] for tag, m in self.feats.items()}


def pack_graph(attributes: list[AttributeSet], neighbor_sets: NeighborSets | None) -> GraphTensors:
    n = len(attributes)
    T = max((len(a) for a in attributes), default=1)
    attr_tag = np.full((n, T), -1, dtype=np.int64)
    attr_row = np.zeros((n, T), dtype=np.int64)
    attr_len = np.zeros(n, dtype=np.int64)
    rows: dict[str, list[np.ndarray]] = {}
    for g, attrs in enumerate(attributes):
        if not attrs:
            raise DataError(f"node {g} has an empty attribute set")
        attr_len[g] = len(attrs)
        for pos, (tag, vec) in enumerate(attrs):
            bucket = rows.setdefault(tag, [])
            if bucket and len(vec) != len(bucket[0]):
                raise DataError(f"attribute {tag!r} has inconsistent dimensions")
            attr_tag[g, pos] = ALL_TAGS.index(tag)
            attr_row[g, pos] = len(bucket)
            bucket.append(np.asarray(vec, dtype=np.float64))
    feats = {tag: np.vstack(vs) for tag, vs in rows.items()}
    gt = GraphTensors(feats, attr_tag, attr_row, attr_len)
    for kind in NodeKind:
        if neighbor_sets is None:
            gt.nbr[kind] = np.full((n, 1), -1, dtype=np.int64)
            gt.nbr_len[kind] = np.zeros(n, dtype=np.int64)
        else:
            gt.nbr[kind], gt.nbr_len[kind] = neighbor_sets.as_array(kind)
    return gt


# --------------------------------------------------------------------------- forward / backward


@dataclass
class ForwardPlan:
    """Index bookkeeping for one target set; depends only on the graph, not on params."""

    targets: np.ndarray
    needed: np.ndarray
    content_lens: np.ndarray
    content_T: int
    content_sel: list  # (tag, (row_idx, pos_idx), feature rows)
    content_layout: lstm.Layout
    self_pos: np.ndarray
    nbr_meta: list  # (slot, kind, has, pos, valid, lengths)
    nbr_layout: lstm.Layout | None
    nbr_stack: object = slice(None)  # neighbor LSTM entries in use


def plan_forward(gt: GraphTensors, targets) -> ForwardPlan:
    targets = np.asarray(targets, dtype=np.int64)
    parts = [targets]
    for kind in NodeKind:
        ids = gt.nbr[kind][targets]
        parts.append(ids[ids >= 0])
    needed = np.unique(np.concatenate(parts))

    lens = gt.attr_len[needed]
    T = int(lens.max())
    tags, rows = gt.attr_tag[needed, :T], gt.attr_row[needed, :T]
    sel = []
    for k, tag in enumerate(ALL_TAGS):
        idx = np.nonzero(tags == k)
        if len(idx[0]):
            sel.append((tag, idx, rows[idx]))

    meta = []
    for slot, kind in ((1, NodeKind.USER), (2, NodeKind.TWEET)):
        ids, nlen = gt.nbr[kind][targets], gt.nbr_len[kind][targets]
        has = np.nonzero(nlen > 0)[0]
        if len(has) == 0:
            continue
        k = int(nlen[has].max())
        sub_ids = ids[has, :k]
        valid = sub_ids >= 0
        pos = np.searchsorted(needed, np.where(valid, sub_ids, needed[0]))
        meta.append((slot, kind, has, pos, valid, nlen[has]))
    nbr_layout = lstm.Layout([m[5] for m in meta], [m[3].shape[1] for m in meta]) if meta else None
    return ForwardPlan(
        targets=targets,
        needed=needed,
        content_lens=lens,
        content_T=T,
        content_sel=sel,
        content_layout=lstm.Layout([lens], [T]),
        self_pos=np.searchsorted(needed, targets),
        nbr_meta=meta,
        nbr_layout=nbr_layout,
        nbr_stack=slice(None) if len(meta) != 1 else NEIGHBOR_STACK[meta[0][1]],
    )


def _content_forward(params: ModelParams, gt: GraphTensors, plan: ForwardPlan, keep_cache=True):
    X = np.zeros((len(plan.needed), plan.content_T, params.d), dtype=params["att.u"].dtype)
    used = []
    for tag, idx, rows in plan.content_sel:
        x = gt.feats[tag][rows]
        X[idx] = x @ params[f"proj.{tag}.W"] + params[f"proj.{tag}.b"]
        used.append((tag, idx, x))
    outs, cache = lstm.multi_bilstm_mean_forward(
        [(X, plan.content_lens)],
        params.lstm("content"),
        keep_cache,
        plan.content_layout,
    )
    return outs[0], (used, cache)


def _content_backward(d_out, cache, grads):
    used, bcache = cache
    dX, g = lstm.multi_bilstm_mean_backward([d_out], bcache)
    _add_lstm_grads(grads, "content", g)
    dX = dX[0]
    for tag, sel, x in used:
        dx = dX[sel]
        grads[f"proj.{tag}.W"] += x.T @ dx
        grads[f"proj.{tag}.b"] += dx.sum(axis=0)


def _add_lstm_grads(grads, block, g, sel=slice(None)):
    for k, gk in zip("WUb", g):
        grads[f"{block}.{k}"][sel] += gk


def _leaky(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _attention_forward(u, cand, avail):
    """``cand`` is ``(..., 3, d)`` with slot 0 the node's own content embedding.

    ``u`` is ``(2d,)`` or broadcastable against ``cand``'s leading axes.
    """
    d = cand.shape[-1]
    ua, ub = u[..., :d], u[..., d:]
    if u.ndim == 1:
        self_term = cand[..., 0, :] @ ua
        pre = self_term[..., None] + cand @ ub
    else:
        self_term = np.einsum("...d,...d->...", cand[..., 0, :], ua)
        pre = self_term[..., None] + np.einsum("...id,...d->...i", cand, ub)
    z = _leaky(pre)
    z = np.where(avail, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    alpha = e / e.sum(axis=-1, keepdims=True)
    E = np.einsum("...i,...id->...d", alpha, cand)
    return E, alpha, pre


def _attention_backward(dE, u, cand, alpha, pre):
    d = cand.shape[2]
    dalpha = cand @ dE[:, :, None]
    dalpha = dalpha[:, :, 0]
    dcand = alpha[:, :, None] * dE[:, None, :]
    ds = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    dpre = ds * np.where(pre > 0, 1.0, LEAKY_SLOPE)
    du = np.concatenate([dpre.sum(axis=1) @ cand[:, 0], np.einsum("bi,bid->d", dpre, cand)])
    dcand += dpre[:, :, None] * u[None, None, d:]
    dcand[:, 0] += dpre.sum(axis=1)[:, None] * u[None, :d]
    return dcand, du


@dataclass
class ForwardResult:
    targets: np.ndarray
    E: np.ndarray
    alpha: np.ndarray  # (B, 3): self, user aggregate, tweet aggregate
    cache: tuple | None = None


def _aggregate_forward(params: ModelParams, plan: ForwardPlan, f1, keep_cache=True):
    B, d = len(plan.targets), params.d
    cand = np.zeros((B, 3, d), dtype=f1.dtype)
    avail = np.zeros((B, 3), dtype=bool)
    cand[:, 0] = f1[plan.self_pos]
    avail[:, 0] = True
    ncache = None
    if plan.nbr_meta:
        seqs = [(f1[pos] * valid[:, :, None], lens) for _, _, _, pos, valid, lens in plan.nbr_meta]
        weights = params.lstm("neighbor", plan.nbr_stack)
        outs, ncache = lstm.multi_bilstm_mean_forward(seqs, weights, keep_cache, plan.nbr_layout)
        for (slot, _, has, *_), out in zip(plan.nbr_meta, outs):
            cand[has, slot] = out
            avail[has, slot] = True
    E, alpha, pre = _attention_forward(params["att.u"], cand, avail)
    return E, alpha, (cand, pre, ncache)


def forward(params: ModelParams, gt: GraphTensors, targets, keep_cache: bool = True,
            plan: ForwardPlan | None = None) -> ForwardResult:
    """Embeddings of ``targets`` (global ids), with the cache needed by :func:`backward`."""
    if plan is None:
        plan = plan_forward(gt, targets)
    f1, ccache = _content_forward(params, gt, plan, keep_cache)
    E, alpha, acache = _aggregate_forward(params, plan, f1, keep_cache)
    cache = (plan, f1, ccache, acache) if keep_cache else None
    return ForwardResult(plan.targets, E, alpha, cache)


def backward(params: ModelParams, res: ForwardResult, dE: np.ndarray) -> dict[str, np.ndarray]:
    plan, f1, ccache, (cand, pre, ncache) = res.cache
    grads = params.zeros_like()
    dcand, grads["att.u"] = _attention_backward(dE, params["att.u"], cand, res.alpha, pre)
    df1 = np.zeros_like(f1)
    np.add.at(df1, plan.self_pos, dcand[:, 0])
    if plan.nbr_meta:
        dXs, g = lstm.multi_bilstm_mean_backward([dcand[has, slot] for slot, _, has, *_ in plan.nbr_meta], ncache)
        _add_lstm_grads(grads, "neighbor", g, plan.nbr_stack)
        for (slot, _, has, pos, valid, _), dX in zip(plan.nbr_meta, dXs):
            dX = dX * valid[:, :, None]
            np.add.at(df1, pos.ravel(), dX.reshape(-1, dX.shape[2]))
    _content_backward(df1, ccache, grads)
    return grads


# --------------------------------------------------------------------------- single-node views


def _single_gt(attrs: AttributeSet) -> GraphTensors:
    return pack_graph([attrs], None)


def fuse_attributes(params: ModelParams, attrs: AttributeSet) -> np.ndarray:
    """Content embedding of one node from its attribute set."""
    if not attrs:
        raise ValueError("attribute set is empty")
    gt = _single_gt(attrs)
    out, _ = _content_forward(params, gt, plan_forward(gt, [0]), keep_cache=False)
    return out[0]


def aggregate_neighbors(params: ModelParams, kind: NodeKind, neighbor_f1) -> np.ndarray | None:
    """Bi-LSTM aggregate of neighbor content embeddings; ``None`` when there are none."""
    if len(neighbor_f1) == 0:
        return None
    X = np.asarray(neighbor_f1, dtype=np.float64)[None]
    outs, _ = lstm.multi_bilstm_mean_forward(
        [(X, np.array([len(X[0])]))], params.lstm("neighbor", NEIGHBOR_STACK[kind]), keep_cache=False
    )
    return outs[0][0]


def attention_combine(params: ModelParams, f1, f2_user=None, f2_tweet=None):
    """Returns ``(E, alpha)``; ``alpha`` holds self/user/tweet weights, 0 for absent terms."""
    d = len(f1)
    cand = np.zeros((1, 3, d), dtype=np.result_type(f1, params["att.u"]))
    avail = np.array([[True, f2_user is not None, f2_tweet is not None]])
    cand[0, 0] = f1
    if f2_user is not None:
        cand[0, 1] = f2_user
    if f2_tweet is not None:
        cand[0, 2] = f2_tweet
    E, alpha, _ = _attention_forward(params["att.u"], cand, avail)
    return E[0], alpha[0]


# --------------------------------------------------------------------------- loss


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _row_losses(sp, sn, sign):
    obj = _log_sigmoid(sp) + _log_sigmoid(-sn)
    if sign == "standard":
        return -obj
    if sign == "paper-literal":
        return obj
    raise ValueError(f"unknown loss sign {sign!r}")


def triple_loss(Ev, Ep, En, sign: str = "standard"):
    """Mean skip-gram loss over rows, and gradients w.r.t. the three inputs.

    ``standard`` minimises ``-[log s(Ep.Ev) + log s(-En.Ev)]``. ``paper-literal``
    minimises the same expression without the leading minus sign.
    """
    sp = np.einsum("bd,bd->b", Ev, Ep)
    sn = np.einsum("bd,bd->b", Ev, En)
    n = len(sp)
    rows = _row_losses(sp, sn, sign)
    # d obj / d sp = s(-sp); d obj / d sn = -s(sn)
    gp, gn = lstm.sigmoid(-sp), -lstm.sigmoid(sn)
    loss = rows.mean()
    if sign == "standard":
        gp, gn = -gp, -gn
    gp, gn = gp[:, None] / n, gn[:, None] / n
    return loss, gp * Ep + gn * En, gp * Ev, gn * Ev


def nce_loss(E_v, E_pos, E_neg) -> float:
    loss, *_ = triple_loss(np.atleast_2d(E_v), np.atleast_2d(E_pos), np.atleast_2d(E_neg))
    return float(loss)


def _triple_index(v, p, n):
    nodes = np.unique(np.concatenate([v, p, n]))
    return nodes, tuple(np.searchsorted(nodes, x) for x in (v, p, n))


def batch_loss_and_grads(params, gt, v, p, n, sign="standard", need_grads=True, plan=None):
    """Loss of a batch of ``(v, pos, neg)`` triples and its parameter gradients."""
    nodes, (iv, ip, ineg) = _triple_index(v, p, n)
    res = forward(params, gt, nodes, keep_cache=need_grads, plan=plan)
    loss, dv, dp, dn = triple_loss(res.E[iv], res.E[ip], res.E[ineg], sign)
    if not need_grads:
        return loss, None, res
    dE = np.zeros_like(res.E)
    np.add.at(dE, iv, dv)
    np.add.at(dE, ip, dp)
    np.add.at(dE, ineg, dn)
    return loss, backward(params, res, dE), res


# --------------------------------------------------------------------------- embeddings


class MissingKeyError(KeyError):
    pass


@dataclass
class EmbeddingTable:
    ids: list[str]
    vectors: np.ndarray
    alpha: np.ndarray | None = None  # (n, 3) self/user/tweet attention weights
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self._index = {k: i for i, k in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise DataError("embedding ids must be unique")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, key):
        return key in self._index

    def __getitem__(self, key) -> np.ndarray:
        try:
            return self.vectors[self._index[key]]
        except KeyError:
            raise MissingKeyError(f"no embedding for id {key!r}") from None

    def lookup(self, keys) -> np.ndarray:
        missing = [k for k in keys if k not in self._index]
        if missing:
            raise MissingKeyError(f"no embedding for {len(missing)} ids, e.g. {missing[0]!r}")
        return self.vectors[[self._index[k] for k in keys]]


def export_embeddings(table: EmbeddingTable, path) -> None:
    write_vectors(path, table.ids, table.vectors)


def import_embeddings(path, dim: int | None = None) -> EmbeddingTable:
    ids, vecs = read_vectors(path, expected_dim=dim)
    return EmbeddingTable(ids, vecs)


def embed_all(params: ModelParams, gt: GraphTensors, chunk: int = 512):
    """Embeddings and attention weights of every node."""
    N = gt.n_nodes
    E = np.empty((N, params.d))
    alpha = np.empty((N, 3))
    for s in range(0, N, chunk):
        res = forward(params, gt, np.arange(s, min(N, s + chunk)))
        E[s : s + chunk] = res.E
        alpha[s : s + chunk] = res.alpha
    return E, alpha


def embedding_table(graph: BipartiteGraph, E, alpha=None) -> EmbeddingTable:
    ids = [graph.external_id(g) for g in range(graph.n_nodes)]
    return EmbeddingTable(ids, E, alpha)


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    negatives_per_positive: int = 1
    dim: int = 128
    # positive pairs drawn (without replacement) per epoch; None uses every pair
    pairs_per_epoch: int | None = 8000
    loss_sign: str = "standard"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "negatives_per_positive", "dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.pairs_per_epoch is not None and self.pairs_per_epoch < 1:
            raise ValueError("pairs_per_epoch must be positive")
        if self.loss_sign not in ("standard", "paper-literal"):
            raise ValueError("loss_sign must be 'standard' or 'paper-literal'")


class Adam:
    def __init__(self, params: ModelParams, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: ModelParams, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params.tensors[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: ModelParams
    table: EmbeddingTable
    epoch_losses: list[float]


def train(
    graph: BipartiteGraph,
    neighbor_sets: NeighborSets,
    attributes: list[AttributeSet],
    config: TrainConfig,
    walks,
    window: int = 5,
    progress=None,
) -> TrainResult:
    """Minibatch Adam over ``(v, pos, neg)`` triples; returns params and all-node embeddings."""
    graph = graph.unlabeled()
    gt = pack_graph(attributes, neighbor_sets)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    params = init_params(gt.tag_dims(), config.dim, rng)
    centers, contexts = positive_pair_arrays(walks, window)
    sampler = NegativeSampler(graph)
    kinds = graph.kinds()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    losses = []
    for epoch in range(config.epochs):
        if len(centers) == 0:
            break
        order = rng.permutation(len(centers))
        if config.pairs_per_epoch is not None:
            order = order[: config.pairs_per_epoch]
        total, count = 0.0, 0
        for b, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s : s + config.batch_size]
            v = np.repeat(centers[idx], config.negatives_per_positive)
            p = np.repeat(contexts[idx], config.negatives_per_positive)
            neg = np.empty_like(p)
            user_ctx = kinds[p] == NodeKind.USER
            if user_ctx.any():
                neg[user_ctx] = sampler.sample(NodeKind.USER, rng, int(user_ctx.sum()))
            if (~user_ctx).any():
                neg[~user_ctx] = sampler.sample(NodeKind.TWEET, rng, int((~user_ctx).sum()))
            loss, grads, res = batch_loss_and_grads(params, gt, v, p, neg, config.loss_sign)
            if not math.isfinite(loss):
                bad = res.targets[~np.all(np.isfinite(res.E), axis=1)]
                node = graph.external_id(int(bad[0])) if len(bad) else "unknown"
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {b} (offending node {node})"
                )
            opt.step(params, grads)
            total += loss * len(idx)
            count += len(idx)
        losses.append(float(total / max(count, 1)))
        log.info("epoch %d loss %.6f", epoch, losses[-1])
        if progress is not None:
            progress(epoch, losses[-1])
    E, alpha = embed_all(params, gt)
    if not np.all(np.isfinite(E)):
        raise NumericalError("non-finite embeddings after training")
    return TrainResult(params, embedding_table(graph, E, alpha), losses)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: ModelParams, config: dict, seed: int) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "d": params.d,
        "tag_dims": params.tag_dims,
        "seed": seed,
        "config": config,
    }
    arrays = {f"p:{k}": v for k, v in params.tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {meta.get('version')}")
        tensors = {k[2:]: z[k].copy() for k in z.files if k.startswith("p:")}
    return ModelParams(tensors, meta["d"], meta["tag_dims"]), meta


# --------------------------------------------------------------------------- gradient check


@dataclass
class TinyProblem:
    params: ModelParams
    gt: GraphTensors
    triple: tuple[int, int, int]


def tiny_problem(seed: int, d: int = 8, n_neighbors: int = 2) -> TinyProblem:
    """Small random model and graph: 2 attributes per node, ``n_neighbors`` per type."""
    rng = np.random.default_rng(seed)
    tag_dims = {"scalars": 3, "description": 4, "text": 4, "author_scalars": 3}
    n_users = n_tweets = n_neighbors + 2
    attrs = []
    for _ in range(n_users):
        attrs.append([(t, rng.normal(size=tag_dims[t])) for t in ("scalars", "description")])
    for _ in range(n_tweets):
        attrs.append([(t, rng.normal(size=tag_dims[t])) for t in ("text", "author_scalars")])
    user_sets, tweet_sets = [], []
    for g in range(n_users + n_tweets):
        users = [u for u in rng.permutation(n_users).tolist() if u != g][:n_neighbors]
        tweets = [n_users + t for t in rng.permutation(n_tweets).tolist() if n_users + t != g][:n_neighbors]
        user_sets.append([(u, 1) for u in users])
        tweet_sets.append([(t, 1) for t in tweets])
    gt = pack_graph(attrs, NeighborSets(user_sets, tweet_sets))
    params = init_params(tag_dims, d, rng)
    for name, v in params.tensors.items():
        if name.endswith(".b"):
            v += rng.normal(scale=0.3, size=v.shape)
    # a larger attention vector keeps every softmax weight away from uniform
    params.tensors["att.u"] *= 3.0
    return TinyProblem(params, gt, (0, n_users, 1))


def relative_error(a, f):
    return np.abs(a - f) / np.maximum(1e-8, np.abs(a) + np.abs(f))


def _as_dtype(params: ModelParams, gt: GraphTensors, dtype):
    p = ModelParams({k: v.astype(dtype) for k, v in params.tensors.items()}, params.d, dict(params.tag_dims))
    g = GraphTensors({k: v.astype(dtype) for k, v in gt.feats.items()}, gt.attr_tag, gt.attr_row,
                     gt.attr_len, gt.nbr, gt.nbr_len)
    return p, g


def gradient_check(params: ModelParams, gt: GraphTensors, triple, h: float = 1e-5, names=None,
                   sign: str = "standard", fd_dtype=np.longdouble, chunk: int = 256) -> float:
    """Max relative error between analytic and central-difference gradients.

    The analytic gradient is computed in float64. Loss evaluations for the
    central differences run in ``fd_dtype``; the default extended precision
    keeps their rounding noise (about eps * loss / h) well below the
    tolerance even for gradient entries near the 1e-8 floor. Perturbed copies
    of a tensor are evaluated together, up to ``chunk`` entries at a time.
    """
    v, p, n = (np.array([x]) for x in triple)
    _, grads, _ = batch_loss_and_grads(params, gt, v, p, n, sign)
    names = params.names() if names is None else list(names)
    work, wgt = _as_dtype(params, gt, fd_dtype)
    nodes, index = _triple_index(v, p, n)
    plan = plan_forward(wgt, nodes)
    f1_fixed, _ = _content_forward(work, wgt, plan, keep_cache=False)
    step = fd_dtype(h)
    worst = 0.0
    for name in names:
        size = work[name].size
        fd = np.concatenate([
            _perturbed_losses(work, wgt, plan, f1_fixed, name, np.arange(i, min(i + chunk, size)), step,
                              index, sign)
            for i in range(0, size, chunk)
        ])
        err = relative_error(grads[name].reshape(-1), fd)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def _variant(work, name, var, P, key):
    """Per-variant copy of ``key``: the perturbed stack if it is ``name``, else a broadcast."""
    t = work[key]
    return var if key == name else np.broadcast_to(t, (P,) + t.shape)


def _perturbed_losses(work: ModelParams, gt: GraphTensors, plan: ForwardPlan, f1_fixed, name, entries,
                      step, index, sign):
    """Central differences of the loss for flat ``entries`` of tensor ``name``.

    Variant ``2j`` adds ``step`` to entry ``j`` and variant ``2j + 1`` subtracts
    it. Each variant's LSTM weights occupy their own slots on the stack axis,
    so all variants share one sweep per LSTM.
    """
    full = work[name]
    P = 2 * len(entries)
    var = np.repeat(full.reshape(1, -1), P, axis=0)
    j = np.arange(len(entries))
    var[2 * j, entries] += step
    var[2 * j + 1, entries] -= step
    var = var.reshape((P,) + full.shape)
    d = work.d

    if name.startswith(("proj.", "content.")):
        N, T = len(plan.needed), plan.content_T
        X = np.zeros((P, N, T, d), dtype=full.dtype)
        for tag, idx, rows in plan.content_sel:
            x = gt.feats[tag][rows]
            W = _variant(work, name, var, P, f"proj.{tag}.W")
            b = _variant(work, name, var, P, f"proj.{tag}.b")
            X[:, idx[0], idx[1]] = x @ W + b[:, None]
        weights = tuple(
            _variant(work, name, var, P, f"content.{k}").reshape((2 * P,) + work[f"content.{k}"].shape[1:])
            for k in "WUb"
        )
        layout = lstm.Layout([plan.content_lens] * P, [T] * P)
        outs, _ = lstm.multi_bilstm_mean_forward(
            [(X[q], plan.content_lens) for q in range(P)], weights, False, layout
        )
        f1 = np.stack(outs)
    else:
        f1 = np.broadcast_to(f1_fixed, (P,) + f1_fixed.shape)

    B = len(plan.targets)
    cand = np.zeros((P, B, 3, d), dtype=full.dtype)
    avail = np.zeros((P, B, 3), dtype=bool)
    cand[:, :, 0] = f1[:, plan.self_pos]
    avail[:, :, 0] = True
    meta = plan.nbr_meta
    if meta:
        weights = []
        for k in "WUb":
            w = _variant(work, name, var, P, f"neighbor.{k}")[:, plan.nbr_stack]
            weights.append(w.reshape((-1,) + w.shape[2:]))
        seqs = [(f1[q][pos] * valid[:, :, None], lens) for q in range(P) for _, _, _, pos, valid, lens in meta]
        layout = lstm.Layout([m[5] for m in meta] * P, [m[3].shape[1] for m in meta] * P)
        outs, _ = lstm.multi_bilstm_mean_forward(seqs, tuple(weights), False, layout)
        for j, (slot, _, has, *_) in enumerate(meta):
            cand[:, has, slot] = np.stack(outs[j :: len(meta)])
            avail[:, has, slot] = True
    u = _variant(work, name, var, P, "att.u")
    E, _, _ = _attention_forward(u[:, None], cand, avail)
    iv, ip, ineg = index
    sp = np.einsum("pbd,pbd->pb", E[:, iv], E[:, ip])
    sn = np.einsum("pbd,pbd->pb", E[:, iv], E[:, ineg])
    loss = _row_losses(sp, sn, sign).mean(axis=1)
    return ((loss[0::2] - loss[1::2]) / (2 * step)).astype(np.float64)
