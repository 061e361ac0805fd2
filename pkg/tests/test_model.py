import math

import mpmath
import numpy as np
import pytest

from hetbip.encoders import ALL_TAGS, encode_graph
from hetbip.errors import DataError
from hetbip.graph import NodeKind, graph_from_dataset, load_dataset_dir
from hetbip.model import (
    EmbeddingTable,
    MissingKeyError,
    TrainConfig,
    aggregate_neighbors,
    attention_combine,
    batch_loss_and_grads,
    embed_all,
    export_embeddings,
    forward,
    fuse_attributes,
    gradient_check,
    import_embeddings,
    init_params,
    load_checkpoint,
    nce_loss,
    pack_graph,
    save_checkpoint,
    tiny_problem,
    train,
    triple_loss,
)
from hetbip.sampling import NeighborSets, WalkConfig, build_neighbor_sets, generate_walks


# ---------------------------------------------------------------- reference implementation


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def ref_lstm(xs, W, U, b):
    H = U.shape[0]
    h, c, out = np.zeros(H), np.zeros(H), []
    for x in xs:
        z = x @ W + h @ U + b
        i, f, o, g = _sig(z[:H]), _sig(z[H : 2 * H]), _sig(z[2 * H : 3 * H]), np.tanh(z[3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return out


def ref_bilstm_mean(xs, params, block, fwd, bwd):
    W, U, b = (params[f"{block}.{k}"] for k in "WUb")
    hf = ref_lstm(xs, W[fwd], U[fwd], b[fwd])
    hb = ref_lstm(xs[::-1], W[bwd], U[bwd], b[bwd])[::-1]
    return np.mean([np.concatenate([a, c]) for a, c in zip(hf, hb)], axis=0)


def ref_f1(params, gt, v):
    xs = []
    for j in range(gt.attr_len[v]):
        tag = ALL_TAGS[gt.attr_tag[v, j]]
        xs.append(gt.feats[tag][gt.attr_row[v, j]] @ params[f"proj.{tag}.W"] + params[f"proj.{tag}.b"])
    return ref_bilstm_mean(xs, params, "content", 0, 1)


def ref_embed(params, gt, v):
    f1 = ref_f1(params, gt, v)
    cands, avail = [f1], []
    for kind, (fw, bw) in ((NodeKind.USER, (0, 1)), (NodeKind.TWEET, (2, 3))):
        n = gt.nbr_len[kind][v]
        if n:
            xs = [ref_f1(params, gt, int(w)) for w in gt.nbr[kind][v, :n]]
            cands.append(ref_bilstm_mean(xs, params, "neighbor", fw, bw))
            avail.append(kind)
    u = params["att.u"]
    d = len(f1)
    logits = np.array([f1 @ u[:d] + c @ u[d:] for c in cands])
    logits = np.where(logits > 0, logits, 0.2 * logits)
    a = np.exp(logits - logits.max())
    a /= a.sum()
    return sum(w * c for w, c in zip(a, cands)), a


# ---------------------------------------------------------------- forward


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_matches_reference(seed):
    pr = tiny_problem(seed, d=6, n_neighbors=3)
    N = pr.gt.n_nodes
    res = forward(pr.params, pr.gt, np.arange(N), keep_cache=False)
    for v in range(N):
        E, a = ref_embed(pr.params, pr.gt, v)
        assert np.allclose(res.E[v], E, atol=1e-12)
        assert np.allclose(res.alpha[v][res.alpha[v] > 0], a, atol=1e-12)


def test_forward_partial_neighbors():
    pr = tiny_problem(5, d=4)
    gt = pr.gt
    # drop the tweet neighbors of node 0 and all neighbors of node 1
    gt.nbr[NodeKind.TWEET][0] = -1
    gt.nbr_len[NodeKind.TWEET][0] = 0
    for k in (NodeKind.USER, NodeKind.TWEET):
        gt.nbr[k][1] = -1
        gt.nbr_len[k][1] = 0
    res = forward(pr.params, gt, np.array([0, 1, 2]), keep_cache=False)
    for i, v in enumerate([0, 1, 2]):
        E, _ = ref_embed(pr.params, gt, v)
        assert np.allclose(res.E[i], E, atol=1e-12)
    assert res.alpha[0, 2] == 0.0
    assert res.alpha[1, 0] == 1.0
    assert np.allclose(res.E[1], fuse_attributes(pr.params, [(ALL_TAGS[t], gt.feats[ALL_TAGS[t]][r])
                                                                for t, r in zip(gt.attr_tag[1][:2], gt.attr_row[1][:2])]), atol=1e-15)


def _params(d=128, seed=0, tags=None):
    tags = tags or {"scalars": 6, "description": 5}
    return init_params(tags, d, np.random.default_rng(seed))


def _zero(params):
    z = params.copy()
    for v in z.tensors.values():
        v[...] = 0.0
    return z


def test_fuse_zero_params_and_dim():
    p = _params()
    attrs = [("scalars", np.arange(6.0)), ("description", np.ones(5))]
    out = fuse_attributes(p, attrs)
    assert out.shape == (128,)
    assert not np.any(fuse_attributes(_zero(p), attrs))
    with pytest.raises(ValueError):
        fuse_attributes(p, [])


def test_fuse_single_attribute():
    p = _params(d=8)
    x = np.arange(6.0) / 6
    z = x @ p["proj.scalars.W"] + p["proj.scalars.b"]
    H = 4
    W, U, b = p["content.W"], p["content.U"], p["content.b"]
    want = np.concatenate([ref_lstm([z], W[0], U[0], b[0])[0], ref_lstm([z], W[1], U[1], b[1])[0]])
    assert np.allclose(fuse_attributes(p, [("scalars", x)]), want, atol=1e-14)
    assert want.shape == (2 * H,)


def test_aggregate_neighbors_examples():
    p = _params(d=8)
    assert aggregate_neighbors(p, NodeKind.USER, []) is None
    assert not np.any(aggregate_neighbors(_zero(p), NodeKind.USER, [np.zeros(8)]))
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=8), rng.normal(size=8)
    one = aggregate_neighbors(p, NodeKind.USER, [a])
    two = aggregate_neighbors(p, NodeKind.USER, [a, a])
    # the recurrence sees a second step, so a repeated neighbor is not a no-op
    assert not np.allclose(one, two)
    assert np.allclose(two, ref_bilstm_mean([a, a], p, "neighbor", 0, 1), atol=1e-14)
    # with all-zero weights every step has the same (zero) output, so the mean is unchanged
    zp = _zero(p)
    assert np.array_equal(aggregate_neighbors(zp, NodeKind.USER, [a]), aggregate_neighbors(zp, NodeKind.USER, [a, a]))
    # order sensitivity and per-type weights
    assert not np.allclose(aggregate_neighbors(p, NodeKind.USER, [a, b]), aggregate_neighbors(p, NodeKind.USER, [b, a]))
    assert not np.allclose(aggregate_neighbors(p, NodeKind.USER, [a, b]), aggregate_neighbors(p, NodeKind.TWEET, [a, b]))


def test_attention_examples():
    p = _params(d=8)
    rng = np.random.default_rng(1)
    f1, fu, ft = rng.normal(size=(3, 8))
    E, a = attention_combine(p, f1, fu, ft)
    assert abs(a.sum() - 1) < 1e-12 and np.all(a >= 0)
    assert np.allclose(E, a[0] * f1 + a[1] * fu + a[2] * ft)
    zp = _zero(p)
    _, a = attention_combine(zp, f1, fu, ft)
    assert np.allclose(a, 1 / 3)
    _, a = attention_combine(zp, f1, None, ft)
    assert np.allclose(a, [0.5, 0.0, 0.5])
    E, a = attention_combine(p, f1)
    assert a[0] == 1.0 and np.array_equal(E, f1)


def test_attention_simplex_random(rng):
    for _ in range(200):
        p = _params(d=4, seed=int(rng.integers(1 << 30)))
        p.tensors["att.u"] *= rng.uniform(0.1, 50)
        cands = rng.normal(scale=rng.uniform(0.1, 10), size=(3, 4))
        mask = rng.random(2) < 0.7
        _, a = attention_combine(p, cands[0], cands[1] if mask[0] else None, cands[2] if mask[1] else None)
        assert abs(a.sum() - 1) <= 1e-6 and np.all(a >= 0)
        assert np.all(a[1:][~mask] == 0)


# ---------------------------------------------------------------- loss


def test_loss_anchors():
    z = np.zeros(4)
    assert abs(nce_loss(z, z, z) - 2 * math.log(2)) < 1e-12
    ev = np.array([1.0, 1.0])
    ep = np.array([1.0, 1.0])
    en = np.array([-1.0, -1.0])
    mpmath.mp.dps = 50
    oracle = float(-2 * mpmath.log(1 / (1 + mpmath.exp(-2))))
    assert abs(oracle - 0.25386) < 1e-5
    assert abs(nce_loss(ev, ep, en) - oracle) < 1e-14
    assert nce_loss(ev * 40, ep * 40, en * 40) < 1e-100
    assert math.isfinite(nce_loss(ev * 1e4, -ep * 1e4, -en * 1e4))


def test_loss_monotone(rng):
    for _ in range(100):
        ev, ep, en = rng.normal(size=(3, 5))
        step = rng.uniform(0.01, 1.0) * ev / (ev @ ev)
        base = nce_loss(ev, ep, en)
        assert nce_loss(ev, ep + step, en) < base
        assert nce_loss(ev, ep, en + step) > base


def test_triple_loss_gradients(rng):
    Ev, Ep, En = rng.normal(size=(3, 4, 5))
    for sign in ("standard", "paper-literal"):
        loss, dv, dp, dn = triple_loss(Ev, Ep, En, sign)
        for X, dX in ((Ev, dv), (Ep, dp), (En, dn)):
            fd = np.zeros_like(X)
            for idx in np.ndindex(X.shape):
                old = X[idx]
                X[idx] = old + 1e-6
                lp = triple_loss(Ev, Ep, En, sign)[0]
                X[idx] = old - 1e-6
                lm = triple_loss(Ev, Ep, En, sign)[0]
                X[idx] = old
                fd[idx] = (lp - lm) / 2e-6
            assert np.allclose(dX, fd, atol=1e-8)
    assert triple_loss(Ev, Ep, En, "paper-literal")[0] == pytest.approx(-triple_loss(Ev, Ep, En)[0])
    with pytest.raises(ValueError):
        triple_loss(Ev, Ep, En, "other")


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("seed", range(4))
def test_gradient_check_random(seed):
    pr = tiny_problem(seed)
    assert gradient_check(pr.params, pr.gt, pr.triple) <= 1e-4


def test_gradient_check_zero_params():
    pr = tiny_problem(0)
    assert gradient_check(_zero(pr.params), pr.gt, pr.triple) <= 1e-6


def test_gradient_check_projection_only():
    pr = tiny_problem(1)
    names = [n for n in pr.params.names() if n.startswith("proj.")]
    assert gradient_check(pr.params, pr.gt, pr.triple, names=names) <= 1e-6


def test_gradient_check_paper_literal_sign():
    pr = tiny_problem(2)
    assert gradient_check(pr.params, pr.gt, pr.triple, sign="paper-literal") <= 1e-4


def test_gradient_check_detects_wrong_gradient(monkeypatch):
    import hetbip.model as m

    pr = tiny_problem(3)
    real = m.batch_loss_and_grads

    def broken(*a, **k):
        loss, grads, res = real(*a, **k)
        if grads is not None:
            grads["att.u"] = grads["att.u"] * 1.01
        return loss, grads, res

    monkeypatch.setattr(m, "batch_loss_and_grads", broken)
    assert gradient_check(pr.params, pr.gt, pr.triple, names=["att.u"]) > 1e-3


def test_batch_gradient_matches_fd_for_shared_nodes():
    pr = tiny_problem(4, d=4)
    v, p, n = np.array([0, 1, 0]), np.array([4, 0, 5]), np.array([1, 6, 4])
    _, grads, _ = batch_loss_and_grads(pr.params, pr.gt, v, p, n)
    t = pr.params.tensors["att.u"]
    fd = np.zeros_like(t)
    for i in range(t.size):
        old = t[i]
        t[i] = old + 1e-6
        lp = batch_loss_and_grads(pr.params, pr.gt, v, p, n, need_grads=False)[0]
        t[i] = old - 1e-6
        lm = batch_loss_and_grads(pr.params, pr.gt, v, p, n, need_grads=False)[0]
        t[i] = old
        fd[i] = (lp - lm) / 2e-6
    assert np.allclose(grads["att.u"], fd, atol=1e-8)


# ---------------------------------------------------------------- embeddings and training


def test_export_import_round_trip(tmp_path, rng):
    t = EmbeddingTable(["a", "b", "c"], rng.normal(size=(3, 128)))
    export_embeddings(t, tmp_path / "e.tsv")
    assert (tmp_path / "e.tsv").read_text().splitlines()[0] == "3 128"
    back = import_embeddings(tmp_path / "e.tsv", dim=128)
    assert back.ids == t.ids and np.max(np.abs(back.vectors - t.vectors)) <= 1e-6
    with pytest.raises(DataError):
        import_embeddings(tmp_path / "e.tsv", dim=64)
    with pytest.raises(MissingKeyError):
        back.lookup(["a", "zz"])
    with pytest.raises(MissingKeyError):
        back["zz"]
    with pytest.raises(DataError):
        EmbeddingTable(["a", "a"], np.zeros((2, 2)))


def _prep(small_synth, seed=0):
    g = graph_from_dataset(load_dataset_dir(small_synth, text_dim=16, image_dim=8))
    wc = WalkConfig(seed=seed, walks_per_node=4)
    walks = generate_walks(g, wc)
    ns = build_neighbor_sets(g, wc, walks)
    attrs, _ = encode_graph(g, 16)
    return g, ns, attrs, walks


def test_train_deterministic_and_decreasing(small_synth):
    g, ns, attrs, walks = _prep(small_synth)
    cfg = TrainConfig(epochs=3, dim=16, lr=0.01, pairs_per_epoch=1500, seed=7)
    a = train(g, ns, attrs, cfg, walks)
    b = train(g, ns, attrs, cfg, walks)
    assert np.array_equal(a.table.vectors, b.table.vectors)
    assert a.epoch_losses == b.epoch_losses
    assert np.mean(a.epoch_losses[1:]) < a.epoch_losses[0]
    assert a.epoch_losses[-1] < a.epoch_losses[0]
    assert np.allclose(a.table.alpha.sum(axis=1), 1.0, atol=1e-6)
    assert len(a.table) == g.n_nodes


def test_train_zero_epochs(small_synth):
    g, ns, attrs, walks = _prep(small_synth)
    res = train(g, ns, attrs, TrainConfig(epochs=0), walks)
    assert res.table.dim == 128 and np.all(np.isfinite(res.table.vectors))
    assert res.epoch_losses == []


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_aborts(small_synth):
    from hetbip.errors import NumericalError

    g, ns, attrs, walks = _prep(small_synth)
    attrs = [list(a) for a in attrs]
    attrs[0][0] = (attrs[0][0][0], np.full_like(attrs[0][0][1], np.nan))
    with pytest.raises(NumericalError, match="batch"):
        train(g, ns, attrs, TrainConfig(epochs=1, dim=8, pairs_per_epoch=None), walks)


def test_isolated_node_embedding_is_content():
    p = _params(d=8)
    attrs = [[("scalars", np.arange(6.0))], [("scalars", np.ones(6))]]
    gt = pack_graph(attrs, NeighborSets([[], [(0, 2)]], [[], []]))
    E, alpha = embed_all(p, gt)
    assert alpha[0, 0] == 1.0
    assert alpha[1, 0] < 1.0 and alpha[1, 2] == 0.0
    # bitwise equal to the content embedding computed in the same pass
    res = forward(p, gt, np.arange(2))
    plan, f1 = res.cache[0], res.cache[1]
    assert np.array_equal(res.E[0], f1[plan.self_pos[0]])
    # a standalone call batches differently, so only rounding may differ
    assert np.allclose(E[0], fuse_attributes(p, attrs[0]), rtol=0, atol=1e-15)


def test_checkpoint_round_trip(tmp_path):
    p = _params(d=8)
    save_checkpoint(tmp_path / "c.npz", p, {"epochs": 2}, 5)
    q, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta["seed"] == 5 and meta["config"] == {"epochs": 2}
    assert q.names() == p.names() and all(np.array_equal(q[k], p[k]) for k in p.names())


def test_config_validation():
    for bad in ({"epochs": -1}, {"lr": 0}, {"batch_size": 0}, {"loss_sign": "x"}, {"pairs_per_epoch": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        init_params({"scalars": 3}, d=7)
