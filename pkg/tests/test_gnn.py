import numpy as np
import pytest

from relcredit import gnn
from relcredit import graph as G
from relcredit import tensor as T
from relcredit.sampler import Fanout, sample_subgraph
from conftest import random_graph


def _dense_adj(g, r):
    """Message adjacency for relation r: rows are destinations, columns sources."""
    rel = g.relations[r]
    A = np.zeros((g.n_nodes(rel.dst_type), g.n_nodes(rel.src_type)))
    s, d = rel.edges()
    A[d, s] = 1.0
    return A


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def dense_sage(model, g):
    P = {k: v.data for k, v in model.params.items()}
    h = {t: g.features[t].copy() for t in g.node_types}
    for l in range(1, model.config.layers + 1):
        new = {}
        for t in g.node_types:
            acc = np.zeros((g.n_nodes(t), model.config.hidden_dim))
            for r, rel in g.relations.items():
                if rel.dst_type != t:
                    continue
                A = _dense_adj(g, r)
                deg = A.sum(axis=1, keepdims=True)
                mean = np.divide(A @ h[rel.src_type], deg, out=np.zeros((A.shape[0], h[rel.src_type].shape[1])),
                                 where=deg > 0)
                acc += np.hstack([h[t], mean]) @ P[f"l{l}.{r}.W"]
            new[t] = np.maximum(acc, 0)
        h = new
    return h[G.CUSTOMER]


def dense_relattn(model, g):
    P = {k: v.data for k, v in model.params.items()}
    cfg = model.config
    H, K = cfg.hidden_dim, cfg.heads
    C = H // K
    h = {t: g.features[t].copy() for t in g.node_types}
    for l in range(1, cfg.layers + 1):
        new = {}
        for t in g.node_types:
            n = g.n_nodes(t)
            acc = np.zeros((n, H))
            for r, rel in g.relations.items():
                if rel.dst_type != t:
                    continue
                A = _dense_adj(g, r)
                xs = h[rel.src_type] @ P[f"l{l}.{r}.Ws"]
                xt = h[t] @ P[f"l{l}.{r}.Wt"]
                att = P[f"l{l}.{r}.att"].reshape(K, C)
                for v in range(n):
                    nbrs = np.flatnonzero(A[v])
                    if nbrs.size == 0:
                        continue
                    for k in range(K):
                        sl = slice(k * C, (k + 1) * C)
                        pre = xs[nbrs, sl] + xt[v, sl]
                        pre = np.where(pre > 0, pre, cfg.negative_slope * pre)
                        e = pre @ att[k]
                        w = np.exp(e - e.max())
                        w /= w.sum()
                        acc[v, sl] += w @ xs[nbrs, sl]
            if cfg.residual:
                acc += h[t] @ P[f"l{l}.{t}.Wres"] if f"l{l}.{t}.Wres" in P else h[t]
            if cfg.batch_norm:
                st = model.bn[f"l{l}.{t}"]
                acc = (acc - st.running_mean) / np.sqrt(st.running_var + st.eps)
                acc = acc * P[f"l{l}.{t}.bn_gamma"] + P[f"l{l}.{t}.bn_beta"]
            new[t] = _elu(acc)
        h = new
    return h[G.CUSTOMER]


def _perturb_bn(model, seed):
    rng = np.random.default_rng(seed)
    for k, st in model.bn.items():
        st.running_mean = rng.normal(size=st.running_mean.shape)
        st.running_var = rng.uniform(0.5, 2.0, st.running_var.shape)
    for k, p in model.params.items():
        if "bn_" in k:
            p.data = p.data + rng.normal(scale=0.3, size=p.data.shape)


SMALL = dict(n_customers=8, n_prev=6, n_bureau=9, n_child=6, dim=3)


def test_sage_matches_dense_oracle():
    g = random_graph(0, **SMALL)
    model = gnn.build_model(g, gnn.SAGE, gnn.HeteroSageConfig(hidden_dim=5), seed=1)
    z = model.encode(g, np.arange(g.n_nodes(G.CUSTOMER))).data
    assert np.max(np.abs(z - dense_sage(model, g))) < 1e-12


@pytest.mark.parametrize("residual,batch_norm", [(True, True), (False, False), (True, False)])
def test_relattn_matches_dense_oracle(residual, batch_norm):
    g = random_graph(1, **SMALL)
    cfg = gnn.RelAttnConfig(hidden_dim=6, heads=2, residual=residual, batch_norm=batch_norm)
    model = gnn.build_model(g, gnn.RELATTN, cfg, seed=2)
    _perturb_bn(model, 3)
    z = model.encode(g, np.arange(g.n_nodes(G.CUSTOMER))).data
    assert np.max(np.abs(z - dense_relattn(model, g))) < 1e-12


def test_attention_sums_to_one_per_target_and_head():
    g = random_graph(2, n_customers=30, n_prev=40, n_bureau=60, n_child=50)
    model = gnn.build_model(g, gnn.RELATTN, gnn.RelAttnConfig(hidden_dim=8, heads=4), seed=0)
    for layer, rel in ((1, "rev_has_installment"), (2, "rev_has_bureau"), (2, "rev_has_prev")):
        alpha, dst = model.attention_weights(g, np.arange(30), layer, rel)
        sums = np.zeros((dst.max() + 1, 4))
        np.add.at(sums, dst, alpha)
        assert np.allclose(sums[np.unique(dst)], 1.0, atol=1e-12)
        assert (alpha >= 0).all()


def _permute(g, t, perm):
    """Relabel nodes of type t: old node i becomes perm[i]."""
    inv = np.argsort(perm)
    feats = dict(g.features)
    feats[t] = g.features[t][inv]
    rels = {}
    for r, rel in g.relations.items():
        s, d = rel.edges()
        s = perm[s] if rel.src_type == t else s
        d = perm[d] if rel.dst_type == t else d
        off, tgt = G.csr_from_edges(s, d, g.n_nodes(rel.src_type))
        rels[r] = G.Relation(rel.src_type, r, rel.dst_type, off, tgt, rel.reverse)
    labels, split = g.labels, g.split
    if t == G.CUSTOMER:
        labels, split = g.labels[inv], g.split[inv]
    return G.HeteroGraph(g.ids, feats, g.feature_names, rels, labels, split)


@pytest.mark.parametrize("arch", [gnn.SAGE, gnn.RELATTN])
def test_permutation_equivariance(arch):
    g = random_graph(4, n_customers=15, n_prev=12, n_bureau=20, n_child=16)
    cfg = gnn.HeteroSageConfig(hidden_dim=6) if arch == gnn.SAGE else gnn.RelAttnConfig(hidden_dim=8, heads=2)
    model = gnn.build_model(g, arch, cfg, seed=0)
    base = model.encode(g, np.arange(15)).data
    rng = np.random.default_rng(0)
    for t in (G.CUSTOMER, G.BUREAU, G.PREV, G.INSTALLMENT):
        perm = rng.permutation(g.n_nodes(t))
        gp = _permute(g, t, perm)
        z = model.encode(gp, np.arange(15)).data
        if t == G.CUSTOMER:
            z = z[perm]
        assert np.max(np.abs(z - base)) < 1e-12, t


def test_target_order_is_respected():
    g = random_graph(5)
    model = gnn.build_model(g, gnn.SAGE, gnn.HeteroSageConfig(hidden_dim=4))
    idx = np.array([7, 2, 2, 11])
    z = model.encode(g, idx).data
    full = model.encode(g, np.arange(g.n_nodes(G.CUSTOMER))).data
    assert np.array_equal(z, full[idx])


@pytest.mark.parametrize("arch", [gnn.SAGE, gnn.RELATTN])
@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_sampled_unlimited_matches_full_graph(arch, dtype):
    # 2,000 nodes across the six types
    g = random_graph(6, n_customers=400, n_prev=450, n_bureau=600, n_child=300, dim=4)
    cfg = gnn.HeteroSageConfig(hidden_dim=16) if arch == gnn.SAGE else gnn.RelAttnConfig(hidden_dim=16, heads=4)
    model = gnn.build_model(g, arch, cfg, seed=3, dtype=dtype)
    _perturb_bn(model, 1)
    rng = np.random.default_rng(0)
    for b in range(4):
        seeds = rng.choice(400, size=64, replace=False)
        sub = sample_subgraph(g, seeds, Fanout.unlimited(2), rng_seed=b)
        _, ls = model.forward(sub, sub.seed_local)
        _, lf = model.forward(g, seeds)
        assert np.max(np.abs(ls.data - lf.data)) <= 1e-5


def _grad_fixture(arch, seed):
    g = random_graph(seed, n_customers=6, n_prev=5, n_bureau=7, n_child=6, dim=3)   # 28 nodes
    cfg = gnn.HeteroSageConfig(hidden_dim=4) if arch == gnn.SAGE else gnn.RelAttnConfig(hidden_dim=4, heads=2)
    model = gnn.build_model(g, arch, cfg, seed=seed)
    targets = np.arange(6)
    y = g.labels[targets]

    def loss():
        _, logits = model.forward(g, targets, training=True)
        return T.weighted_bce_with_logits(logits, y, 2.5)
    return model, loss


@pytest.mark.parametrize("arch", [gnn.SAGE, gnn.RELATTN])
def test_gnn_gradients_match_finite_differences(arch):
    model, loss = _grad_fixture(arch, 7)
    rep = T.grad_check(loss, model.parameters(), eps=1e-6)
    assert rep["max_error"] < 1e-4, rep


def test_checkpoint_roundtrip_reproduces_logits(tmp_path):
    g = random_graph(8)
    model = gnn.build_model(g, gnn.RELATTN, gnn.RelAttnConfig(hidden_dim=8, heads=2), seed=0)
    _perturb_bn(model, 0)
    gnn.save_model(model, str(tmp_path / "m"))
    back = gnn.load_model(str(tmp_path / "m"))
    idx = np.arange(g.n_nodes(G.CUSTOMER))
    # parameters are stored as f32, so one round trip rounds and further ones are exact
    assert np.allclose(gnn.predict_logits(model, g, idx), gnn.predict_logits(back, g, idx), atol=1e-5)
    gnn.save_model(back, str(tmp_path / "m2"))
    again = gnn.load_model(str(tmp_path / "m2"))
    assert np.array_equal(gnn.predict_logits(back, g, idx), gnn.predict_logits(again, g, idx))
    assert (tmp_path / "m" / "params.bin").read_bytes() == (tmp_path / "m2" / "params.bin").read_bytes()


def test_load_state_strict_rejects_missing():
    g = random_graph(9)
    model = gnn.build_model(g, gnn.SAGE, gnn.HeteroSageConfig(hidden_dim=4))
    state = model.state_dict()
    state.pop("head.w")
    with pytest.raises(KeyError):
        model.load_state_dict(state)
    model.load_state_dict(state, strict=False)


def test_relation_mask_matches_graph_without():
    g = random_graph(10, n_customers=60, n_prev=50, n_bureau=80, n_child=40)
    model = gnn.build_model(g, gnn.SAGE, gnn.HeteroSageConfig(hidden_dim=6), seed=0)
    out = gnn.relation_mask_eval(model, g, "has_bureau")
    ref = gnn.evaluate(model, g.without(["has_bureau"]))
    assert out["masked"] == ref
    assert out["delta_roc_auc"] == ref["roc_auc"] - out["base"]["roc_auc"]
    with pytest.raises(KeyError):
        gnn.relation_mask_eval(model, g, "nope")


def test_embeddings_shape_and_chunk_invariance(small_graph):
    model = gnn.build_model(small_graph, gnn.SAGE, gnn.HeteroSageConfig(hidden_dim=8))
    a = gnn.extract_embeddings(model, small_graph, chunk=2048)
    b = gnn.extract_embeddings(model, small_graph, chunk=37)
    assert a.shape == (small_graph.n_nodes(G.CUSTOMER), 8)
    assert np.allclose(a, b, atol=1e-12, rtol=0)


def _quick_cfg(**kw):
    base = dict(epochs=3, batch_size=64, lr=5e-3, patience=2, seed=0, dtype="float64")
    base.update(kw)
    return gnn.TrainConfig(**base)


def test_training_is_deterministic_and_restores_best(small_graph):
    cfg = _quick_cfg()
    a = gnn.train_gnn(small_graph, gnn.SAGE, cfg, Fanout([5, 5]), gnn.HeteroSageConfig(hidden_dim=8))
    b = gnn.train_gnn(small_graph, gnn.SAGE, cfg, Fanout([5, 5]), gnn.HeteroSageConfig(hidden_dim=8))
    assert a.history == b.history
    for k, v in a.model.state_dict().items():
        assert np.array_equal(v, b.model.state_dict()[k])
    assert gnn.evaluate(a.model, small_graph, "val")["roc_auc"] == a.best_val_auc
    assert a.best_val_auc == max(h["val_roc_auc"] for h in a.history)


def test_training_divergence_raises(small_graph):
    feats = dict(small_graph.features)
    feats[G.CUSTOMER] = feats[G.CUSTOMER].copy()
    feats[G.CUSTOMER][:, 0] = 1e308      # overflows to inf in the first layer
    bad = G.HeteroGraph(small_graph.ids, feats, small_graph.feature_names, small_graph.relations,
                        small_graph.labels, small_graph.split)
    with pytest.raises(gnn.TrainingDivergence), np.errstate(all="ignore"):
        gnn.train_gnn(bad, gnn.SAGE, _quick_cfg(epochs=1), Fanout([3, 3]), gnn.HeteroSageConfig(hidden_dim=4))


def test_heads_must_divide_hidden():
    with pytest.raises(ValueError):
        gnn.RelAttnConfig(hidden_dim=10, heads=4)


def test_unknown_arch():
    with pytest.raises(ValueError):
        gnn.build_model(random_graph(0), "gcn")
