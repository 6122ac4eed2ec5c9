import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relcredit import gnn
from relcredit import graph as G
from relcredit import ingest
from conftest import random_graph, subset_rows


def _one_customer(ds):
    """Customer 0 with one previous application carrying two installments, nothing else."""
    cust = ds.customer_ids[0]
    prev = ds.table(ingest.PREVIOUS)
    prev_rows = np.flatnonzero(prev.columns["SK_ID_CURR"] == cust)[:1]
    inst = ds.table(ingest.INSTALLMENTS)
    inst_rows = np.flatnonzero(inst.columns["SK_ID_PREV"] == prev.columns["SK_ID_PREV"][prev_rows[0]])[:2]
    keep = {ingest.APPLICATION: np.array([0]), ingest.PREVIOUS: prev_rows, ingest.INSTALLMENTS: inst_rows,
            ingest.BUREAU: np.zeros(0, dtype=int), ingest.POS_CASH: np.zeros(0, dtype=int),
            ingest.CREDIT_CARD: np.zeros(0, dtype=int)}
    assert inst_rows.size == 2
    return subset_rows(ds, keep)


@pytest.fixture(scope="module")
def rich_ds():
    cfg = ingest.SynthConfig(n_customers=50, mean_previous=3.0, mean_installments=6.0)
    return ingest.generate_synthetic(cfg, 0)


def test_hand_fixture_counts(rich_ds):
    ds = _one_customer(rich_ds)
    g = G.build_hetero_graph(ds, split=np.array([0]))
    assert g.n_nodes(G.CUSTOMER) == 1 and g.n_nodes(G.PREV) == 1 and g.n_nodes(G.INSTALLMENT) == 2
    assert sum(g.n_nodes(t) for t in g.node_types) == 4
    assert g.relations["has_prev"].n_edges == 1
    assert g.relations["has_installment"].n_edges == 2
    for r in ("has_prev", "has_installment"):
        assert g.relations[f"rev_{r}"].n_edges == g.relations[r].n_edges


def test_empty_credit_card_relation(rich_ds):
    ds = subset_rows(rich_ds, {ingest.CREDIT_CARD: np.zeros(0, dtype=int)})
    g = G.build_hetero_graph(ds)
    assert G.CARD in g.node_types and g.n_nodes(G.CARD) == 0
    assert g.relations["has_card"].n_edges == 0 and g.relations["rev_has_card"].n_edges == 0
    G.validate_graph(g)


def test_build_passes_validation(small_graph):
    rep = G.validate_graph(small_graph)
    assert set(rep["nodes"]) == set(G.NODE_TYPES)
    assert len(rep["relations"]) == 10


def test_corrupted_offsets_named(small_graph):
    rel = small_graph.relations["has_bureau"]
    off = rel.offsets.copy()
    off[1], off[2] = off[2] + 1, off[1]
    bad = dict(small_graph.relations)
    bad["has_bureau"] = G.Relation(rel.src_type, rel.name, rel.dst_type, off, rel.targets, rel.reverse)
    g = G.HeteroGraph(small_graph.ids, small_graph.features, small_graph.feature_names, bad,
                      small_graph.labels, small_graph.split)
    with pytest.raises(G.GraphValidationError, match="non-monotone offsets"):
        G.validate_graph(g)


def test_broken_transpose_detected():
    g = random_graph(0)
    rel = g.relations["rev_has_bureau"]
    tgt = rel.targets.copy()
    tgt[0] = (tgt[0] + 1) % g.n_nodes(G.CUSTOMER)
    g.relations["rev_has_bureau"] = G.Relation(rel.src_type, rel.name, rel.dst_type, rel.offsets, tgt, rel.reverse)
    with pytest.raises(G.GraphValidationError, match="transpose"):
        G.validate_graph(g)


def test_degree_histogram_hand_count():
    # 5 nodes: 2 customers, 3 bureau records; customer 0 owns two, customer 1 owns one
    src, dst = np.array([0, 0, 1]), np.array([0, 1, 2])
    off, tgt = G.csr_from_edges(src, dst, 2)
    roff, rtgt = G.csr_from_edges(dst, src, 3)
    ids = {t: np.zeros(0, dtype=np.int64) for t in G.NODE_TYPES}
    ids[G.CUSTOMER], ids[G.BUREAU] = np.arange(2), np.arange(3)
    feats = {t: np.zeros((ids[t].size, 1)) for t in G.NODE_TYPES}
    rels = {"has_bureau": G.Relation(G.CUSTOMER, "has_bureau", G.BUREAU, off, tgt, "rev_has_bureau"),
            "rev_has_bureau": G.Relation(G.BUREAU, "rev_has_bureau", G.CUSTOMER, roff, rtgt, "has_bureau")}
    g = G.HeteroGraph(ids, feats, {t: ["x"] for t in G.NODE_TYPES}, rels, np.array([0, 1]), np.array([0, 2]))
    rep = G.validate_graph(g)
    assert rep["relations"]["has_bureau"]["degree_histogram"] == {1: 1, 2: 1}
    assert rep["relations"]["rev_has_bureau"]["degree_histogram"] == {1: 3}
    assert rep["total_nodes"] == 5


def test_orphans_excluded_from_graph():
    ds = ingest.generate_synthetic(ingest.SynthConfig(n_customers=200, orphan_fraction=0.1), 2)
    g = G.build_hetero_graph(ds)
    n_valid = int(ds.valid_rows(ingest.BUREAU).sum())
    assert g.n_nodes(G.BUREAU) == n_valid < ds.table(ingest.BUREAU).n_rows


def test_edge_sums_and_label_invariants(small_graph):
    for name, rel in small_graph.relations.items():
        rev = small_graph.relations[rel.reverse]
        assert rel.degree().sum() == rel.n_edges == rev.n_edges
    assert small_graph.labels.size == small_graph.n_nodes(G.CUSTOMER)
    masks = [small_graph.mask(w) for w in ("train", "val", "test")]
    assert not (masks[0] & masks[1]).any() and not (masks[1] & masks[2]).any()


def test_node_order_ascending(small_graph):
    for t in small_graph.node_types:
        assert np.all(np.diff(small_graph.ids[t]) > 0) or small_graph.n_nodes(t) < 2


def test_rebuild_byte_identical(small_ds, tmp_path):
    split = G.stratified_split(small_ds.labels, seed=42)
    for d in ("a", "b"):
        G.save_graph(G.build_hetero_graph(small_ds, split=split), str(tmp_path / d))
    for f in sorted(os.listdir(tmp_path / "a")):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_save_load_roundtrip(small_graph, tmp_path):
    G.save_graph(small_graph, str(tmp_path))
    with open(tmp_path / "rel_has_bureau.bin", "rb") as fh:
        assert fh.read(8) == G.MAGIC
    back = G.load_graph(str(tmp_path))
    for r, rel in small_graph.relations.items():
        assert np.array_equal(back.relations[r].offsets, rel.offsets)
        assert np.array_equal(back.relations[r].targets, rel.targets)
    for t in small_graph.node_types:
        assert np.allclose(back.features[t], small_graph.features[t].astype(np.float32))
    assert np.array_equal(back.labels, small_graph.labels)


def test_bad_magic_rejected(small_graph, tmp_path):
    G.save_graph(small_graph, str(tmp_path))
    p = tmp_path / "rel_has_pos.bin"
    p.write_bytes(b"XXXXXXXX" + p.read_bytes()[8:])
    with pytest.raises(G.GraphValidationError):
        G.load_graph(str(tmp_path))


def test_structure_only_features(small_ds):
    g = G.build_hetero_graph(small_ds, G.GraphFeatureConfig(structure_only=True))
    for t in g.node_types:
        assert g.feature_names[t] == ["CONST"]
        assert np.all(g.features[t] == 1.0)


def test_without_empties_relation_and_reverse(small_graph):
    g = small_graph.without(["has_bureau"])
    assert g.relations["has_bureau"].n_edges == 0 and g.relations["rev_has_bureau"].n_edges == 0
    assert g.relations["has_prev"].n_edges == small_graph.relations["has_prev"].n_edges
    G.validate_graph(g)


def test_stratified_split_fractions():
    y = np.r_[np.zeros(900), np.ones(100)].astype(int)
    s = G.stratified_split(y, seed=1)
    for code, frac in enumerate((0.7, 0.1, 0.2)):
        assert (s == code).mean() == pytest.approx(frac, abs=0.002)
        assert y[s == code].mean() == pytest.approx(0.1, abs=0.01)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_graphs_validate(seed):
    G.validate_graph(random_graph(seed))


def test_save_after_forward_pass(tmp_path):
    g = random_graph(2)
    model = gnn.build_model(g, gnn.SAGE, gnn.HeteroSageConfig(hidden_dim=4))
    model.forward(g, np.arange(3))
    G.save_graph(g, str(tmp_path))
    assert G.load_graph(str(tmp_path)).meta == {k: v for k, v in g.meta.items() if not k.startswith("_")}
