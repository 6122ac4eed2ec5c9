import os

import numpy as np
import pytest

from relcredit import ingest
from relcredit.graph import GraphFeatureConfig, build_hetero_graph, stratified_split


def write_csv(directory, name, header, rows):
    with open(os.path.join(directory, f"{name}.csv"), "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")


def hcdr_fixture(directory, app_rows=None, bureau_rows=(), prev_rows=(), inst_rows=(), pos_rows=(), card_rows=()):
    """Minimal six-table directory using only the key columns."""
    app_rows = app_rows if app_rows is not None else [(1, 0), (2, 1)]
    write_csv(directory, ingest.APPLICATION, ["SK_ID_CURR", "TARGET"], app_rows)
    write_csv(directory, ingest.BUREAU, ["SK_ID_BUREAU", "SK_ID_CURR"], bureau_rows)
    write_csv(directory, ingest.PREVIOUS, ["SK_ID_PREV", "SK_ID_CURR"], prev_rows)
    for name, rows in ((ingest.INSTALLMENTS, inst_rows), (ingest.POS_CASH, pos_rows),
                       (ingest.CREDIT_CARD, card_rows)):
        write_csv(directory, name, ["SK_ID_PREV", "SK_ID_CURR"], rows)


@pytest.fixture(scope="session")
def small_ds():
    cfg = ingest.SynthConfig(n_customers=400, mean_bureau=2.0, mean_previous=1.5,
                             mean_installments=2.0, mean_pos_cash=1.0, mean_credit_card=0.5)
    return ingest.generate_synthetic(cfg, seed=3)


@pytest.fixture(scope="session")
def small_graph(small_ds):
    split = stratified_split(small_ds.labels, seed=42)
    return build_hetero_graph(small_ds, GraphFeatureConfig(), split=split)


def subset_rows(ds, keep):
    """Copy of ``ds`` keeping rows[mask] per table; tables absent from ``keep`` are kept whole."""
    tables = {}
    for name, t in ds.tables.items():
        m = keep.get(name)
        cols = {c: (v[m] if m is not None else v).copy() for c, v in t.columns.items()}
        tables[name] = ingest.Table(name, cols, dict(t.kinds), dict(t.vocab))
    return ingest.RelationalDataset(tables, dict(ds.schemas), ds.label_column, ds.application)


def random_graph(seed, n_customers=20, n_prev=15, n_bureau=25, n_child=20, dim=3):
    """Random graph on the six node types with arbitrary parent assignment."""
    from relcredit import graph as G
    rng = np.random.default_rng(seed)
    counts = {G.CUSTOMER: n_customers, G.PREV: n_prev, G.BUREAU: n_bureau,
              G.INSTALLMENT: n_child, G.POS: n_child // 2, G.CARD: n_child // 3}
    ids = {t: np.arange(n, dtype=np.int64) for t, n in counts.items()}
    feats = {t: rng.normal(size=(n, dim)) for t, n in counts.items()}
    names = {t: [f"f{j}" for j in range(dim)] for t in counts}
    rels = {}
    for spec in G.RELATION_SPECS:
        n_src, n_dst = counts[spec.src_type], counts[spec.dst_type]
        src = rng.integers(0, n_src, n_dst)
        dst = np.arange(n_dst)
        off, tgt = G.csr_from_edges(src, dst, n_src)
        roff, rtgt = G.csr_from_edges(dst, src, n_dst)
        rev = f"rev_{spec.name}"
        rels[spec.name] = G.Relation(spec.src_type, spec.name, spec.dst_type, off, tgt, rev)
        rels[rev] = G.Relation(spec.dst_type, rev, spec.src_type, roff, rtgt, spec.name)
    labels = rng.integers(0, 2, n_customers)
    labels[:2] = [0, 1]
    split = stratified_split(labels, seed=seed)
    return G.HeteroGraph(ids, feats, names, rels, labels, split)
