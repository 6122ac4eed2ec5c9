"""Six-node-type heterogeneous graph with per-relation CSR adjacency."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import features as F
from . import ingest
from .ingest import RelationalDataset

CUSTOMER = "customer"
PREV = "prev_application"
BUREAU = "bureau_record"
INSTALLMENT = "installment"
POS = "pos_cash"
CARD = "credit_card"
NODE_TYPES = (CUSTOMER, PREV, BUREAU, INSTALLMENT, POS, CARD)

TABLE_OF = {CUSTOMER: ingest.APPLICATION, PREV: ingest.PREVIOUS, BUREAU: ingest.BUREAU,
            INSTALLMENT: ingest.INSTALLMENTS, POS: ingest.POS_CASH, CARD: ingest.CREDIT_CARD}


@dataclass(frozen=True)
class RelationSpec:
    src_type: str
    name: str
    dst_type: str
    child_table: str
    child_key: str        # foreign-key column in the child table
    parent_key: str       # primary key of the parent table


# forward edges follow foreign keys parent -> child
RELATION_SPECS = (
    RelationSpec(CUSTOMER, "has_bureau", BUREAU, ingest.BUREAU, "SK_ID_CURR", "SK_ID_CURR"),
    RelationSpec(CUSTOMER, "has_prev", PREV, ingest.PREVIOUS, "SK_ID_CURR", "SK_ID_CURR"),
    RelationSpec(PREV, "has_installment", INSTALLMENT, ingest.INSTALLMENTS, "SK_ID_PREV", "SK_ID_PREV"),
    RelationSpec(PREV, "has_pos", POS, ingest.POS_CASH, "SK_ID_PREV", "SK_ID_PREV"),
    RelationSpec(PREV, "has_card", CARD, ingest.CREDIT_CARD, "SK_ID_PREV", "SK_ID_PREV"),
)


class GraphValidationError(ValueError):
    pass


@dataclass
class Relation:
    src_type: str
    name: str
    dst_type: str
    offsets: np.ndarray   # int64, len n_src + 1
    targets: np.ndarray   # int64 dst indices
    reverse: str

    @property
    def n_edges(self) -> int:
        return int(self.targets.size)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        src = np.repeat(np.arange(self.offsets.size - 1), np.diff(self.offsets))
        return src, self.targets

    def degree(self) -> np.ndarray:
        return np.diff(self.offsets)


@dataclass
class HeteroGraph:
    ids: dict[str, np.ndarray]                  # original keys, ascending
    features: dict[str, np.ndarray]             # per type, n x d
    feature_names: dict[str, list[str]]
    relations: dict[str, Relation]
    labels: np.ndarray                          # per customer
    split: np.ndarray                           # per customer: 0 train, 1 val, 2 test, -1 unused
    meta: dict = field(default_factory=dict)

    def n_nodes(self, t: str) -> int:
        return int(self.ids[t].size)

    @property
    def node_types(self) -> tuple[str, ...]:
        return tuple(self.ids)

    def mask(self, which: str) -> np.ndarray:
        return self.split == {"train": 0, "val": 1, "test": 2}[which]

    def in_relations(self, dst_type: str) -> list[str]:
        return [r for r, rel in self.relations.items() if rel.dst_type == dst_type]

    def in_neighbors(self, rel_name: str) -> Relation:
        """CSR indexed by the destination of ``rel_name`` listing its sources (the reverse relation)."""
        return self.relations[self.relations[rel_name].reverse]

    def without(self, rel_names) -> "HeteroGraph":
        """Copy with the given relations (and their reverses) emptied."""
        drop = set()
        for r in rel_names:
            if r not in self.relations:
                raise KeyError(f"unknown relation {r}")
            drop |= {r, self.relations[r].reverse}
        rels = {}
        for name, rel in self.relations.items():
            if name in drop:
                rels[name] = Relation(rel.src_type, name, rel.dst_type,
                                      np.zeros_like(rel.offsets), np.zeros(0, dtype=np.int64), rel.reverse)
            else:
                rels[name] = rel
        meta = {k: v for k, v in self.meta.items() if not k.startswith("_")}   # drop derived caches
        return HeteroGraph(self.ids, self.features, self.feature_names, rels, self.labels, self.split, meta)


def csr_from_edges(src: np.ndarray, dst: np.ndarray, n_src: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((dst, src))
    offsets = np.zeros(n_src + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n_src), out=offsets[1:])
    return offsets, dst[order].astype(np.int64)


def stratified_split(labels: np.ndarray, fractions=(0.7, 0.1, 0.2), seed: int = 42) -> np.ndarray:
    """Per-class shuffled assignment into train/val/test codes 0/1/2."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    out = np.empty(labels.size, dtype=np.int64)
    cuts = np.cumsum(fractions)[:-1] / np.sum(fractions)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        bounds = np.round(cuts * idx.size).astype(int)
        for code, part in enumerate(np.split(idx, bounds)):
            out[part] = code
    return out


@dataclass
class GraphFeatureConfig:
    structure_only: bool = False                 # every node type gets a single constant feature
    customer_columns: list[str] | None = None    # default: application numeric columns + TE + ratios
    child_columns: dict[str, list[str]] | None = None
    te_columns: list[str] | None = None


def _customer_matrix(ds: RelationalDataset, labels, train_rows, cfg: GraphFeatureConfig) -> F.FeatureMatrix:
    fm = F.engineer_features(ds)
    app_level = [c for c, tag in fm.lineage.items()
                 if tag == "raw" or c in ("CREDIT_INCOME", "ANNUITY_INCOME", "LOAN_PER_FAM")]
    fm = fm.select(app_level)
    for c in (cfg.te_columns if cfg.te_columns is not None else sorted(fm.categorical)):
        fm = F.target_encode(fm, c, labels, train_rows)
    if cfg.customer_columns is not None:
        fm = fm.select([c for c in cfg.customer_columns])
    state = F.fit_preprocess(fm, train_rows)
    return F.apply_preprocess(state, fm)


def build_hetero_graph(ds: RelationalDataset, feature_config: GraphFeatureConfig | None = None,
                       split: np.ndarray | None = None, split_seed: int = 42) -> HeteroGraph:
    """Compile the dataset into typed nodes and per-relation CSR with reverses.

    ``split`` is aligned to the application table's row order (codes 0/1/2).
    Node order per type is ascending original key; keyless tables use row
    position as key.  Feature scaling is fitted on train customers and on child
    rows owned by train customers.
    """
    cfg = feature_config or GraphFeatureConfig()
    app = ds.tables[ds.application]
    pk = ds.schemas[ds.application].primary_key
    labels_app = ds.labels
    if split is None:
        split = stratified_split(labels_app, seed=split_seed)
    split = np.asarray(split, dtype=np.int64)

    valid = {t: ds.valid_rows(TABLE_OF[t]) if TABLE_OF[t] in ds.tables else None for t in NODE_TYPES}
    ids, rows = {}, {}
    cust_keys = app.columns[pk]
    order = np.argsort(cust_keys, kind="stable")
    ids[CUSTOMER], rows[CUSTOMER] = cust_keys[order], order
    for t in NODE_TYPES[1:]:
        tname = TABLE_OF[t]
        if tname not in ds.tables:
            ids[t], rows[t] = np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
            continue
        table = ds.tables[tname]
        key = ds.schemas[tname].primary_key
        keep = np.flatnonzero(valid[t])
        keys = table.columns[key][keep] if key else keep.astype(np.int64)
        o = np.argsort(keys, kind="stable")
        ids[t], rows[t] = keys[o], keep[o]

    relations = {}
    for spec in RELATION_SPECS:
        n_src, n_dst = ids[spec.src_type].size, ids[spec.dst_type].size
        if spec.child_table in ds.tables and n_dst:
            child = ds.tables[spec.child_table]
            fk = child.columns[spec.child_key][rows[spec.dst_type]]
            parent_pos = np.searchsorted(ids[spec.src_type], fk)
            parent_pos = np.minimum(parent_pos, max(n_src - 1, 0))
            if n_src == 0 or not np.all(ids[spec.src_type][parent_pos] == fk):
                raise GraphValidationError(
                    f"{spec.name}: child key references a missing parent after orphan filtering")
            src, dst = parent_pos.astype(np.int64), np.arange(n_dst, dtype=np.int64)
        else:
            src = dst = np.zeros(0, dtype=np.int64)
        off, tgt = csr_from_edges(src, dst, n_src)
        roff, rtgt = csr_from_edges(dst, src, n_dst)
        rev = f"rev_{spec.name}"
        relations[spec.name] = Relation(spec.src_type, spec.name, spec.dst_type, off, tgt, rev)
        relations[rev] = Relation(spec.dst_type, rev, spec.src_type, roff, rtgt, spec.name)

    # features
    train_app = split == 0
    feats, fnames = {}, {}
    if cfg.structure_only:
        feats[CUSTOMER] = np.ones((ids[CUSTOMER].size, 1))
        fnames[CUSTOMER] = ["CONST"]
    else:
        cm = _customer_matrix(ds, labels_app, train_app, cfg)
        feats[CUSTOMER] = cm.values[order]
        fnames[CUSTOMER] = cm.column_names
    # owner customer (application row) of every child row, to fit scaling on train customers only
    cust_row_of_key = dict(zip(cust_keys.tolist(), range(cust_keys.size)))
    for t in NODE_TYPES[1:]:
        tname = TABLE_OF[t]
        if tname not in ds.tables:
            feats[t], fnames[t] = np.zeros((0, 1)), ["CONST"]
            continue
        table = ds.tables[tname]
        cols = (cfg.child_columns or {}).get(t) or [c for c in table.numeric_columns()]
        r = rows[t]
        vals = np.column_stack([table.columns[c][r] for c in cols]) if cols else np.zeros((r.size, 0))
        fm = F.FeatureMatrix(ids[t], list(cols), vals, {c: "raw" for c in cols})
        owners = np.array([cust_row_of_key.get(k, -1) for k in table.columns["SK_ID_CURR"][r].tolist()],
                          dtype=np.int64) if "SK_ID_CURR" in table.columns else np.full(r.size, -1)
        tr = (owners >= 0) & train_app[np.maximum(owners, 0)]
        if not tr.any():
            tr = np.ones(r.size, dtype=bool)
        if cfg.structure_only:
            feats[t], fnames[t] = np.ones((r.size, 1)), ["CONST"]
            continue
        if r.size == 0:
            feats[t], fnames[t] = np.zeros((0, max(len(cols), 1))), list(cols) or ["CONST"]
            continue
        state = F.fit_preprocess(fm, tr)
        out = F.apply_preprocess(state, fm)
        if out.values.shape[1] == 0:
            feats[t], fnames[t] = np.ones((r.size, 1)), ["CONST"]
        else:
            feats[t], fnames[t] = out.values, out.column_names

    return HeteroGraph(ids, feats, fnames, relations, labels_app[order].astype(np.int64), split[order],
                       {"structure_only": cfg.structure_only})


# ---------------------------------------------------------------- validation

def validate_graph(g: HeteroGraph, max_degree_bins: int = 50) -> dict:
    report = {"nodes": {t: g.n_nodes(t) for t in g.node_types}, "relations": {}}
    for name, rel in g.relations.items():
        off, tgt = rel.offsets, rel.targets
        n_src, n_dst = g.n_nodes(rel.src_type), g.n_nodes(rel.dst_type)
        if off.size != n_src + 1:
            raise GraphValidationError(f"{name}: offsets length {off.size} != {n_src + 1}")
        if off[0] != 0 or off[-1] != tgt.size:
            raise GraphValidationError(f"{name}: offsets do not span targets")
        if np.any(np.diff(off) < 0):
            raise GraphValidationError(f"{name}: non-monotone offsets")
        if tgt.size and (tgt.min() < 0 or tgt.max() >= n_dst):
            raise GraphValidationError(f"{name}: target index out of range")
        rev = g.relations.get(rel.reverse)
        if rev is None:
            raise GraphValidationError(f"{name}: reverse relation {rel.reverse} missing")
        s, d = rel.edges()
        rs, rd = rev.edges()
        fwd = np.lexsort((d, s))
        bwd = np.lexsort((rs, rd))
        if s.size != rs.size or not (np.array_equal(s[fwd], rd[bwd]) and np.array_equal(d[fwd], rs[bwd])):
            raise GraphValidationError(f"{name}: reverse relation is not the exact transpose")
        deg = rel.degree()
        hist = np.bincount(np.minimum(deg, max_degree_bins)) if deg.size else np.zeros(0, dtype=np.int64)
        report["relations"][name] = {"src": rel.src_type, "dst": rel.dst_type, "edges": rel.n_edges,
                                     "degree_histogram": {int(k): int(v) for k, v in enumerate(hist) if v}}
    if g.labels.size != g.n_nodes(CUSTOMER) or g.split.size != g.n_nodes(CUSTOMER):
        raise GraphValidationError("labels/split must cover exactly the customer nodes")
    report["total_nodes"] = int(sum(report["nodes"].values()))
    report["total_edges"] = int(sum(r["edges"] for r in report["relations"].values()))
    return report


# ---------------------------------------------------------------- persistence

MAGIC = b"RCGRAPH\x00"
FORMAT_VERSION = 1


def _write_csr(path: str, rel: Relation) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQQ", FORMAT_VERSION, 0, rel.offsets.size - 1, rel.targets.size))
        fh.write(rel.offsets.astype("<u8").tobytes())
        fh.write(rel.targets.astype("<u4").tobytes())


def _read_csr(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise GraphValidationError(f"{path}: bad magic header")
        version, _, n_src, n_edges = struct.unpack("<IIQQ", fh.read(24))
        if version != FORMAT_VERSION:
            raise GraphValidationError(f"{path}: unsupported version {version}")
        off = np.frombuffer(fh.read(8 * (n_src + 1)), dtype="<u8").astype(np.int64)
        tgt = np.frombuffer(fh.read(4 * n_edges), dtype="<u4").astype(np.int64)
    return off, tgt


def save_graph(g: HeteroGraph, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    meta = {k: v for k, v in g.meta.items() if not k.startswith("_")}       # derived caches stay in memory
    manifest = {"version": FORMAT_VERSION, "node_types": {}, "relations": [], "meta": meta}
    for t in g.node_types:
        x = np.ascontiguousarray(g.features[t], dtype="<f4")
        x.tofile(os.path.join(directory, f"feat_{t}.bin"))
        g.ids[t].astype("<i8").tofile(os.path.join(directory, f"ids_{t}.bin"))
        manifest["node_types"][t] = {"count": g.n_nodes(t), "dim": int(x.shape[1]),
                                     "feature_names": list(g.feature_names[t])}
    for name, rel in g.relations.items():
        _write_csr(os.path.join(directory, f"rel_{name}.bin"), rel)
        manifest["relations"].append({"name": name, "src": rel.src_type, "dst": rel.dst_type,
                                      "reverse": rel.reverse, "edges": rel.n_edges})
    g.labels.astype("u1").tofile(os.path.join(directory, "labels.bin"))
    g.split.astype("<i1").tofile(os.path.join(directory, "split.bin"))
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_graph(directory: str) -> HeteroGraph:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != FORMAT_VERSION:
        raise GraphValidationError("unsupported graph manifest version")
    ids, feats, names = {}, {}, {}
    for t, info in manifest["node_types"].items():
        ids[t] = np.fromfile(os.path.join(directory, f"ids_{t}.bin"), dtype="<i8").astype(np.int64)
        x = np.fromfile(os.path.join(directory, f"feat_{t}.bin"), dtype="<f4")
        feats[t] = x.reshape(info["count"], info["dim"]).astype(np.float64)
        names[t] = info["feature_names"]
    rels = {}
    for r in manifest["relations"]:
        off, tgt = _read_csr(os.path.join(directory, f"rel_{r['name']}.bin"))
        rels[r["name"]] = Relation(r["src"], r["name"], r["dst"], off, tgt, r["reverse"])
    labels = np.fromfile(os.path.join(directory, "labels.bin"), dtype="u1").astype(np.int64)
    split = np.fromfile(os.path.join(directory, "split.bin"), dtype="<i1").astype(np.int64)
    return HeteroGraph(ids, feats, names, rels, labels, split, manifest.get("meta", {}))
