"""Seeded typed k-hop neighbourhood sampling around customer seeds."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .graph import CUSTOMER, HeteroGraph

UNLIMITED = None


@dataclass
class Fanout:
    """Per-hop cap on sampled in-neighbours per (node, relation).

    Each hop entry is an int, ``None`` (unlimited) or a dict relation -> cap
    (relations absent from the dict are unlimited).
    """
    caps: list = field(default_factory=lambda: [10, 10])

    def __post_init__(self):
        if len(self.caps) < 1:
            raise ValueError("fanout needs at least one hop")
        for c in self.caps:
            vals = c.values() if isinstance(c, dict) else [c]
            for v in vals:
                if v is not None and int(v) < 1:
                    raise ValueError("fanout caps must be positive or unlimited")

    @property
    def hops(self) -> int:
        return len(self.caps)

    def cap(self, hop: int, relation: str):
        c = self.caps[hop]
        if isinstance(c, dict):
            return c.get(relation)
        return c

    @classmethod
    def unlimited(cls, hops: int = 2) -> "Fanout":
        return cls([None] * hops)


@dataclass
class SampledSubgraph:
    global_ids: dict[str, np.ndarray]            # local -> global node index per type
    features: dict[str, np.ndarray]
    hop: dict[str, np.ndarray]                   # hop at which each local node was first reached
    edges: dict[str, tuple[np.ndarray, np.ndarray]]   # relation -> (src_local, dst_local), message src -> dst
    relation_types: dict[str, tuple[str, str]]
    seed_local: np.ndarray
    labels: np.ndarray | None

    def n_nodes(self, t: str) -> int:
        return int(self.global_ids[t].size)

    def csr(self, rel: str) -> tuple[np.ndarray, np.ndarray]:
        src, dst = self.edges[rel]
        n_src = self.n_nodes(self.relation_types[rel][0])
        order = np.lexsort((dst, src))
        off = np.zeros(n_src + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n_src), out=off[1:])
        return off, dst[order]

    def to_json(self) -> str:
        """Debug dump for fixtures."""
        return json.dumps({
            "global_ids": {t: v.tolist() for t, v in self.global_ids.items()},
            "hop": {t: v.tolist() for t, v in self.hop.items()},
            "edges": {r: [s.tolist(), d.tolist()] for r, (s, d) in self.edges.items()},
            "seed_local": self.seed_local.tolist(),
        }, sort_keys=True)


def _sample_slices(offsets: np.ndarray, targets: np.ndarray, nodes: np.ndarray, cap,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """For each node, up to ``cap`` distinct CSR neighbours chosen uniformly without replacement.

    Returns (row index into ``nodes``, neighbour id), ordered by node then CSR position.
    """
    start = offsets[nodes]
    deg = offsets[nodes + 1] - start
    total = int(deg.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    seg = np.repeat(np.arange(nodes.size), deg)
    pos = np.arange(total) - np.repeat(np.cumsum(deg) - deg, deg)
    if cap is not None and np.any(deg > cap):
        # uniform random subset per segment: keep the `cap` smallest random keys
        keys = rng.random(total)
        order = np.lexsort((keys, seg))
        seg_start = np.cumsum(deg) - deg
        rank = np.empty(total, dtype=np.int64)
        rank[order] = np.arange(total) - seg_start[seg[order]]
        keep = rank < cap
        seg, pos = seg[keep], pos[keep]
    return seg, targets[start[seg] + pos]


def sample_subgraph(g: HeteroGraph, seeds, fanout: Fanout, rng_seed: int,
                    batch_index: int = 0) -> SampledSubgraph:
    """Expand seeds hop by hop along every relation (reverses included).

    At each hop every newly reached node samples up to the hop's cap of
    in-neighbours per relation; reached nodes are deduplicated and each
    sampled (neighbour -> node) pair becomes a local edge.
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    n_cust = g.n_nodes(CUSTOMER)
    if seeds.size == 0:
        raise ValueError("seeds must be non-empty")
    if seeds.min() < 0 or seeds.max() >= n_cust:
        raise IndexError("invalid seed customer index")
    seeds = seeds[np.sort(np.unique(seeds, return_index=True)[1])]
    rng = np.random.default_rng([int(rng_seed), int(batch_index)])

    local_of = {t: np.full(g.n_nodes(t), -1, dtype=np.int64) for t in g.node_types}
    glob = {t: [] for t in g.node_types}
    hops = {t: [] for t in g.node_types}
    counts = {t: 0 for t in g.node_types}

    def admit(t, nodes, h):
        new = nodes[local_of[t][nodes] < 0]
        new = new[np.sort(np.unique(new, return_index=True)[1])]
        local_of[t][new] = counts[t] + np.arange(new.size)
        counts[t] += new.size
        glob[t].append(new)
        hops[t].append(np.full(new.size, h, dtype=np.int64))
        return new

    frontier = {t: np.zeros(0, dtype=np.int64) for t in g.node_types}
    frontier[CUSTOMER] = admit(CUSTOMER, seeds, 0)
    edge_src = {r: [] for r in g.relations}
    edge_dst = {r: [] for r in g.relations}
    rel_names = sorted(g.relations)
    for h in range(fanout.hops):
        reached = {t: [] for t in g.node_types}
        for r in rel_names:
            rel = g.relations[r]
            nodes = frontier[rel.dst_type]
            if nodes.size == 0:
                continue
            inv = g.in_neighbors(r)
            seg, nbr = _sample_slices(inv.offsets, inv.targets, nodes, fanout.cap(h, r), rng)
            if nbr.size == 0:
                continue
            reached[rel.src_type].append(nbr)
            edge_src[r].append(nbr)
            edge_dst[r].append(nodes[seg])
        new_frontier = {}
        for t in g.node_types:
            cand = np.concatenate(reached[t]) if reached[t] else np.zeros(0, dtype=np.int64)
            new_frontier[t] = admit(t, cand, h + 1)
        frontier = new_frontier

    global_ids = {t: (np.concatenate(glob[t]) if glob[t] else np.zeros(0, dtype=np.int64)) for t in g.node_types}
    hop = {t: (np.concatenate(hops[t]) if hops[t] else np.zeros(0, dtype=np.int64)) for t in g.node_types}
    edges = {}
    for r in rel_names:
        rel = g.relations[r]
        if edge_src[r]:
            s = local_of[rel.src_type][np.concatenate(edge_src[r])]
            d = local_of[rel.dst_type][np.concatenate(edge_dst[r])]
        else:
            s = d = np.zeros(0, dtype=np.int64)
        edges[r] = (s, d)
    feats = {t: g.features[t][global_ids[t]] for t in g.node_types}
    return SampledSubgraph(global_ids, feats, hop, edges,
                           {r: (g.relations[r].src_type, g.relations[r].dst_type) for r in rel_names},
                           np.arange(seeds.size), g.labels[seeds] if g.labels is not None else None)


def epoch_batches(train_idx: np.ndarray, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeds shuffled once per epoch with an epoch-indexed generator."""
    rng = np.random.default_rng([int(seed), int(epoch), 7])
    perm = train_idx[rng.permutation(train_idx.size)]
    return [perm[i:i + batch_size] for i in range(0, perm.size, batch_size)]
