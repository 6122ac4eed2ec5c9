"""Two-view contrastive pretraining of the GNN encoder (feature masking + edge dropout, InfoNCE)."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import gnn
from . import tensor as T
from .graph import CUSTOMER, HeteroGraph
from .sampler import Fanout, SampledSubgraph, epoch_batches, sample_subgraph

log = logging.getLogger(__name__)


@dataclass
class AugmentConfig:
    feature_mask_rate: float = 0.20
    edge_drop_rate: float = 0.20
    seed: int = 0

    def __post_init__(self):
        for r in (self.feature_mask_rate, self.edge_drop_rate):
            if not 0.0 <= r < 1.0:
                raise ValueError("augmentation rates must lie in [0, 1)")


@dataclass
class PretrainConfig:
    epochs: int = 5
    batch_size: int = 512
    lr: float = 1e-3
    temperature: float = 0.5
    proj_hidden: int = 256
    proj_out: int = 128
    seed: int = 0
    dtype: str = "float32"
    augment: AugmentConfig = field(default_factory=AugmentConfig)


class ProjectionHead:
    """hidden -> hidden -> out MLP with ReLU; rows are L2-normalized afterwards."""

    def __init__(self, in_dim: int = 256, hidden: int = 256, out: int = 128, seed: int = 0,
                 dtype: str = "float64"):
        rng = np.random.default_rng([seed, 17])
        dt = np.dtype(dtype)
        self.params = {
            "proj.w1": T.parameter(gnn._glorot(rng, in_dim, hidden, dt), "proj.w1"),
            "proj.b1": T.parameter(np.zeros((1, hidden), dtype=dt), "proj.b1"),
            "proj.w2": T.parameter(gnn._glorot(rng, hidden, out, dt), "proj.w2"),
            "proj.b2": T.parameter(np.zeros((1, out), dtype=dt), "proj.b2"),
        }

    def __call__(self, h: T.Tensor) -> T.Tensor:
        P = self.params
        a = T.relu(T.matmul(h, P["proj.w1"]) + P["proj.b1"])
        return T.l2_normalize_rows(T.matmul(a, P["proj.w2"]) + P["proj.b2"])

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())


def info_nce(zi: T.Tensor, zj: T.Tensor, temperature: float = 0.5) -> T.Tensor:
    """Symmetric NT-Xent over 2N unit rows.

    Anchor row k of one view has its counterpart in the other view as the
    positive; the denominator runs over every other row of both views (2N - 1
    terms, positive included).  The loss is the mean over all 2N anchors.
    """
    n = zi.shape[0]
    if n < 2 or zj.shape[0] != n:
        raise ValueError("info_nce needs two views with the same N >= 2 rows")
    for z in (zi, zj):
        if np.any(np.einsum("ij,ij->i", z.data, z.data) == 0):
            raise ValueError("zero-norm embedding row")
    inv_t = 1.0 / temperature
    self_mask = np.where(np.eye(n, dtype=bool), -np.inf, 0.0).astype(zi.data.dtype)
    s_ij = T.scale(T.matmul(zi, T.transpose(zj)), inv_t)
    s_ji = T.transpose(s_ij)
    s_ii = T.scale(T.matmul(zi, T.transpose(zi)), inv_t) + self_mask
    s_jj = T.scale(T.matmul(zj, T.transpose(zj)), inv_t) + self_mask
    pos = T.scale(T.sum_axis(zi * zj, axis=1), inv_t)
    lse_i = T.logsumexp_rows(T.concat_cols([s_ij, s_ii]))
    lse_j = T.logsumexp_rows(T.concat_cols([s_ji, s_jj]))
    per_anchor = (lse_i - pos) + (lse_j - pos)
    return T.scale(T.total(per_anchor), 1.0 / (2 * n))


def _pair_keys(src, dst, n_dst):
    return src.astype(np.int64) * max(n_dst, 1) + dst


def augment_views(sub: SampledSubgraph, cfg: AugmentConfig, rng_streams) -> tuple[gnn.MessageGraph, gnn.MessageGraph]:
    """Two independently augmented copies of ``sub``.

    ``rng_streams`` is a pair of generators, one per view.  Feature entries
    are zeroed with probability ``feature_mask_rate``; each (parent, child)
    link is dropped with probability ``edge_drop_rate`` from both its forward
    and reverse relation at once.  Seed nodes are kept in both views.
    """
    views = []
    for rng in rng_streams:
        feats = {}
        for t in sorted(sub.features):
            x = sub.features[t]
            keep = rng.random(x.shape) >= cfg.feature_mask_rate
            feats[t] = np.where(keep, x, 0).astype(x.dtype)
        edges = {}
        for r in sorted(sub.edges):
            if r.startswith("rev_"):
                continue
            s_t, d_t = sub.relation_types[r]
            fs, fd = sub.edges[r]
            rev = "rev_" + r
            rs, rd = sub.edges.get(rev, (np.zeros(0, np.int64), np.zeros(0, np.int64)))
            n_d = sub.n_nodes(d_t)
            # forward edge (a -> b) and reverse edge (b -> a) share the link key (a, b)
            keys = np.concatenate([_pair_keys(fs, fd, n_d), _pair_keys(rd, rs, n_d)])
            uniq, inv = np.unique(keys, return_inverse=True)
            kept = rng.random(uniq.size) >= cfg.edge_drop_rate
            k = kept[inv]
            edges[r] = (fs[k[:fs.size]], fd[k[:fs.size]])
            if rev in sub.edges:
                edges[rev] = (rs[k[fs.size:]], rd[k[fs.size:]])
        for r in sub.edges:
            edges.setdefault(r, sub.edges[r])
        views.append(gnn.MessageGraph(feats, edges, dict(sub.relation_types)))
    return views[0], views[1]


def unlabeled(g: HeteroGraph) -> HeteroGraph:
    """Structure and features only; the pretraining loop never sees labels or splits."""
    return HeteroGraph(ids=g.ids, features=g.features, feature_names=g.feature_names,
                       relations=g.relations, labels=None, split=None, meta={})


@dataclass
class PretrainResult:
    model: gnn.HeteroGNN
    head: ProjectionHead
    losses: list[float]

    def encoder_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.model.state_dict().items() if not k.startswith("head.")}


def pretrain(g: HeteroGraph, encoder_arch: str = gnn.SAGE, cfg: PretrainConfig | None = None,
             fanout: Fanout | None = None, model_config=None) -> PretrainResult:
    cfg = cfg or PretrainConfig()
    fanout = fanout or Fanout()
    g = unlabeled(g)
    model = gnn.build_model(g, encoder_arch, model_config, seed=cfg.seed, dtype=cfg.dtype)
    head = ProjectionHead(model.config.hidden_dim, cfg.proj_hidden, cfg.proj_out, cfg.seed, cfg.dtype)
    opt = T.Adam(model.encoder_params() + head.parameters(), lr=cfg.lr)
    anchors = np.arange(g.n_nodes(CUSTOMER))
    losses = []
    for epoch in range(cfg.epochs):
        batch_losses = []
        for b, seeds in enumerate(epoch_batches(anchors, cfg.batch_size, cfg.seed, epoch)):
            if seeds.size < 2:
                continue
            sub = sample_subgraph(g, seeds, fanout, rng_seed=cfg.seed * 1000003 + epoch, batch_index=b)
            streams = [np.random.default_rng([cfg.augment.seed, cfg.seed, epoch, b, v]) for v in (0, 1)]
            vi, vj = augment_views(sub, cfg.augment, streams)
            opt.zero_grad()
            with T.Tape() as tape:
                zi = head(model.encode(vi, sub.seed_local, training=True))
                zj = head(model.encode(vj, sub.seed_local, training=True))
                loss = info_nce(zi, zj, cfg.temperature)
            if not np.isfinite(loss.data):
                raise gnn.TrainingDivergence(f"non-finite InfoNCE at epoch {epoch} batch {b}")
            tape.backward(loss)
            opt.step()
            batch_losses.append(float(loss.data))
        losses.append(float(np.mean(batch_losses)))
        log.info("pretrain epoch %d infonce %.5f", epoch, losses[-1])
    return PretrainResult(model, head, losses)


def save_encoder(path: str, result: PretrainResult) -> None:
    T.save_checkpoint(path, result.encoder_state(),
                      {"model": result.model.describe(), "infonce": result.losses, "encoder_only": True})


def load_encoder(path: str) -> tuple[dict[str, np.ndarray], dict]:
    state, extra = T.load_checkpoint(path)
    return state, extra


def finetune_comparison(g: HeteroGraph, arch: str, encoder_state: dict, train_cfg: gnn.TrainConfig,
                        fanout: Fanout | None = None, model_config=None) -> dict:
    """Train from the pretrained encoder and from scratch with identical settings."""
    rows = {}
    for name, init in (("scratch", None), ("pretrain+ft", encoder_state)):
        res = gnn.train_gnn(g, arch, train_cfg, fanout, model_config, init_state=init)
        test = gnn.evaluate(res.model, g, "test")
        rows[name] = {"roc_auc": test["roc_auc"], "pr_auc": test["pr_auc"],
                      "best_epoch": res.best_epoch, "best_val_roc_auc": res.best_val_auc,
                      "first_epoch_val_roc_auc": res.history[0]["val_roc_auc"],
                      "model": res}
    return rows


def comparison_markdown(rows: dict) -> str:
    lines = ["| Init | Test ROC-AUC | Test PR-AUC | Epoch-0 val ROC-AUC | Best epoch |",
             "|---|---|---|---|---|"]
    for name, r in rows.items():
        lines.append(f"| {name} | {r['roc_auc']:.4f} | {r['pr_auc']:.4f} | "
                     f"{r['first_epoch_val_roc_auc']:.4f} | {r['best_epoch']} |")
    return "\n".join(lines) + "\n"
