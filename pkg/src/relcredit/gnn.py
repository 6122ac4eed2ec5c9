"""Heterogeneous GraphSAGE and the relation-aware attentive GNN.

Both models compute layer ``l`` only on the nodes whose states are needed by
layer ``l + 1`` (a receptive-field closure around the target customers), so
mini-batch forwards over sampled subgraphs and full-graph forwards restricted
to the same seeds share one code path.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from . import tensor as T
from .graph import CUSTOMER, HeteroGraph
from .sampler import Fanout, SampledSubgraph, epoch_batches, sample_subgraph

log = logging.getLogger(__name__)

SAGE, RELATTN = "sage", "relattn"


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class HeteroSageConfig:
    layers: int = 2
    hidden_dim: int = 256
    activation: str = "relu"


@dataclass
class RelAttnConfig:
    layers: int = 2
    hidden_dim: int = 256
    heads: int = 4
    negative_slope: float = 0.2
    activation: str = "elu"
    batch_norm: bool = True
    residual: bool = True

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError("heads must divide hidden_dim")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 512
    lr: float = 1e-3
    pos_weight: float | None = None     # default: train negatives / positives
    patience: int = 5
    seed: int = 0
    weight_decay: float = 0.0
    eval_chunk: int = 2048
    dtype: str = "float32"
    freeze_encoder: bool = False


# ---------------------------------------------------------------- message graphs

@dataclass
class MessageGraph:
    """Typed node features plus per-relation message edges (src -> dst)."""
    features: dict[str, np.ndarray]
    edges: dict[str, tuple[np.ndarray, np.ndarray]]
    rel_types: dict[str, tuple[str, str]]

    def n_nodes(self, t: str) -> int:
        return self.features[t].shape[0]


def message_graph(obj) -> MessageGraph:
    if isinstance(obj, MessageGraph):
        return obj
    if isinstance(obj, SampledSubgraph):
        return MessageGraph(obj.features, obj.edges, obj.relation_types)
    if isinstance(obj, HeteroGraph):
        cache = obj.meta.get("_edges")
        if cache is None:
            cache = {r: rel.edges() for r, rel in obj.relations.items()}
            obj.meta["_edges"] = cache
        return MessageGraph(obj.features, cache,
                            {r: (rel.src_type, rel.dst_type) for r, rel in obj.relations.items()})
    raise TypeError(f"cannot build a message graph from {type(obj).__name__}")


@dataclass
class LayerPlan:
    in_nodes: dict[str, np.ndarray]       # node ids whose states feed the layer
    out_nodes: dict[str, np.ndarray]      # node ids the layer produces
    self_pos: dict[str, np.ndarray]       # position of each out node within in_nodes
    rel_edges: dict[str, tuple[np.ndarray, np.ndarray]]   # (src pos in in_nodes, dst pos in out_nodes)


def plan_layers(mg: MessageGraph, targets: np.ndarray, n_layers: int, target_type: str = CUSTOMER):
    types = list(mg.features)
    active = [None] * (n_layers + 1)
    top = {t: np.zeros(mg.n_nodes(t), dtype=bool) for t in types}
    top[target_type][targets] = True
    active[n_layers] = top
    for l in range(n_layers, 0, -1):
        prev = {t: a.copy() for t, a in active[l].items()}
        for r, (s, d) in mg.rel_types.items():
            src, dst = mg.edges[r]
            if src.size:
                prev[s][src[active[l][d][dst]]] = True
        active[l - 1] = prev
    plans = []
    for l in range(1, n_layers + 1):
        a_in, a_out = active[l - 1], active[l]
        in_nodes = {t: np.flatnonzero(a_in[t]) for t in types}
        out_nodes = {t: np.flatnonzero(a_out[t]) for t in types}
        in_rank = {t: np.cumsum(a_in[t]) - 1 for t in types}
        out_rank = {t: np.cumsum(a_out[t]) - 1 for t in types}
        self_pos = {t: in_rank[t][out_nodes[t]] for t in types}
        rel_edges = {}
        for r, (s, d) in mg.rel_types.items():
            src, dst = mg.edges[r]
            if out_nodes[d].size == 0:
                continue
            m = a_out[d][dst] if dst.size else np.zeros(0, dtype=bool)
            rel_edges[r] = (in_rank[s][src[m]], out_rank[d][dst[m]])
        plans.append(LayerPlan(in_nodes, out_nodes, self_pos, rel_edges))
    return plans


# ---------------------------------------------------------------- model

def _glorot(rng, fan_in, fan_out, dtype):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, (fan_in, fan_out)).astype(dtype)


class HeteroGNN:
    """Shared container for both architectures.

    ``arch='sage'``: per relation ``[h_v || mean_{u in N_r(v)} h_u] @ W_r``,
    summed over incoming relations, then ReLU.  Empty neighbourhoods give a
    zero aggregate.

    ``arch='relattn'``: per relation GATv2 scoring
    ``a . leaky_relu(W_s h_u + W_t h_v)`` with a softmax over each target's
    in-neighbours, heads concatenated, summed over relations, plus a residual,
    per-type batch norm and ELU.
    """

    def __init__(self, arch: str, in_dims: dict[str, int], rel_types: dict[str, tuple[str, str]],
                 config=None, seed: int = 0, dtype: str = "float64"):
        if arch not in (SAGE, RELATTN):
            raise ValueError(f"unknown architecture {arch}")
        self.arch = arch
        self.config = config or (HeteroSageConfig() if arch == SAGE else RelAttnConfig())
        self.in_dims = dict(in_dims)
        self.rel_types = dict(sorted(rel_types.items()))
        self.dtype = np.dtype(dtype)
        self.params: dict[str, T.Tensor] = {}
        self.bn: dict[str, T.BatchNormState] = {}
        rng = np.random.default_rng(seed)
        H = self.config.hidden_dim
        dims = dict(in_dims)
        for l in range(1, self.config.layers + 1):
            for r, (s, d) in self.rel_types.items():
                if arch == SAGE:
                    self._add(f"l{l}.{r}.W", _glorot(rng, dims[d] + dims[s], H, self.dtype))
                else:
                    self._add(f"l{l}.{r}.Ws", _glorot(rng, dims[s], H, self.dtype))
                    self._add(f"l{l}.{r}.Wt", _glorot(rng, dims[d], H, self.dtype))
                    C = H // self.config.heads
                    self._add(f"l{l}.{r}.att", _glorot(rng, self.config.heads, C, self.dtype).reshape(1, H))
            if arch == RELATTN:
                for t in in_dims:
                    if self.config.residual and dims[t] != H:
                        self._add(f"l{l}.{t}.Wres", _glorot(rng, dims[t], H, self.dtype))
                    if self.config.batch_norm:
                        self._add(f"l{l}.{t}.bn_gamma", np.ones(H, dtype=self.dtype))
                        self._add(f"l{l}.{t}.bn_beta", np.zeros(H, dtype=self.dtype))
                        self.bn[f"l{l}.{t}"] = T.BatchNormState(H, dtype=np.float64)
            dims = {t: H for t in dims}
        self._add("head.w", _glorot(rng, H, 1, self.dtype))
        self._add("head.b", np.zeros((1, 1), dtype=self.dtype))

    def _add(self, name, value):
        self.params[name] = T.parameter(value, name)

    def encoder_params(self) -> list[T.Tensor]:
        return [p for n, p in self.params.items() if not n.startswith("head.")]

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    # -- forward -------------------------------------------------------------

    def encode(self, graph, targets: np.ndarray, training: bool = False) -> T.Tensor:
        """Final-layer customer states for ``targets`` (rows follow ``targets`` order)."""
        mg = message_graph(graph)
        targets = np.asarray(targets, dtype=np.int64)
        uniq = np.unique(targets)
        plans = plan_layers(mg, uniq, self.config.layers)
        h = {t: T.Tensor(mg.features[t][plans[0].in_nodes[t]].astype(self.dtype)) for t in mg.features}
        for l, plan in enumerate(plans, start=1):
            h = self._layer(l, plan, h, training)
        z = h[CUSTOMER]
        if not np.array_equal(uniq, targets):
            z = T.row_select(z, np.searchsorted(uniq, targets))
        return z

    def forward(self, graph, targets: np.ndarray, training: bool = False) -> tuple[T.Tensor, T.Tensor]:
        z = self.encode(graph, targets, training)
        logits = T.matmul(z, self.params["head.w"]) + self.params["head.b"]
        return z, logits

    def _layer(self, l: int, plan: LayerPlan, h: dict, training: bool) -> dict:
        out = {}
        P = self.params
        for t, nodes in plan.out_nodes.items():
            n_out = nodes.size
            if n_out == 0:
                out[t] = T.Tensor(np.zeros((0, self.config.hidden_dim), dtype=self.dtype))
                continue
            h_self = T.row_select(h[t], plan.self_pos[t])
            terms = []
            for r, (s, d) in self.rel_types.items():
                if d != t or r not in plan.rel_edges:
                    continue
                src_pos, dst_pos = plan.rel_edges[r]
                if self.arch == SAGE:
                    if src_pos.size:
                        agg = T.segment_mean(T.row_select(h[s], src_pos), dst_pos, n_out)
                    else:
                        agg = T.Tensor(np.zeros((n_out, h[s].shape[1]), dtype=self.dtype))
                    terms.append(T.matmul(T.concat_cols([h_self, agg]), P[f"l{l}.{r}.W"]))
                else:
                    terms.append(self._attend(l, r, h[s], h_self, src_pos, dst_pos, n_out))
            if self.arch == SAGE:
                acc = terms[0]
                for term in terms[1:]:
                    acc = acc + term
                out[t] = T.relu(acc) if self.config.activation == "relu" else T.elu(acc)
            else:
                H = self.config.hidden_dim
                acc = terms[0] if terms else T.Tensor(np.zeros((n_out, H), dtype=self.dtype))
                for term in terms[1:]:
                    acc = acc + term
                if self.config.residual:
                    res = T.matmul(h_self, P[f"l{l}.{t}.Wres"]) if f"l{l}.{t}.Wres" in P else h_self
                    acc = acc + res
                if self.config.batch_norm:
                    acc = T.batchnorm(acc, P[f"l{l}.{t}.bn_gamma"], P[f"l{l}.{t}.bn_beta"],
                                      self.bn[f"l{l}.{t}"], training)
                out[t] = T.elu(acc) if self.config.activation == "elu" else T.relu(acc)
        return out

    def _attend(self, l, r, h_src, h_dst_self, src_pos, dst_pos, n_out):
        P = self.params
        H = self.config.hidden_dim
        heads = self.config.heads
        if src_pos.size == 0:
            return T.Tensor(np.zeros((n_out, H), dtype=self.dtype))
        # only transform sources that actually send along r
        used, inv = np.unique(src_pos, return_inverse=True)
        xs = T.matmul(T.row_select(h_src, used), P[f"l{l}.{r}.Ws"])
        xt = T.matmul(h_dst_self, P[f"l{l}.{r}.Wt"])
        xs_e = T.row_select(xs, inv)
        pre = T.leaky_relu(xs_e + T.row_select(xt, dst_pos), self.config.negative_slope)
        scores = T.sum_axis(T.reshape(pre * P[f"l{l}.{r}.att"], (-1, heads, H // heads)), axis=2)
        alpha = T.segment_softmax(scores, dst_pos, n_out)                      # (E, heads)
        weighted = T.reshape(xs_e, (-1, heads, H // heads)) * T.reshape(alpha, (-1, heads, 1))
        return T.segment_sum(T.reshape(weighted, (-1, H)), dst_pos, n_out)

    def attention_weights(self, graph, targets, layer: int, relation: str) -> tuple[np.ndarray, np.ndarray]:
        """(alpha per edge x head, dst position) for one relation at one layer, eval mode."""
        mg = message_graph(graph)
        plans = plan_layers(mg, np.unique(targets), self.config.layers)
        h = {t: T.Tensor(mg.features[t][plans[0].in_nodes[t]].astype(self.dtype)) for t in mg.features}
        for l, plan in enumerate(plans, start=1):
            if l == layer:
                s, d = self.rel_types[relation]
                src_pos, dst_pos = plan.rel_edges[relation]
                P = self.params
                heads, H = self.config.heads, self.config.hidden_dim
                h_self = T.row_select(h[d], plan.self_pos[d])
                xs = T.matmul(h[s], P[f"l{l}.{relation}.Ws"])
                xt = T.matmul(h_self, P[f"l{l}.{relation}.Wt"])
                pre = T.leaky_relu(T.row_select(xs, src_pos) + T.row_select(xt, dst_pos),
                                   self.config.negative_slope)
                sc = (pre.data * P[f"l{l}.{relation}.att"].data).reshape(-1, heads, H // heads).sum(axis=2)
                alpha = T.segment_softmax(T.Tensor(sc), dst_pos, plan.out_nodes[d].size)
                return alpha.data, dst_pos
            h = self._layer(l, plan, h, False)
        raise ValueError("layer out of range")

    # -- state ---------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data.copy() for n, p in self.params.items()}
        for k, st in self.bn.items():
            out[f"{k}.running_mean"] = st.running_mean.copy()
            out[f"{k}.running_var"] = st.running_var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for n, p in self.params.items():
            if n in state:
                if state[n].shape != p.data.shape:
                    raise ValueError(f"shape mismatch for {n}")
                p.data = np.array(state[n], dtype=self.dtype)
            elif strict:
                raise KeyError(f"missing parameter {n}")
        for k, st in self.bn.items():
            if f"{k}.running_mean" in state:
                st.running_mean = np.array(state[f"{k}.running_mean"], dtype=np.float64)
                st.running_var = np.array(state[f"{k}.running_var"], dtype=np.float64)

    def describe(self) -> dict:
        return {"arch": self.arch, "config": asdict(self.config), "in_dims": self.in_dims,
                "rel_types": {r: list(v) for r, v in self.rel_types.items()}, "dtype": str(self.dtype)}

    @classmethod
    def from_description(cls, d: dict) -> "HeteroGNN":
        cfg = HeteroSageConfig(**d["config"]) if d["arch"] == SAGE else RelAttnConfig(**d["config"])
        return cls(d["arch"], d["in_dims"], {r: tuple(v) for r, v in d["rel_types"].items()}, cfg,
                   dtype=d.get("dtype", "float64"))


def build_model(g: HeteroGraph, arch: str, config=None, seed: int = 0, dtype: str = "float64") -> HeteroGNN:
    in_dims = {t: g.features[t].shape[1] for t in g.node_types}
    rel_types = {r: (rel.src_type, rel.dst_type) for r, rel in g.relations.items()}
    return HeteroGNN(arch, in_dims, rel_types, config, seed, dtype)


def save_model(model: HeteroGNN, path: str) -> None:
    T.save_checkpoint(path, model.state_dict(), {"model": model.describe()})


def load_model(path: str) -> HeteroGNN:
    state, extra = T.load_checkpoint(path)
    model = HeteroGNN.from_description(extra["model"])
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------- inference

def predict_logits(model: HeteroGNN, g: HeteroGraph, idx: np.ndarray, chunk: int = 2048) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    out = np.empty(idx.size)
    for i in range(0, idx.size, chunk):
        part = idx[i:i + chunk]
        _, logits = model.forward(g, part, training=False)
        out[i:i + part.size] = logits.data.reshape(-1)
    return out


def predict_proba(model: HeteroGNN, g: HeteroGraph, idx: np.ndarray, chunk: int = 2048) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-predict_logits(model, g, idx, chunk)))


def extract_embeddings(model: HeteroGNN, g: HeteroGraph, chunk: int = 2048) -> np.ndarray:
    """Eval-mode final-layer states for every customer, full neighbourhoods, customer order."""
    n = g.n_nodes(CUSTOMER)
    Z = np.empty((n, model.config.hidden_dim))
    for i in range(0, n, chunk):
        idx = np.arange(i, min(n, i + chunk))
        Z[idx] = model.encode(g, idx, training=False).data
    return Z


def evaluate(model: HeteroGNN, g: HeteroGraph, which: str = "test", chunk: int = 2048) -> dict:
    idx = np.flatnonzero(g.mask(which))
    p = predict_proba(model, g, idx, chunk)
    y = g.labels[idx]
    return {"roc_auc": metrics.roc_auc(y, p), "pr_auc": metrics.average_precision(y, p)}


def relation_mask_eval(model: HeteroGNN, g: HeteroGraph, masked_relation: str, which: str = "test") -> dict:
    """Test metrics with ``masked_relation`` (and its reverse) removed at inference only."""
    if masked_relation not in g.relations:
        raise KeyError(f"unknown relation {masked_relation}")
    base = evaluate(model, g, which)
    masked = evaluate(model, g.without([masked_relation]), which)
    return {"relation": masked_relation, "base": base, "masked": masked,
            "delta_roc_auc": masked["roc_auc"] - base["roc_auc"],
            "delta_pr_auc": masked["pr_auc"] - base["pr_auc"]}


# ---------------------------------------------------------------- training

@dataclass
class TrainedModel:
    model: HeteroGNN
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")


def train_gnn(g: HeteroGraph, arch: str, cfg: TrainConfig | None = None, fanout: Fanout | None = None,
              model_config=None, init_state: dict | None = None) -> TrainedModel:
    """Mini-batch training on sampled subgraphs with class-weighted BCE.

    Validation ROC-AUC is computed each epoch with full neighbourhoods; the
    best epoch's parameters are kept and training stops after ``patience``
    epochs without improvement.
    """
    cfg = cfg or TrainConfig()
    fanout = fanout or Fanout()
    train_idx = np.flatnonzero(g.mask("train"))
    val_idx = np.flatnonzero(g.mask("val"))
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("train and validation masks must be non-empty")
    if np.intersect1d(train_idx, val_idx).size:
        raise ValueError("train and validation masks overlap")
    y_train = g.labels[train_idx]
    pos = y_train.sum()
    pos_weight = cfg.pos_weight if cfg.pos_weight is not None else float((y_train.size - pos) / max(pos, 1))
    model = build_model(g, arch, model_config, seed=cfg.seed, dtype=cfg.dtype)
    if init_state is not None:
        model.load_state_dict(init_state, strict=False)
    params = [model.params["head.w"], model.params["head.b"]] if cfg.freeze_encoder else model.parameters()
    opt = T.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainedModel(model)
    best_state, bad = None, 0
    for epoch in range(cfg.epochs):
        losses = []
        for b, seeds in enumerate(epoch_batches(train_idx, cfg.batch_size, cfg.seed, epoch)):
            sub = sample_subgraph(g, seeds, fanout, rng_seed=cfg.seed * 1000003 + epoch, batch_index=b)
            opt.zero_grad()
            with T.Tape() as tape:
                _, logits = model.forward(sub, sub.seed_local, training=True)
                loss = T.weighted_bce_with_logits(logits, sub.labels, pos_weight)
            if not np.isfinite(loss.data):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch} batch {b} ({arch})")
            tape.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        val = evaluate(model, g, "val", cfg.eval_chunk)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_roc_auc": val["roc_auc"]}
        result.history.append(row)
        log.info("%s epoch %d loss %.5f val auc %.4f", arch, epoch, row["train_loss"], row["val_roc_auc"])
        if not (val["roc_auc"] <= result.best_val_auc):   # first epoch or improvement
            result.best_val_auc, result.best_epoch = val["roc_auc"], epoch
            best_state, bad = copy.deepcopy(model.state_dict()), 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    model.load_state_dict(best_state)
    return result


def write_history(path: str, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_roc_auc"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_roc_auc"])])
