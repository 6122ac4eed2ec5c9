"""Newton-boosted trees on logistic loss with leaf-wise growth and learned missing directions."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import metrics

log = logging.getLogger(__name__)

EXACT, HISTOGRAM = "exact", "histogram"
_MISSING_SLOT = 256
_HIST_WIDTH = 257


@dataclass
class GbdtParams:
    learning_rate: float = 0.02
    num_leaves: int = 34
    min_data_in_leaf: int = 100
    min_sum_hessian_in_leaf: float = 1e-3
    bagging_fraction: float = 0.85
    feature_fraction: float = 0.85
    lambda_l1: float = 1.0
    lambda_l2: float = 2.0
    max_iterations: int = 10000
    early_stopping_rounds: int = 200
    scale_pos_weight: float | None = None     # None: negatives / positives of the fit rows
    split_mode: str = EXACT
    max_bin: int = 255
    seed: int = 0

    def validate(self) -> None:
        for name in ("bagging_fraction", "feature_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.num_leaves < 2:
            raise ValueError("num_leaves must be >= 2")
        if self.split_mode not in (EXACT, HISTOGRAM):
            raise ValueError(f"unknown split_mode {self.split_mode}")
        if not 1 <= self.max_bin <= 255:
            raise ValueError("max_bin must lie in [1, 255]")


@dataclass
class Tree:
    """Flat node arrays; ``feature[i] < 0`` marks a leaf holding ``value[i]``."""
    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    count: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index reached by every row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            f = self.feature[nd]
            x = X[active, f]
            go_left = np.where(np.isnan(x), self.default_left[nd], x <= self.threshold[nd])
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.feature.size):
            if self.feature[i] < 0:
                nodes.append({"id": i, "leaf": float(self.value[i]), "count": int(self.count[i])})
            else:
                nodes.append({"id": i, "feature": int(self.feature[i]), "threshold": float(self.threshold[i]),
                              "default_left": bool(self.default_left[i]), "left": int(self.left[i]),
                              "right": int(self.right[i]), "gain": float(self.gain[i]),
                              "count": int(self.count[i])})
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        n = len(d["nodes"])
        t = cls(np.full(n, -1, np.int64), np.zeros(n), np.zeros(n, bool), np.full(n, -1, np.int64),
                np.full(n, -1, np.int64), np.zeros(n), np.zeros(n), np.zeros(n, np.int64))
        for nd in d["nodes"]:
            i = nd["id"]
            t.count[i] = nd.get("count", 0)
            if "leaf" in nd:
                t.value[i] = nd["leaf"]
            else:
                t.feature[i], t.threshold[i] = nd["feature"], nd["threshold"]
                t.default_left[i], t.left[i], t.right[i] = nd["default_left"], nd["left"], nd["right"]
                t.gain[i] = nd.get("gain", 0.0)
        return t


@dataclass
class GbdtModel:
    feature_names: list[str]
    base_score: float
    learning_rate: float
    trees: list[Tree] = field(default_factory=list)
    best_iteration: int = 0
    params: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)

    def raw_score(self, X: np.ndarray, n_trees: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise ValueError(f"expected {len(self.feature_names)} columns, got {X.shape}")
        n = self.best_iteration if n_trees is None else n_trees
        out = np.full(X.shape[0], self.base_score)
        for t in self.trees[:n]:
            out += self.learning_rate * t.predict(X)
        return out

    def to_json(self) -> str:
        return json.dumps({"feature_names": self.feature_names, "base_score": self.base_score,
                           "learning_rate": self.learning_rate, "best_iteration": self.best_iteration,
                           "params": self.params, "trees": [t.to_dict() for t in self.trees]},
                          indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GbdtModel":
        d = json.loads(text)
        return cls(d["feature_names"], d["base_score"], d["learning_rate"],
                   [Tree.from_dict(t) for t in d["trees"]], d["best_iteration"], d.get("params", {}))


def predict_gbdt(model: GbdtModel, X, column_names: list[str] | None = None) -> np.ndarray:
    if column_names is not None and list(column_names) != list(model.feature_names):
        raise ValueError("column mismatch between model and input")
    return 1.0 / (1.0 + np.exp(-model.raw_score(X)))


# ---------------------------------------------------------------- split search

def _threshold_l1(G, l1):
    return np.sign(G) * np.maximum(np.abs(G) - l1, 0.0)


def _leaf_score(G, H, l1, l2):
    t = np.maximum(np.abs(G) - l1, 0.0)
    return t * t / (H + l2)


def leaf_value(G: float, H: float, l1: float, l2: float) -> float:
    return float(-_threshold_l1(G, l1) / (H + l2))


@dataclass
class Split:
    gain: float
    feature: int
    threshold: float
    default_left: bool


def _best_from_candidates(GL, HL, CL, valid, thresholds, Gt, Ht, Ct, Gm, Hm, Cm, features, p: GbdtParams):
    """Pick the best (feature, threshold, missing side) from cumulative non-missing stats.

    Arrays are (k features, c candidates) ordered by ascending threshold;
    ``Gm/Hm/Cm`` hold each feature's missing-row totals.  Ties go to the lowest
    feature, then the lowest threshold, then missing-left.
    """
    l1, l2 = p.lambda_l1, p.lambda_l2
    parent = _leaf_score(Gt, Ht, l1, l2)
    # subtracted histograms leave rounding residue in empty missing slots; zero it so both
    # sides tie exactly and the missing-left preference decides
    Gm = np.where(Cm > 0, Gm, 0.0)
    Hm = np.where(Cm > 0, Hm, 0.0)
    best = None
    # direction 0: missing left, direction 1: missing right
    gains = np.full(GL.shape + (2,), -np.inf)
    for d, on_left in enumerate((True, False)):
        gl = GL + (Gm[:, None] if on_left else 0.0)
        hl = HL + (Hm[:, None] if on_left else 0.0)
        cl = CL + (Cm[:, None] if on_left else 0)
        gr, hr, cr = Gt - gl, Ht - hl, Ct - cl
        ok = (valid & (cl >= p.min_data_in_leaf) & (cr >= p.min_data_in_leaf)
              & (hl >= p.min_sum_hessian_in_leaf) & (hr >= p.min_sum_hessian_in_leaf))
        with np.errstate(divide="ignore", invalid="ignore"):   # invalid slots can hold negative sums
            g = _leaf_score(gl, hl, l1, l2) + _leaf_score(gr, hr, l1, l2) - parent
        gains[..., d] = np.where(ok, g, -np.inf)
    flat = int(np.argmax(gains))
    fi, ci, d = np.unravel_index(flat, gains.shape)
    g = gains[fi, ci, d]
    if np.isfinite(g) and g > 0:
        best = Split(float(g), int(features[fi]), float(thresholds[fi, ci]), d == 0)
    return best


def _exact_split(X, rows, grad, hess, features, p: GbdtParams):
    Xs = X[np.ix_(rows, features)]
    order = np.argsort(Xs, axis=0, kind="stable")                 # NaN sorts last
    V = np.take_along_axis(Xs, order, axis=0)
    g = grad[rows][order]
    h = hess[rows][order]
    GL = np.cumsum(g, axis=0).T                                   # (k, m)
    HL = np.cumsum(h, axis=0).T
    m = rows.size
    CL = np.broadcast_to(np.arange(1, m + 1), GL.shape)
    miss = np.isnan(Xs)
    nm = (~miss).sum(axis=0)                                       # non-missing per feature
    Vt = V.T
    pos = np.arange(m)[None, :]
    nxt = np.concatenate([Vt[:, 1:], np.full((Vt.shape[0], 1), np.inf)], axis=1)
    valid = (pos < nm[:, None]) & ((pos == nm[:, None] - 1) | (Vt < nxt))
    Gt, Ht, Ct = grad[rows].sum(), hess[rows].sum(), m
    # missing totals summed directly so a feature without missing rows gets exact zeros
    Gm = grad[rows] @ miss
    Hm = hess[rows] @ miss
    return _best_from_candidates(GL, HL, CL, valid, Vt, Gt, Ht, Ct, Gm, Hm, m - nm,
                                 np.asarray(features), p)


class _Binner:
    """Per-feature bin edges taken from observed values (at most ``max_bin`` per feature)."""

    def __init__(self, X: np.ndarray, max_bin: int):
        self.edges = []
        for j in range(X.shape[1]):
            v = X[:, j]
            v = np.sort(v[~np.isnan(v)])
            u = np.unique(v)
            if u.size > max_bin:
                q = np.quantile(v, np.linspace(0, 1, max_bin + 1)[1:], method="inverted_cdf")
                u = np.unique(q)
            self.edges.append(u)
        self.width = max([e.size + 1 for e in self.edges] + [1])      # used bin slots incl. "above max"
        self.thresholds = np.full((X.shape[1], _HIST_WIDTH - 1), np.inf)
        for j, e in enumerate(self.edges):
            self.thresholds[j, :e.size] = e

    def transform(self, X: np.ndarray) -> np.ndarray:
        B = np.empty(X.shape, dtype=np.int16)
        for j, e in enumerate(self.edges):
            x = X[:, j]
            b = np.searchsorted(e, x, side="left")
            b[np.isnan(x)] = _MISSING_SLOT
            B[:, j] = b
        return B


def _histogram(B, rows, grad, hess, features):
    k = len(features)
    sub = B[np.ix_(rows, features)].astype(np.int64) + (np.arange(k) * _HIST_WIDTH)[None, :]
    flat = sub.ravel()
    size = k * _HIST_WIDTH
    gw = np.repeat(grad[rows], k)
    hw = np.repeat(hess[rows], k)
    Gh = np.bincount(flat, weights=gw, minlength=size).reshape(k, _HIST_WIDTH)
    Hh = np.bincount(flat, weights=hw, minlength=size).reshape(k, _HIST_WIDTH)
    Ch = np.bincount(flat, minlength=size).reshape(k, _HIST_WIDTH)
    return Gh, Hh, Ch


def _hist_split(hist, thresholds, width, features, Gt, Ht, Ct, p: GbdtParams):
    Gh, Hh, Ch = hist
    GL = np.cumsum(Gh[:, :width], axis=1)
    HL = np.cumsum(Hh[:, :width], axis=1)
    CL = np.cumsum(Ch[:, :width], axis=1)
    valid = Ch[:, :width] > 0
    return _best_from_candidates(GL, HL, CL, valid, thresholds[features, :width], Gt, Ht, Ct,
                                 Gh[:, -1], Hh[:, -1], Ch[:, -1], np.asarray(features), p)


# ---------------------------------------------------------------- tree growth

def grow_tree(X, grad, hess, rows, features, p: GbdtParams, B=None, thresholds=None, width=None) -> Tree:
    """Leaf-wise growth: repeatedly split the leaf with the largest positive gain."""
    feat, thr, dleft, left, right, val, gain, cnt = [], [], [], [], [], [], [], []

    def new_node(r):
        for lst, v in ((feat, -1), (thr, 0.0), (dleft, False), (left, -1), (right, -1), (gain, 0.0)):
            lst.append(v)
        val.append(leaf_value(grad[r].sum(), hess[r].sum(), p.lambda_l1, p.lambda_l2))
        cnt.append(r.size)
        return len(feat) - 1

    def find(r, hist):
        if B is None:
            return _exact_split(X, r, grad, hess, features, p)
        return _hist_split(hist, thresholds, width or _HIST_WIDTH - 1, features, grad[r].sum(), hess[r].sum(), r.size, p)

    root = new_node(rows)
    hist = _histogram(B, rows, grad, hess, features) if B is not None else None
    leaves = {root: (rows, hist, find(rows, hist))}
    while len(leaves) < p.num_leaves:
        cand = [(s.gain, -nid, nid) for nid, (_, _, s) in leaves.items() if s is not None]
        if not cand:
            break
        _, _, nid = max(cand)
        r, hist, s = leaves.pop(nid)
        x = X[r, s.feature]
        go_left = np.where(np.isnan(x), s.default_left, x <= s.threshold)
        rl, rr = r[go_left], r[~go_left]
        feat[nid], thr[nid], dleft[nid], gain[nid] = s.feature, s.threshold, s.default_left, s.gain
        li, ri = new_node(rl), new_node(rr)
        left[nid], right[nid] = li, ri
        hl = hr = None
        if B is not None:
            # build the smaller child, derive the larger by subtraction
            if rl.size <= rr.size:
                hl = _histogram(B, rl, grad, hess, features)
                hr = tuple(a - b for a, b in zip(hist, hl))
            else:
                hr = _histogram(B, rr, grad, hess, features)
                hl = tuple(a - b for a, b in zip(hist, hr))
        leaves[li] = (rl, hl, find(rl, hl))
        leaves[ri] = (rr, hr, find(rr, hr))
    return Tree(np.array(feat, np.int64), np.array(thr, np.float64), np.array(dleft, bool),
                np.array(left, np.int64), np.array(right, np.int64), np.array(val, np.float64),
                np.array(gain, np.float64), np.array(cnt, np.int64))


# ---------------------------------------------------------------- boosting

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def weighted_logloss(y, raw, w) -> float:
    return float(np.sum(w * (np.logaddexp(0.0, raw) - y * raw)) / np.sum(w))


def fit_gbdt(X, y, params: GbdtParams | None = None, X_val=None, y_val=None,
             feature_names: list[str] | None = None) -> GbdtModel:
    """Boost on (X, y); with a validation set, early-stop on its ROC-AUC."""
    p = params or GbdtParams()
    p.validate()
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, F = X.shape
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary 0/1")
    if F == 0 or np.all(np.isnan(X)):
        raise ValueError("degenerate feature set: every feature is entirely missing")
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(F)]
    pos = y.sum()
    spw = p.scale_pos_weight if p.scale_pos_weight is not None else float((n - pos) / max(pos, 1.0))
    w = np.where(y == 1, spw, 1.0)
    rate = np.sum(w * y) / np.sum(w)
    rate = min(max(rate, 1e-12), 1 - 1e-12)
    base = float(np.log(rate / (1 - rate)))
    params_dict = asdict(p)
    params_dict["scale_pos_weight"] = spw
    model = GbdtModel(names, base, p.learning_rate, params=params_dict)

    B = thresholds = width = None
    if p.split_mode == HISTOGRAM:
        binner = _Binner(X, p.max_bin)
        B, thresholds, width = binner.transform(X), binner.thresholds, binner.width
    # a column with at most one distinct value can never split; keeping it out of the feature
    # draw means constant padding columns leave the fitted model unchanged
    usable = [j for j in range(F) if np.unique(X[~np.isnan(X[:, j]), j]).size > 1]
    if not usable:
        raise ValueError("degenerate feature set: no column has two distinct values")
    raw = np.full(n, base)
    has_val = X_val is not None
    if has_val:
        X_val = np.asarray(X_val, dtype=np.float64)
        y_val = np.asarray(y_val)
        raw_val = np.full(X_val.shape[0], base)
    losses, val_auc = [weighted_logloss(y, raw, w)], []
    best_auc, best_it = -np.inf, 0
    n_bag = max(1, int(round(p.bagging_fraction * n)))
    n_feat = max(1, int(round(p.feature_fraction * len(usable))))
    for it in range(p.max_iterations):
        rng = np.random.default_rng([p.seed, it])
        rows = np.sort(rng.choice(n, n_bag, replace=False)) if n_bag < n else np.arange(n)
        feats = sorted(rng.choice(usable, n_feat, replace=False).tolist()) if n_feat < len(usable) else usable
        prob = _sigmoid(raw)
        grad = w * (prob - y)
        hess = w * prob * (1 - prob)
        tree = grow_tree(X, grad, hess, rows, feats, p, B, thresholds, width)
        model.trees.append(tree)
        raw += p.learning_rate * tree.predict(X)
        losses.append(weighted_logloss(y, raw, w))
        if has_val:
            raw_val += p.learning_rate * tree.predict(X_val)
            auc = metrics.roc_auc(y_val, raw_val)
            val_auc.append(auc)
            if auc > best_auc:
                best_auc, best_it = auc, it + 1
            elif it + 1 - best_it >= p.early_stopping_rounds:
                log.info("early stop at iteration %d (best %d, val auc %.5f)", it + 1, best_it, best_auc)
                break
        if tree.n_leaves == 1 and tree.value[0] == 0.0:
            break                                 # nothing left to fit
    model.best_iteration = best_it if has_val else len(model.trees)
    model.history = {"train_loss": losses, "val_roc_auc": val_auc, "best_val_roc_auc": best_auc}
    return model
