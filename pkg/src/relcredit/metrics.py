"""Ranking, screening, calibration and subgroup metrics.

Tie conventions are fixed so that exact brute-force oracles agree:
ROC-AUC uses midranks, PR-AUC steps through distinct score values
(ties enter the curve together), and top-k cuts use a stable order.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.stats import rankdata

NA = float("nan")


@dataclass
class ScoreReport:
    row_ids: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    groups: dict[str, np.ndarray] = field(default_factory=dict)
    split: str = "test"

    def __post_init__(self):
        self.row_ids = np.asarray(self.row_ids)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64)
        n = self.scores.shape[0]
        if self.row_ids.shape[0] != n or self.labels.shape[0] != n:
            raise ValueError("row_ids, scores and labels must have equal length")
        for k, v in list(self.groups.items()):
            v = np.asarray(v)
            if v.shape[0] != n:
                raise ValueError(f"group column {k!r} has wrong length")
            self.groups[k] = v
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0/1")

    def subset(self, mask: np.ndarray) -> "ScoreReport":
        return ScoreReport(self.row_ids[mask], self.scores[mask], self.labels[mask],
                           {k: v[mask] for k, v in self.groups.items()}, self.split)


def _check_both_classes(labels: np.ndarray) -> tuple[int, int]:
    n_pos = int((labels == 1).sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ranking metrics need both classes present")
    return n_pos, n_neg


def roc_auc(labels, scores) -> float:
    labels = np.asarray(labels).astype(np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = _check_both_classes(labels)
    ranks = rankdata(scores, method="average")
    # midrank sums are multiples of 0.5; keep the subtraction exact
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(labels: np.ndarray, scores: np.ndarray):
    """Cumulative TP/FP at each distinct score, thresholds descending."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def average_precision(labels, scores) -> float:
    labels = np.asarray(labels).astype(np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos, _ = _check_both_classes(labels)
    _, tp, fp = _threshold_counts(labels, scores)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    dr = np.diff(np.r_[0.0, recall])
    return float((dr * precision).sum())


def ks_statistic(labels, scores) -> float:
    labels = np.asarray(labels).astype(np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = _check_both_classes(labels)
    _, tp, fp = _threshold_counts(labels, scores)
    return float(np.max(np.abs(tp / n_pos - fp / n_neg)))


def rank_metrics(r: ScoreReport) -> dict:
    return {"roc_auc": roc_auc(r.labels, r.scores),
            "pr_auc": average_precision(r.labels, r.scores),
            "ks": ks_statistic(r.labels, r.scores)}


def topk_screen(r: ScoreReport, k_fraction: float) -> dict:
    """Precision and recall among the ceil(k*n) highest scores.

    Ties at the cut are resolved by original row order (earlier rows first).
    """
    if not 0 < k_fraction <= 1:
        raise ValueError("k_fraction must lie in (0, 1]")
    n = r.scores.size
    k = max(1, math.ceil(k_fraction * n - 1e-12))
    k = min(k, n)
    order = np.argsort(-r.scores, kind="stable")[:k]
    hits = int(r.labels[order].sum())
    n_pos = int(r.labels.sum())
    return {"k": k, "precision_at_k": hits / k,
            "recall_at_k": hits / n_pos if n_pos else NA}


def fairness_report(r: ScoreReport, group_column: str) -> dict:
    """Per-group ranking metrics; groups lacking a class are reported as N/A."""
    g = r.groups[group_column]
    rows = {}
    for value in _sorted_groups(g):
        sub = r.subset(g == value)
        n_pos = int(sub.labels.sum())
        entry = {"n": int(sub.labels.size),
                 "prevalence": n_pos / sub.labels.size if sub.labels.size else NA}
        if 0 < n_pos < sub.labels.size:
            m = rank_metrics(sub)
            entry.update(roc_auc=m["roc_auc"], pr_auc=m["pr_auc"])
        else:
            entry.update(roc_auc=NA, pr_auc=NA)
        rows[value] = entry
    aucs = [v["roc_auc"] for v in rows.values() if not math.isnan(v["roc_auc"])]
    gap = max((abs(a - b) for a, b in combinations(aucs, 2)), default=NA)
    return {"column": group_column, "groups": rows, "max_auc_gap": gap}


def threshold_audit(r: ScoreReport, group_column: str, tau: float = 0.5) -> dict:
    if not 0 < tau < 1:
        raise ValueError("threshold must lie in (0, 1)")
    g = r.groups[group_column]
    rows = {}
    for value in _sorted_groups(g):
        m = g == value
        pred = r.scores[m] >= tau
        y = r.labels[m] == 1
        tp = int((pred & y).sum())
        fp = int((pred & ~y).sum())
        fn = int((~pred & y).sum())
        tn = int((~pred & ~y).sum())
        pos, neg = tp + fn, fp + tn
        rows[value] = {
            "n": int(m.sum()), "tp": tp, "fp": fp, "fn": fn, "tn": tn,
            "tpr": tp / pos if pos else NA,
            "fnr": fn / pos if pos else NA,
            "fpr": fp / neg if neg else NA,
            "positive_rate": (tp + fp) / m.sum() if m.sum() else NA,
        }
    return {"column": group_column, "tau": tau, "groups": rows}


def calibration_report(r: ScoreReport, bins: int = 10) -> dict:
    if bins < 2:
        raise ValueError("need at least 2 bins")
    s = r.scores
    idx = np.minimum((s * bins).astype(np.int64), bins - 1)
    idx = np.clip(idx, 0, bins - 1)
    table = []
    for b in range(bins):
        m = idx == b
        n = int(m.sum())
        table.append({"bin": b, "lo": b / bins, "hi": (b + 1) / bins, "n": n,
                      "mean_score": float(s[m].mean()) if n else NA,
                      "event_rate": float(r.labels[m].mean()) if n else NA})
    brier = float(np.mean((s - r.labels) ** 2))
    return {"bins": table, "brier": brier}


def _sorted_groups(g: np.ndarray) -> list:
    vals = list(dict.fromkeys(g.tolist()))
    try:
        return sorted(vals)
    except TypeError:
        return sorted(vals, key=str)


# ---------------------------------------------------------------- score CSV

def read_score_csv(path: str) -> ScoreReport:
    """Reads ``row_id,score,label[,group...]``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["row_id", "score", "label"]:
            raise ValueError("score CSV must start with row_id,score,label")
        rows = list(reader)
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    scores = np.array([float(r[1]) for r in rows])
    labels = np.array([int(r[2]) for r in rows])
    groups = {h: np.array([r[3 + i] for r in rows]) for i, h in enumerate(header[3:])}
    return ScoreReport(ids, scores, labels, groups)


def write_score_csv(path: str, r: ScoreReport) -> None:
    names = sorted(r.groups)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "score", "label"] + names)
        for i in range(r.scores.size):
            w.writerow([int(r.row_ids[i]), repr(float(r.scores[i])), int(r.labels[i])]
                       + [r.groups[k][i] for k in names])


# ---------------------------------------------------------------- report tables

def _fmt(x, digits=4):
    if isinstance(x, str):
        return x
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "N/A"
    return f"{x:.{digits}f}"


def _render(header: list[str], rows: list[list], fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


MODEL_CATEGORY = {
    "logistic": ("Tabular Baseline", "Logistic Regression"),
    "gbdt": ("Tabular Baseline", "GBDT (Strong Tabular)"),
    "pretrain+ft": ("Graph Neural Network", "Contrastive Pretraining + Fine-tuning"),
    "sage": ("Graph Neural Network", "Heterogeneous GraphSAGE"),
    "relattn": ("Graph Neural Network", "Relation-Aware Attentive Heterogeneous GNN"),
    "hybrid": ("Hybrid Ensemble", "GNN-Enhanced GBDT"),
}


def comparison_table(results: dict[str, dict], fmt: str = "markdown") -> str:
    """Main comparison layout: Category, Model, ROC-AUC, PR-AUC, relative gain vs logistic."""
    base = results.get("logistic", {}).get("roc_auc")
    rows = []
    for key in [k for k in MODEL_CATEGORY if k in results] + [k for k in results if k not in MODEL_CATEGORY]:
        cat, name = MODEL_CATEGORY.get(key, ("Other", key))
        m = results[key]
        if key == "logistic" or base is None:
            imp = "--"
        else:
            imp = f"{100 * (m['roc_auc'] - base) / base:+.2f}%"
        rows.append([cat, name, _fmt(m["roc_auc"]), _fmt(m["pr_auc"]), imp])
    return _render(["Category", "Model", "ROC-AUC", "PR-AUC", "ROC-AUC Improvement vs. Logistic"], rows, fmt)


def subgroup_table(reports: dict[str, list[dict]], fmt: str = "markdown") -> str:
    """Subgroup layout: Demographic Group, Model, ROC-AUC, PR-AUC.

    ``reports`` maps model name -> list of fairness_report outputs.
    """
    rows = []
    by_group: dict[tuple, list] = {}
    for model, reps in reports.items():
        for rep in reps:
            for gval, m in rep["groups"].items():
                by_group.setdefault((rep["column"], gval), []).append(
                    [f"{rep['column']}: group {gval}", model, _fmt(m["roc_auc"]), _fmt(m["pr_auc"])])
    for key in by_group:
        rows.extend(by_group[key])
    return _render(["Demographic Group", "Model", "ROC-AUC", "PR-AUC"], rows, fmt)


def threshold_table(audits: dict[str, list[dict]], fmt: str = "markdown") -> str:
    """Threshold layout: Attribute, Model, Group, TPR, FPR, PositiveRate."""
    rows = []
    for model, reps in audits.items():
        for rep in reps:
            for gval, m in rep["groups"].items():
                rows.append([rep["column"], model, gval, _fmt(m["tpr"], 3), _fmt(m["fpr"], 3),
                             _fmt(m["positive_rate"], 3)])
    return _render(["Attribute", "Model", "Group", "TPR", "FPR", "PositiveRate"], rows, fmt)
