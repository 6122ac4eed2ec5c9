"""Borrower-level feature matrix: profiling, engineering, encoding, scaling, PCA."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ingest
from .ingest import CATEGORICAL, NUMERIC, RelationalDataset

LOG_TOKENS = ("AMT", "SUM", "RATIO")


@dataclass
class FeatureMatrix:
    row_ids: np.ndarray
    column_names: list[str]
    values: np.ndarray                      # float64, NaN = missing
    lineage: dict[str, str]
    categorical: set[str] = field(default_factory=set)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape != (len(self.row_ids), len(self.column_names)):
            raise ValueError("values shape does not match row_ids x column_names")
        if len(set(self.column_names)) != len(self.column_names):
            raise ValueError("duplicate column names")
        missing = [c for c in self.column_names if c not in self.lineage]
        if missing:
            raise ValueError(f"lineage missing for {missing}")

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_names.index(name)]

    def rows(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.row_ids[idx], list(self.column_names), self.values[idx],
                             dict(self.lineage), set(self.categorical))

    def select(self, names: list[str]) -> "FeatureMatrix":
        idx = [self.column_names.index(c) for c in names]
        return FeatureMatrix(self.row_ids, list(names), self.values[:, idx],
                             {c: self.lineage[c] for c in names}, self.categorical & set(names))

    def with_column(self, name: str, values: np.ndarray, lineage: str) -> "FeatureMatrix":
        if name in self.column_names:
            raise ValueError(f"column {name} already present")
        return FeatureMatrix(self.row_ids, self.column_names + [name],
                             np.column_stack([self.values, values]),
                             {**self.lineage, name: lineage}, set(self.categorical))


def _as_index(rows, n: int) -> np.ndarray:
    rows = np.asarray(rows)
    if rows.dtype == bool:
        if rows.shape != (n,):
            raise ValueError("boolean row mask has wrong length")
        return np.flatnonzero(rows)
    return rows.astype(np.int64)


# ---------------------------------------------------------------- EDA

def skewness(x: np.ndarray) -> float:
    """Adjusted Fisher-Pearson sample skewness G1 over non-missing values."""
    x = x[~np.isnan(x)]
    n = x.size
    if n < 3:
        return 0.0
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 <= 1e-300 * max(1.0, float(np.max(np.abs(x))) ** 2):
        return 0.0
    g1 = np.mean(d ** 3) / m2 ** 1.5
    return float(math.sqrt(n * (n - 1)) / (n - 2) * g1)


def iqr_outlier_fraction(x: np.ndarray) -> float:
    """Share of non-missing values outside [Q1 - 1.5 IQR, Q3 + 1.5 IQR] (type-7 quantiles)."""
    x = x[~np.isnan(x)]
    if x.size == 0:
        return 0.0
    q1, q3 = np.percentile(x, [25, 75])
    iqr = q3 - q1
    return float(np.mean((x < q1 - 1.5 * iqr) | (x > q3 + 1.5 * iqr)))


def eda_profile(fm: FeatureMatrix, labels: np.ndarray | None = None,
                missing_threshold: float = 0.80, skew_threshold: float = 5.0) -> dict:
    if fm.values.size == 0:
        raise ValueError("empty feature matrix")
    cols = {}
    for j, c in enumerate(fm.column_names):
        x = fm.values[:, j]
        cols[c] = {"missing_rate": float(np.isnan(x).mean()), "skew": skewness(x),
                   "outlier_fraction": iqr_outlier_fraction(x)}
    report = {
        "n_rows": int(fm.values.shape[0]), "n_columns": len(fm.column_names), "columns": cols,
        "high_missing": sorted(c for c, v in cols.items() if v["missing_rate"] > missing_threshold),
        "high_skew": sorted(c for c, v in cols.items() if abs(v["skew"]) > skew_threshold),
    }
    if labels is not None:
        labels = np.asarray(labels)
        report["class_balance"] = {"positive_rate": float(labels.mean()), "n_positive": int(labels.sum()),
                                   "n_negative": int(labels.size - labels.sum())}
    return report


# ---------------------------------------------------------------- engineering

def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.full(num.shape, np.nan)
    ok = ~np.isnan(num) & ~np.isnan(den) & (den != 0)
    out[ok] = num[ok] / den[ok]
    return out


def _group_stats(owner: np.ndarray, x: np.ndarray, n: int):
    """Per-owner mean and sample std (ddof=1) over non-missing values; NaN where undefined."""
    ok = ~np.isnan(x) & (owner >= 0)
    o, v = owner[ok], x[ok]
    cnt = np.bincount(o, minlength=n).astype(np.float64)
    s = np.bincount(o, weights=v, minlength=n)
    mean = np.where(cnt > 0, s / np.maximum(cnt, 1), np.nan)
    dev = v - mean[o]
    ss = np.bincount(o, weights=dev * dev, minlength=n)
    std = np.where(cnt > 1, np.sqrt(ss / np.maximum(cnt - 1, 1)), np.nan)
    return mean, std, cnt


def _owner_index(ids: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Position of each key in sorted-unique ``ids``; -1 where absent."""
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    pos = np.searchsorted(sorted_ids, keys)
    pos = np.clip(pos, 0, max(sorted_ids.size - 1, 0))
    found = sorted_ids.size > 0
    hit = np.zeros(keys.shape, dtype=bool) if not found else sorted_ids[pos] == keys
    return np.where(hit, order[pos] if found else 0, -1)


def engineer_features(ds: RelationalDataset) -> FeatureMatrix:
    """Application columns plus affordability ratios, repayment and utilization aggregates.

    Child rows reach the borrower through ``SK_ID_PREV`` -> previous application ->
    ``SK_ID_CURR``; orphaned rows are excluded from every aggregate.  Zero or
    missing denominators give missing values.
    """
    app = ds.tables[ds.application]
    pk = ds.schemas[ds.application].primary_key
    cust = app.columns[pk]
    n = cust.size
    names, cols, lineage, cats = [], [], {}, set()

    def add(name, values, tag):
        names.append(name)
        cols.append(np.asarray(values, dtype=np.float64))
        lineage[name] = tag

    for c, k in app.kinds.items():
        if c in (pk, ds.label_column) or k == ingest.KEY:
            continue
        if k == NUMERIC:
            add(c, app.columns[c], "raw")
        elif k == CATEGORICAL:
            codes = app.columns[c].astype(np.float64)
            codes[codes < 0] = np.nan
            add(c, codes, "raw")
            cats.add(c)

    def appcol(c):
        return app.columns[c] if c in app.columns else np.full(n, np.nan)

    add("CREDIT_INCOME", _safe_ratio(appcol("AMT_CREDIT"), appcol("AMT_INCOME_TOTAL")), "engineered")
    add("ANNUITY_INCOME", _safe_ratio(appcol("AMT_ANNUITY"), appcol("AMT_INCOME_TOTAL")), "engineered")
    add("LOAN_PER_FAM", _safe_ratio(appcol("AMT_CREDIT"), appcol("CNT_FAM_MEMBERS")), "engineered")

    valid = {name: ds.valid_rows(name) for name in ds.tables}

    # bureau: count only (bureau records enter the graph model as nodes)
    if ingest.BUREAU in ds.tables:
        b = ds.tables[ingest.BUREAU]
        owner = _owner_index(cust, b.columns["SK_ID_CURR"])
        owner[~valid[ingest.BUREAU]] = -1
        add("BUREAU_COUNT", np.bincount(owner[owner >= 0], minlength=n), "engineered")

    prev_owner_by_id = None
    if ingest.PREVIOUS in ds.tables:
        p = ds.tables[ingest.PREVIOUS]
        owner = _owner_index(cust, p.columns["SK_ID_CURR"])
        owner[~valid[ingest.PREVIOUS]] = -1
        prev_owner_by_id = (p.columns["SK_ID_PREV"], owner)
        add("PREV_COUNT", np.bincount(owner[owner >= 0], minlength=n), "engineered")
        for c in p.numeric_columns():
            add(f"PREV_{c}_MEAN", _group_stats(owner, p.columns[c], n)[0], "engineered")

    def child_owner(tname):
        t = ds.tables[tname]
        if prev_owner_by_id is None:
            return np.full(t.n_rows, -1)
        ids, owners = prev_owner_by_id
        pos = _owner_index(ids, t.columns["SK_ID_PREV"])
        own = np.where(pos >= 0, owners[np.maximum(pos, 0)], -1)
        own[~valid[tname]] = -1
        return own

    pay_mean = late_rate = None
    if ingest.INSTALLMENTS in ds.tables:
        t = ds.tables[ingest.INSTALLMENTS]
        own = child_owner(ingest.INSTALLMENTS)
        ratio = _safe_ratio(t.columns["AMT_PAYMENT"], t.columns["AMT_INSTALMENT"])
        entry, due = t.columns["DAYS_ENTRY_PAYMENT"], t.columns["DAYS_INSTALMENT"]
        late = np.where(np.isnan(entry) | np.isnan(due), np.nan, (entry > due).astype(np.float64))
        pay_mean, pay_std, _ = _group_stats(own, ratio, n)
        late_rate = _group_stats(own, late, n)[0]
        add("INST_COUNT", np.bincount(own[own >= 0], minlength=n), "engineered")
        add("INST_PAYMENT_RATIO_MEAN", pay_mean, "engineered")
        add("INST_PAYMENT_RATIO_STD", pay_std, "engineered")
        add("INST_LATE_RATE", late_rate, "engineered")
        add("INST_PAYMENT_BURDEN", pay_mean * late_rate, "engineered")

    if ingest.CREDIT_CARD in ds.tables:
        t = ds.tables[ingest.CREDIT_CARD]
        own = child_owner(ingest.CREDIT_CARD)
        util = _safe_ratio(t.columns["AMT_BALANCE"], t.columns["AMT_CREDIT_LIMIT_ACTUAL"])
        m, s, _ = _group_stats(own, util, n)
        add("CC_COUNT", np.bincount(own[own >= 0], minlength=n), "engineered")
        add("CC_UTILIZATION_MEAN", m, "engineered")
        add("CC_UTILIZATION_STD", s, "engineered")
        for c in t.numeric_columns():
            if c not in ("AMT_BALANCE", "AMT_CREDIT_LIMIT_ACTUAL"):
                add(f"CC_{c}_MEAN", _group_stats(own, t.columns[c], n)[0], "engineered")

    if ingest.POS_CASH in ds.tables:
        t = ds.tables[ingest.POS_CASH]
        own = child_owner(ingest.POS_CASH)
        add("POS_COUNT", np.bincount(own[own >= 0], minlength=n), "engineered")
        for c in t.numeric_columns():
            add(f"POS_{c}_MEAN", _group_stats(own, t.columns[c], n)[0], "engineered")

    values = np.column_stack(cols) if cols else np.zeros((n, 0))
    return FeatureMatrix(cust.copy(), names, values, lineage, cats)


# ---------------------------------------------------------------- target encoding

def target_encode(fm: FeatureMatrix, column: str, labels, train_rows) -> FeatureMatrix:
    """Append ``<column>_TE``: in-sample default rate of each category on train rows only.

    Missing values form their own category; categories unseen in training get
    the global train default rate.  No smoothing.
    """
    if column not in fm.categorical:
        raise ValueError(f"{column} is not a categorical column")
    labels = np.asarray(labels, dtype=np.float64)
    tr = _as_index(train_rows, len(fm.row_ids))
    codes = fm.column(column)
    keys = np.where(np.isnan(codes), -1, codes).astype(np.int64)
    global_rate = float(labels[tr].mean())
    mapping = {}
    for k in np.unique(keys[tr]):
        m = keys[tr] == k
        mapping[int(k)] = float(labels[tr][m].mean())
    enc = np.array([mapping.get(int(k), global_rate) for k in keys])
    return fm.with_column(f"{column}_TE", enc, "target-encoded")


# ---------------------------------------------------------------- preprocessing

@dataclass
class PreprocessConfig:
    missing_threshold: float = 0.80
    log_tokens: tuple = LOG_TOKENS
    center: bool = True              # standard-scaling mean removal
    log_twins: bool = False          # keep standardized raw copy next to the log-robust column
    corr_threshold: float | None = None
    drop_categorical: bool = True


@dataclass
class PCAState:
    mean: np.ndarray
    components: np.ndarray            # k x d, orthonormal rows
    explained_variance: np.ndarray    # all d eigenvalues, descending
    explained_ratio: np.ndarray
    n_components: int


@dataclass
class PreprocessState:
    input_columns: list[str]
    dropped_columns: list[str]
    medians: dict[str, float]
    log_columns: list[str]
    robust: dict[str, tuple[float, float]]       # column -> (median, iqr) on transformed values
    standard: dict[str, tuple[float, float]]     # column -> (mean, std)
    output_columns: list[str]
    output_sources: dict[str, tuple[str, str]]   # output -> (input column, "robust" | "standard")
    config: PreprocessConfig
    target_maps: dict[str, dict[int, float]] = field(default_factory=dict)
    pca: PCAState | None = None


def _is_log_column(name: str, tokens) -> bool:
    return any(t in name for t in tokens)


def signed_log1p(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.log1p(np.abs(x))


def fit_preprocess(fm: FeatureMatrix, train_rows, config: PreprocessConfig | None = None) -> PreprocessState:
    """Fit drop/impute/log/scale statistics on ``train_rows`` only."""
    config = config or PreprocessConfig()
    tr = _as_index(train_rows, len(fm.row_ids))
    if tr.size == 0:
        raise ValueError("train_rows is empty")
    X = fm.values[tr]
    dropped, medians, robust, standard = [], {}, {}, {}
    log_cols, outputs, sources = [], [], {}
    keep = []
    for j, c in enumerate(fm.column_names):
        if config.drop_categorical and c in fm.categorical:
            dropped.append(c)
            continue
        x = X[:, j]
        miss = np.isnan(x)
        if miss.mean() > config.missing_threshold:
            dropped.append(c)
            continue
        med = float(np.median(x[~miss])) if (~miss).any() else 0.0
        medians[c] = med
        xi = np.where(miss, med, x)
        keep.append(c)
        if _is_log_column(c, config.log_tokens):
            log_cols.append(c)
            z = signed_log1p(xi)
            q1, m, q3 = np.percentile(z, [25, 50, 75])
            robust[c] = (float(m), float(q3 - q1))
            name = f"{c}_LOG1P" if config.log_twins else c
            outputs.append(name)
            sources[name] = (c, "robust")
            if config.log_twins:
                standard[c] = (float(xi.mean()), float(xi.std()))
                outputs.append(c)
                sources[c] = (c, "standard")
        else:
            standard[c] = (float(xi.mean()), float(xi.std()))
            outputs.append(c)
            sources[c] = (c, "standard")
    state = PreprocessState(list(fm.column_names), dropped, medians, log_cols, robust, standard,
                            outputs, sources, config)
    if config.corr_threshold is not None:
        Z = apply_preprocess(state, fm.rows(tr)).values
        sd = Z.std(axis=0)
        C = np.corrcoef(Z[:, sd > 0], rowvar=False) if (sd > 0).sum() > 1 else np.eye(int((sd > 0).sum()))
        live = [o for o, s in zip(state.output_columns, sd) if s > 0]
        kept = []
        C = np.atleast_2d(C)
        for i, name in enumerate(live):
            if all(abs(C[i, live.index(k)]) <= config.corr_threshold for k in kept):
                kept.append(name)
        kept_set = set(kept)
        state.output_columns = [o for o in state.output_columns if o in kept_set]
        state.output_sources = {o: state.output_sources[o] for o in state.output_columns}
    return state


def apply_preprocess(state: PreprocessState, fm: FeatureMatrix) -> FeatureMatrix:
    unknown = [c for c in fm.column_names if c not in state.input_columns]
    if unknown:
        raise ValueError(f"unknown columns for this preprocessing state: {unknown}")
    absent = [c for c in state.output_sources.values() if c[0] not in fm.column_names]
    if absent:
        raise ValueError(f"columns required by the state are missing: {sorted({a[0] for a in absent})}")
    out, lineage = [], {}
    for name in state.output_columns:
        src, how = state.output_sources[name]
        x = fm.column(src)
        x = np.where(np.isnan(x), state.medians[src], x)
        if how == "robust":
            med, iqr = state.robust[src]
            z = signed_log1p(x) - med
            out.append(z / iqr if iqr > 0 else z)
        else:
            mu, sd = state.standard[src]
            z = x - mu if (state.config.center or sd <= 0) else x
            out.append(z / sd if sd > 0 else z)
        lineage[name] = "scaled"
    values = np.column_stack(out) if out else np.zeros((len(fm.row_ids), 0))
    result = FeatureMatrix(fm.row_ids, list(state.output_columns), values, lineage)
    if state.pca is not None:
        result = apply_pca(state.pca, result)
    return result


def fit_pca(fm: FeatureMatrix, train_rows, variance_target: float) -> PCAState:
    """Smallest k orthonormal directions whose explained variance share reaches the target."""
    if not 0 < variance_target <= 1:
        raise ValueError("variance_target must lie in (0, 1]")
    tr = _as_index(train_rows, len(fm.row_ids))
    X = fm.values[tr]
    if np.isnan(X).any():
        raise ValueError("PCA needs an imputed matrix")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    var = s ** 2 / max(X.shape[0] - 1, 1)
    full = np.zeros(X.shape[1])
    full[:var.size] = var
    total = full.sum()
    ratio = full / total if total > 0 else np.zeros_like(full)
    cum = np.cumsum(ratio)
    k = int(np.searchsorted(cum, variance_target - 1e-12) + 1)
    k = min(k, vt.shape[0])
    # deterministic sign: largest-magnitude loading positive
    comps = vt[:k].copy()
    flip = np.sign(comps[np.arange(k), np.abs(comps).argmax(axis=1)])
    comps *= np.where(flip == 0, 1, flip)[:, None]
    return PCAState(mean, comps, full, ratio, k)


def apply_pca(pca: PCAState, fm: FeatureMatrix, k: int | None = None) -> FeatureMatrix:
    k = pca.n_components if k is None else k
    Z = (fm.values - pca.mean) @ pca.components[:k].T
    names = [f"PC{i + 1:03d}" for i in range(k)]
    return FeatureMatrix(fm.row_ids, names, Z, {c: "scaled" for c in names})


def pca_reconstruction_error(pca: PCAState, X: np.ndarray, k: int) -> float:
    V = pca.components[:k]
    Xc = X - pca.mean
    return float(np.sum((Xc - Xc @ V.T @ V) ** 2))


# ---------------------------------------------------------------- JSON

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, set):
        return sorted(_jsonable(v) for v in obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return None if math.isnan(f) or math.isinf(f) else f  # repr() round-trips exactly
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def state_to_json(state: PreprocessState) -> str:
    d = asdict(state)
    return json.dumps(_jsonable(d), indent=1, sort_keys=True)


def state_from_json(text: str) -> PreprocessState:
    d = json.loads(text)
    cfg = d.pop("config")
    cfg["log_tokens"] = tuple(cfg["log_tokens"])
    pca = d.pop("pca")
    d["robust"] = {k: tuple(v) for k, v in d["robust"].items()}
    d["standard"] = {k: tuple(v) for k, v in d["standard"].items()}
    d["output_sources"] = {k: tuple(v) for k, v in d["output_sources"].items()}
    d["target_maps"] = {k: {int(a): b for a, b in v.items()} for k, v in d["target_maps"].items()}
    state = PreprocessState(config=PreprocessConfig(**cfg), **d)
    if pca is not None:
        state.pca = PCAState(np.array(pca["mean"]), np.array(pca["components"]).reshape(-1, len(pca["mean"])),
                             np.array(pca["explained_variance"]), np.array(pca["explained_ratio"]),
                             int(pca["n_components"]))
    return state


def report_to_json(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=1, sort_keys=True)


def tabular_matrix(ds: RelationalDataset, labels: np.ndarray, train_rows,
                   config: PreprocessConfig | None = None, te_columns: list[str] | None = None,
                   scale: bool = False):
    """Engineered features + fold-fitted target encodings (+ optional scaling).

    Returns (FeatureMatrix, PreprocessState or None).  Tree models consume the
    unscaled matrix with missing values left in place.
    """
    fm = engineer_features(ds)
    for c in (te_columns if te_columns is not None else sorted(fm.categorical)):
        fm = target_encode(fm, c, labels, train_rows)
    if not scale:
        keep = [c for c in fm.column_names if c not in fm.categorical]
        return fm.select(keep), None
    state = fit_preprocess(fm, train_rows, config)
    return apply_preprocess(state, fm), state
