"""Relational table loading, validation and the synthetic data generator."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

KEY, NUMERIC, CATEGORICAL = "key", "numeric", "categorical"
MISSING_TOKENS = frozenset({"", "NA", "NaN", "nan"})
UNKNOWN = "<unknown>"  # reserved category code 0

APPLICATION = "application_train"
BUREAU = "bureau"
PREVIOUS = "previous_application"
INSTALLMENTS = "installments_payments"
POS_CASH = "POS_CASH_balance"
CREDIT_CARD = "credit_card_balance"


class DataValidationError(ValueError):
    pass


@dataclass
class TableSchema:
    name: str
    columns: list[tuple[str, str]]
    primary_key: str | None = None
    foreign_keys: list[tuple[str, str]] = field(default_factory=list)
    strict: bool = True  # False: undeclared CSV columns are type-inferred

    def __post_init__(self):
        self.columns = [tuple(c) for c in self.columns]
        self.foreign_keys = [tuple(f) for f in self.foreign_keys]
        names = [c for c, _ in self.columns]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate column names in schema {self.name}")
        for _, kind in self.columns:
            if kind not in (KEY, NUMERIC, CATEGORICAL):
                raise ValueError(f"unknown column kind {kind!r}")
        kinds = dict(self.columns)
        for col in ([self.primary_key] if self.primary_key else []) + [c for c, _ in self.foreign_keys]:
            if kinds.get(col) != KEY:
                raise ValueError(f"{self.name}.{col} must be declared as a key column")

    def kind(self, column: str) -> str:
        return dict(self.columns)[column]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TableSchema":
        return cls(**d)


@dataclass
class Table:
    name: str
    columns: dict[str, np.ndarray]          # key: int64, numeric: float64 (NaN = missing), categorical: int32 codes
    kinds: dict[str, str]
    vocab: dict[str, list[str]] = field(default_factory=dict)  # categorical code -> string; code -1 = missing

    @property
    def n_rows(self) -> int:
        if not self.columns:
            return 0
        return len(next(iter(self.columns.values())))

    def numeric_columns(self) -> list[str]:
        return [c for c, k in self.kinds.items() if k == NUMERIC]

    def categorical_columns(self) -> list[str]:
        return [c for c, k in self.kinds.items() if k == CATEGORICAL]

    def decode(self, column: str) -> np.ndarray:
        codes = self.columns[column]
        vocab = np.array(self.vocab[column] + [""], dtype=object)
        return vocab[np.where(codes < 0, len(vocab) - 1, codes)]


@dataclass
class RelationalDataset:
    tables: dict[str, Table]
    schemas: dict[str, TableSchema]
    label_column: str = "TARGET"
    application: str = APPLICATION

    def table(self, name: str) -> Table:
        return self.tables[name]

    @property
    def labels(self) -> np.ndarray:
        return self.tables[self.application].columns[self.label_column].astype(np.int64)

    @property
    def customer_ids(self) -> np.ndarray:
        return self.tables[self.application].columns[self.schemas[self.application].primary_key]

    def valid_rows(self, name: str) -> np.ndarray:
        """Boolean mask of rows whose foreign keys resolve transitively to valid parents."""
        return _valid_masks(self)[name]

    def orphan_counts(self) -> dict[str, int]:
        masks = _valid_masks(self)
        return {n: int((~m).sum()) for n, m in masks.items() if n != self.application}


def intern(values: np.ndarray) -> tuple[np.ndarray, list[str]]:
    """Categorical codes with a sorted vocabulary; code 0 is reserved for unknown."""
    values = np.asarray(values, dtype=object)
    missing = np.array([v is None or (isinstance(v, float) and np.isnan(v)) or v in MISSING_TOKENS
                        for v in values], dtype=bool)
    present = sorted({str(v) for v in values[~missing]} - {UNKNOWN})
    vocab = [UNKNOWN] + present
    lookup = {v: i for i, v in enumerate(vocab)}
    codes = np.full(values.shape[0], -1, dtype=np.int32)
    codes[~missing] = [lookup[str(v)] for v in values[~missing]]
    return codes, vocab


def encode_with(values, vocab: list[str]) -> np.ndarray:
    """Apply an existing vocabulary; unseen strings map to the reserved unknown code."""
    lookup = {v: i for i, v in enumerate(vocab)}
    out = np.empty(len(values), dtype=np.int32)
    for i, v in enumerate(values):
        if v is None or v in MISSING_TOKENS:
            out[i] = -1
        else:
            out[i] = lookup.get(str(v), 0)
    return out


# ---------------------------------------------------------------- CSV I/O

def _parse_numeric(col: pd.Series, table: str, name: str) -> np.ndarray:
    s = col.where(~col.isin(MISSING_TOKENS), None)
    try:
        return pd.to_numeric(s, errors="raise").to_numpy(dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise DataValidationError(f"{table}.{name}: non-numeric cell ({exc})") from None


def _parse_key(col: pd.Series, table: str, name: str) -> np.ndarray:
    if col.isin(MISSING_TOKENS).any():
        raise DataValidationError(f"{table}.{name}: missing key cell")
    try:
        vals = pd.to_numeric(col, errors="raise").to_numpy()
    except (ValueError, TypeError):
        raise DataValidationError(f"{table}.{name}: non-integer key cell") from None
    if vals.dtype.kind == "f":
        if not np.all(np.isfinite(vals)) or not np.all(vals == np.round(vals)):
            raise DataValidationError(f"{table}.{name}: non-integer key cell")
    return vals.astype(np.int64)


def _infer_kind(col: pd.Series) -> str:
    s = col[~col.isin(MISSING_TOKENS)]
    try:
        pd.to_numeric(s, errors="raise")
        return NUMERIC
    except (ValueError, TypeError):
        return CATEGORICAL


def read_table(path: str, schema: TableSchema) -> Table:
    if not os.path.exists(path):
        raise DataValidationError(f"missing file for table {schema.name}: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    header = list(df.columns)
    declared = [c for c, _ in schema.columns]
    missing = [c for c in declared if c not in header]
    extra = [c for c in header if c not in declared]
    if missing or (schema.strict and extra):
        raise DataValidationError(
            f"header mismatch in {schema.name}: missing={missing} unexpected={extra if schema.strict else []}")
    kinds = dict(schema.columns)
    for c in extra:
        kinds[c] = _infer_kind(df[c])
    columns, vocab = {}, {}
    for c in header:
        k = kinds[c]
        if k == KEY:
            columns[c] = _parse_key(df[c], schema.name, c)
        elif k == NUMERIC:
            columns[c] = _parse_numeric(df[c], schema.name, c)
        else:
            columns[c], vocab[c] = intern(df[c].to_numpy())
    return Table(schema.name, columns, {c: kinds[c] for c in header}, vocab)


def write_table(path: str, table: Table) -> None:
    data = {}
    for c, k in table.kinds.items():
        v = table.columns[c]
        if k == KEY:
            data[c] = v.astype(np.int64)
        elif k == NUMERIC:
            data[c] = [repr(float(x)) if not np.isnan(x) else "" for x in v]
        else:
            data[c] = table.decode(c)
    pd.DataFrame(data, columns=list(table.kinds)).to_csv(path, index=False, lineterminator="\n")


def load_tables(directory: str, schemas: list[TableSchema], label_column: str = "TARGET",
                application: str = APPLICATION, threads: int = 1) -> RelationalDataset:
    """Load one ``<table>.csv`` per schema and enforce key/label constraints."""
    names = {s.name for s in schemas}
    for s in schemas:
        for _, target in s.foreign_keys:
            if target not in names:
                raise DataValidationError(f"{s.name} references undeclared table {target}")
    paths = [os.path.join(directory, f"{s.name}.csv") for s in schemas]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        tables = list(pool.map(read_table, paths, schemas))
    ds = RelationalDataset({t.name: t for t in tables}, {s.name: s for s in schemas},
                           label_column, application)
    _check_application(ds)
    return ds


def write_tables(directory: str, ds: RelationalDataset) -> None:
    os.makedirs(directory, exist_ok=True)
    for name, t in ds.tables.items():
        write_table(os.path.join(directory, f"{name}.csv"), t)


def _check_application(ds: RelationalDataset) -> None:
    app = ds.tables[ds.application]
    schema = ds.schemas[ds.application]
    ids = app.columns[schema.primary_key]
    if np.unique(ids).size != ids.size:
        raise DataValidationError(f"duplicate {schema.primary_key} in {ds.application}")
    if ds.label_column not in app.columns:
        raise DataValidationError(f"label column {ds.label_column} absent")
    y = app.columns[ds.label_column]
    if np.isnan(y).any() or not np.isin(y, (0.0, 1.0)).all():
        raise DataValidationError("label outside {0,1}")


def _valid_masks(ds: RelationalDataset) -> dict[str, np.ndarray]:
    masks: dict[str, np.ndarray] = {}

    def resolve(name: str, stack=()) -> np.ndarray:
        if name in masks:
            return masks[name]
        if name in stack:
            raise DataValidationError(f"cyclic foreign keys through {name}")
        t = ds.tables[name]
        s = ds.schemas[name]
        ok = np.ones(t.n_rows, dtype=bool)
        for col, target in s.foreign_keys:
            parent = ds.tables[target]
            pk = ds.schemas[target].primary_key
            pmask = resolve(target, stack + (name,))
            good_keys = parent.columns[pk][pmask]
            ok &= np.isin(t.columns[col], good_keys)
        masks[name] = ok
        return ok

    for name in ds.tables:
        resolve(name)
    return masks


def validate_schema(ds: RelationalDataset) -> dict:
    """Report row counts, orphans, missing rates, key cardinalities and violations."""
    report = {"tables": {}, "violations": []}
    direct_orphans = {}
    for name, t in ds.tables.items():
        s = ds.schemas[name]
        for col, target in s.foreign_keys:
            pk = ds.schemas[target].primary_key
            n = int((~np.isin(t.columns[col], ds.tables[target].columns[pk])).sum())
            direct_orphans[f"{name}.{col}->{target}"] = n
    transitive = ds.orphan_counts()
    for name, t in ds.tables.items():
        s = ds.schemas[name]
        missing = {c: float(np.isnan(v).mean()) if t.kinds[c] == NUMERIC and v.size else
                   (float((v < 0).mean()) if t.kinds[c] == CATEGORICAL and v.size else 0.0)
                   for c, v in t.columns.items()}
        keys = {c: int(np.unique(v).size) for c, v in t.columns.items() if t.kinds[c] == KEY}
        report["tables"][name] = {"rows": t.n_rows, "columns": len(t.columns), "missing_rate": missing,
                                  "key_cardinality": keys, "orphans": transitive.get(name, 0)}
        if s.primary_key and keys.get(s.primary_key, 0) != t.n_rows:
            report["violations"].append(f"{name}: primary key {s.primary_key} not unique")
    report["foreign_key_orphans"] = direct_orphans
    for k, n in direct_orphans.items():
        if n:
            report["violations"].append(f"orphan rows: {k} = {n}")
    return report


def format_validation(report: dict) -> str:
    lines = []
    for name, t in report["tables"].items():
        lines.append(f"{name}: rows={t['rows']} columns={t['columns']} orphans={t['orphans']}")
        for k, v in t["key_cardinality"].items():
            lines.append(f"  key {k}: {v} distinct")
        high = {c: r for c, r in t["missing_rate"].items() if r > 0}
        for c, r in sorted(high.items()):
            lines.append(f"  missing {c}: {r:.4f}")
    lines.append(f"violations: {len(report['violations'])}")
    lines += [f"  - {v}" for v in report["violations"]]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- schemas

def hcdr_schemas(strict: bool = False) -> list[TableSchema]:
    """The six entity tables.  Non-strict schemas accept the extra real-data columns."""
    return [
        TableSchema(APPLICATION, [("SK_ID_CURR", KEY), ("TARGET", NUMERIC)], "SK_ID_CURR", [], strict),
        TableSchema(BUREAU, [("SK_ID_BUREAU", KEY), ("SK_ID_CURR", KEY)], "SK_ID_BUREAU",
                    [("SK_ID_CURR", APPLICATION)], strict),
        TableSchema(PREVIOUS, [("SK_ID_PREV", KEY), ("SK_ID_CURR", KEY)], "SK_ID_PREV",
                    [("SK_ID_CURR", APPLICATION)], strict),
        TableSchema(INSTALLMENTS, [("SK_ID_PREV", KEY), ("SK_ID_CURR", KEY)], None,
                    [("SK_ID_PREV", PREVIOUS)], strict),
        TableSchema(POS_CASH, [("SK_ID_PREV", KEY), ("SK_ID_CURR", KEY)], None,
                    [("SK_ID_PREV", PREVIOUS)], strict),
        TableSchema(CREDIT_CARD, [("SK_ID_PREV", KEY), ("SK_ID_CURR", KEY)], None,
                    [("SK_ID_PREV", PREVIOUS)], strict),
    ]


_SYNTH_COLUMNS = {
    APPLICATION: [("SK_ID_CURR", KEY), ("TARGET", NUMERIC), ("CODE_GENDER", CATEGORICAL),
                  ("NAME_EDUCATION_TYPE", CATEGORICAL), ("OCCUPATION_TYPE", CATEGORICAL),
                  ("AMT_INCOME_TOTAL", NUMERIC), ("AMT_CREDIT", NUMERIC), ("AMT_ANNUITY", NUMERIC),
                  ("CNT_FAM_MEMBERS", NUMERIC), ("DAYS_BIRTH", NUMERIC), ("DAYS_EMPLOYED", NUMERIC),
                  ("EXT_SOURCE_1", NUMERIC), ("EXT_SOURCE_2", NUMERIC), ("EXT_SOURCE_3", NUMERIC),
                  ("OWN_CAR_AGE", NUMERIC)],
    BUREAU: [("SK_ID_BUREAU", KEY), ("SK_ID_CURR", KEY), ("DAYS_CREDIT", NUMERIC),
             ("AMT_CREDIT_SUM", NUMERIC), ("AMT_CREDIT_SUM_DEBT", NUMERIC),
             ("AMT_CREDIT_SUM_OVERDUE", NUMERIC), ("CREDIT_DAY_OVERDUE", NUMERIC),
             ("CNT_CREDIT_PROLONG", NUMERIC)],
    PREVIOUS: [("SK_ID_PREV", KEY), ("SK_ID_CURR", KEY), ("AMT_APPLICATION", NUMERIC),
               ("AMT_CREDIT", NUMERIC), ("AMT_ANNUITY", NUMERIC), ("CNT_PAYMENT", NUMERIC),
               ("DAYS_DECISION", NUMERIC), ("NAME_CONTRACT_STATUS", CATEGORICAL)],
    INSTALLMENTS: [("SK_ID_PREV", KEY), ("SK_ID_CURR", KEY), ("NUM_INSTALMENT_NUMBER", NUMERIC),
                   ("DAYS_INSTALMENT", NUMERIC), ("DAYS_ENTRY_PAYMENT", NUMERIC),
                   ("AMT_INSTALMENT", NUMERIC), ("AMT_PAYMENT", NUMERIC)],
    POS_CASH: [("SK_ID_PREV", KEY), ("SK_ID_CURR", KEY), ("MONTHS_BALANCE", NUMERIC),
               ("CNT_INSTALMENT", NUMERIC), ("CNT_INSTALMENT_FUTURE", NUMERIC), ("SK_DPD", NUMERIC)],
    CREDIT_CARD: [("SK_ID_PREV", KEY), ("SK_ID_CURR", KEY), ("MONTHS_BALANCE", NUMERIC),
                  ("AMT_BALANCE", NUMERIC), ("AMT_CREDIT_LIMIT_ACTUAL", NUMERIC),
                  ("AMT_DRAWINGS_CURRENT", NUMERIC), ("SK_DPD", NUMERIC)],
}


def synthetic_schemas() -> list[TableSchema]:
    out = []
    for base in hcdr_schemas(strict=True):
        out.append(TableSchema(base.name, _SYNTH_COLUMNS[base.name], base.primary_key,
                               base.foreign_keys, True))
    return out


def save_schemas(path: str, schemas: list[TableSchema]) -> None:
    with open(path, "w") as fh:
        json.dump([s.to_dict() for s in schemas], fh, indent=2)


def load_schemas(path: str) -> list[TableSchema]:
    with open(path) as fh:
        return [TableSchema.from_dict(d) for d in json.load(fh)]


# ---------------------------------------------------------------- synthetic generator

@dataclass
class SynthConfig:
    n_customers: int = 20000
    mean_bureau: float = 4.0          # per customer
    mean_previous: float = 2.0        # per customer
    mean_installments: float = 4.0    # per previous application
    mean_pos_cash: float = 2.0        # per previous application
    mean_credit_card: float = 1.0     # per previous application
    base_rate: float = 0.08
    beta: float = 1.5                 # relational signal strength
    tabular_strength: float = 1.0
    orphan_fraction: float = 0.0      # share of bureau/installment rows with dangling keys

    def validate(self) -> None:
        if self.n_customers < 10:
            raise ValueError("n_customers must be at least 10")
        rates = [self.mean_bureau, self.mean_previous, self.mean_installments, self.mean_pos_cash,
                 self.mean_credit_card, self.beta, self.tabular_strength, self.orphan_fraction]
        if any(r < 0 for r in rates):
            raise ValueError("rates and strengths must be non-negative")
        if not 0 < self.base_rate < 1:
            raise ValueError("base_rate must lie in (0, 1)")


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def _solve_intercept(logit: np.ndarray, rate: float) -> float:
    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.mean(1.0 / (1.0 + np.exp(-(logit + mid)))) > rate:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _numeric_table(name, cols: dict, cats: dict | None = None) -> Table:
    schema_cols = dict(_SYNTH_COLUMNS[name])
    columns, vocab = {}, {}
    for c, k in schema_cols.items():
        if k == CATEGORICAL:
            columns[c], vocab[c] = intern(cats[c])
        elif k == KEY:
            columns[c] = np.asarray(cols[c], dtype=np.int64)
        else:
            columns[c] = np.asarray(cols[c], dtype=np.float64)
    return Table(name, columns, schema_cols, vocab)


def generate_synthetic(config: SynthConfig, seed: int) -> RelationalDataset:
    """Schema-compatible synthetic credit data with a planted relational risk signal.

    Default probability is logistic in a tabular score plus ``beta`` times a
    neighbour-risk score.  The neighbour score is dominated by the worst
    bureau record (an overdue-days x debt-ratio interaction, maxed over
    records) with a smaller contribution from the latent installment
    lateness propensity.  Child-table sizes are independent of everything
    else, so with ``beta=0`` graph structure carries no label information.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n = config.n_customers
    cid = 100002 + np.arange(n, dtype=np.int64)

    # application
    income = np.round(np.exp(rng.normal(11.9, 0.5, n)), 1)
    credit = np.round(income * np.exp(rng.normal(np.log(2.5), 0.55, n)), 1)
    annuity = np.round(credit * rng.uniform(0.03, 0.08, n), 1)
    annuity[rng.random(n) < 0.01] = np.nan
    fam = 1.0 + rng.poisson(1.2, n)
    age_years = rng.uniform(21, 68, n)
    days_birth = -np.round(age_years * 365.25)
    days_employed = -np.round(rng.exponential(2000, n))
    ext1 = rng.beta(4, 3, n)
    ext2 = rng.beta(4, 3, n)
    ext3 = rng.beta(4, 3, n)
    ext1_missing = rng.random(n) < 0.55
    ext3_missing = rng.random(n) < 0.2
    own_car = np.where(rng.random(n) < 0.86, np.nan, np.round(rng.uniform(0, 25, n)))
    gender = np.where(rng.random(n) < 0.65, "F", "M").astype(object)
    edu_levels = np.array(["Academic degree", "Higher education", "Lower secondary",
                           "Secondary / secondary special"], dtype=object)
    edu = edu_levels[rng.choice(4, n, p=[0.02, 0.25, 0.08, 0.65])]
    occ_levels = np.array(["Accountants", "Core staff", "Drivers", "Laborers", "Managers",
                           "Sales staff"], dtype=object)
    occ = occ_levels[rng.integers(0, 6, n)].astype(object)
    occ[rng.random(n) < 0.3] = None

    credit_income = credit / income
    annuity_income = np.nan_to_num(annuity / income, nan=0.05)
    edu_effect = {"Academic degree": -0.8, "Higher education": -0.4, "Lower secondary": 0.5,
                  "Secondary / secondary special": 0.1}
    # mostly threshold, non-monotone and interaction effects, so trees have structure a linear model misses
    tab = (-0.3 * _zscore(ext2) + 1.4 * ((ext2 < 0.3) | (ext2 > 0.85))
           + 1.0 * (~ext3_missing & ((ext3 < 0.3) | (ext3 > 0.9)))
           - 0.5 * np.where(ext1_missing, 0.0, _zscore(ext1)) + 0.45 * ext1_missing
           + 1.1 * (credit_income > 4.5)
           + 0.8 * ((age_years < 30) | (age_years > 62))
           + 1.2 * (annuity_income > 0.15) * (days_employed > -700)
           + np.array([edu_effect[e] for e in edu]))
    tab = config.tabular_strength * tab

    # bureau
    n_bur = rng.poisson(config.mean_bureau, n)
    bur_owner = np.repeat(np.arange(n), n_bur)
    nb = bur_owner.size
    bur_credit = np.round(np.exp(rng.normal(11.5, 1.0, nb)), 1)
    debt_ratio = rng.uniform(0, 1, nb)
    overdue_days = np.where(rng.random(nb) < 0.15, rng.integers(1, 61, nb), 0).astype(np.float64)
    bad_customer = rng.random(n) < 0.18
    # one record per flagged customer becomes a severe delinquency
    first = np.r_[0, np.cumsum(n_bur)[:-1]]
    pick = first + np.floor(rng.random(n) * np.maximum(n_bur, 1)).astype(np.int64)
    severe = pick[bad_customer & (n_bur > 0)]
    overdue_days[severe] = rng.integers(60, 400, severe.size)
    debt_ratio[severe] = rng.uniform(0.55, 1.0, severe.size)
    record_risk = np.log1p(overdue_days) * debt_ratio
    bur_score = np.zeros(n)
    np.maximum.at(bur_score, bur_owner, record_risk)
    bureau_cols = {
        "SK_ID_BUREAU": 5000000 + np.arange(nb),
        "SK_ID_CURR": cid[bur_owner],
        "DAYS_CREDIT": -np.round(rng.uniform(30, 2900, nb)),
        "AMT_CREDIT_SUM": bur_credit,
        "AMT_CREDIT_SUM_DEBT": np.round(bur_credit * debt_ratio, 1),
        "AMT_CREDIT_SUM_OVERDUE": np.round(np.where(overdue_days > 0, bur_credit * debt_ratio
                                                    * rng.uniform(0, 0.2, nb), 0.0), 1),
        "CREDIT_DAY_OVERDUE": overdue_days,
        "CNT_CREDIT_PROLONG": rng.poisson(0.05, nb).astype(np.float64),
    }

    # previous applications
    n_prev = rng.poisson(config.mean_previous, n)
    prev_owner = np.repeat(np.arange(n), n_prev)
    npv = prev_owner.size
    prev_id = 1000000 + np.arange(npv)
    app_amt = np.round(np.exp(rng.normal(11.0, 0.9, npv)), 1)
    prev_cols = {
        "SK_ID_PREV": prev_id, "SK_ID_CURR": cid[prev_owner],
        "AMT_APPLICATION": app_amt,
        "AMT_CREDIT": np.round(app_amt * rng.uniform(0.8, 1.2, npv), 1),
        "AMT_ANNUITY": np.round(app_amt * rng.uniform(0.03, 0.12, npv), 1),
        "CNT_PAYMENT": rng.choice([6.0, 12.0, 18.0, 24.0, 36.0], npv),
        "DAYS_DECISION": -np.round(rng.uniform(1, 2900, npv)),
    }
    status = np.array(["Approved", "Canceled", "Refused"], dtype=object)[rng.choice(3, npv, p=[0.65, 0.15, 0.2])]

    # installments: lateness driven by a latent per-customer propensity
    late_prop = rng.beta(1.0, 10.0, n)
    n_inst = rng.poisson(config.mean_installments, npv)
    inst_prev = np.repeat(np.arange(npv), n_inst)
    ni = inst_prev.size
    inst_owner = prev_owner[inst_prev]
    num = np.arange(ni) - np.repeat(np.cumsum(n_inst) - n_inst, n_inst) + 1
    days_inst = -np.round(rng.uniform(1, 2900, ni))
    late = rng.random(ni) < late_prop[inst_owner]
    days_entry = days_inst + np.where(late, rng.integers(1, 60, ni), -rng.integers(0, 20, ni))
    amt_inst = np.round(np.exp(rng.normal(9.0, 0.8, ni)), 2)
    pay_ratio = np.where(late & (rng.random(ni) < 0.5), rng.uniform(0.2, 1.0, ni), 1.0)
    inst_cols = {
        "SK_ID_PREV": prev_id[inst_prev], "SK_ID_CURR": cid[inst_owner],
        "NUM_INSTALMENT_NUMBER": num.astype(np.float64), "DAYS_INSTALMENT": days_inst,
        "DAYS_ENTRY_PAYMENT": days_entry.astype(np.float64), "AMT_INSTALMENT": amt_inst,
        "AMT_PAYMENT": np.round(amt_inst * pay_ratio, 2),
    }

    # POS cash and credit card snapshots: pure structure
    n_pos = rng.poisson(config.mean_pos_cash, npv)
    pos_prev = np.repeat(np.arange(npv), n_pos)
    npos = pos_prev.size
    cnt = rng.choice([6.0, 12.0, 24.0], npos)
    pos_cols = {
        "SK_ID_PREV": prev_id[pos_prev], "SK_ID_CURR": cid[prev_owner[pos_prev]],
        "MONTHS_BALANCE": -rng.integers(1, 96, npos).astype(np.float64),
        "CNT_INSTALMENT": cnt,
        "CNT_INSTALMENT_FUTURE": np.floor(cnt * rng.random(npos)),
        "SK_DPD": np.where(rng.random(npos) < 0.05, rng.integers(1, 30, npos), 0).astype(np.float64),
    }
    n_cc = rng.poisson(config.mean_credit_card, npv)
    cc_prev = np.repeat(np.arange(npv), n_cc)
    ncc = cc_prev.size
    limit = rng.choice([45000.0, 90000.0, 135000.0, 180000.0, 270000.0], ncc)
    limit[rng.random(ncc) < 0.02] = 0.0
    cc_cols = {
        "SK_ID_PREV": prev_id[cc_prev], "SK_ID_CURR": cid[prev_owner[cc_prev]],
        "MONTHS_BALANCE": -rng.integers(1, 96, ncc).astype(np.float64),
        "AMT_BALANCE": np.round(limit * rng.beta(2, 3, ncc), 2),
        "AMT_CREDIT_LIMIT_ACTUAL": limit,
        "AMT_DRAWINGS_CURRENT": np.round(limit * rng.beta(1, 8, ncc), 2),
        "SK_DPD": np.where(rng.random(ncc) < 0.03, rng.integers(1, 30, ncc), 0).astype(np.float64),
    }

    if config.orphan_fraction > 0:
        for cols, key, pool in ((bureau_cols, "SK_ID_CURR", 90000000), (inst_cols, "SK_ID_PREV", 80000000)):
            m = rng.random(len(cols[key])) < config.orphan_fraction
            cols[key] = np.where(m, pool + np.arange(len(cols[key])), cols[key])

    # labels
    rel = 0.85 * _zscore(bur_score) + 0.45 * _zscore(late_prop)
    logit = tab + config.beta * rel
    logit = logit + _solve_intercept(logit, config.base_rate)
    p = 1.0 / (1.0 + np.exp(-logit))
    target = (rng.random(n) < p).astype(np.float64)

    app_cols = {
        "SK_ID_CURR": cid, "TARGET": target, "AMT_INCOME_TOTAL": income, "AMT_CREDIT": credit,
        "AMT_ANNUITY": annuity, "CNT_FAM_MEMBERS": fam, "DAYS_BIRTH": days_birth,
        "DAYS_EMPLOYED": days_employed,
        "EXT_SOURCE_1": np.where(ext1_missing, np.nan, np.round(ext1, 6)),
        "EXT_SOURCE_2": np.round(ext2, 6),
        "EXT_SOURCE_3": np.where(ext3_missing, np.nan, np.round(ext3, 6)),
        "OWN_CAR_AGE": own_car,
    }
    tables = {
        APPLICATION: _numeric_table(APPLICATION, app_cols, {"CODE_GENDER": gender,
                                                            "NAME_EDUCATION_TYPE": edu,
                                                            "OCCUPATION_TYPE": occ}),
        BUREAU: _numeric_table(BUREAU, bureau_cols),
        PREVIOUS: _numeric_table(PREVIOUS, prev_cols, {"NAME_CONTRACT_STATUS": status}),
        INSTALLMENTS: _numeric_table(INSTALLMENTS, inst_cols),
        POS_CASH: _numeric_table(POS_CASH, pos_cols),
        CREDIT_CARD: _numeric_table(CREDIT_CARD, cc_cols),
    }
    return RelationalDataset(tables, {s.name: s for s in synthetic_schemas()})


AGE_BIN_EDGES = (35.0, 50.0)


def age_groups(days_birth: np.ndarray, edges=AGE_BIN_EDGES) -> np.ndarray:
    """0 = youngest; ages in years from (negative) DAYS_BIRTH."""
    years = -np.asarray(days_birth, dtype=np.float64) / 365.25
    return np.searchsorted(np.asarray(edges), years, side="right").astype(np.int64)
