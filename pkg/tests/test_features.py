import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relcredit import features as F
from relcredit import ingest
from relcredit.ingest import CATEGORICAL, KEY, NUMERIC


def _table(name, cols, kinds, vocab=None):
    return ingest.Table(name, {c: np.asarray(v) for c, v in cols.items()}, kinds, vocab or {})


def tiny_dataset(installments=True):
    """Two customers; customer 1 has one previous application with two installments."""
    tabs = {
        ingest.APPLICATION: _table(ingest.APPLICATION,
                                   {"SK_ID_CURR": np.array([1, 2]), "TARGET": np.array([0.0, 1.0]),
                                    "AMT_CREDIT": np.array([100000.0, 0.0]),
                                    "AMT_INCOME_TOTAL": np.array([50000.0, 0.0]),
                                    "AMT_ANNUITY": np.array([5000.0, np.nan]),
                                    "CNT_FAM_MEMBERS": np.array([2.0, 1.0])},
                                   {"SK_ID_CURR": KEY, "TARGET": NUMERIC, "AMT_CREDIT": NUMERIC,
                                    "AMT_INCOME_TOTAL": NUMERIC, "AMT_ANNUITY": NUMERIC,
                                    "CNT_FAM_MEMBERS": NUMERIC}),
        ingest.PREVIOUS: _table(ingest.PREVIOUS, {"SK_ID_PREV": np.array([10]), "SK_ID_CURR": np.array([1])},
                                {"SK_ID_PREV": KEY, "SK_ID_CURR": KEY}),
    }
    schemas = {s.name: s for s in ingest.hcdr_schemas() if s.name in (ingest.APPLICATION, ingest.PREVIOUS)}
    if installments:
        tabs[ingest.INSTALLMENTS] = _table(
            ingest.INSTALLMENTS,
            {"SK_ID_PREV": np.array([10, 10]), "SK_ID_CURR": np.array([1, 1]),
             "AMT_INSTALMENT": np.array([100.0, 200.0]), "AMT_PAYMENT": np.array([100.0, 100.0]),
             "DAYS_INSTALMENT": np.array([-30.0, -10.0]), "DAYS_ENTRY_PAYMENT": np.array([-31.0, -5.0])},
            {"SK_ID_PREV": KEY, "SK_ID_CURR": KEY, "AMT_INSTALMENT": NUMERIC, "AMT_PAYMENT": NUMERIC,
             "DAYS_INSTALMENT": NUMERIC, "DAYS_ENTRY_PAYMENT": NUMERIC})
        schemas[ingest.INSTALLMENTS] = next(s for s in ingest.hcdr_schemas() if s.name == ingest.INSTALLMENTS)
    return ingest.RelationalDataset(tabs, schemas)


def _fm(values, names=None, categorical=()):
    values = np.asarray(values, dtype=float)
    names = names or [f"c{j}" for j in range(values.shape[1])]
    return F.FeatureMatrix(np.arange(values.shape[0]), names, values, {c: "raw" for c in names}, set(categorical))


# ---------------------------------------------------------------- EDA

def test_constant_column_profile():
    rep = F.eda_profile(_fm([[3.0]] * 10), labels=np.r_[np.zeros(9), 1])
    col = rep["columns"]["c0"]
    assert col["skew"] == 0 and col["outlier_fraction"] == 0
    assert rep["class_balance"]["positive_rate"] == 0.1


def test_outlier_fraction_hand_quartiles():
    # type-7 quartiles of {0,0,0,100}: Q1 = 0, Q3 = 25 -> fence 62.5
    assert F.iqr_outlier_fraction(np.array([0.0, 0.0, 0.0, 100.0])) == 0.25


def test_skewness_matches_scipy_adjusted():
    from scipy.stats import skew
    x = np.random.default_rng(0).lognormal(size=200)
    assert F.skewness(x) == pytest.approx(skew(x, bias=False), rel=1e-12)


def test_eda_flags_missing_and_skew():
    rng = np.random.default_rng(1)
    a = rng.normal(size=100)
    b = np.where(rng.random(100) < 0.9, np.nan, 1.0)
    c = np.r_[np.zeros(99), 1000.0]
    rep = F.eda_profile(_fm(np.column_stack([a, b, c]), ["a", "b", "c"]))
    assert rep["high_missing"] == ["b"] and rep["high_skew"] == ["c"]


def test_empty_matrix_rejected():
    with pytest.raises(ValueError):
        F.eda_profile(_fm(np.zeros((0, 0))))


# ---------------------------------------------------------------- engineering

def test_affordability_ratios():
    fm = F.engineer_features(tiny_dataset())
    assert fm.column("CREDIT_INCOME")[0] == 2.0
    assert fm.column("ANNUITY_INCOME")[0] == 0.1
    assert fm.column("LOAN_PER_FAM")[0] == 50000.0
    # zero and missing denominators give missing, never inf
    assert np.isnan(fm.column("CREDIT_INCOME")[1]) and np.isnan(fm.column("ANNUITY_INCOME")[1])
    assert not np.isinf(fm.values).any()


def test_repayment_aggregates_hand_computed():
    fm = F.engineer_features(tiny_dataset())
    assert fm.column("INST_PAYMENT_RATIO_MEAN")[0] == 0.75
    assert fm.column("INST_LATE_RATE")[0] == 0.5
    assert fm.column("INST_PAYMENT_BURDEN")[0] == 0.375


def test_customer_without_installments_gets_missing_aggregates():
    fm = F.engineer_features(tiny_dataset())
    for c in ("INST_PAYMENT_RATIO_MEAN", "INST_PAYMENT_RATIO_STD", "INST_LATE_RATE", "INST_PAYMENT_BURDEN"):
        assert np.isnan(fm.column(c)[1])
    assert fm.column("INST_COUNT")[1] == 0


def test_identifiers_excluded():
    fm = F.engineer_features(tiny_dataset())
    assert not any(c.startswith("SK_ID") or c == "TARGET" for c in fm.column_names)


def test_orphan_rows_excluded_from_aggregates():
    ds = tiny_dataset()
    inst = ds.tables[ingest.INSTALLMENTS]
    for c in inst.columns:
        inst.columns[c] = np.r_[inst.columns[c], inst.columns[c][:1]]
    inst.columns["SK_ID_PREV"][-1] = 999
    assert F.engineer_features(ds).column("INST_COUNT")[0] == 2


@settings(max_examples=30, deadline=None)
@given(st.floats(1.0, 1e7), st.floats(1.0, 1e7), st.floats(0.5, 10.0))
def test_ratios_scale_equivariant(credit, income, k):
    ds = tiny_dataset(installments=False)
    app = ds.tables[ingest.APPLICATION]
    app.columns["AMT_CREDIT"] = np.array([credit, credit])
    app.columns["AMT_INCOME_TOTAL"] = np.array([income, income])
    a = F.engineer_features(ds).column("CREDIT_INCOME")[0]
    app.columns["AMT_CREDIT"] = app.columns["AMT_CREDIT"] * k
    app.columns["AMT_INCOME_TOTAL"] = app.columns["AMT_INCOME_TOTAL"] * k
    assert F.engineer_features(ds).column("CREDIT_INCOME")[0] == pytest.approx(a, rel=1e-12)


# ---------------------------------------------------------------- target encoding

def _cat_fm(codes):
    return _fm(np.asarray(codes, dtype=float)[:, None], ["CAT"], categorical=["CAT"])


def test_target_encoding_hand_counts():
    # category 1: 1 of 10 rows default; category 2: 3 of 10
    codes = [1] * 10 + [2] * 10
    labels = [1] + [0] * 9 + [1, 1, 1] + [0] * 7
    out = F.target_encode(_cat_fm(codes), "CAT", labels, np.arange(20))
    te = out.column("CAT_TE")
    assert te[0] == 0.10 and te[10] == 0.30
    assert out.lineage["CAT_TE"] == "target-encoded"


def test_target_encoding_unseen_gets_global_rate():
    codes = [1, 1, 1, 1, 2]
    labels = [1, 0, 0, 0, 1]
    out = F.target_encode(_cat_fm(codes), "CAT", labels, np.arange(4))
    assert out.column("CAT_TE")[4] == 0.25


def test_target_encoding_single_category_overall_rate():
    out = F.target_encode(_cat_fm([3] * 8), "CAT", [1, 0, 0, 1, 0, 0, 0, 0], np.arange(8))
    assert np.all(out.column("CAT_TE") == 0.25)


def test_target_encoding_rejects_numeric_column():
    with pytest.raises(ValueError):
        F.target_encode(_fm([[1.0], [2.0]]), "c0", [0, 1], [0, 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_target_encoding_ignores_validation_labels(seed):
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, 5, 60)
    labels = rng.integers(0, 2, 60)
    train = np.arange(40)
    a = F.target_encode(_cat_fm(codes), "CAT", labels, train).column("CAT_TE")
    shuffled = labels.copy()
    shuffled[40:] = rng.permutation(shuffled[40:])
    shuffled[40:] = 1 - shuffled[40:]
    b = F.target_encode(_cat_fm(codes), "CAT", shuffled, train).column("CAT_TE")
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- preprocessing

def test_high_missing_column_dropped_everywhere():
    x = np.column_stack([np.r_[np.nan * np.ones(9), 1.0], np.arange(10.0)])
    fm = _fm(x, ["AMT_A", "B"])
    state = F.fit_preprocess(fm, np.arange(10))
    assert state.dropped_columns == ["AMT_A"]
    assert F.apply_preprocess(state, fm).column_names == ["B"]


def test_log1p_analytic():
    fm = _fm([[0.0], [math.e - 1]], ["AMT_X"])
    state = F.fit_preprocess(fm, [0, 1])
    med, iqr = state.robust["AMT_X"]
    z = F.apply_preprocess(state, fm).column("AMT_X") * iqr + med
    assert np.allclose(z, [0.0, 1.0], atol=1e-15)


def test_median_imputation_from_train():
    fm = _fm([[1.0], [3.0], [100.0], [np.nan]], ["B"])
    state = F.fit_preprocess(fm, [0, 1])
    assert state.medians["B"] == 2.0


def test_zero_spread_passes_through_after_centering():
    fm = _fm([[5.0, 7.0], [5.0, 7.0], [5.0, 9.0]], ["AMT_K", "B"])
    state = F.fit_preprocess(fm, [0, 1])
    out = F.apply_preprocess(state, fm)
    assert np.allclose(out.column("AMT_K"), 0)
    assert out.column("B").tolist() == [0.0, 0.0, 2.0]


def test_apply_rejects_unknown_columns():
    state = F.fit_preprocess(_fm([[1.0], [2.0]], ["A"]), [0, 1])
    with pytest.raises(ValueError):
        F.apply_preprocess(state, _fm([[1.0, 2.0], [2.0, 3.0]], ["A", "Z"]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_robust_columns_have_zero_train_median(seed):
    rng = np.random.default_rng(seed)
    n = 51
    x = np.column_stack([rng.lognormal(3, 2, n), rng.normal(size=n), rng.exponential(size=n)])
    x[rng.random(x.shape) < 0.2] = np.nan
    fm = _fm(x, ["AMT_A", "B", "C_SUM"])
    tr = np.arange(0, n, 2)
    state = F.fit_preprocess(fm, tr)
    out = F.apply_preprocess(state, fm.rows(tr))
    for c in ("AMT_A", "C_SUM"):
        assert abs(np.median(out.column(c))) <= 1e-9
    assert abs(out.column("B").mean()) <= 1e-9


def test_correlation_pruning_drops_duplicate():
    rng = np.random.default_rng(0)
    a = rng.normal(size=100)
    fm = _fm(np.column_stack([a, 2 * a + 1, rng.normal(size=100)]), ["A", "A2", "B"])
    state = F.fit_preprocess(fm, np.arange(100), F.PreprocessConfig(corr_threshold=0.98))
    assert state.output_columns == ["A", "B"]


def test_state_json_roundtrip():
    rng = np.random.default_rng(2)
    fm = _fm(rng.lognormal(size=(30, 3)), ["AMT_A", "B", "C"])
    state = F.fit_preprocess(fm, np.arange(20), F.PreprocessConfig(log_twins=True))
    state.pca = F.fit_pca(F.apply_preprocess(state, fm), np.arange(20), 0.9)
    back = F.state_from_json(F.state_to_json(state))
    assert np.array_equal(F.apply_preprocess(back, fm).values, F.apply_preprocess(state, fm).values)


def test_json_floats_round_trip_exactly():
    vals = [0.1, 1 / 3, 2.0 ** -40, 123456789.123456789]
    assert json.loads(F.report_to_json({"v": vals}))["v"] == vals


# ---------------------------------------------------------------- PCA

def test_pca_spectrum_matches_covariance_eigendecomposition():
    rng = np.random.default_rng(0)
    for _ in range(20):
        X = rng.normal(size=(50, 10)) @ rng.normal(size=(10, 10))
        pca = F.fit_pca(_fm(X), np.arange(50), 0.95)
        eig = np.sort(np.linalg.eigvalsh(np.cov(X, rowvar=False)))[::-1]
        assert np.max(np.abs(pca.explained_variance - eig)) <= 1e-8 * max(1.0, eig[0])


def test_rank_two_matrix_needs_two_components():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 2)) @ rng.normal(size=(2, 8))
    assert F.fit_pca(_fm(X), np.arange(60), 0.95).n_components == 2


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_rank_k_yields_exactly_k(k, seed):
    rng = np.random.default_rng(seed)
    # equal-energy orthogonal directions keep every one of the k needed for 95%
    Q, _ = np.linalg.qr(rng.normal(size=(12, k)))
    coeff, _ = np.linalg.qr(rng.normal(size=(80, k)))
    X = (coeff - coeff.mean(axis=0)) @ Q.T * 10
    assert F.fit_pca(_fm(X), np.arange(80), 0.95).n_components == k


def test_pca_components_orthonormal_and_error_monotone():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 7)) @ rng.normal(size=(7, 7))
    pca = F.fit_pca(_fm(X), np.arange(40), 1.0)
    V = pca.components
    assert np.max(np.abs(V @ V.T - np.eye(V.shape[0]))) <= 1e-8
    errs = [F.pca_reconstruction_error(pca, X, k) for k in range(V.shape[0] + 1)]
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


def test_pca_bad_target():
    with pytest.raises(ValueError):
        F.fit_pca(_fm(np.eye(3)), [0, 1, 2], 1.5)


def test_tabular_matrix_keeps_missing_for_trees(small_ds):
    fm, state = F.tabular_matrix(small_ds, small_ds.labels, np.arange(200))
    assert state is None and np.isnan(fm.values).any()
    assert not (set(fm.column_names) & fm.categorical)
