"""Pipeline stages: each reads upstream artifacts from the run directory and writes its own."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import subprocess
import time

import numpy as np

from . import contrastive, gnn, metrics
from . import features as F
from . import graph as G
from . import ingest
from .boosted import (GbdtParams, calibrate_isotonic, fit_gbdt, fit_logistic, hybrid_matrix,
                      predict_gbdt, stratified_folds)
from .config import RunConfig, config_hash, config_to_dict
from .sampler import Fanout

log = logging.getLogger(__name__)

__version__ = "0.1.0"


class MissingArtifact(RuntimeError):
    pass


# ---------------------------------------------------------------- small I/O helpers

def dump_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write(F.report_to_json(obj))
        fh.write("\n")


def read_json(path: str):
    with open(path) as fh:
        return json.load(fh)


def save_matrix(prefix: str, row_ids: np.ndarray, names: list[str], values: np.ndarray) -> None:
    """``<prefix>.bin`` holds row-major little-endian f64 values; ``<prefix>.json`` ids and names."""
    os.makedirs(os.path.dirname(prefix) or ".", exist_ok=True)
    np.ascontiguousarray(values, dtype="<f8").tofile(prefix + ".bin")
    dump_json(prefix + ".json", {"rows": int(values.shape[0]), "columns": list(names),
                                 "row_ids": np.asarray(row_ids).tolist()})


def load_matrix(prefix: str) -> tuple[np.ndarray, list[str], np.ndarray]:
    meta = read_json(prefix + ".json")
    vals = np.fromfile(prefix + ".bin", dtype="<f8").reshape(meta["rows"], len(meta["columns"]))
    return np.array(meta["row_ids"], dtype=np.int64), meta["columns"], vals


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def version_string() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _require(path: str, stage: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifact(f"missing {path}: run `{stage}` first")
    return path


# ---------------------------------------------------------------- run context

class Run:
    """Config plus lazily built in-memory inputs shared by the stages of one process."""

    def __init__(self, cfg: RunConfig, out: str | None = None):
        self.cfg = cfg
        self.out = out or cfg.out
        self._ds = None
        self._split = None

    def path(self, *parts) -> str:
        return os.path.join(self.out, *parts)

    # -- inputs --------------------------------------------------------------

    def dataset(self) -> ingest.RelationalDataset:
        if self._ds is None:
            d = self.cfg.data
            if d.source == "synthetic":
                self._ds = ingest.generate_synthetic(d.synth, self.cfg.seed)
            elif d.source == "directory":
                if not d.directory:
                    raise ValueError("data.directory is required for source 'directory'")
                schemas = ingest.load_schemas(d.schema_path) if d.schema_path else ingest.hcdr_schemas()
                self._ds = ingest.load_tables(d.directory, schemas)
            else:
                raise ValueError(f"unknown data source {d.source!r}")
        return self._ds

    def app_split(self) -> np.ndarray:
        """Split codes in application-row order."""
        if self._split is None:
            self._split = G.stratified_split(self.dataset().labels, tuple(self.cfg.split.fractions),
                                             self.cfg.split.seed)
        return self._split

    def customer_order(self) -> np.ndarray:
        """Application-row index of each customer in ascending-id order."""
        return np.argsort(self.dataset().customer_ids, kind="stable")

    def groups(self) -> dict[str, np.ndarray]:
        """Group attributes per customer (ascending-id order) for fairness slicing."""
        ds = self.dataset()
        app = ds.tables[ds.application]
        order = self.customer_order()
        out = {}
        for col in self.cfg.metrics.group_columns:
            if col == "AGE_GROUP":
                if "DAYS_BIRTH" in app.columns:
                    out[col] = ingest.age_groups(app.columns["DAYS_BIRTH"], self.cfg.metrics.age_bin_edges)[order]
            elif col in app.columns:
                if app.kinds.get(col) == ingest.CATEGORICAL:
                    out[col] = app.decode(col)[order].astype(str)
                else:
                    out[col] = app.columns[col][order]
        return out

    def labels(self) -> np.ndarray:
        return self.dataset().labels[self.customer_order()]

    def split(self) -> np.ndarray:
        return self.app_split()[self.customer_order()]

    def customer_ids(self) -> np.ndarray:
        return self.dataset().customer_ids[self.customer_order()]

    def report(self, idx: np.ndarray, scores: np.ndarray, split_name: str = "test") -> metrics.ScoreReport:
        g = self.groups()
        return metrics.ScoreReport(self.customer_ids()[idx], scores, self.labels()[idx],
                                   {k: v[idx] for k, v in g.items()}, split_name)

    # -- manifests -------------------------------------------------------------

    def write_manifest(self, command: str, artifacts: list[str], started: float) -> None:
        arts = {}
        for a in sorted(set(artifacts)):
            if os.path.isdir(a):
                for root, _, files in os.walk(a):
                    for f in sorted(files):
                        p = os.path.join(root, f)
                        arts[os.path.relpath(p, self.out)] = file_sha256(p)
            elif os.path.exists(a):
                arts[os.path.relpath(a, self.out)] = file_sha256(a)
        manifest = {"command": command, "config_hash": config_hash(self.cfg), "seed": self.cfg.seed,
                    "version": version_string(), "wall_time_s": round(time.time() - started, 3),
                    "config": config_to_dict(self.cfg), "artifacts": arts}
        dump_json(self.path("manifests", f"{command}.json"), manifest)

    def check_upstream(self, command: str) -> None:
        p = self.path("manifests", f"{command}.json")
        if os.path.exists(p):
            h = read_json(p).get("config_hash")
            if h != config_hash(self.cfg):
                log.warning("config hash differs from the one used by `%s`; artifacts may be stale", command)


# ---------------------------------------------------------------- stages

def stage_eda(run: Run) -> list[str]:
    ds = run.dataset()
    rep = ingest.validate_schema(ds)
    dump_json(run.path("data", "validation.json"), rep)
    with open(run.path("data", "validation.txt"), "w") as fh:
        fh.write(ingest.format_validation(rep))
    fm = F.engineer_features(ds)
    eda = F.eda_profile(fm.select([c for c in fm.column_names if c not in fm.categorical]), ds.labels)
    dump_json(run.path("eda", "eda.json"), eda)
    pre = F.fit_preprocess(fm, run.app_split() == 0)
    scaled = F.apply_preprocess(pre, fm)
    pca = F.fit_pca(scaled, run.app_split() == 0, 0.95)
    summary = {"columns": len(eda["columns"]), "high_missing": len(eda["high_missing"]),
               "high_skew": len(eda["high_skew"]), "dropped_columns": len(pre.dropped_columns),
               "pca_components_95": pca.n_components,
               "scaled_mean": float(np.mean(scaled.values)), "scaled_std": float(np.std(scaled.values)),
               "class_balance": eda["class_balance"]}
    dump_json(run.path("eda", "summary.json"), summary)
    with open(run.path("eda", "eda.txt"), "w") as fh:
        for k, v in summary.items():
            fh.write(f"{k}: {v}\n")
    return [run.path("data"), run.path("eda")]


def _aligned(fm: F.FeatureMatrix, ids: np.ndarray) -> F.FeatureMatrix:
    pos = np.searchsorted(fm.row_ids, ids) if np.all(np.diff(fm.row_ids) > 0) else None
    if pos is None or not np.array_equal(fm.row_ids[np.minimum(pos, fm.row_ids.size - 1)], ids):
        lookup = {int(c): i for i, c in enumerate(fm.row_ids)}
        pos = np.array([lookup[int(c)] for c in ids], dtype=np.int64)
    return fm.rows(pos)


def stage_features(run: Run) -> list[str]:
    ds = run.dataset()
    train_app = run.app_split() == 0
    ids = run.customer_ids()
    tree_fm, _ = F.tabular_matrix(ds, ds.labels, train_app)
    lin_fm, state = F.tabular_matrix(ds, ds.labels, train_app, run.cfg.tabular.preprocess, scale=True)
    tree_fm, lin_fm = _aligned(tree_fm, ids), _aligned(lin_fm, ids)
    save_matrix(run.path("features", "tree"), ids, tree_fm.column_names, tree_fm.values)
    save_matrix(run.path("features", "linear"), ids, lin_fm.column_names, lin_fm.values)
    with open(run.path("features", "preprocess_state.json"), "w") as fh:
        fh.write(F.state_to_json(state))
    dump_json(run.path("features", "lineage.json"), tree_fm.lineage)
    return [run.path("features")]


def stage_build_graph(run: Run) -> list[str]:
    ds = run.dataset()
    g = G.build_hetero_graph(ds, run.cfg.graph, split=run.app_split())
    report = G.validate_graph(g)
    G.save_graph(g, run.path("graph"))
    dump_json(run.path("graph_report.json"), report)
    return [run.path("graph"), run.path("graph_report.json")]


def load_run_graph(run: Run) -> G.HeteroGraph:
    _require(run.path("graph", "manifest.json"), "build-graph")
    run.check_upstream("build-graph")
    return G.load_graph(run.path("graph"))


def _model_config(cfg: RunConfig, arch: str):
    return cfg.gnn.sage if arch == gnn.SAGE else cfg.gnn.relattn


def _write_model_outputs(run: Run, name: str, test_idx, test_scores, val_idx=None, val_scores=None,
                         extra: dict | None = None) -> dict:
    d = run.path("models", name)
    os.makedirs(d, exist_ok=True)
    rep = run.report(test_idx, test_scores, "test")
    metrics.write_score_csv(os.path.join(d, "scores_test.csv"), rep)
    if val_idx is not None:
        metrics.write_score_csv(os.path.join(d, "scores_val.csv"), run.report(val_idx, val_scores, "val"))
    m = metrics.rank_metrics(rep)
    if extra:
        m.update(extra)
    dump_json(os.path.join(d, "metrics.json"), m)
    return m


def _train_and_save_gnn(run: Run, g: G.HeteroGraph, arch: str, name: str, init_state=None) -> dict:
    cfg = run.cfg
    res = gnn.train_gnn(g, arch, cfg.gnn.train, Fanout(list(cfg.gnn.fanout)), _model_config(cfg, arch),
                        init_state=init_state)
    d = run.path("models", name)
    os.makedirs(d, exist_ok=True)
    gnn.save_model(res.model, os.path.join(d, "checkpoint"))
    gnn.write_history(os.path.join(d, "history.csv"), res.history)
    test_idx = np.flatnonzero(g.mask("test"))
    val_idx = np.flatnonzero(g.mask("val"))
    chunk = cfg.gnn.train.eval_chunk
    masking = [gnn.relation_mask_eval(res.model, g, r) for r in sorted(g.relations) if not r.startswith("rev_")]
    dump_json(os.path.join(d, "masking.json"), masking)
    return _write_model_outputs(run, name, test_idx, gnn.predict_proba(res.model, g, test_idx, chunk),
                                val_idx, gnn.predict_proba(res.model, g, val_idx, chunk),
                                {"best_epoch": res.best_epoch, "best_val_roc_auc": res.best_val_auc,
                                 "first_epoch_val_roc_auc": res.history[0]["val_roc_auc"]})


def stage_train_gnn(run: Run, archs: list[str] | None = None) -> list[str]:
    g = load_run_graph(run)
    out = []
    for arch in archs or run.cfg.gnn.archs:
        _train_and_save_gnn(run, g, arch, arch)
        out.append(run.path("models", arch))
    return out


def stage_pretrain(run: Run) -> list[str]:
    """Contrastive pretraining of the encoder, then fine-tuning it as the "pretrain+ft" model."""
    g = load_run_graph(run)
    cfg = run.cfg
    arch = cfg.contrastive.encoder
    res = contrastive.pretrain(g, arch, cfg.contrastive.pretrain, Fanout(list(cfg.gnn.fanout)),
                               _model_config(cfg, arch))
    contrastive.save_encoder(run.path("pretrain", "encoder"), res)
    with open(run.path("pretrain", "infonce.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "infonce"])
        for i, v in enumerate(res.losses):
            w.writerow([i, repr(v)])
    _train_and_save_gnn(run, g, arch, "pretrain+ft", init_state=res.encoder_state())
    return [run.path("pretrain"), run.path("models", "pretrain+ft")]


def stage_extract_embeddings(run: Run, arch: str | None = None) -> list[str]:
    arch = arch or run.cfg.hybrid.embedding_arch
    g = load_run_graph(run)
    ck = _require(run.path("models", arch, "checkpoint", "manifest.json"), f"train-gnn (model {arch})")
    model = gnn.load_model(os.path.dirname(ck))
    Z = gnn.extract_embeddings(model, g, run.cfg.gnn.train.eval_chunk)
    prefix = run.path("embeddings", arch)
    save_matrix(prefix, g.ids[G.CUSTOMER], [f"z{i}" for i in range(Z.shape[1])], Z)
    return [prefix + ".bin", prefix + ".json"]


def _fit_tabular_gbdt(run: Run, X: np.ndarray, names: list[str], params: GbdtParams):
    """Returns (test scores, val-or-oof scores for calibration, calibration rows, model info)."""
    cfg = run.cfg.tabular
    y, split = run.labels(), run.split()
    tr, va, te = (np.flatnonzero(split == c) for c in (0, 1, 2))
    if cfg.protocol == "split":
        model = fit_gbdt(X[tr], y[tr], params, X[va], y[va], names)
        return (predict_gbdt(model, X[te]), predict_gbdt(model, X[va]), va,
                {"best_iteration": model.best_iteration}, [model])
    if cfg.protocol != "cv":
        raise ValueError(f"unknown tabular protocol {cfg.protocol!r}")
    pool = np.concatenate([tr, va])
    pool.sort()
    plan = stratified_folds(y[pool], cfg.folds, cfg.fold_seed)
    oof = np.zeros(pool.size)
    test = np.zeros(te.size)
    models = []
    for fit_rows, hold_rows in plan:
        a, b = pool[fit_rows], pool[hold_rows]
        model = fit_gbdt(X[a], y[a], params, X[b], y[b], names)
        oof[hold_rows] = predict_gbdt(model, X[b])
        test += predict_gbdt(model, X[te]) / plan.k
        models.append(model)
    return test, oof, pool, {"best_iterations": [m.best_iteration for m in models]}, models


def stage_train_tabular(run: Run) -> list[str]:
    _require(run.path("features", "tree.json"), "features")
    run.check_upstream("features")
    cfg = run.cfg.tabular
    y, split = run.labels(), run.split()
    tr, va, te = (np.flatnonzero(split == c) for c in (0, 1, 2))

    _, lin_names, XL = load_matrix(run.path("features", "linear"))
    lm = fit_logistic(XL[tr], y[tr], cfg.logistic)
    _write_model_outputs(run, "logistic", te, lm.predict_proba(XL[te]), va, lm.predict_proba(XL[va]),
                         {"converged": lm.converged, "n_iter": lm.n_iter})
    dump_json(run.path("models", "logistic", "model.json"),
              {"columns": lin_names, "coef": lm.coef, "intercept": lm.intercept})

    _, names, XT = load_matrix(run.path("features", "tree"))
    test, calib_scores, calib_rows, info, models = _fit_tabular_gbdt(run, XT, names, cfg.gbdt)
    _write_model_outputs(run, "gbdt", te, test, extra=info)
    with open(run.path("models", "gbdt", "model.json"), "w") as fh:
        fh.write(models[0].to_json())
    if cfg.calibrate:
        iso = calibrate_isotonic(calib_scores, y[calib_rows])
        d = run.path("models", "gbdt_isotonic")
        os.makedirs(d, exist_ok=True)
        dump_json(os.path.join(d, "isotonic.json"), iso.to_dict())
        metrics.write_score_csv(os.path.join(d, "scores_test.csv"), run.report(te, iso(test)))
    return [run.path("models", "logistic"), run.path("models", "gbdt"), run.path("models", "gbdt_isotonic")]


def stage_train_hybrid(run: Run) -> list[str]:
    _require(run.path("features", "tree.json"), "features")
    arch = run.cfg.hybrid.embedding_arch
    prefix = _require(run.path("embeddings", f"{arch}.json"), "extract-embeddings")[:-5]
    run.check_upstream("extract-embeddings")
    ids, names, XT = load_matrix(run.path("features", "tree"))
    z_ids, _, Z = load_matrix(prefix)
    X_tab = F.FeatureMatrix(ids, names, XT, {c: "raw" for c in names})
    Xh = hybrid_matrix(X_tab, Z, z_ids)
    te = np.flatnonzero(run.split() == 2)
    test, _, _, info, models = _fit_tabular_gbdt(run, Xh.values, Xh.column_names, run.cfg.tabular.gbdt)
    _write_model_outputs(run, "hybrid", te, test, extra=info)
    with open(run.path("models", "hybrid", "model.json"), "w") as fh:
        fh.write(models[0].to_json())
    return [run.path("models", "hybrid")]


MODEL_ORDER = ["logistic", "gbdt", "pretrain+ft", "sage", "relattn", "hybrid"]


def available_models(run: Run) -> list[str]:
    d = run.path("models")
    if not os.path.isdir(d):
        return []
    names = sorted(n for n in os.listdir(d) if os.path.exists(os.path.join(d, n, "scores_test.csv")))
    return [m for m in MODEL_ORDER if m in names] + [m for m in names if m not in MODEL_ORDER]


def evaluate_report(r: metrics.ScoreReport, cfg: RunConfig) -> dict:
    out = metrics.rank_metrics(r)
    out["topk"] = {str(k): metrics.topk_screen(r, k) for k in cfg.metrics.k_fractions}
    out["calibration"] = metrics.calibration_report(r, cfg.metrics.calibration_bins)
    out["n"] = int(r.scores.size)
    out["prevalence"] = float(r.labels.mean())
    return out


def stage_evaluate(run: Run, scores_csv: str | None = None) -> list[str]:
    if scores_csv is not None:
        r = metrics.read_score_csv(scores_csv)
        res = evaluate_report(r, run.cfg)
        dump_json(run.path("eval", "external.json"), res)
        return [run.path("eval", "external.json")]
    models = available_models(run)
    if not models:
        raise MissingArtifact("no model scores found: run train-tabular / train-gnn first")
    res = {m: evaluate_report(metrics.read_score_csv(run.path("models", m, "scores_test.csv")), run.cfg)
           for m in models}
    dump_json(run.path("eval", "metrics.json"), res)
    return [run.path("eval", "metrics.json")]


def stage_fairness(run: Run) -> list[str]:
    models = available_models(run)
    if not models:
        raise MissingArtifact("no model scores found: run train-tabular / train-gnn first")
    out = {}
    for m in models:
        r = metrics.read_score_csv(run.path("models", m, "scores_test.csv"))
        cols = [c for c in run.cfg.metrics.group_columns if c in r.groups]
        out[m] = {"subgroups": [metrics.fairness_report(r, c) for c in cols],
                  "threshold": [metrics.threshold_audit(r, c, run.cfg.metrics.tau) for c in cols]}
    dump_json(run.path("fairness", "fairness.json"), out)
    with open(run.path("fairness", "subgroups.md"), "w") as fh:
        fh.write(metrics.subgroup_table({m: v["subgroups"] for m, v in out.items()}))
    with open(run.path("fairness", "threshold.md"), "w") as fh:
        fh.write(metrics.threshold_table({m: v["threshold"] for m, v in out.items()}))
    return [run.path("fairness")]


def stage_report(run: Run) -> list[str]:
    models = available_models(run)
    if not models:
        raise MissingArtifact("no model scores found: run the training stages first")
    results = {}
    for m in models:
        if m == "gbdt_isotonic":
            continue
        r = metrics.read_score_csv(run.path("models", m, "scores_test.csv"))
        results[m] = metrics.rank_metrics(r)
    parts = ["# Model comparison (test split)\n", metrics.comparison_table(results), "\n"]
    os.makedirs(run.path("report"), exist_ok=True)
    with open(run.path("report", "comparison.csv"), "w") as fh:
        fh.write(metrics.comparison_table(results, "csv"))
    enc = run.cfg.contrastive.encoder
    if "pretrain+ft" in results and enc in results:
        rows = {}
        for name, key in (("scratch", enc), ("pretrain+ft", "pretrain+ft")):
            m = read_json(run.path("models", key, "metrics.json"))
            rows[name] = {"roc_auc": m["roc_auc"], "pr_auc": m["pr_auc"], "best_epoch": m["best_epoch"],
                          "first_epoch_val_roc_auc": m["first_epoch_val_roc_auc"]}
        curve = run.path("pretrain", "infonce.csv")
        parts += ["\n# Contrastive pretraining: fine-tuned vs scratch\n",
                  contrastive.comparison_markdown(rows)]
        if os.path.exists(curve):
            with open(curve) as fh:
                parts += ["\nInfoNCE per epoch:\n\n```\n", fh.read(), "```\n"]
    mask_rows = []
    for m in models:
        p = run.path("models", m, "masking.json")
        if os.path.exists(p):
            for e in read_json(p):
                mask_rows.append(f"| {m} | {e['relation']} | {e['masked']['roc_auc']:.4f} | "
                                 f"{e['delta_roc_auc']:+.4f} | {e['delta_pr_auc']:+.4f} |")
    if mask_rows:
        parts += ["\n# Relation masking at inference\n",
                  "| Model | Masked relation | Test ROC-AUC | Delta ROC-AUC | Delta PR-AUC |\n",
                  "|---|---|---|---|---|\n", "\n".join(mask_rows), "\n"]
    fair = run.path("fairness", "subgroups.md")
    if os.path.exists(fair):
        with open(fair) as fh:
            parts += ["\n# Subgroup performance\n", fh.read()]
        with open(run.path("fairness", "threshold.md")) as fh:
            parts += [f"\n# Threshold audit (tau = {run.cfg.metrics.tau})\n", fh.read()]
    with open(run.path("report", "report.md"), "w") as fh:
        fh.write("".join(parts))
    dump_json(run.path("report", "results.json"), results)
    return [run.path("report")]


STAGES = ["eda", "features", "build-graph", "train-gnn", "pretrain", "extract-embeddings",
          "train-tabular", "train-hybrid", "evaluate", "fairness-audit", "report"]


def run_all(run: Run, with_pretrain: bool | None = None) -> dict:
    """Execute every stage in dependency order; returns the comparison results."""
    todo = [s for s in STAGES if s != "pretrain" or (run.cfg.contrastive.enabled if with_pretrain is None
                                                     else with_pretrain)]
    for s in todo:
        execute(run, s)
    return read_json(run.path("report", "results.json"))


def execute(run: Run, command: str, **kw) -> list[str]:
    started = time.time()
    fn = {"eda": stage_eda, "features": stage_features, "build-graph": stage_build_graph,
          "train-gnn": stage_train_gnn, "pretrain": stage_pretrain,
          "extract-embeddings": stage_extract_embeddings, "train-tabular": stage_train_tabular,
          "train-hybrid": stage_train_hybrid, "evaluate": stage_evaluate,
          "fairness-audit": stage_fairness, "report": stage_report}[command]
    os.makedirs(run.out, exist_ok=True)
    arts = fn(run, **kw)
    run.write_manifest(command, arts, started)
    log.info("%s done in %.1fs", command, time.time() - started)
    return arts
