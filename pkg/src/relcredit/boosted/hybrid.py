"""Tabular features concatenated with GNN customer embeddings, fed to the boosted trees."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..features import FeatureMatrix
from .gbdt import GbdtModel, GbdtParams, fit_gbdt, predict_gbdt


def embedding_columns(dim: int) -> list[str]:
    return [f"gnn_emb_{i:03d}" for i in range(dim)]


def hybrid_matrix(X_tab: FeatureMatrix, Z: np.ndarray, z_ids: np.ndarray) -> FeatureMatrix:
    """Append embedding columns; rows are matched on customer id and must align one-to-one."""
    Z = np.asarray(Z, dtype=np.float64)
    z_ids = np.asarray(z_ids)
    if Z.shape[0] != z_ids.size:
        raise ValueError("embedding rows and ids differ in length")
    if z_ids.size != X_tab.row_ids.size or not np.array_equal(np.sort(z_ids), np.sort(X_tab.row_ids)):
        raise ValueError("misaligned ids: embedding customers differ from tabular customers")
    pos = {int(c): i for i, c in enumerate(z_ids)}
    order = np.fromiter((pos[int(c)] for c in X_tab.row_ids), dtype=np.int64, count=X_tab.row_ids.size)
    cols = embedding_columns(Z.shape[1])
    lineage = dict(X_tab.lineage)
    lineage.update({c: "graph-embedding" for c in cols})
    return FeatureMatrix(X_tab.row_ids.copy(), list(X_tab.column_names) + cols,
                         np.hstack([X_tab.values, Z[order]]), lineage, set(X_tab.categorical))


@dataclass
class HybridModel:
    gbdt: GbdtModel
    tabular_columns: list[str]
    embedding_dim: int

    def predict(self, X_hybrid: FeatureMatrix) -> np.ndarray:
        return predict_gbdt(self.gbdt, X_hybrid.values, X_hybrid.column_names)


def fit_hybrid(X_tab: FeatureMatrix, Z: np.ndarray, z_ids: np.ndarray, y, train_rows, val_rows,
               params: GbdtParams | None = None) -> tuple[HybridModel, FeatureMatrix]:
    Xh = hybrid_matrix(X_tab, Z, z_ids)
    y = np.asarray(y)
    model = fit_gbdt(Xh.values[train_rows], y[train_rows], params, Xh.values[val_rows], y[val_rows],
                     Xh.column_names)
    return HybridModel(model, list(X_tab.column_names), Z.shape[1]), Xh
