"""Fraud-network data model, on-disk format, batching, and a synthetic generator.

On-disk layout of a graph directory:
  meta.json            num_nodes, feature_dim, relations (list of names), label_values
  features.f32le       row-major little-endian float32, num_nodes x feature_dim
  labels.i8            one signed byte per node: -1 unlabeled, 0 benign, 1 fraud
  edges_<rel>.u32le    little-endian uint32 (src, dst) pairs, undirected,
                       duplicates allowed (the loader deduplicates)
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import GraphLoadError, InvalidLabelError, SplitError
from .rng import generator


@dataclass
class FraudGraph:
    features: np.ndarray            # (N, D) float64
    labels: np.ndarray              # (N,) int8 in {-1, 0, 1}
    relations: dict[str, np.ndarray] = field(default_factory=dict)  # name -> (E, 2) uint32
    union_adj: sp.csr_matrix = None  # (N, N) symmetric, no self-loops

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def labeled_ids(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)


@dataclass
class SplitIndex:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class BatchSubgraph:
    node_ids: np.ndarray
    features: np.ndarray      # (b, D)
    topo_rows: sp.csr_matrix  # (b, N) full-graph adjacency rows
    labels: np.ndarray        # (b,) in {0, 1}


@dataclass
class SynthConfig:
    num_nodes: int = 1000
    feature_dim: int = 16
    fraud_rate: float = 0.15
    mean_separation: float = 2.33
    homophily: float = 0.19
    avg_degree: float = 10.0
    seed: int = 0

    def validate(self):
        if self.num_nodes < 4:
            raise ValueError("num_nodes must be at least 4")
        if not 0.0 < self.fraud_rate < 1.0:
            raise ValueError("fraud_rate must lie in (0, 1)")
        if self.mean_separation < 0.0:
            raise ValueError("mean_separation must be >= 0")
        if not 0.0 <= self.homophily <= 1.0:
            raise ValueError("homophily must lie in [0, 1]")
        if self.avg_degree <= 0.0:
            raise ValueError("avg_degree must be positive")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")


def build_union_adj(relations: dict[str, np.ndarray], num_nodes: int) -> sp.csr_matrix:
    """Symmetric deduplicated union of all relations, self-loops dropped."""
    pairs = [e.reshape(-1, 2) for e in relations.values() if e.size]
    if not pairs:
        return sp.csr_matrix((num_nodes, num_nodes), dtype=np.float64)
    edges = np.vstack(pairs).astype(np.int64)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    keep = src != dst
    src, dst = src[keep], dst[keep]
    codes = np.unique(src * num_nodes + dst)
    rows, cols = codes // num_nodes, codes % num_nodes
    adj = sp.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(num_nodes, num_nodes)
    )
    adj.sort_indices()
    return adj


def _read_exact(path: str, dtype, count: int, what: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise GraphLoadError(f"missing file: {path}")
    data = np.fromfile(path, dtype=dtype)
    if data.size != count:
        raise GraphLoadError(
            f"{what}: expected {count} values in {path}, found {data.size}"
        )
    return data


def load_graph(path: str) -> FraudGraph:
    meta_path = os.path.join(path, "meta.json")
    if not os.path.isfile(meta_path):
        raise GraphLoadError(f"missing file: {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    try:
        n = int(meta["num_nodes"])
        d = int(meta["feature_dim"])
        rel_names = list(meta["relations"])
    except (KeyError, TypeError) as exc:
        raise GraphLoadError(f"bad meta.json in {path}: {exc}") from exc

    feats = _read_exact(
        os.path.join(path, "features.f32le"), "<f4", n * d, "features"
    ).astype(np.float64).reshape(n, d)
    if not np.all(np.isfinite(feats)):
        raise GraphLoadError("features contain non-finite values")
    labels = _read_exact(os.path.join(path, "labels.i8"), np.int8, n, "labels")
    if not np.isin(labels, (-1, 0, 1)).all():
        raise GraphLoadError("labels must lie in {-1, 0, 1}")

    relations = {}
    for name in rel_names:
        epath = os.path.join(path, f"edges_{name}.u32le")
        if not os.path.isfile(epath):
            raise GraphLoadError(f"missing file: {epath}")
        raw = np.fromfile(epath, dtype="<u4")
        if raw.size % 2:
            raise GraphLoadError(f"odd number of endpoints in {epath}")
        edges = raw.reshape(-1, 2)
        if edges.size and edges.max() >= n:
            raise GraphLoadError(
                f"edge endpoint {edges.max()} out of range in {epath} (num_nodes={n})"
            )
        relations[name] = edges
    return FraudGraph(
        features=feats,
        labels=labels,
        relations=relations,
        union_adj=build_union_adj(relations, n),
    )


def save_graph(g: FraudGraph, path: str):
    os.makedirs(path, exist_ok=True)
    meta = {
        "num_nodes": g.num_nodes,
        "feature_dim": g.feature_dim,
        "relations": sorted(g.relations),
        "label_values": "-1 unlabeled, 0 benign, 1 fraud",
    }
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    g.features.astype("<f4").tofile(os.path.join(path, "features.f32le"))
    g.labels.astype(np.int8).tofile(os.path.join(path, "labels.i8"))
    for name in sorted(g.relations):
        g.relations[name].astype("<u4").tofile(
            os.path.join(path, f"edges_{name}.u32le")
        )


def stratified_split(g: FraudGraph, ratios=(0.4, 0.2, 0.4), seed=0) -> SplitIndex:
    """Per-class shuffle then proportional train/val/test assignment."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise SplitError(f"ratios must be three positive values summing to 1: {ratios}")
    rng = generator(seed)
    parts = ([], [], [])
    for cls in (0, 1):
        ids = np.flatnonzero(g.labels == cls)
        if ids.size < 3:
            raise SplitError(f"class {cls} has only {ids.size} labeled nodes")
        ids = rng.permutation(ids)
        b1 = int(round(ratios[0] * ids.size))
        b2 = int(round((ratios[0] + ratios[1]) * ids.size))
        for part, chunk in zip(parts, (ids[:b1], ids[b1:b2], ids[b2:])):
            part.append(chunk)
    train, val, test = (np.sort(np.concatenate(p)) for p in parts)
    return SplitIndex(train=train, val=val, test=test)


def downsample_epoch(train_ids, labels, seed) -> np.ndarray:
    """Keep all positives; sample negatives without replacement to match."""
    train_ids = np.asarray(train_ids)
    lab = np.asarray(labels)[train_ids]
    pos = train_ids[lab == 1]
    neg = train_ids[lab == 0]
    if pos.size == 0:
        raise ValueError("down-sampling requires at least one positive sample")
    rng = generator(seed)
    if neg.size > pos.size:
        neg = rng.choice(neg, size=pos.size, replace=False)
    return rng.permutation(np.concatenate([pos, neg]))


def make_batches(ids, batch_size: int) -> list[np.ndarray]:
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ValueError("cannot batch an empty id list")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [ids[i:i + batch_size] for i in range(0, ids.size, batch_size)]


def gather_batch(g: FraudGraph, ids) -> BatchSubgraph:
    ids = np.asarray(ids)
    labels = g.labels[ids].astype(np.int64)
    if (labels < 0).any():
        raise InvalidLabelError("unlabeled node in training batch")
    return BatchSubgraph(
        node_ids=ids,
        features=g.features[ids],
        topo_rows=g.union_adj[ids],
        labels=labels,
    )


def normalize_features(g: FraudGraph, split: SplitIndex) -> FraudGraph:
    """Per-feature z-score using statistics of the train nodes only."""
    train_x = g.features[split.train]
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0)
    ok = std >= 1e-12
    normed = np.where(ok, (g.features - mean) / np.where(ok, std, 1.0), 0.0)
    return replace(g, features=normed)


def synth_generate(cfg: SynthConfig) -> FraudGraph:
    """Camouflage-style synthetic graph.

    Labels are Bernoulli(fraud_rate); features are unit-variance Gaussians
    whose class means are mean_separation apart (Euclidean). Each edge picks
    a same-class endpoint pair with probability ``homophily`` (class then
    uniform between the two), a cross-class pair otherwise; endpoints are
    uniform within their class. At homophily h the fraction of a fraudster's
    neighbors that are benign concentrates at 1 - h.
    """
    cfg.validate()
    rng = generator(cfg.seed)
    n, d = cfg.num_nodes, cfg.feature_dim

    labels = (rng.random(n) < cfg.fraud_rate).astype(np.int8)
    if labels.sum() == 0 or labels.sum() == n:
        raise ValueError("degenerate draw: one class is empty; change seed or rate")

    offset = cfg.mean_separation / math.sqrt(d)
    features = rng.standard_normal((n, d))
    features[labels == 1] += offset

    by_class = [np.flatnonzero(labels == c) for c in (0, 1)]
    n_edges = int(round(cfg.avg_degree * n / 2))
    same = rng.random(n_edges) < cfg.homophily
    same_cls = rng.integers(0, 2, n_edges)
    cls_u = np.where(same, same_cls, 0)
    cls_v = np.where(same, same_cls, 1)
    u = np.empty(n_edges, dtype=np.int64)
    v = np.empty(n_edges, dtype=np.int64)
    for c in (0, 1):
        mask = cls_u == c
        u[mask] = by_class[c][rng.integers(0, by_class[c].size, mask.sum())]
        mask = cls_v == c
        v[mask] = by_class[c][rng.integers(0, by_class[c].size, mask.sum())]
    clash = u == v
    while clash.any():
        for c in (0, 1):
            mask = clash & (cls_v == c)
            v[mask] = by_class[c][rng.integers(0, by_class[c].size, mask.sum())]
        clash = u == v

    relations = {"SYN": np.column_stack([u, v]).astype(np.uint32)}
    return FraudGraph(
        features=features,
        labels=labels,
        relations=relations,
        union_adj=build_union_adj(relations, n),
    )


def neighbor_label_distribution(g: FraudGraph) -> dict[int, dict[int, float] | None]:
    """Per-class fractions of labeled-neighbor classes; None where undefined."""
    coo = g.union_adj.tocoo()
    src_lab = g.labels[coo.row]
    dst_lab = g.labels[coo.col]
    out: dict[int, dict[int, float] | None] = {}
    for cls in (0, 1):
        mask = (src_lab == cls) & (dst_lab >= 0)
        total = int(mask.sum())
        if total == 0:
            out[cls] = None
            continue
        out[cls] = {
            nb: float((dst_lab[mask] == nb).sum()) / total for nb in (0, 1)
        }
    return out


def gaussian_bayes_auc(mean_separation: float) -> float:
    """Best achievable AUC for two unit-variance Gaussian classes."""
    return 0.5 * (1.0 + math.erf(mean_separation / 2.0))
