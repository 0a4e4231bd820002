"""Exact cosine-similarity search and the Recall@k protocol.

A query counts as retrieved at k when at least one of its top-k references
lies within the label rule's ``negative_radius`` (25 units by default).
Queries with no reference inside that radius are excluded and reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import Record
from .errors import ConfigError, EvaluationError, IngestionError


@dataclass(frozen=True)
class GeoLabelRule:
    positive_radius: float = 10.0
    negative_radius: float = 25.0

    def __post_init__(self):
        if not 0 <= self.positive_radius < self.negative_radius:
            raise ConfigError("positive_radius must be < negative_radius")


@dataclass
class DescriptorIndex:
    ids: list[str]
    matrix: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        if len(self.ids) == 0:
            raise IngestionError("reference set is empty")
        if self.matrix.shape[0] != len(self.ids) or self.coords.shape != (len(self.ids), 2):
            raise IngestionError(
                f"misaligned index: {len(self.ids)} ids, matrix {self.matrix.shape}, coords {self.coords.shape}"
            )
        # ascending-id rank used to break similarity ties
        self._id_rank = np.empty(len(self.ids), dtype=np.intp)
        self._id_rank[np.argsort(np.array(self.ids), kind="stable")] = np.arange(len(self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class TopK:
    ids: list[str]
    similarities: np.ndarray
    indices: np.ndarray
    clamped: bool = False


@dataclass
class EvalReport:
    recall_at: dict[int, float]
    n_queries: int
    n_excluded: int
    threshold: float
    per_query: list[dict] = field(default_factory=list)

    def table(self, sep: str = ",") -> str:
        ks = sorted(self.recall_at)
        head = sep.join(f"recall@{k}" for k in ks)
        return head + "\n" + sep.join(f"{self.recall_at[k]:.6f}" for k in ks) + "\n"

    def lines(self) -> list[str]:
        out = [f"queries={self.n_queries} excluded={self.n_excluded} threshold={self.threshold:g}"]
        out += [f"recall@{k}={self.recall_at[k]:.6f}" for k in sorted(self.recall_at)]
        return out


def build_index(ids: list[str], matrix: np.ndarray, records: list[Record] | dict[str, Record]) -> DescriptorIndex:
    """Join descriptors with manifest coordinates; every id must be in the manifest."""
    by_id = records if isinstance(records, dict) else {r.id: r for r in records}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise IngestionError(f"{len(missing)} descriptor ids not in manifest: {missing[:5]}")
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise IngestionError(f"descriptor matrix must be 2-D, got {matrix.shape}")
    norms = np.linalg.norm(matrix, axis=1)
    bad = [ids[i] for i in np.flatnonzero(np.abs(norms - 1.0) > 1e-5)]
    if bad:
        raise IngestionError(f"{len(bad)} descriptors are not unit-norm: {bad[:5]}")
    coords = np.array([[by_id[i].x, by_id[i].y] for i in ids], dtype=np.float64).reshape(-1, 2)
    return DescriptorIndex(list(ids), matrix, coords)


def _rank(index: DescriptorIndex, sims: np.ndarray) -> np.ndarray:
    # primary key: similarity descending; secondary: id ascending
    return np.lexsort((index._id_rank, -sims))


def query_topk(index: DescriptorIndex, q: np.ndarray, k: int) -> TopK:
    if k < 1:
        raise ConfigError("k must be >= 1")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.dim,):
        raise IngestionError(f"query has shape {q.shape}, index dimension is {index.dim}")
    clamped = k > len(index)
    k = min(k, len(index))
    sims = index.matrix @ q
    order = _rank(index, sims)[:k]
    return TopK([index.ids[i] for i in order], sims[order], order, clamped)


def recall_at_k(
    index: DescriptorIndex,
    queries: np.ndarray,
    query_coords: np.ndarray,
    ks=(1, 5, 10),
    rule: GeoLabelRule = GeoLabelRule(),
    query_ids: list[str] | None = None,
    keep_per_query: int = 0,
) -> EvalReport:
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != index.dim:
        raise IngestionError(f"query matrix {queries.shape} does not match index dimension {index.dim}")
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ConfigError("ks must be positive")
    kmax = min(max(max(ks), keep_per_query), len(index))
    thr = rule.negative_radius
    dist = np.linalg.norm(query_coords[:, None, :] - index.coords[None, :, :], axis=-1)
    close = dist <= thr
    eligible = close.any(axis=1)
    if not eligible.any():
        raise EvaluationError("no query has a reference within the distance threshold")
    sims = queries @ index.matrix.T
    hits = {k: 0 for k in ks}
    per_query = []
    for qi in np.flatnonzero(eligible):
        order = _rank(index, sims[qi])[:kmax]
        good = close[qi, order]
        first = int(np.argmax(good)) if good.any() else None
        for k in ks:
            if first is not None and first < k:
                hits[k] += 1
        if keep_per_query:
            top = order[:keep_per_query]
            per_query.append({
                "query": query_ids[qi] if query_ids else int(qi),
                "ids": [index.ids[i] for i in top],
                "similarities": sims[qi, top].tolist(),
                "distances": dist[qi, top].tolist(),
            })
    n_eval = int(eligible.sum())
    return EvalReport({k: hits[k] / n_eval for k in ks}, n_eval, int((~eligible).sum()), thr, per_query)
