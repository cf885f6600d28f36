"""Similarity matrices for action inference and Top-k evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import RelationType, relation
from .model import EncoderState, RelationTable, pair_scores, project_batch, reverse_relation

PROVENANCES = ("mm", "tri", "fused")
CHUNK = 256


class DataError(ValueError):
    pass


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (videos, actions)
    provenance: str
    rows: list = field(default_factory=list)
    cols: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("similarity matrix has missing or non-finite cells")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise DataError(f"zero-norm {what} embedding(s) at rows {np.flatnonzero(n[:, 0] == 0).tolist()}")
    return x / n


def mm_similarity(video_embs, action_embs, rows=None, cols=None) -> SimilarityMatrix:
    v = _unit_rows(video_embs, "video")
    a = _unit_rows(action_embs, "action")
    if v.shape[1] != a.shape[1]:
        raise DataError(f"dimension mismatch: videos {v.shape[1]}, actions {a.shape[1]}")
    return SimilarityMatrix(np.clip(v @ a.T, -1.0, 1.0), "mm", list(rows or []), list(cols or []))


def tri_similarity(
    state: EncoderState,
    table: RelationTable,
    video_embs,
    action_embs,
    *,
    forward: str | RelationType = "v-a",
    distance_mode: str = "cosine",
    compensation: bool = True,
    chunk: int = CHUNK,
    rows=None,
    cols=None,
) -> SimilarityMatrix:
    """Average of the forward (v, v-a, a) and reverse (a, a-v, v) triplet
    scores for every video/action pair, evaluated ``chunk`` pairs at a time."""
    r = relation(forward)
    rr = reverse_relation(r)
    if table.vectors.shape[0] <= max(r.index, rr.index):
        raise DataError("relation table lacks the v-a / a-v rows")
    v = np.asarray(video_embs, dtype=np.float64)
    a = np.asarray(action_embs, dtype=np.float64)
    nv, na = v.shape[0], a.shape[0]
    vi, ai = np.divmod(np.arange(nv * na), na)
    out = np.empty(nv * na)
    for start in range(0, nv * na, chunk):
        sl = slice(start, start + chunk)
        hv, ta = v[vi[sl]], a[ai[sl]]
        fwd = project_batch(state, table, hv, r, ta, compensation=compensation)
        rev = project_batch(state, table, ta, rr, hv, compensation=compensation)
        out[sl] = 0.5 * (
            pair_scores(fwd.head, fwd.tail, distance_mode).data + pair_scores(rev.head, rev.tail, distance_mode).data
        )
    return SimilarityMatrix(out.reshape(nv, na), "tri", list(rows or []), list(cols or []))


def fuse(s_mm: SimilarityMatrix, s_tri: SimilarityMatrix, weight: float = 0.5) -> SimilarityMatrix:
    """``weight * S_mm + (1 - weight) * S_tri``; the default is the plain mean."""
    if s_mm.shape != s_tri.shape:
        raise DataError(f"shape mismatch {s_mm.shape} vs {s_tri.shape}")
    if s_mm.rows != s_tri.rows or s_mm.cols != s_tri.cols:
        raise DataError("row/column orderings differ")
    return SimilarityMatrix(weight * s_mm.values + (1 - weight) * s_tri.values, "fused", s_mm.rows, s_mm.cols)


def rank_actions(scores: np.ndarray) -> np.ndarray:
    """Column indices by descending score; ties go to the lower index."""
    scores = np.asarray(scores)
    return np.argsort(-scores, axis=-1, kind="stable")


@dataclass
class EvalReport:
    top1: float
    top5: float
    per_action: dict
    ties: int
    n: int
    topk: dict = field(default_factory=dict)

    def __str__(self) -> str:
        lines = [f"videos: {self.n}", f"Top-1: {self.top1:.4f}", f"Top-5: {self.top5:.4f}", f"ties broken: {self.ties}"]
        for a, acc in self.per_action.items():
            lines.append(f"  {a}\t{acc:.4f}")
        return "\n".join(lines)


def top_k_accuracy(S: SimilarityMatrix | np.ndarray, labels, k: int = 1) -> EvalReport:
    """Top-1, Top-5 and Top-``k`` hit rates.  ``labels`` are column indices
    or column keys of ``S``."""
    values = S.values if isinstance(S, SimilarityMatrix) else np.asarray(S, dtype=np.float64)
    cols = S.cols if isinstance(S, SimilarityMatrix) else []
    n, m = values.shape
    idx = []
    for lab in labels:
        if isinstance(lab, (int, np.integer)):
            if not 0 <= lab < m:
                raise DataError(f"label index {lab} out of range for {m} actions")
            idx.append(int(lab))
        else:
            if lab not in cols:
                raise DataError(f"unknown label {lab!r}")
            idx.append(cols.index(lab))
    idx = np.asarray(idx)
    if len(idx) != n:
        raise DataError(f"{len(idx)} labels for {n} rows")
    order = rank_actions(values)
    rank = np.argmax(order == idx[:, None], axis=1)

    def acc(kk):
        return float(np.mean(rank < kk)) if n else 0.0

    ties = 0
    for row in values:
        _, counts = np.unique(row, return_counts=True)
        ties += int(np.sum(counts[counts > 1] - 1))
    per_action = {}
    for j in sorted(set(idx.tolist())):
        key = cols[j] if cols else j
        per_action[str(key)] = float(np.mean(rank[idx == j] == 0))
    return EvalReport(acc(1), acc(5), per_action, ties, n, {k: acc(k)})
