"""Checkpoint-level scoring: evaluation over a graph split and per-video
action ranking."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .graph import EntityId, KnowledgeGraph
from .trainer import Checkpoint, FeatureSet, load_checkpoint, similarity


class UnknownVideoError(KeyError):
    pass


def _checkpoint(ckpt: Checkpoint | str | Path) -> Checkpoint:
    return ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)


def _actions(ckpt: Checkpoint) -> tuple[list[EntityId], np.ndarray]:
    text = ckpt.text_table()
    ids = [e for e in text.ids if e.kind == "action"]
    return ids, np.stack([text[e] for e in ids])


def score_videos(ckpt: Checkpoint | str | Path, features: FeatureSet, videos: list[EntityId]) -> ev.SimilarityMatrix:
    """Prediction matrix (videos x actions) from a checkpoint: fused scores,
    or plain cosine when the run had no triplet term."""
    ckpt = _checkpoint(ckpt)
    state, table = ckpt.model()
    actions, A = _actions(ckpt)
    rows = []
    for v in videos:
        try:
            rows.append(features.video_vector(v))
        except KeyError:
            raise UnknownVideoError(f"no features for video {v.label!r}") from None
    if A.shape[1] != state.dim or (rows and len(rows[0]) != state.dim):
        raise ev.DataError(f"feature dimension does not match checkpoint dimension {state.dim}")
    return similarity(state, table, np.stack(rows), A, ckpt.config, [str(v) for v in videos], [str(a) for a in actions])


@dataclass
class Evaluation:
    report: ev.EvalReport
    scores: ev.SimilarityMatrix
    labels: list[str]

    def tsv(self) -> str:
        """One row per video: id, true action, predicted action, then a
        score per action column."""
        head = ["video", "label", "predicted"] + self.scores.cols
        lines = ["\t".join(head)]
        order = ev.rank_actions(self.scores.values)
        for i, vid in enumerate(self.scores.rows):
            cells = [vid, self.labels[i], self.scores.cols[order[i, 0]]]
            cells += [f"{x:.10g}" for x in self.scores.values[i]]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def evaluate_checkpoint(
    ckpt: Checkpoint | str | Path, graph: KnowledgeGraph, features: FeatureSet, split: str = "test"
) -> Evaluation:
    videos = graph.videos(split)
    if not videos:
        raise ev.DataError(f"split {split!r} has no videos")
    S = score_videos(ckpt, features, videos)
    labels = [str(graph.action_of(v)) for v in videos]
    return Evaluation(ev.top_k_accuracy(S, labels, k=5), S, labels)


def infer(
    ckpt: Checkpoint | str | Path, features: FeatureSet, video_ids: list[str], top_n: int = 5
) -> dict[str, list[tuple[str, float]]]:
    """Top ``top_n`` (action, score) pairs per video, best first."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    videos = [EntityId("video", v) for v in video_ids]
    S = score_videos(ckpt, features, videos)
    order = ev.rank_actions(S.values)[:, :top_n]
    return {
        v: [(S.cols[j].partition(":")[2], float(S.values[i, j])) for j in order[i]]
        for i, v in enumerate(video_ids)
    }
