"""Training losses: in-batch KL contrast on raw embeddings and on projected
triplets, plus their weighted sum over the forward relations."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import FORWARD_NAMES
from .model import EncoderState, RelationTable, project_batch, reverse_relation, score_matrix

ORIENTATIONS = ("truth_first", "model_first")
SMOOTHING = 1e-4


class DataError(ValueError):
    pass


def _codes(keys: Sequence) -> np.ndarray:
    seen: dict = {}
    return np.asarray([seen.setdefault(k, len(seen)) for k in keys])


def positive_mask(head_keys: Sequence, tail_keys: Sequence) -> np.ndarray:
    """``M[i, j]`` is true when the batch pairs anchor head ``i`` with the
    tail of candidate ``j``, i.e. some row k has ``h_k == h_i`` and
    ``t_k == t_j``.  The reverse direction uses ``M.T``."""
    h = _codes(head_keys)
    t = _codes(tail_keys)
    same_h = (h[:, None] == h[None, :]).astype(np.float64)
    same_t = (t[:, None] == t[None, :]).astype(np.float64)
    return (same_h @ same_t) > 0


def ground_truth(mask: np.ndarray) -> np.ndarray:
    """Uniform mass over each row's positives."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise DataError(f"anchor(s) {np.flatnonzero(counts[:, 0] == 0).tolist()} have no positive")
    return mask / counts


def kl_rows(q: np.ndarray, logits: Tensor, orientation: str = "truth_first") -> Tensor:
    """Mean over rows of the KL between ``q`` and ``softmax(logits)``.

    ``truth_first`` is KL(q || P); ``model_first`` is KL(P || q) with q
    smoothed by 1e-4 so the divergence stays finite.
    """
    n = q.shape[0]
    logp = ad.log_softmax(logits, axis=-1)
    if orientation == "truth_first":
        support = q > 0
        entropy_term = float(np.sum(q[support] * np.log(q[support])))
        return ad.scale(ad.sum(ad.hadamard(Tensor(q), logp)), -1.0 / n) + entropy_term / n
    if orientation == "model_first":
        k = q.shape[1]
        qs = (1 - SMOOTHING) * q + SMOOTHING / k
        p = ad.softmax(logits, axis=-1)
        return ad.scale(ad.sum(ad.hadamard(p, logp - Tensor(np.log(qs)))), 1.0 / n)
    raise ValueError(f"unknown KL orientation {orientation!r}")


def temper(scores: Tensor, tau: float | Tensor) -> Tensor:
    """Scores divided by a fixed temperature, or multiplied by ``exp`` of a
    learnable log-scale when ``tau`` is a scalar Tensor."""
    if not isinstance(tau, Tensor):
        return ad.scale(scores, 1.0 / tau)
    n, m = scores.shape
    grid = Tensor(np.ones((n, 1))) @ ad.reshape(ad.exp(tau), (1, 1)) @ Tensor(np.ones((1, m)))
    return ad.hadamard(scores, grid)


def _contrast(anchors, candidates, mask, tau, mode, orientation) -> Tensor:
    return kl_rows(ground_truth(mask), temper(score_matrix(anchors, candidates, mode), tau), orientation)


def mm_contrastive_loss(
    anchors,
    candidates,
    positives: np.ndarray,
    tau: float | Tensor = 1.0,
    *,
    orientation: str = "truth_first",
) -> Tensor:
    """Symmetric in-batch KL contrast between two embedding sets.

    ``tau`` is a temperature, or a scalar Tensor holding a learnable
    log logit-scale (see ``temper``).

    ``positives`` is the boolean anchor x candidate pairing (see
    ``positive_mask``); the reverse direction uses its transpose.
    """
    anchors, candidates = ad.as_tensor(anchors), ad.as_tensor(candidates)
    if anchors.shape[0] < 2:
        raise DataError("contrastive loss needs a batch of at least 2")
    mask = np.asarray(positives, bool)
    fwd = _contrast(anchors, candidates, mask, tau, "cosine", orientation)
    rev = _contrast(candidates, anchors, mask.T, tau, "cosine", orientation)
    return ad.scale(fwd + rev, 0.5)


def triplet_kl_loss(
    state: EncoderState,
    table: RelationTable,
    heads,
    r,
    tails,
    positives: np.ndarray,
    tau: float | Tensor = 1.0,
    *,
    reverse: bool = True,
    compensation: bool = True,
    distance_mode: str = "cosine",
    orientation: str = "truth_first",
) -> Tensor:
    """KL contrast of compensated heads against projected tails of the batch,
    averaged with the same contrast over the reverse triplets."""
    heads, tails = ad.as_tensor(heads), ad.as_tensor(tails)
    if heads.shape[0] < 2:
        raise DataError("triplet loss needs a batch of at least 2")
    mask = np.asarray(positives, bool)
    fwd = project_batch(state, table, heads, r, tails, compensation=compensation)
    loss = _contrast(fwd.head, fwd.tail, mask, tau, distance_mode, orientation)
    if not reverse:
        return loss
    rev = project_batch(state, table, tails, reverse_relation(r), heads, compensation=compensation)
    rloss = _contrast(rev.head, rev.tail, mask.T, tau, distance_mode, orientation)
    return ad.scale(loss + rloss, 0.5)


def total_loss(
    per_relation: Mapping[str, tuple[Tensor | float | None, Tensor | float | None]],
    lam: float = 1.0,
    *,
    triplet_term: bool = True,
) -> Tensor:
    """Sum over the forward relations of ``L_tri + lam * L_mm``.

    Components are already batch-means, so no further division happens
    here.  Missing relations or ``None`` components contribute nothing.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    unknown = set(per_relation) - set(FORWARD_NAMES)
    if unknown:
        raise ValueError(f"total loss runs over {FORWARD_NAMES}, got {sorted(unknown)}")
    total = Tensor(0.0)
    for name in FORWARD_NAMES:
        if name not in per_relation:
            continue
        tri, mm = per_relation[name]
        if triplet_term and tri is not None:
            total = total + tri
        if lam > 0 and mm is not None:
            total = total + ad.scale(ad.as_tensor(mm), lam)
    return total
