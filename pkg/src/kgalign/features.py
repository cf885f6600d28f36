"""Initial entity embeddings: file-backed tables, a hash-seeded toy encoder,
and a synthetic dataset generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng
from .graph import EntityId, KnowledgeGraph, build_graph

MAGIC = b"KGCE"
_HEADER = struct.Struct("<4sII")


class FeatureFormatError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    ids: list[EntityId]
    vectors: np.ndarray  # (len(ids), dim)
    trainable: dict[str, bool] = field(
        default_factory=lambda: {"video": False, "action": True, "movement": True}
    )

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError(f"{len(self.ids)} ids but vectors of shape {self.vectors.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate entity ids in table")
        self._index = {e: i for i, e in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, entity: EntityId) -> bool:
        return entity in self._index

    def __getitem__(self, entity: EntityId) -> np.ndarray:
        return self.vectors[self._index[entity]]

    def index(self, entity: EntityId) -> int:
        return self._index[entity]

    def missing(self, entities) -> list[EntityId]:
        return [e for e in entities if e not in self._index]


@dataclass
class FrameFeatures:
    video: str
    frames: np.ndarray  # (n_frames, dim)

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))
        if self.frames.shape[0] < 1:
            raise ValueError(f"video {self.video!r} has no frames")


def temporal_pool(frames) -> ad.Tensor | np.ndarray:
    """Mean over the frame axis.  Differentiable when given a Tensor."""
    if isinstance(frames, FrameFeatures):
        frames = frames.frames
    if isinstance(frames, ad.Tensor):
        if frames.shape[-2] < 1:
            raise ValueError("temporal_pool needs at least one frame")
        return ad.mean(frames, axis=-2)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim < 2 or frames.shape[-2] < 1:
        raise ValueError("temporal_pool needs at least one frame")
    return frames.mean(axis=-2)


# ------------------------------------------------------------------ file IO


def save_embeddings(path: str | Path, table: EmbeddingTable, manifest: str | Path | None = None) -> None:
    path = Path(path)
    manifest = Path(manifest) if manifest else default_manifest(path)
    data = np.ascontiguousarray(table.vectors, dtype="<f8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, len(table.ids), table.dim))
        f.write(data.tobytes())
    manifest.write_text("".join(f"{e}\n" for e in table.ids), encoding="utf-8")


def default_manifest(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def read_manifest(path: str | Path) -> list[EntityId]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        return [EntityId.parse(s) for s in lines if s.strip()]
    except ValueError as e:
        raise FeatureFormatError(f"{path}: {e}") from None


def _read_matrix(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 8 * count * dim
    if len(raw) != expected:
        raise FeatureFormatError(f"{path}: expected {expected} bytes for {count}x{dim}, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64).reshape(count, dim)
    if not np.all(np.isfinite(data)):
        raise FeatureFormatError(f"{path}: non-finite values")
    return data


def load_embeddings(path: str | Path, manifest: str | Path | None = None) -> EmbeddingTable:
    path = Path(path)
    ids = read_manifest(manifest or default_manifest(path))
    data = _read_matrix(path)
    if len(ids) != data.shape[0]:
        extra = ids[data.shape[0]:]
        detail = f"; unmatched ids: {', '.join(map(str, extra))}" if extra else ""
        raise FeatureFormatError(f"{path}: file holds {data.shape[0]} rows, manifest lists {len(ids)}{detail}")
    return EmbeddingTable(ids, data)


def save_frames(path: str | Path, frames: dict[str, FrameFeatures]) -> None:
    """Frames stored as one KGCE matrix; the manifest repeats ``video:<id>``
    once per frame row, rows of a video contiguous."""
    ids, rows = [], []
    for vid in sorted(frames):
        ids += [f"video:{vid}"] * frames[vid].frames.shape[0]
        rows.append(frames[vid].frames)
    path = Path(path)
    data = np.ascontiguousarray(np.concatenate(rows), dtype="<f8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, data.shape[0], data.shape[1]))
        f.write(data.tobytes())
    default_manifest(path).write_text("".join(i + "\n" for i in ids), encoding="utf-8")


def load_frames(path: str | Path) -> dict[str, FrameFeatures]:
    path = Path(path)
    ids = read_manifest(default_manifest(path))
    data = _read_matrix(path)
    if len(ids) != data.shape[0]:
        raise FeatureFormatError(f"{path}: file holds {data.shape[0]} rows, manifest lists {len(ids)}")
    grouped: dict[str, list[int]] = {}
    for i, e in enumerate(ids):
        grouped.setdefault(e.label, []).append(i)
    return {v: FrameFeatures(v, data[idx]) for v, idx in grouped.items()}


# ------------------------------------------------------------------ encoders


def toy_encode(entity: EntityId, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit vector from a hash of (kind, label)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    v = rng.normal(rng.generator("toy", seed, entity.kind, entity.label), (dim,))
    return v / np.linalg.norm(v)


def toy_table(entities, dim: int, seed: int = 0) -> EmbeddingTable:
    entities = list(entities)
    return EmbeddingTable(entities, np.stack([toy_encode(e, dim, seed) for e in entities]))


# ------------------------------------------------------------------ synthetic data


@dataclass
class SyntheticDataset:
    graph: KnowledgeGraph
    table: EmbeddingTable
    frames: dict[str, FrameFeatures]
    prototypes: np.ndarray
    annotations: list[dict]
    oracle_top1: float  # nearest-prototype accuracy on pooled video features

    def __iter__(self):
        return iter((self.graph, self.table, self.frames))


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def synth_dataset(
    m_actions: int = 8,
    l_movements: int = 32,
    n_videos: int = 400,
    dim: int = 32,
    noise_sigma: float = 0.3,
    seed: int = 0,
    *,
    n_frames: int = 8,
    train_ratio: float = 0.8,
    modality_gap: float = 0.5,
    observe_prob: float = 0.6,
    video_share: float = 0.75,
    min_count: int = 1,
) -> SyntheticDataset:
    """Generate a balanced toy action-recognition problem.

    Each action owns ``l / m`` movements; movements in the first block are
    also shared with the next action.  Frames are noisy copies of the
    action prototype; a fraction ``video_share`` of each frame's noise
    variance is shared by all frames of the video, so pooling cannot
    average it away.  The per-frame noise stays N(0, sigma^2).  Text-side
    embeddings (actions, movements) carry a common offset of norm ``modality_gap``, standing in for the offset
    between vision and text embedding centers.
    """
    if m_actions < 2 or l_movements < 1 or n_videos < m_actions or dim < 1 or n_frames < 1:
        raise ValueError("infeasible synthetic sizes")
    if l_movements % m_actions:
        raise ValueError("l_movements must be divisible by m_actions")
    if not 0.0 <= video_share <= 1.0:
        raise ValueError("video_share must lie in [0, 1]")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    gen = rng.generator("synth", seed)
    prototypes = _unit(rng.normal(gen, (m_actions, dim)))
    gap = rng.normal(gen, (dim,))
    gap = modality_gap * gap / np.linalg.norm(gap)

    actions = [f"action_{j:02d}" for j in range(m_actions)]
    movement_names = [f"part{j % 10}:state{j:02d}" for j in range(l_movements)]
    owners = []
    for j in range(l_movements):
        a = {j % m_actions}
        if j < m_actions:
            a.add((j + 1) % m_actions)
        owners.append(sorted(a))
    by_action = {a: [j for j in range(l_movements) if a in owners[j]] for a in range(m_actions)}

    frames: dict[str, FrameFeatures] = {}
    annotations = []
    labels = []
    for i in range(n_videos):
        a = i % m_actions
        vid = f"vid{i:04d}"
        shared = np.sqrt(video_share) * rng.normal(gen, (1, dim))
        own = np.sqrt(1.0 - video_share) * rng.normal(gen, (n_frames, dim))
        f = prototypes[a] + noise_sigma * (shared + own)
        frames[vid] = FrameFeatures(vid, _unit(f) if noise_sigma > 0 else f)
        candidates = by_action[a]
        seen = [j for j in candidates if gen.random() < observe_prob]
        if not seen:
            seen = [candidates[int(gen.integers(len(candidates)))]]
        moves = []
        for j in seen:
            part, state = movement_names[j].split(":")
            moves.append({"part": part, "state": state})
        annotations.append({"video_id": vid, "action": actions[a], "movements": moves})
        labels.append(a)

    graph = build_graph(annotations, min_count=min_count, train_ratio=train_ratio, seed=seed)

    rows: dict[EntityId, np.ndarray] = {}
    for j, a in enumerate(actions):
        rows[EntityId("action", a)] = _unit(prototypes[j] + gap)
    for j, name in enumerate(movement_names):
        centre = prototypes[owners[j]].mean(axis=0)
        rows[EntityId("movement", name)] = _unit(centre + gap + noise_sigma * rng.normal(gen, (dim,)))
    pooled = {}
    for i, (vid, ff) in enumerate(frames.items()):
        # identical frames pool to the prototype itself; skip the rounding of a float mean
        pooled[vid] = temporal_pool(ff) if noise_sigma > 0 else prototypes[labels[i]].copy()
        rows[EntityId("video", vid)] = pooled[vid]
    ids = [e for e in graph.entities if e in rows]
    table = EmbeddingTable(ids, np.stack([rows[e] for e in ids]))

    V = np.stack([pooled[f"vid{i:04d}"] for i in range(n_videos)])
    pred = np.argmax(_unit(V) @ prototypes.T, axis=1)
    oracle = float(np.mean(pred == np.array(labels)))
    return SyntheticDataset(graph, table, frames, prototypes, annotations, oracle)
