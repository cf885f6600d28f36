"""Optimization loop: AdamW with decoupled decay, linear warmup then cosine
decay, two learning-rate groups, per-epoch held-out evaluation and
bit-exact checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from .autodiff import Tensor
from .features import EmbeddingTable, FrameFeatures
from .graph import FORWARD, EntityId, KnowledgeGraph, RelationType, Triple, batch_triples
from .model import DISTANCE_MODES, EncoderState, RelationTable, init_model
from .objectives import ORIENTATIONS, mm_contrastive_loss, positive_mask, total_loss, triplet_kl_loss

log = logging.getLogger(__name__)

CKPT_MAGIC = b"KGCK"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class CoverageError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    warmup_epochs: int = 5
    base_lr_encoder: float = 1e-5  # entity embedding tables
    base_lr_other: float = 1e-4  # encoder, relation table, deviation, positions
    weight_decay: float = 0.2
    lam: float = 1.0
    tau: float = 1.0
    learn_temperature: bool = False  # learn a log logit-scale, initialized at log(1 / tau)
    batch_size: int = 64
    seed: int = 0
    mm_loss: bool = True
    triplet_loss: bool = True
    reverse_triplets: bool = True
    deviation_compensation: bool = True
    distance_mode: str = "cosine"
    kl_orientation: str = "truth_first"
    shared_deviation: bool = False
    train_frames: bool = False
    grad_clip: float = 0.0  # global-norm clip, 0 disables
    fusion_weight: float = 0.5
    heads: int = 0  # 0 picks 8 when dim >= 256, else 4
    ff_width: int = 0  # 0 means 4 * dim
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.base_lr_encoder <= 0 or self.base_lr_other <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.distance_mode not in DISTANCE_MODES:
            raise ConfigError(f"distance_mode must be one of {DISTANCE_MODES}")
        if self.kl_orientation not in ORIENTATIONS:
            raise ConfigError(f"kl_orientation must be one of {ORIENTATIONS}")
        if not (self.mm_loss or self.triplet_loss):
            raise ConfigError("at least one of mm_loss / triplet_loss must be on")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.mm_loss else 0.0

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ text form

    def set(self, key: str, value: str) -> None:
        fields = {f.name: f for f in dataclasses.fields(self)}
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(self, key)
        setattr(self, key, _coerce(value, type(current), key))

    @classmethod
    def from_text(cls, text: str, overrides: list[str] = ()) -> "TrainConfig":
        cfg = cls.__new__(cls)
        for f in dataclasses.fields(cls):
            setattr(cfg, f.name, f.default)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            cfg.set(k, v)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r}: expected key=value")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v.strip())
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())


def _coerce(value: str, typ: type, key: str):
    try:
        if typ is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return typ(value)
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None


# ------------------------------------------------------------------ schedule


def lr_at(config: TrainConfig, step: int, steps_per_epoch: int, base: float | None = None) -> float:
    """Linear warmup from 0, then half-cosine decay reaching 0 on the last step."""
    base = config.base_lr_other if base is None else base
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warm:
        return base * step / warm
    span = total - 1 - warm
    if span <= 0:
        return base if step <= warm else 0.0
    progress = min((step - warm) / span, 1.0)
    if progress == 1.0:
        return 0.0
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


# ------------------------------------------------------------------ optimizer


@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: MomentState,
    rate: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    name: str = "param",
) -> np.ndarray:
    """One bias-corrected Adam update with decay applied straight to the
    weights (scaled by ``rate``).  Updates ``param`` and ``state`` in place."""
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ValueError(f"{name}: shape mismatch between parameter, gradient and moments")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * grad * grad
    mhat = state.m / (1 - beta1**state.t)
    vhat = state.v / (1 - beta2**state.t)
    param -= rate * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)
    return param


# ------------------------------------------------------------------ features


@dataclass
class FeatureSet:
    """Initial embeddings for every entity, plus optional per-video frames."""

    table: EmbeddingTable
    frames: dict[str, FrameFeatures] | None = None

    def video_vector(self, video: EntityId) -> np.ndarray:
        if video in self.table:
            return self.table[video]
        if self.frames and video.label in self.frames:
            return self.frames[video.label].frames.mean(axis=0)
        raise KeyError(f"no features for {video}")


def _default_heads(dim: int) -> int:
    for h in ((8, 4, 2, 1) if dim >= 256 else (4, 2, 1)):
        if dim % h == 0:
            return h
    return 1


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    tri: dict[str, float]
    mm_total: float
    top1: float
    top5: float
    loss: float

    def tsv(self) -> str:
        cols = [self.epoch, f"{self.lr:.6g}"] + [f"{self.tri.get(r.name, float('nan')):.6f}" for r in FORWARD]
        cols += [f"{self.mm_total:.6f}", f"{self.top1:.4f}", f"{self.top5:.4f}"]
        return "\t".join(map(str, cols))


METRICS_HEADER = "# epoch\tlr\tL_tri(v-a)\tL_tri(b-v)\tL_tri(b-a)\tL_mm\ttop1\ttop5"


class Trainer:
    """Holds parameters, optimizer moments and batch cursors for one run."""

    def __init__(self, graph: KnowledgeGraph, features: FeatureSet, config: TrainConfig):
        self.graph = graph
        self.features = features
        self.config = config
        missing = [e for e in graph.entities if e.kind != "video" and e not in features.table]
        missing += [v for v in graph.videos() if not self._has_video(v)]
        if missing:
            raise CoverageError("features missing for: " + ", ".join(map(str, missing)))
        for r in FORWARD:
            if not graph.by_relation(r):
                raise CoverageError(f"graph has no {r.name} triples")
        dim = features.table.dim
        self.dim = dim
        heads = config.heads or _default_heads(dim)
        self.state, self.table = init_model(
            dim, heads, config.ff_width or 4 * dim, config.seed, shared_deviation=config.shared_deviation
        )
        self.text_ids = [e for e in graph.entities if e.kind in ("action", "movement")]
        self.text_index = {e: i for i, e in enumerate(self.text_ids)}
        self.text = Tensor(np.stack([features.table[e] for e in self.text_ids]), requires_grad=True, name="text")
        self.train_videos = graph.videos("train")
        self.video_index = {v: i for i, v in enumerate(self.train_videos)}
        if config.train_frames:
            if not features.frames:
                raise CoverageError("train_frames needs frame features")
            stack = [features.frames[v.label].frames for v in self.train_videos]
            if len({s.shape for s in stack}) != 1:
                raise CoverageError("train_frames needs an equal frame count per video")
            self.frames = Tensor(np.stack(stack), requires_grad=True, name="frames")
            self.video_const = None
        else:
            self.frames = None
            self.video_const = Tensor(np.stack([self._video_init(v) for v in self.train_videos]))
        self.logit_scale = (
            Tensor(np.array(math.log(1.0 / config.tau)), requires_grad=True, name="logit_scale")
            if config.learn_temperature
            else None
        )
        self.moments: dict[str, MomentState] = {}
        self.step_count = 0
        self.cursors = {r.name: [0, 0] for r in FORWARD}  # relation epoch, batch position
        self._batch_cache: dict[tuple[str, int], list[list[Triple]]] = {}
        self.steps_per_epoch = max(1, len(self._epoch_batches(FORWARD[0].name, 0)))
        self.last_rates: dict[str, float] = {}
        self.metrics: list[EpochMetrics] = []
        self._epoch_sums: dict[str, list[float]] = {}

    # ------------------------------------------------------------ plumbing

    def _has_video(self, v: EntityId) -> bool:
        return v in self.features.table or bool(self.features.frames and v.label in self.features.frames)

    def _video_init(self, v: EntityId) -> np.ndarray:
        return self.features.video_vector(v)

    def encoder_group(self) -> dict[str, Tensor]:
        """Entity embeddings, trained at ``base_lr_encoder``."""
        group = {"text": self.text}
        if self.frames is not None:
            group["frames"] = self.frames
        return group

    def other_group(self) -> dict[str, Tensor]:
        group = {f"enc.{k}": v for k, v in self.state.params.items()}
        group["relations"] = self.table.vectors
        if self.config.deviation_compensation:
            group["deviation"] = self.table.deviation
        if self.logit_scale is not None:
            group["logit_scale"] = self.logit_scale
        return group

    def parameters(self) -> dict[str, Tensor]:
        return self.encoder_group() | self.other_group()

    def _epoch_batches(self, rname: str, rel_epoch: int) -> list[list[Triple]]:
        key = (rname, rel_epoch)
        if key not in self._batch_cache:
            seed = (self.config.seed * 1_000_003 + rel_epoch) & 0xFFFFFFFF
            batches = list(batch_triples(self.graph, rname, self.config.batch_size, seed))
            self._batch_cache = {k: v for k, v in self._batch_cache.items() if k[0] != rname}
            self._batch_cache[key] = batches
        return self._batch_cache[key]

    def _next_batch(self, rname: str) -> list[Triple]:
        rel_epoch, pos = self.cursors[rname]
        batches = self._epoch_batches(rname, rel_epoch)
        batch = batches[pos]
        pos += 1
        if pos >= len(batches):
            rel_epoch, pos = rel_epoch + 1, 0
        self.cursors[rname] = [rel_epoch, pos]
        return batch

    def _rows(self, entities: list[EntityId], videos: Tensor) -> Tensor:
        if entities[0].kind == "video":
            return ad.take(videos, [self.video_index[e] for e in entities])
        return ad.take(self.text, [self.text_index[e] for e in entities])

    def _train_video_tensor(self) -> Tensor:
        if self.frames is not None:
            return ad.mean(self.frames, axis=1)
        return self.video_const

    # ------------------------------------------------------------ loss

    def batch_losses(self, batches: dict[str, list[Triple]]) -> dict[str, tuple[Tensor | None, Tensor | None]]:
        cfg = self.config
        videos = self._train_video_tensor()
        tau = self.logit_scale if self.logit_scale is not None else cfg.tau
        out = {}
        for rname, batch in batches.items():
            if len(batch) < 2:
                continue
            heads = self._rows([t.h for t in batch], videos)
            tails = self._rows([t.t for t in batch], videos)
            mask = positive_mask([t.h for t in batch], [t.t for t in batch])
            tri = mm = None
            if cfg.triplet_loss:
                tri = triplet_kl_loss(
                    self.state, self.table, heads, rname, tails, mask, tau,
                    reverse=cfg.reverse_triplets,
                    compensation=cfg.deviation_compensation,
                    distance_mode=cfg.distance_mode,
                    orientation=cfg.kl_orientation,
                )
            if cfg.effective_lam > 0:
                mm = mm_contrastive_loss(heads, tails, mask, tau, orientation=cfg.kl_orientation)
            out[rname] = (tri, mm)
        return out

    def step(self) -> dict[str, float]:
        cfg = self.config
        batches = {r.name: self._next_batch(r.name) for r in FORWARD}
        params = self.parameters()
        for p in params.values():
            p.grad = None
        comps = self.batch_losses(batches)
        loss = total_loss(comps, cfg.effective_lam, triplet_term=cfg.triplet_loss)
        ad.backward(loss)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        if cfg.grad_clip > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > cfg.grad_clip:
                grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
        rates = {
            "encoder": lr_at(cfg, self.step_count, self.steps_per_epoch, cfg.base_lr_encoder),
            "other": lr_at(cfg, self.step_count, self.steps_per_epoch, cfg.base_lr_other),
        }
        enc = self.encoder_group()
        for name, p in params.items():
            rate = rates["encoder"] if name in enc else rates["other"]
            st = self.moments.get(name)
            if st is None:
                st = self.moments[name] = MomentState(np.zeros_like(p.data), np.zeros_like(p.data))
            adamw_step(p.data, grads[name], st, rate, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps, name)
            self.last_rates[name] = rate
        self.step_count += 1
        record = {"loss": loss.item(), "lr": rates["other"]}
        for rname, (tri, mm) in comps.items():
            record[f"tri.{rname}"] = tri.item() if tri is not None else float("nan")
            record[f"mm.{rname}"] = mm.item() if mm is not None else 0.0
        return record

    # ------------------------------------------------------------ evaluation

    def action_ids(self) -> list[EntityId]:
        return [e for e in self.text_ids if e.kind == "action"]

    def action_matrix(self) -> np.ndarray:
        return np.stack([self.text.data[self.text_index[a]] for a in self.action_ids()])

    def evaluate(self, split: str = "test") -> ev.EvalReport | None:
        vids = self.graph.videos(split)
        if not vids:
            return None
        V = np.stack([self.features.video_vector(v) for v in vids])
        S = similarity(self.state, self.table, V, self.action_matrix(), self.config, [str(v) for v in vids],
                       [str(a) for a in self.action_ids()])
        labels = [str(self.graph.action_of(v)) for v in vids]
        return ev.top_k_accuracy(S, labels, k=5)

    # ------------------------------------------------------------ loop

    def run_epoch(self, epoch: int) -> EpochMetrics:
        sums: dict[str, float] = {}
        n = 0
        lr = 0.0
        for _ in range(self.steps_per_epoch):
            rec = self.step()
            lr = rec.pop("lr")
            for k, v in rec.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
        mean = {k: v / n for k, v in sums.items()}
        report = self.evaluate("test")
        m = EpochMetrics(
            epoch=epoch,
            lr=lr,
            tri={r.name: mean.get(f"tri.{r.name}", float("nan")) for r in FORWARD},
            mm_total=sum(mean.get(f"mm.{r.name}", 0.0) for r in FORWARD),
            top1=report.top1 if report else float("nan"),
            top5=report.top5 if report else float("nan"),
            loss=mean.get("loss", float("nan")),
        )
        self.metrics.append(m)
        log.info("epoch %d loss %.4f top1 %.4f top5 %.4f", epoch, m.loss, m.top1, m.top5)
        return m

    def fit(self, out_dir: str | Path | None = None) -> list[EpochMetrics]:
        out = Path(out_dir) if out_dir else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
            metrics_path = out / "metrics.tsv"
            metrics_path.write_text(METRICS_HEADER + "\n", encoding="utf-8")
        best = -1.0
        start = self.step_count // self.steps_per_epoch
        for epoch in range(start, self.config.epochs):
            m = self.run_epoch(epoch)
            if out:
                with open(metrics_path, "a", encoding="utf-8") as f:
                    f.write(m.tsv() + "\n")
                if not math.isnan(m.top1) and m.top1 > best:
                    best = m.top1
                    save_checkpoint(out / "best.ckpt", self)
        if out:
            save_checkpoint(out / "final.ckpt", self)
        return self.metrics

    def initial_loss(self) -> float:
        """Total loss of the first step's batches at the current parameters,
        without advancing any cursor."""
        saved = {k: list(v) for k, v in self.cursors.items()}
        batches = {r.name: self._next_batch(r.name) for r in FORWARD}
        self.cursors = saved
        comps = self.batch_losses(batches)
        return total_loss(comps, self.config.effective_lam, triplet_term=self.config.triplet_loss).item()

    def full_loss(self) -> float:
        """Mean total loss over one pass of every relation's batches (no update)."""
        saved = {k: list(v) for k, v in self.cursors.items()}
        vals = []
        for _ in range(self.steps_per_epoch):
            batches = {r.name: self._next_batch(r.name) for r in FORWARD}
            comps = self.batch_losses(batches)
            vals.append(total_loss(comps, self.config.effective_lam, triplet_term=self.config.triplet_loss).item())
        self.cursors = saved
        return float(np.mean(vals))


def similarity(
    state: EncoderState,
    table: RelationTable,
    video_embs: np.ndarray,
    action_embs: np.ndarray,
    config: TrainConfig,
    rows=None,
    cols=None,
) -> ev.SimilarityMatrix:
    """Score matrix used for prediction: fused when the triplet module was
    trained, the plain embedding cosine otherwise."""
    s_mm = ev.mm_similarity(video_embs, action_embs, rows, cols)
    if not config.triplet_loss:
        return s_mm
    s_tri = ev.tri_similarity(
        state, table, video_embs, action_embs,
        distance_mode=config.distance_mode,
        compensation=config.deviation_compensation,
        rows=rows, cols=cols,
    )
    return ev.fuse(s_mm, s_tri, config.fusion_weight)


def train(
    graph: KnowledgeGraph, features: FeatureSet, config: TrainConfig, out_dir: str | Path | None = None
) -> Trainer:
    trainer = Trainer(graph, features, config)
    trainer.fit(out_dir)
    return trainer


# ------------------------------------------------------------------ checkpoints


def _sections(trainer: Trainer) -> dict[str, np.ndarray]:
    secs = {f"param/{k}": p.data for k, p in trainer.parameters().items()}
    if not trainer.config.deviation_compensation:
        secs["param/deviation"] = trainer.table.deviation.data
    for k, st in trainer.moments.items():
        secs[f"m/{k}"] = st.m
        secs[f"v/{k}"] = st.v
    return dict(sorted(secs.items()))


def save_checkpoint(path: str | Path, trainer: Trainer) -> None:
    """Header (magic, version, JSON length), JSON header with a section table,
    then every section as little-endian float64."""
    secs = _sections(trainer)
    table, offset = [], 0
    for name, arr in secs.items():
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "config": dataclasses.asdict(trainer.config),
        "dim": trainer.dim,
        "heads": trainer.state.heads,
        "ff_width": trainer.state.ff_width,
        "step": trainer.step_count,
        "moment_t": {k: st.t for k, st in sorted(trainer.moments.items())},
        "cursors": trainer.cursors,
        "text_ids": [str(e) for e in trainer.text_ids],
        "train_videos": [str(v) for v in trainer.train_videos],
        "sections": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        for arr in secs.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray] = field(repr=False)

    @property
    def config(self) -> TrainConfig:
        return TrainConfig(**self.header["config"])

    def model(self) -> tuple[EncoderState, RelationTable]:
        h = self.header
        cfg = self.config
        state, table = init_model(h["dim"], h["heads"], h["ff_width"], cfg.seed, shared_deviation=cfg.shared_deviation)
        for k, p in state.params.items():
            p.data[...] = self.arrays[f"param/enc.{k}"]
        table.vectors.data[...] = self.arrays["param/relations"]
        table.deviation.data[...] = self.arrays["param/deviation"]
        return state, table

    def text_table(self) -> EmbeddingTable:
        ids = [EntityId.parse(s) for s in self.header["text_ids"]]
        return EmbeddingTable(ids, self.arrays["param/text"])


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    base = 12 + n
    arrays = {}
    for sec in header["sections"]:
        count = int(np.prod(sec["shape"], dtype=np.int64))
        start = base + sec["offset"]
        if start + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated section {sec['name']}")
        arrays[sec["name"]] = np.frombuffer(raw, "<f8", count, start).astype(np.float64).reshape(sec["shape"])
    return Checkpoint(header, arrays)


def resume(graph: KnowledgeGraph, features: FeatureSet, ckpt: Checkpoint) -> Trainer:
    """Rebuild a trainer mid-run so that further steps match an
    uninterrupted run exactly."""
    trainer = Trainer(graph, features, ckpt.config)
    for k, p in trainer.parameters().items():
        p.data[...] = ckpt.arrays[f"param/{k}"]
    trainer.table.deviation.data[...] = ckpt.arrays["param/deviation"]
    for k, t in ckpt.header["moment_t"].items():
        trainer.moments[k] = MomentState(ckpt.arrays[f"m/{k}"].copy(), ckpt.arrays[f"v/{k}"].copy(), t)
    trainer.step_count = ckpt.header["step"]
    trainer.cursors = {k: list(v) for k, v in ckpt.header["cursors"].items()}
    return trainer


def iter_config_keys() -> Iterator[str]:
    return (f.name for f in dataclasses.fields(TrainConfig))
