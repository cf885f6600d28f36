"""Triplet scoring: a small Transformer over [head, rel-head, rel-tail, tail],
paired-relation projection, and per-relation deviation compensation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .graph import RELATION_NAMES, RelationType, relation, reverse_relation

SEQ_LEN = 4
N_LAYERS = 3
DISTANCE_MODES = ("cosine", "euclidean")
EUCLID_EPS = 1e-12


class ConfigError(ValueError):
    pass


@dataclass
class EncoderState:
    dim: int
    heads: int
    ff_width: int
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.params if k.endswith(".wq"))

    def __getitem__(self, key: str) -> Tensor:
        return self.params[key]

    def output_weights(self) -> list[str]:
        """Weights whose zeroing silences every sublayer and the output head."""
        names = ["head.w", "head.b"]
        for i in range(self.n_layers):
            names += [f"layer{i}.wo", f"layer{i}.bo", f"layer{i}.w2", f"layer{i}.b2"]
        return names


@dataclass
class RelationTable:
    vectors: Tensor  # (6, 2d): head chunk then tail chunk
    deviation: Tensor  # (6, d) or (1, d) when shared across relations

    @property
    def dim(self) -> int:
        return self.deviation.shape[1]

    @property
    def shared_deviation(self) -> bool:
        return self.deviation.shape[0] == 1

    def params(self) -> dict[str, Tensor]:
        return {"relations": self.vectors, "deviation": self.deviation}

    def deviation_row(self, r: RelationType) -> int:
        return 0 if self.shared_deviation else r.index


def init_model(
    dim: int, heads: int, ff_width: int | None = None, seed: int = 0, *, shared_deviation: bool = False
) -> tuple[EncoderState, RelationTable]:
    if dim < 1 or heads < 1 or dim % heads:
        raise ConfigError(f"dim {dim} is not divisible by heads {heads}")
    ff_width = ff_width or 4 * dim
    gen = rng.generator("init", seed)

    def gauss(shape, std, name):
        return Tensor(rng.normal(gen, shape, std), requires_grad=True, name=name)

    def const(value, shape, name):
        return Tensor(np.full(shape, value), requires_grad=True, name=name)

    params = {"pos": gauss((SEQ_LEN, dim), 0.01, "pos")}
    for i in range(N_LAYERS):
        p = f"layer{i}"
        params |= {
            f"{p}.ln1_g": const(1.0, dim, f"{p}.ln1_g"),
            f"{p}.ln1_b": const(0.0, dim, f"{p}.ln1_b"),
            f"{p}.wq": gauss((dim, dim), 0.02, f"{p}.wq"),
            f"{p}.bq": const(0.0, dim, f"{p}.bq"),
            f"{p}.wk": gauss((dim, dim), 0.02, f"{p}.wk"),
            f"{p}.bk": const(0.0, dim, f"{p}.bk"),
            f"{p}.wv": gauss((dim, dim), 0.02, f"{p}.wv"),
            f"{p}.bv": const(0.0, dim, f"{p}.bv"),
            f"{p}.wo": gauss((dim, dim), 0.02, f"{p}.wo"),
            f"{p}.bo": const(0.0, dim, f"{p}.bo"),
            f"{p}.ln2_g": const(1.0, dim, f"{p}.ln2_g"),
            f"{p}.ln2_b": const(0.0, dim, f"{p}.ln2_b"),
            f"{p}.w1": gauss((dim, ff_width), 0.02, f"{p}.w1"),
            f"{p}.b1": const(0.0, ff_width, f"{p}.b1"),
            f"{p}.w2": gauss((ff_width, dim), 0.02, f"{p}.w2"),
            f"{p}.b2": const(0.0, dim, f"{p}.b2"),
        }
    params |= {
        "final_ln_g": const(1.0, dim, "final_ln_g"),
        "final_ln_b": const(0.0, dim, "final_ln_b"),
        "head.w": gauss((dim, dim), 0.02, "head.w"),
        "head.b": const(0.0, dim, "head.b"),
    }
    state = EncoderState(dim, heads, ff_width, params)
    table = RelationTable(
        vectors=gauss((len(RELATION_NAMES), 2 * dim), 1.0 / np.sqrt(dim), "relations"),
        deviation=const(0.0, (1 if shared_deviation else len(RELATION_NAMES), dim), "deviation"),
    )
    return state, table


def identity_configuration(state: EncoderState, table: RelationTable) -> None:
    """Zero the sublayer outputs, set relation chunks to one and deviation to
    zero, in place.  Under this setting every score reduces to the cosine of
    the raw head and tail embeddings."""
    for name in state.output_weights():
        state.params[name].data[...] = 0.0
    table.vectors.data[...] = 1.0
    table.deviation.data[...] = 0.0


# ------------------------------------------------------------------ encoder


def _attention(state: EncoderState, x: Tensor, p: str) -> Tensor:
    b, n, d = x.shape
    h = state.heads
    dh = d // h

    def heads_first(t):
        return ad.transpose(ad.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    q = heads_first(x @ state[f"{p}.wq"] + state[f"{p}.bq"])
    k = heads_first(x @ state[f"{p}.wk"] + state[f"{p}.bk"])
    v = heads_first(x @ state[f"{p}.wv"] + state[f"{p}.bv"])
    scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    ctx = ad.softmax(scores, axis=-1) @ v
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    return ctx @ state[f"{p}.wo"] + state[f"{p}.bo"]


def _block(state: EncoderState, x: Tensor, i: int) -> Tensor:
    p = f"layer{i}"
    x = x + _attention(state, ad.layer_norm(x, state[f"{p}.ln1_g"], state[f"{p}.ln1_b"]), p)
    hidden = ad.gelu(ad.layer_norm(x, state[f"{p}.ln2_g"], state[f"{p}.ln2_b"]) @ state[f"{p}.w1"] + state[f"{p}.b1"])
    return x + (hidden @ state[f"{p}.w2"] + state[f"{p}.b2"])


def encode_sequence(state: EncoderState, seq: Tensor) -> Tensor:
    """``seq`` of shape (B, 4, d) -> TriEnc(seq + P) + seq."""
    x = seq + state["pos"]
    for i in range(state.n_layers):
        x = _block(state, x, i)
    out = ad.layer_norm(x, state["final_ln_g"], state["final_ln_b"]) @ state["head.w"] + state["head.b"]
    return out + seq


def _batched(x, width: int, what: str) -> tuple[Tensor, bool]:
    x = ad.as_tensor(x)
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != width:
        raise ad.ShapeError(f"{what}: expected length {width}, got shape {x.shape}")
    return x, single


def triplet_encode(state: EncoderState, x_h, x_r, x_t) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Encode one triplet (1-D inputs) or a batch (2-D inputs).

    Returns ``(Z_h, Z_rh, Z_rt, Z_t)``, each of the input's batch shape.
    """
    d = state.dim
    x_h, single = _batched(x_h, d, "head")
    x_r, _ = _batched(x_r, 2 * d, "relation")
    x_t, _ = _batched(x_t, d, "tail")
    b = x_h.shape[0]
    if x_r.shape[0] != b or x_t.shape[0] != b:
        raise ad.ShapeError("triplet_encode: batch extents differ")
    r_h, r_t = ad.split(x_r, [d, d], axis=1)
    seq = ad.concat([ad.reshape(t, (b, 1, d)) for t in (x_h, r_h, r_t, x_t)], axis=1)
    z = encode_sequence(state, seq)
    outs = [ad.reshape(t, (b, d)) for t in ad.split(z, [1, 1, 1, 1], axis=1)]
    if single:
        outs = [ad.reshape(t, (d,)) for t in outs]
    return tuple(outs)


def project_entities(z_h, z_rh, z_rt, z_t) -> tuple[Tensor, Tensor]:
    return ad.hadamard(z_h, z_rh), ad.hadamard(z_t, z_rt)


def compensate(z_h_proj, eps) -> Tensor:
    """Subtract the deviation vector from every projected head."""
    z_h_proj, eps = ad.as_tensor(z_h_proj), ad.as_tensor(eps)
    if z_h_proj.shape[-1] != eps.shape[-1]:
        raise ad.ShapeError(f"compensate: {z_h_proj.shape} vs deviation {eps.shape}")
    return z_h_proj - eps


@dataclass
class ProjectedPair:
    head: Tensor  # compensated projected heads
    tail: Tensor  # projected tails
    relation: RelationType


def relation_rows(table: RelationTable, r: RelationType, n: int) -> Tensor:
    return ad.take(table.vectors, np.full(n, r.index))


def project_batch(
    state: EncoderState,
    table: RelationTable,
    heads,
    r: str | RelationType,
    tails,
    *,
    compensation: bool = True,
) -> ProjectedPair:
    """Run a batch of triplets sharing relation ``r`` through encode,
    project and compensate."""
    r = relation(r)
    heads, tails = ad.as_tensor(heads), ad.as_tensor(tails)
    n = heads.shape[0]
    z_h, z_rh, z_rt, z_t = triplet_encode(state, heads, relation_rows(table, r, n), tails)
    zh1, zt1 = project_entities(z_h, z_rh, z_rt, z_t)
    if compensation:
        eps = ad.take(table.deviation, [table.deviation_row(r)])  # (1, d), broadcast over batch
        zh1 = compensate(zh1, eps)
    return ProjectedPair(zh1, zt1, r)


def pair_scores(a: Tensor, b: Tensor, mode: str = "cosine") -> Tensor:
    """Row-wise plausibility of aligned rows of ``a`` and ``b``."""
    if mode == "cosine":
        return ad.cosine(a, b)
    if mode == "euclidean":
        return ad.scale(ad.l2_norm(a - b, axis=-1, eps=EUCLID_EPS), -1.0)
    raise ConfigError(f"unknown distance mode {mode!r}")


def score_matrix(anchors: Tensor, candidates: Tensor, mode: str = "cosine") -> Tensor:
    """All-pairs plausibility: entry (i, j) scores anchor i against candidate j."""
    if mode == "cosine":
        return ad.l2_normalize(anchors, axis=-1) @ ad.transpose(ad.l2_normalize(candidates, axis=-1))
    if mode == "euclidean":
        n, d = anchors.shape
        m = candidates.shape[0]
        diff = ad.reshape(anchors, (n, 1, d)) - ad.reshape(candidates, (1, m, d))
        return ad.scale(ad.l2_norm(diff, axis=-1, eps=EUCLID_EPS), -1.0)
    raise ConfigError(f"unknown distance mode {mode!r}")


def score_triplet(
    state: EncoderState,
    table: RelationTable,
    h_emb,
    r: str | RelationType,
    t_emb,
    distance_mode: str = "cosine",
    *,
    compensation: bool = True,
) -> Tensor:
    """Plausibility of one triplet (or a batch): larger is more plausible."""
    h = ad.as_tensor(h_emb)
    t = ad.as_tensor(t_emb)
    single = h.ndim == 1
    if single:
        h, t = ad.reshape(h, (1, -1)), ad.reshape(t, (1, -1))
    pair = project_batch(state, table, h, r, t, compensation=compensation)
    s = pair_scores(pair.head, pair.tail, distance_mode)
    return ad.reshape(s, ()) if single else s


def reverse_pair(state, table, heads, r, tails, *, compensation=True) -> ProjectedPair:
    """The reverse triplet (t, r', h) of a forward batch."""
    return project_batch(state, table, tails, reverse_relation(r), heads, compensation=compensation)


def parameters(state: EncoderState, table: RelationTable) -> dict[str, Tensor]:
    return dict(state.params) | table.params()
