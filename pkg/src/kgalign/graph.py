"""Multi-modal knowledge graph over videos, actions and body movements.

Annotations arrive as JSON lines::

    {"video_id": "v1", "action": "belly_dancing",
     "movements": [{"part": "head", "state": "shake"}]}

and become typed triples under six relation types, three forward
(``v-a``, ``b-v``, ``b-a``) and their reverses.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from . import rng

KINDS = ("video", "action", "movement")
KIND_LETTER = {"v": "video", "a": "action", "b": "movement"}


class GraphParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True, order=True)
class EntityId:
    kind: str
    label: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown entity kind {self.kind!r}")
        if not self.label:
            raise ValueError("empty entity label")
        if self.kind == "movement" and len(self.label.split(":")) not in (2, 3):
            raise ValueError(f"movement label {self.label!r} is not part:state[:object]")

    def __str__(self) -> str:
        return f"{self.kind}:{self.label}"

    @classmethod
    def parse(cls, text: str) -> "EntityId":
        kind, _, label = text.partition(":")
        return cls(kind, label)


@dataclass(frozen=True)
class RelationType:
    name: str

    def __post_init__(self):
        if self.name not in RELATION_NAMES:
            raise ValueError(f"unknown relation {self.name!r}")

    @property
    def head_kind(self) -> str:
        return KIND_LETTER[self.name[0]]

    @property
    def tail_kind(self) -> str:
        return KIND_LETTER[self.name[2]]

    @property
    def index(self) -> int:
        return RELATION_NAMES.index(self.name)

    @property
    def is_forward(self) -> bool:
        return self.name in FORWARD_NAMES

    def __str__(self) -> str:
        return self.name


RELATION_NAMES = ("v-a", "b-v", "b-a", "a-v", "v-b", "a-b")
FORWARD_NAMES = RELATION_NAMES[:3]
RELATIONS = tuple(RelationType(n) for n in RELATION_NAMES)
FORWARD = RELATIONS[:3]


def relation(name: str | RelationType) -> RelationType:
    return name if isinstance(name, RelationType) else RelationType(name)


def reverse_relation(r: str | RelationType) -> RelationType:
    r = relation(r)
    h, t = r.name.split("-")
    return RelationType(f"{t}-{h}")


@dataclass(frozen=True, order=True)
class Triple:
    h: EntityId
    r: RelationType = field(compare=False)
    t: EntityId
    rname: str = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "rname", self.r.name)
        if self.h.kind != self.r.head_kind or self.t.kind != self.r.tail_kind:
            raise ValueError(f"triple ({self.h}, {self.r}, {self.t}) violates relation kinds")

    def reverse(self) -> "Triple":
        return Triple(self.t, reverse_relation(self.r), self.h)

    def to_json(self) -> dict:
        return {"h": str(self.h), "r": self.r.name, "t": str(self.t)}

    @classmethod
    def from_json(cls, row: dict) -> "Triple":
        return cls(EntityId.parse(row["h"]), RelationType(row["r"]), EntityId.parse(row["t"]))


def _key(t: Triple):
    return (t.rname, t.h, t.t)


@dataclass
class KnowledgeGraph:
    entities: list[EntityId]
    triples: list[Triple]
    splits: dict[str, str]  # video label -> "train" | "test"
    video_actions: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.entities = sorted(set(self.entities))
        self.triples = sorted(set(self.triples), key=_key)
        self._by_relation: dict[str, list[Triple]] = defaultdict(list)
        for t in self.triples:
            self._by_relation[t.rname].append(t)

    def by_relation(self, r: str | RelationType) -> list[Triple]:
        return list(self._by_relation.get(relation(r).name, []))

    def entities_of(self, kind: str) -> list[EntityId]:
        return [e for e in self.entities if e.kind == kind]

    def videos(self, split: str | None = None) -> list[EntityId]:
        vids = self.entities_of("video")
        if split is None:
            return vids
        return [v for v in vids if self.splits.get(v.label) == split]

    def action_of(self, video: EntityId) -> EntityId:
        """True action of a video, test videos included."""
        return EntityId("action", self.video_actions[video.label])

    def triple_set(self) -> set[tuple[str, str, str]]:
        return {(str(t.h), t.rname, str(t.t)) for t in self.triples}

    # -------------------------------------------------------------- persistence

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            for t in self.triples:
                f.write(json.dumps(t.to_json()) + "\n")
        manifest = {
            "entities": [str(e) for e in self.entities],
            "splits": dict(sorted(self.splits.items())),
            "video_actions": dict(sorted(self.video_actions.items())),
        }
        manifest_path(path).write_text(json.dumps(manifest, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeGraph":
        path = Path(path)
        triples = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    triples.append(Triple.from_json(json.loads(line)))
        manifest = json.loads(manifest_path(path).read_text(encoding="utf-8"))
        return cls(
            entities=[EntityId.parse(e) for e in manifest["entities"]],
            triples=triples,
            splits=manifest["splits"],
            video_actions=manifest.get("video_actions", {}),
        )


def manifest_path(graph_path: str | Path) -> Path:
    graph_path = Path(graph_path)
    return graph_path.with_name(graph_path.name + ".manifest.json")


# ------------------------------------------------------------------ building


@dataclass
class _Record:
    action: str
    movements: set[str]
    line: int


def movement_label(part: str, state: str, obj: str | None = None) -> str:
    fields = [part, state] + ([obj] if obj else [])
    for x in fields:
        if not isinstance(x, str) or not x or ":" in x:
            raise ValueError(f"bad movement field {x!r}")
    return ":".join(fields)


_RECORD_KEYS = {"video_id", "action", "movements"}
_MOVEMENT_KEYS = {"part", "state", "object"}


def parse_annotations(lines: Iterable[str | dict]) -> dict[str, _Record]:
    """Parse annotation lines (JSON text or already-decoded maps), merging
    repeated video records."""
    records: dict[str, _Record] = {}
    for lineno, raw in enumerate(lines, start=1):
        if isinstance(raw, str):
            if not raw.strip():
                continue
            try:
                row = json.loads(raw)
            except json.JSONDecodeError as e:
                raise GraphParseError(lineno, f"invalid JSON ({e.msg})") from None
        else:
            row = raw
        if not isinstance(row, dict):
            raise GraphParseError(lineno, "record is not a map")
        unknown = set(row) - _RECORD_KEYS
        if unknown:
            raise GraphParseError(lineno, f"unknown kind of field(s) {sorted(unknown)}")
        vid, action = row.get("video_id"), row.get("action")
        if not isinstance(vid, str) or not vid:
            raise GraphParseError(lineno, "missing video_id")
        if not isinstance(action, str) or not action.strip():
            raise GraphParseError(lineno, "empty action label")
        movements = set()
        for m in row.get("movements", []) or []:
            if not isinstance(m, dict) or set(m) - _MOVEMENT_KEYS or "part" not in m or "state" not in m:
                raise GraphParseError(lineno, f"malformed movement {m!r}")
            try:
                movements.add(movement_label(m["part"], m["state"], m.get("object")))
            except ValueError as e:
                raise GraphParseError(lineno, f"malformed movement {m!r}: {e}") from None
        prev = records.get(vid)
        if prev is None:
            records[vid] = _Record(action, movements, lineno)
        elif prev.action != action:
            raise GraphParseError(
                lineno, f"video {vid!r} labelled {action!r}, was {prev.action!r} on line {prev.line}"
            )
        else:
            prev.movements |= movements
    return records


def split_videos(video_actions: dict[str, str], train_ratio: float, seed: int) -> dict[str, str]:
    """Seeded shuffle within each action; the first round(ratio * n) are train."""
    if not 0.0 <= train_ratio <= 1.0:
        raise ValueError(f"train_ratio must lie in [0, 1], got {train_ratio}")
    by_action: dict[str, list[str]] = defaultdict(list)
    for vid, a in video_actions.items():
        by_action[a].append(vid)
    splits = {}
    for a in sorted(by_action):
        vids = sorted(by_action[a])
        order = rng.permutation(rng.generator("split", seed, a), len(vids))
        n_train = int(round(train_ratio * len(vids)))
        if train_ratio > 0:
            n_train = max(n_train, 1)
        for rank, i in enumerate(order):
            splits[vids[i]] = "train" if rank < n_train else "test"
    return splits


def build_graph(
    annotations: Iterable[str | dict],
    min_count: int = 1,
    train_ratio: float = 0.8,
    seed: int = 0,
    splits: dict[str, str] | None = None,
) -> KnowledgeGraph:
    """Build the graph from an annotation stream.

    Train videos contribute ``(v, v-a, a)`` and ``(b, b-v, v)`` edges; a
    movement joins an action through ``b-a`` once it is seen in at least
    ``min_count`` train videos of that action.  Every forward edge gets its
    reverse.  Test videos are entities without edges.  ``splits`` overrides
    the seeded split when given.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    records = parse_annotations(annotations)
    video_actions = {v: r.action for v, r in records.items()}
    if splits is None:
        splits = split_videos(video_actions, train_ratio, seed)
    entities: set[EntityId] = set()
    triples: set[Triple] = set()
    counts: dict[tuple[str, str], int] = defaultdict(int)
    va, bv, ba = FORWARD
    for vid, rec in records.items():
        v = EntityId("video", vid)
        a = EntityId("action", rec.action)
        entities.update((v, a))
        for m in rec.movements:
            entities.add(EntityId("movement", m))
        if splits[vid] != "train":
            continue
        triples.add(Triple(v, va, a))
        for m in rec.movements:
            triples.add(Triple(EntityId("movement", m), bv, v))
            counts[(m, rec.action)] += 1
    for (m, action), c in counts.items():
        if c >= min_count:
            triples.add(Triple(EntityId("movement", m), ba, EntityId("action", action)))
    triples |= {t.reverse() for t in triples}
    return KnowledgeGraph(sorted(entities), sorted(triples, key=_key), dict(splits), video_actions)


def read_annotations(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return f.readlines()


def batch_triples(
    g: KnowledgeGraph, r: str | RelationType, batch_size: int, seed: int
) -> Iterator[list[Triple]]:
    """One epoch of batches: a seeded permutation of the relation's triples,
    with the final short batch kept."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 for in-batch contrast")
    triples = g.by_relation(r)
    order = rng.permutation(rng.generator("batches", seed, relation(r).name), len(triples))
    for start in range(0, len(triples), batch_size):
        yield [triples[i] for i in order[start : start + batch_size]]
