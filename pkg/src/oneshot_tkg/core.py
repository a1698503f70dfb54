"""Temporal knowledge-graph primitives: quadruples, vocabularies, neighbor lookup."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

from .errors import MalformedLine, NonNumericTime, UnknownSymbol

TIME_FORMATS = ("label", "int")


class Quadruple(NamedTuple):
    subject: int
    relation: int
    object: int
    time: int


def quad_key(q: Quadruple) -> tuple[int, int, int, int]:
    """Canonical sort key: (time, subject, relation, object)."""
    return (q.time, q.subject, q.relation, q.object)


@dataclass
class Vocab:
    entities: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)
    times: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._ent = {}
        self._rel = {}
        self._time = {}
        for names, index in ((self.entities, self._ent), (self.relations, self._rel),
                             (self.times, self._time)):
            for i, name in enumerate(names):
                if name in index:
                    raise ValueError(f"duplicate vocabulary name {name!r}")
                index[name] = i

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @staticmethod
    def _lookup(names, index, name, grow, kind):
        i = index.get(name)
        if i is None:
            if not grow:
                raise UnknownSymbol(f"unknown {kind} {name!r}")
            i = len(names)
            names.append(name)
            index[name] = i
        return i

    def entity_id(self, name: str, grow: bool = False) -> int:
        return self._lookup(self.entities, self._ent, name, grow, "entity")

    def relation_id(self, name: str, grow: bool = False) -> int:
        return self._lookup(self.relations, self._rel, name, grow, "relation")

    def time_id(self, label: str, grow: bool = False) -> int:
        return self._lookup(self.times, self._time, label, grow, "time")

    def to_json(self) -> str:
        return json.dumps(
            {"entities": self.entities, "relations": self.relations, "times": self.times},
            ensure_ascii=False, indent=1,
        ) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        obj = json.loads(text)
        return cls(list(obj["entities"]), list(obj["relations"]), list(obj["times"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _parse_int_time(label: str) -> int:
    try:
        value = int(label)
    except ValueError:
        raise NonNumericTime(f"time field {label!r} is not an integer") from None
    if value < 0 or value >= 2**32:
        raise NonNumericTime(f"time field {label!r} outside the 32-bit tick range")
    return value


def parse_quadruple_line(line: str, vocab: Vocab, mode: str = "grow",
                         time_format: str = "label") -> Quadruple:
    """Parse one ``s\\tr\\to\\tt`` line into ids, growing ``vocab`` when ``mode='grow'``."""
    if mode not in ("grow", "strict"):
        raise ValueError(f"mode must be 'grow' or 'strict', got {mode!r}")
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) != 4:
        raise MalformedLine(f"expected 4 tab-separated fields, got {len(fields)}: {line!r}")
    s, r, o, t = fields
    grow = mode == "grow"
    if time_format == "int":
        tick = _parse_int_time(t)
        if tick >= len(vocab.times):
            if not grow:
                raise UnknownSymbol(f"unknown time {t!r}")
            for i in range(len(vocab.times), tick + 1):
                vocab.time_id(str(i), grow=True)
    elif time_format == "label":
        tick = vocab.time_id(t, grow)
    else:
        raise ValueError(f"unknown time format {time_format!r}")
    return Quadruple(vocab.entity_id(s, grow), vocab.relation_id(r, grow),
                     vocab.entity_id(o, grow), tick)


def sort_time_labels(labels: Iterable[str]) -> list[str]:
    """Distinct labels in tick order: numeric when every label is an integer, else lexicographic."""
    labels = set(labels)
    try:
        return sorted(labels, key=lambda x: (int(x), x))
    except ValueError:
        return sorted(labels)


def read_events(path, time_format: str = "label") -> tuple[list[Quadruple], Vocab]:
    """Read a raw event file, assigning dense ticks by sorted order of distinct time labels."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip("\r")]
    vocab = Vocab()
    if time_format == "label":
        labels = []
        for ln in lines:
            fields = ln.rstrip("\r").split("\t")
            if len(fields) != 4:
                raise MalformedLine(f"expected 4 tab-separated fields, got {len(fields)}: {ln!r}")
            labels.append(fields[3])
        for label in sort_time_labels(labels):
            vocab.time_id(label, grow=True)
    quads = [parse_quadruple_line(ln, vocab, "grow", time_format) for ln in lines]
    return quads, vocab


def format_quad(q: Quadruple, vocab: Vocab) -> str:
    return "\t".join((vocab.entities[q.subject], vocab.relations[q.relation],
                      vocab.entities[q.object], vocab.times[q.time]))


def write_quads(path, quads: Iterable[Quadruple], vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q in quads:
            fh.write(format_quad(q, vocab) + "\n")


def read_quads(path, vocab: Vocab) -> list[Quadruple]:
    """Read a quadruple file against a fixed vocabulary (unknown names are errors)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln in fh.read().split("\n"):
            if not ln:
                continue
            fields = ln.split("\t")
            if len(fields) != 4:
                raise MalformedLine(f"expected 4 tab-separated fields, got {len(fields)}: {ln!r}")
            out.append(Quadruple(vocab.entity_id(fields[0]), vocab.relation_id(fields[1]),
                                 vocab.entity_id(fields[2]), vocab.time_id(fields[3])))
    return out


def deduplicate(quads: Iterable[Quadruple]) -> list[Quadruple]:
    return sorted({Quadruple(*q) for q in quads}, key=quad_key)


@dataclass(frozen=True)
class HistoryWindow:
    """Neighbor snapshots of ``entity`` at times ``time - ell .. time - 1`` (oldest first)."""
    entity: int
    time: int
    snapshots: tuple[tuple[tuple[int, int], ...], ...]

    @property
    def length(self) -> int:
        return len(self.snapshots)

    def is_empty(self) -> bool:
        return not any(self.snapshots)


class TemporalKG:
    """Immutable time-indexed adjacency over a set of quadruples.

    Every distinct quad (s, r, o, t) contributes (r, o) to s's neighbors at t and
    (r + n_relations, s) to o's neighbors at t, so relation ids in the
    index range over ``2 * n_relations``.
    """

    def __init__(self, quads: Iterable[Quadruple], n_entities: int, n_relations: int,
                 vocab: Vocab | None = None):
        self.quads = tuple(deduplicate(quads))
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.vocab = vocab
        index = defaultdict(list)
        for s, r, o, t in self.quads:
            if not (0 <= s < n_entities and 0 <= o < n_entities and 0 <= r < n_relations):
                raise ValueError(f"quad {(s, r, o, t)} has ids outside the vocabulary")
            index[(s, t)].append((r, o))
            index[(o, t)].append((r + n_relations, s))
        self._index = {k: tuple(sorted(v)) for k, v in index.items()}

    @property
    def n_relations_total(self) -> int:
        return 2 * self.n_relations

    def inverse(self, relation: int) -> int:
        return relation + self.n_relations

    def neighbors_at(self, entity: int, time: int) -> list[tuple[int, int]]:
        return list(self._index.get((entity, time), ()))

    def adjacency_size(self) -> int:
        return sum(len(v) for v in self._index.values())

    def temporal_neighborhood(self, entity: int, time: int, ell: int, n_max: int) -> HistoryWindow:
        if ell < 1 or n_max < 1:
            raise ValueError("history length and neighbor cap must be >= 1")
        snaps = []
        for tau in range(time - ell, time):
            pairs = self._index.get((entity, tau), ()) if tau >= 0 else ()
            snaps.append(tuple(pairs[:n_max]))
        return HistoryWindow(entity, time, tuple(snaps))


def neighbors_at(g: TemporalKG, e: int, tau: int) -> list[tuple[int, int]]:
    return g.neighbors_at(e, tau)


def temporal_neighborhood(g: TemporalKG, e: int, t: int, ell: int, n_max: int) -> HistoryWindow:
    return g.temporal_neighborhood(e, t, ell, n_max)


class HistoryProvider:
    """Memoizing ``temporal_neighborhood`` lookups for fixed (ell, n_max)."""

    def __init__(self, graph: TemporalKG, ell: int, n_max: int):
        self.graph = graph
        self.ell = ell
        self.n_max = n_max
        self._cache: dict[tuple[int, int], HistoryWindow] = {}

    def __call__(self, entity: int, time: int) -> HistoryWindow:
        key = (entity, time)
        win = self._cache.get(key)
        if win is None:
            win = self.graph.temporal_neighborhood(entity, time, self.ell, self.n_max)
            self._cache[key] = win
        return win

    def prime(self, windows: Sequence[HistoryWindow]) -> None:
        for w in windows:
            if w.length == self.ell:
                self._cache[(w.entity, w.time)] = w
