"""One-shot benchmark construction from a deduplicated event log.

Pipeline: frequency split -> time windows -> relation partition -> files.
Val/test task quads are restricted to their own time window; meta-train
quads must precede the validation window. Neighbor histories only see
background and meta-train edges.
"""
from __future__ import annotations

import json
import os
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (HistoryWindow, Quadruple, TemporalKG, Vocab, deduplicate, quad_key,
                   read_quads, write_quads)
from .errors import ArchiveFormatError, EmptySparseSet, InfeasiblePartition, SpanTooShort

PARTITIONS = ("meta_train", "meta_val", "meta_test")
HIST_MAGIC = b"TKGH1\n"


@dataclass(frozen=True)
class FrequencyThresholds:
    low: int = 50
    high: int = 500

    def __post_init__(self):
        if not 0 < self.low < self.high:
            raise ValueError(f"need 0 < low < high, got low={self.low} high={self.high}")


def relation_counts(quads: Sequence[Quadruple]) -> Counter:
    return Counter(q.relation for q in quads)


def split_by_frequency(quads, th: FrequencyThresholds):
    """Return (background, sparse, dropped) quads by relation frequency.

    Relations seen more than ``th.high`` times are background, those in
    ``[th.low, th.high]`` are sparse (task) relations, the rest are dropped.
    """
    counts = relation_counts(quads)
    background, sparse, dropped = [], [], []
    for q in quads:
        c = counts[q.relation]
        if c > th.high:
            background.append(q)
        elif c >= th.low:
            sparse.append(q)
        else:
            dropped.append(q)
    if not sparse:
        raise EmptySparseSet(
            f"no relation has frequency in [{th.low}, {th.high}] "
            f"(counts range {min(counts.values(), default=0)}..{max(counts.values(), default=0)})")
    return background, sparse, dropped


def cut_time_windows(quads, w: int) -> tuple[int, int, int]:
    """(trainEnd, valEnd, datasetEnd) with val and test windows each ``w`` ticks wide."""
    if w < 1:
        raise ValueError("episode length must be >= 1")
    times = [q.time for q in quads]
    if not times:
        raise SpanTooShort("no quadruples")
    start, dataset_end = min(times), max(times) + 1
    if dataset_end - start <= 2 * w:
        raise SpanTooShort(f"time span {dataset_end - start} is not longer than 2*w = {2 * w}")
    val_end = dataset_end - w
    return val_end - w, val_end, dataset_end


def _window(partition, train_end, val_end, dataset_end):
    if partition == "meta_train":
        return (-1, train_end)
    if partition == "meta_val":
        return (train_end, val_end)
    return (val_end, dataset_end)


def assign_meta_partitions(quads_by_relation: dict[int, list[Quadruple]], n_val: int, n_test: int,
                           windows: tuple[int, int, int], seed: int = 0,
                           n_train: int | None = None) -> dict[int, str]:
    """Seeded assignment of sparse relations to meta_train/meta_val/meta_test.

    ``n_train=None`` puts every remaining relation in meta_train. A val/test
    relation without any quad in its window is swapped with the lowest-id
    meta_train relation that has one.
    """
    relations = sorted(quads_by_relation)
    need = n_val + n_test + (0 if n_train is None else n_train)
    if n_val < 0 or n_test < 0 or (n_train is not None and n_train < 0):
        raise ValueError("partition sizes must be non-negative")
    if need > len(relations):
        raise InfeasiblePartition(f"requested {need} task relations but only {len(relations)} are sparse")
    order = [relations[i] for i in np.random.default_rng(seed).permutation(len(relations))]
    val, test = order[:n_val], order[n_val:n_val + n_test]
    rest = order[n_val + n_test:]
    train = rest if n_train is None else rest[:n_train]
    train_end, val_end, dataset_end = windows

    def occupied(r, part):
        lo, hi = _window(part, train_end, val_end, dataset_end)
        return any(lo <= q.time < hi for q in quads_by_relation[r])

    for group, part in ((val, "meta_val"), (test, "meta_test")):
        for i, r in enumerate(group):
            if occupied(r, part):
                continue
            swap = next((c for c in sorted(train) if occupied(c, part)), None)
            if swap is None:
                raise InfeasiblePartition(f"no relation has quads in the {part} window to replace "
                                          f"relation {r}")
            train[train.index(swap)] = r
            group[i] = swap
    partition = {r: "meta_train" for r in train}
    partition.update({r: "meta_val" for r in val})
    partition.update({r: "meta_test" for r in test})
    return dict(sorted(partition.items()))


@dataclass
class MetaSplit:
    background: list[Quadruple]
    task_quads: dict[int, list[Quadruple]]
    partition: dict[int, str]
    train_end: int
    val_end: int
    dataset_end: int
    w: int
    n_entities: int
    n_relations: int
    vocab: Vocab | None = None
    # latest pre-trainEnd quad of each val/test relation (training-period support)
    support_pool: dict[int, Quadruple] = field(default_factory=dict)

    def relations_of(self, partition: str) -> list[int]:
        return [r for r, p in self.partition.items() if p == partition]

    def quads_of(self, partition: str) -> list[Quadruple]:
        out = [q for r in self.relations_of(partition) for q in self.task_quads[r]]
        return sorted(out, key=quad_key)

    def meta_quads(self) -> list[Quadruple]:
        """All task quads in file order (canonical sort)."""
        return sorted((q for qs in self.task_quads.values() for q in qs), key=quad_key)

    def window(self, partition: str) -> tuple[int, int]:
        lo, hi = _window(partition, self.train_end, self.val_end, self.dataset_end)
        return max(lo, 0), hi

    def history_graph(self) -> TemporalKG:
        """Edges visible to neighbor histories: background plus meta-train quads."""
        edges = list(self.background) + self.quads_of("meta_train")
        return TemporalKG(edges, self.n_entities, self.n_relations, self.vocab)


def build_split(quads, thresholds: FrequencyThresholds, w: int, n_val: int, n_test: int,
                seed: int = 0, n_train: int | None = None, n_entities: int | None = None,
                n_relations: int | None = None, vocab: Vocab | None = None) -> MetaSplit:
    quads = deduplicate(quads)
    if n_entities is None:
        n_entities = vocab.n_entities if vocab else 1 + max(max(q.subject, q.object) for q in quads)
    if n_relations is None:
        n_relations = vocab.n_relations if vocab else 1 + max(q.relation for q in quads)
    background, sparse, _ = split_by_frequency(quads, thresholds)
    windows = cut_time_windows(quads, w)
    by_rel: dict[int, list[Quadruple]] = {}
    for q in sparse:
        by_rel.setdefault(q.relation, []).append(q)
    partition = assign_meta_partitions(by_rel, n_val, n_test, windows, seed, n_train)
    train_end, val_end, dataset_end = windows
    task_quads, pool = {}, {}
    for r, part in partition.items():
        lo, hi = _window(part, *windows)
        task_quads[r] = [q for q in by_rel[r] if lo <= q.time < hi]
        if part != "meta_train":
            before = [q for q in by_rel[r] if q.time < train_end]
            if before:
                pool[r] = max(before, key=quad_key)
    return MetaSplit(background, task_quads, partition, train_end, val_end, dataset_end, w,
                     n_entities, n_relations, vocab, pool)


@dataclass
class HistoryCache:
    ell: int
    n_max: int
    records: list[tuple[HistoryWindow, HistoryWindow]]


def build_history_cache(split: MetaSplit, ell: int, n_max: int, workers: int = 1) -> HistoryCache:
    graph = split.history_graph()

    def record(q):
        return (graph.temporal_neighborhood(q.subject, q.time, ell, n_max),
                graph.temporal_neighborhood(q.object, q.time, ell, n_max))

    quads = split.meta_quads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(record, quads))
    else:
        records = [record(q) for q in quads]
    return HistoryCache(ell, n_max, records)


def write_history_cache(path, cache: HistoryCache) -> None:
    chunks = [HIST_MAGIC, struct.pack("<3I", len(cache.records), cache.ell, cache.n_max)]
    for pair in cache.records:
        for window in pair:
            for snap in window.snapshots:
                chunks.append(struct.pack("<I", len(snap)))
                if snap:
                    chunks.append(struct.pack(f"<{2 * len(snap)}I", *(x for p in snap for x in p)))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_history_cache(path, meta_quads: Sequence[Quadruple]) -> HistoryCache:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(HIST_MAGIC):
        raise ArchiveFormatError(f"{path}: bad history-cache magic")
    pos = len(HIST_MAGIC)
    count, ell, n_max = struct.unpack_from("<3I", data, pos)
    pos += 12
    if count != len(meta_quads):
        raise ArchiveFormatError(f"{path}: {count} records for {len(meta_quads)} meta quadruples")
    records = []
    for q in meta_quads:
        pair = []
        for entity in (q.subject, q.object):
            snaps = []
            for _ in range(ell):
                (n,) = struct.unpack_from("<I", data, pos)
                pos += 4
                flat = struct.unpack_from(f"<{2 * n}I", data, pos)
                pos += 8 * n
                snaps.append(tuple(zip(flat[0::2], flat[1::2])))
            pair.append(HistoryWindow(entity, q.time, tuple(snaps)))
        records.append(tuple(pair))
    if pos != len(data):
        raise ArchiveFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return HistoryCache(ell, n_max, records)


def split_stats(split: MetaSplit, sparse_count: int | None = None) -> dict:
    meta = split.meta_quads()
    task_rels = set(split.partition)
    bg_rels = {q.relation for q in split.background}
    return {
        "entities_total": split.n_entities,
        "entities_in_meta": len({e for q in meta for e in (q.subject, q.object)}),
        "relations_background": len(bg_rels),
        "relations_task": len(task_rels),
        "relations_used": len(bg_rels | task_rels),
        "tasks": [len(split.relations_of(p)) for p in PARTITIONS],
        "background_quads": len(split.background),
        "sparse_quads": sparse_count,
        "meta_quads": len(meta),
    }


def write_benchmark(split: MetaSplit, out_dir, ell: int, n_max: int, workers: int = 1,
                    sparse_count: int | None = None) -> None:
    """Write pretrain.tsv, fewshot.tsv, support.tsv, vocab.json, split.json, stats.json, hist.bin."""
    vocab = split.vocab
    if vocab is None:
        raise ValueError("writing a benchmark needs the split's vocabulary")
    os.makedirs(out_dir, exist_ok=True)
    meta = split.meta_quads()
    line_of = {q: i for i, q in enumerate(meta)}
    write_quads(os.path.join(out_dir, "pretrain.tsv"), sorted(split.background, key=quad_key), vocab)
    write_quads(os.path.join(out_dir, "fewshot.tsv"), meta, vocab)
    write_quads(os.path.join(out_dir, "support.tsv"),
                [split.support_pool[r] for r in sorted(split.support_pool)], vocab)
    vocab.save(os.path.join(out_dir, "vocab.json"))
    doc = {"trainEnd": split.train_end, "valEnd": split.val_end,
           "datasetEnd": split.dataset_end, "w": split.w}
    for r, part in split.partition.items():
        doc[vocab.relations[r]] = {"partition": part,
                                   "lines": [line_of[q] for q in split.task_quads[r]]}
    _write_json(os.path.join(out_dir, "split.json"), doc)
    _write_json(os.path.join(out_dir, "stats.json"), split_stats(split, sparse_count))
    write_history_cache(os.path.join(out_dir, "hist.bin"),
                        build_history_cache(split, ell, n_max, workers))


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, ensure_ascii=False)
        fh.write("\n")


_BOUNDARY_KEYS = ("trainEnd", "valEnd", "datasetEnd", "w")


def load_benchmark(data_dir) -> MetaSplit:
    vocab = Vocab.load(os.path.join(data_dir, "vocab.json"))
    background = read_quads(os.path.join(data_dir, "pretrain.tsv"), vocab)
    meta = read_quads(os.path.join(data_dir, "fewshot.tsv"), vocab)
    support_path = os.path.join(data_dir, "support.tsv")
    pool_quads = read_quads(support_path, vocab) if os.path.exists(support_path) else []
    with open(os.path.join(data_dir, "split.json"), encoding="utf-8") as fh:
        doc = json.load(fh)
    task_quads, partition = {}, {}
    for name, entry in doc.items():
        if name in _BOUNDARY_KEYS:
            continue
        r = vocab.relation_id(name)
        partition[r] = entry["partition"]
        task_quads[r] = [meta[i] for i in entry["lines"]]
    return MetaSplit(background, task_quads, dict(sorted(partition.items())), doc["trainEnd"],
                     doc["valEnd"], doc["datasetEnd"], doc["w"], vocab.n_entities,
                     vocab.n_relations, vocab, {q.relation: q for q in pool_quads})
