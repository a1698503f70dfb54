"""Entity ranking, MRR / Hit@K, per-relation and over-time reports."""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .core import HistoryProvider, Quadruple, TemporalKG, Vocab, quad_key
from .dataset import MetaSplit
from .encoder import EncoderConfig, ModelParams, encode_batch
from .errors import EmptyPartition, EmptyRankList, NegativeGap
from .similarity import transform

SUPPORT_RULES = ("window", "train")


@dataclass(frozen=True)
class RankResult:
    query: Quadruple
    rank: int
    support_time: int


def rank_from_scores(scores, true_index: int, pessimistic: bool = False) -> int:
    """1 + number of other candidates scoring above the true one.

    Ties count in the true candidate's favour unless ``pessimistic``.
    """
    scores = np.asarray(scores)
    target = scores[true_index]
    beaten = scores >= target if pessimistic else scores > target
    return 1 + int(beaten.sum()) - int(bool(beaten[true_index]))


def mrr(ranks: Sequence[int]) -> float:
    if len(ranks) == 0:
        raise EmptyRankList("MRR of an empty rank list")
    return math.fsum(1.0 / r for r in ranks) / len(ranks)


def hit_at(ranks: Sequence[int], k: int) -> float:
    if len(ranks) == 0:
        raise EmptyRankList("Hit@K of an empty rank list")
    return sum(1 for r in ranks if r <= k) / len(ranks)


def expected_random_mrr(n_candidates: int) -> tuple[float, float]:
    """Mean and standard deviation of 1/rank for a uniformly random rank in 1..n."""
    inv = 1.0 / np.arange(1, n_candidates + 1)
    mean = inv.mean()
    return float(mean), float(np.sqrt((inv ** 2).mean() - mean ** 2))


@dataclass(frozen=True)
class Bucket:
    index: int
    start: int
    end: int
    count: int
    mrr: float
    hit10: float


def over_time(results: Sequence[RankResult], bucket_width: int = 7) -> list[Bucket]:
    """Group results by floor((query time - support time) / bucket_width)."""
    if bucket_width < 1:
        raise ValueError("bucket width must be >= 1")
    groups: dict[int, list[int]] = {}
    for res in results:
        gap = res.query.time - res.support_time
        if gap < 0:
            raise NegativeGap(f"query {tuple(res.query)} precedes its support time {res.support_time}")
        groups.setdefault(gap // bucket_width, []).append(res.rank)
    return [Bucket(b, b * bucket_width, (b + 1) * bucket_width, len(rs), mrr(rs), hit_at(rs, 10))
            for b, rs in sorted(groups.items())]


def _summary(ranks) -> dict:
    if not ranks:
        return {"mrr": 0.0, "hit1": 0.0, "hit5": 0.0, "hit10": 0.0, "count": 0}
    return {"mrr": mrr(ranks), "hit1": hit_at(ranks, 1), "hit5": hit_at(ranks, 5),
            "hit10": hit_at(ranks, 10), "count": len(ranks)}


@dataclass
class MetricsReport:
    mrr: float
    hit1: float
    hit5: float
    hit10: float
    count: int
    per_relation: dict[int, dict] = field(default_factory=dict)
    over_time: list[Bucket] = field(default_factory=list)
    results: list[RankResult] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def from_results(cls, results: Sequence[RankResult], bucket_width: int = 7,
                     warnings: Sequence[str] = ()) -> "MetricsReport":
        per: dict[int, list[int]] = {}
        for res in results:
            per.setdefault(res.query.relation, []).append(res.rank)
        overall = _summary([r.rank for r in results])
        return cls(overall["mrr"], overall["hit1"], overall["hit5"], overall["hit10"],
                   overall["count"], {r: _summary(ranks) for r, ranks in sorted(per.items())},
                   over_time(results, bucket_width), list(results), list(warnings))

    def to_dict(self, vocab: Vocab | None = None) -> dict:
        def rel_name(r):
            return vocab.relations[r] if vocab else str(r)
        return {
            "mrr": self.mrr, "hit1": self.hit1, "hit5": self.hit5, "hit10": self.hit10,
            "count": self.count,
            "per_relation": {rel_name(r): v for r, v in self.per_relation.items()},
            "over_time": [vars(b) for b in self.over_time],
            "warnings": self.warnings,
        }

    def to_json(self, vocab: Vocab | None = None) -> str:
        return json.dumps(self.to_dict(vocab), indent=2) + "\n"

    def over_time_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bucket,start,end,count,mrr,hit10\n")
        for b in self.over_time:
            buf.write(f"{b.index},{b.start},{b.end},{b.count},{b.mrr:.6f},{b.hit10:.6f}\n")
        return buf.getvalue()


class CandidateScorer:
    """Scores every entity as the object of (s, r, ?, t) against one support pair.

    Encodings of all entities are computed once per timestamp and reused,
    so parameters must not change during the scorer's lifetime.
    """

    def __init__(self, params: ModelParams, cfg: EncoderConfig, provider: HistoryProvider):
        self.params = params
        self.cfg = cfg
        self.provider = provider
        self._h: dict[int, np.ndarray] = {}
        self._emb = params["entity_emb"].data

    def encodings(self, t: int) -> np.ndarray:
        h = self._h.get(t)
        if h is None:
            windows = [self.provider(e, t) for e in range(self.params.n_entities)]
            h = self._h[t] = encode_batch(windows, self.params, self.cfg).data
        return h

    def pair_vectors(self, s: int, objects, t: int) -> np.ndarray:
        h = self.encodings(t)
        objects = np.asarray(objects, dtype=np.int64)
        n = len(objects)
        return np.concatenate([np.repeat(h[s][None], n, 0), np.repeat(self._emb[s][None], n, 0),
                               h[objects], self._emb[objects]], axis=1)

    def transformed_support(self, support: Quadruple) -> np.ndarray:
        x = self.pair_vectors(support.subject, [support.object], support.time)
        return transform(ad.Tensor(x), self.params).data[0]

    def scores(self, subject: int, t: int, support_vec: np.ndarray) -> np.ndarray:
        x = self.pair_vectors(subject, np.arange(self.params.n_entities), t)
        return transform(ad.Tensor(x), self.params).data.astype(np.float64) @ support_vec


def rank_query(q: Quadruple, support: Quadruple, params: ModelParams, graph: TemporalKG,
               cfg: EncoderConfig, pessimistic: bool = False,
               scorer: CandidateScorer | None = None) -> RankResult:
    if scorer is None:
        scorer = CandidateScorer(params, cfg, HistoryProvider(graph, cfg.ell, cfg.n_max))
    scores = scorer.scores(q.subject, q.time, scorer.transformed_support(support))
    return RankResult(q, rank_from_scores(scores, q.object, pessimistic), support.time)


def evaluate_split(partition: str, split: MetaSplit, params: ModelParams, cfg: EncoderConfig,
                   provider: HistoryProvider | None = None, support_rule: str = "window",
                   pessimistic: bool = False, bucket_width: int = 7) -> MetricsReport:
    """Rank every non-support quad of every relation in ``partition``.

    ``support_rule='window'`` uses the earliest quad inside the partition's
    window as the one-shot example; ``'train'`` uses the relation's latest
    training-period quad (falling back to 'window' when none exists).
    """
    if support_rule not in SUPPORT_RULES:
        raise ValueError(f"support_rule must be one of {SUPPORT_RULES}")
    relations = split.relations_of(partition)
    if not relations:
        raise EmptyPartition(f"partition {partition!r} has no relations")
    if provider is None:
        provider = HistoryProvider(split.history_graph(), cfg.ell, cfg.n_max)
    scorer = CandidateScorer(params, cfg, provider)
    results, warnings = [], []
    for r in relations:
        quads = sorted(split.task_quads[r], key=quad_key)
        support = split.support_pool.get(r) if support_rule == "train" else None
        if support is None:
            if support_rule == "train":
                warnings.append(f"relation {r}: no training-period support, using window support")
            if not quads:
                warnings.append(f"relation {r}: no quadruples in the {partition} window")
                continue
            support, queries = quads[0], quads[1:]
        else:
            queries = quads
        if not queries:
            warnings.append(f"relation {r}: no rankable queries besides the support")
            continue
        support_vec = scorer.transformed_support(support)
        for q in queries:
            scores = scorer.scores(q.subject, q.time, support_vec)
            results.append(RankResult(q, rank_from_scores(scores, q.object, pessimistic),
                                      support.time))
    if not results:
        warnings.append(f"partition {partition!r} produced no rankable queries")
    return MetricsReport.from_results(results, bucket_width, warnings)
