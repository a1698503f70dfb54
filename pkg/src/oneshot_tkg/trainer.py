"""Episodic training: one sparse relation per episode, one support quad,
time-constrained positives, corrupted negatives, hinge loss, Adam."""
from __future__ import annotations

import bisect
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, adam_step, save_archive
from .core import HistoryProvider, Quadruple, quad_key
from .dataset import MetaSplit
from .encoder import EncoderConfig, ModelParams, encode_batch
from .errors import ConfigError, NoFeasibleTask, NonFiniteLoss
from .metrics import evaluate_split
from .similarity import pair_rep_rows, transform

QUERY_MODES = ("time_dependent", "random")
CORRUPT_MODES = ("object", "both")


@dataclass
class TrainConfig:
    # encoder
    d: int = 50
    ell: int = 20
    n_max: int = 20
    n_heads: int = 4
    n_layers: int = 1
    d_inner: int = 256
    mode: str = "attention"
    # training
    margin: float = 10.0
    learning_rate: float = 1e-3
    episodes: int = 1000
    m_queries: int = 32
    neg_per_pos: int = 1
    query_mode: str = "time_dependent"
    w: int = 120
    seed: int = 0
    corrupt: str = "object"
    eval_every: int = 250
    checkpoint_every: int = 0
    # evaluation
    support_rule: str = "window"
    bucket_width: int = 7

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if self.m_queries < 1 or self.neg_per_pos < 1:
            raise ConfigError("m_queries and neg_per_pos must be >= 1")
        if self.w < 1:
            raise ConfigError("w must be >= 1")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if self.query_mode not in QUERY_MODES:
            raise ConfigError(f"query_mode must be one of {QUERY_MODES}")
        if self.corrupt not in CORRUPT_MODES:
            raise ConfigError(f"corrupt must be one of {CORRUPT_MODES}")
        self.encoder  # validates the encoder fields

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.d, self.ell, self.n_max, self.n_heads, self.n_layers,
                             self.d_inner, self.mode)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


@dataclass
class Episode:
    relation: int
    support: Quadruple
    positives: list[Quadruple]
    negatives: list[Quadruple]


def corrupt(pos: Quadruple, n_entities: int, rng: np.random.Generator,
            both_sides: bool = False) -> Quadruple:
    """Replace the object (or, with ``both_sides``, subject or object) by a different
    uniformly drawn entity."""
    if n_entities < 2:
        raise ValueError("corruption needs at least two entities")
    subject_slot = both_sides and rng.random() < 0.5
    true = pos.subject if subject_slot else pos.object
    k = int(rng.integers(n_entities - 1))
    if k >= true:
        k += 1
    return pos._replace(subject=k) if subject_slot else pos._replace(object=k)


def hinge_loss(score_pos, score_neg, margin: float):
    """max(score_neg - score_pos + margin, 0); elementwise for tensors."""
    if isinstance(score_pos, ad.Tensor) or isinstance(score_neg, ad.Tensor):
        return ad.max_with_zero(ad.add(ad.sub(score_neg, score_pos), margin))
    return max(score_neg - score_pos + margin, 0.0)


class EpisodeSampler:
    """Draws episodes from the meta-train relations of a split.

    A relation is eligible when it has a feasible support: under
    ``time_dependent`` a quad with another quad of the relation inside
    [t0, t0 + w]; under ``random`` any quad of a relation with >= 2 quads.
    """

    def __init__(self, split: MetaSplit, cfg: TrainConfig):
        self.cfg = cfg
        self.n_entities = split.n_entities
        self.quads: dict[int, list[Quadruple]] = {}
        self.times: dict[int, list[int]] = {}
        self.feasible: dict[int, list[int]] = {}
        for r in split.relations_of("meta_train"):
            qs = sorted(split.task_quads[r], key=quad_key)
            ts = [q.time for q in qs]
            if cfg.query_mode == "time_dependent":
                ok = [i for i, t in enumerate(ts)
                      if bisect.bisect_right(ts, t + cfg.w) - bisect.bisect_left(ts, t) > 1]
            else:
                ok = list(range(len(qs))) if len(qs) >= 2 else []
            if ok:
                self.quads[r], self.times[r], self.feasible[r] = qs, ts, ok
        self.relations = sorted(self.feasible)
        if not self.relations:
            raise NoFeasibleTask("no meta-train relation admits a support and a query")

    def candidates(self, relation: int, support_index: int) -> list[int]:
        ts = self.times[relation]
        if self.cfg.query_mode == "time_dependent":
            t0 = ts[support_index]
            lo, hi = bisect.bisect_left(ts, t0), bisect.bisect_right(ts, t0 + self.cfg.w)
            span = range(lo, hi)
        else:
            span = range(len(ts))
        return [i for i in span if i != support_index]

    def sample(self, rng: np.random.Generator) -> Episode:
        r = self.relations[int(rng.integers(len(self.relations)))]
        ok = self.feasible[r]
        si = ok[int(rng.integers(len(ok)))]
        cands = self.candidates(r, si)
        take = rng.choice(len(cands), size=min(self.cfg.m_queries, len(cands)), replace=False)
        qs = self.quads[r]
        positives = [qs[cands[int(i)]] for i in take]
        both = self.cfg.corrupt == "both"
        negatives = [corrupt(p, self.n_entities, rng, both)
                     for p in positives for _ in range(self.cfg.neg_per_pos)]
        return Episode(r, qs[si], positives, negatives)


def sample_episode(split: MetaSplit, cfg: TrainConfig, rng: np.random.Generator) -> Episode:
    return EpisodeSampler(split, cfg).sample(rng)


def episode_scores(episode: Episode, params: ModelParams, cfg: EncoderConfig,
                   provider: HistoryProvider):
    """Tensors (positive scores (P,), negative scores (P * k,)) for one episode."""
    rows: dict[tuple[int, int], int] = {}
    windows = []

    def row(entity, t):
        key = (entity, t)
        if key not in rows:
            rows[key] = len(windows)
            windows.append(provider(entity, t))
        return rows[key]

    pairs = [episode.support] + episode.positives + episode.negatives
    subj = [row(q.subject, q.time) for q in pairs]
    obj = [row(q.object, q.time) for q in pairs]
    h = encode_batch(windows, params, cfg)
    entities = [w.entity for w in windows]
    m = transform(pair_rep_rows(h, params, entities, subj, obj), params)
    n = len(pairs)
    support = ad.transpose(ad.take_slice(m, 0, 1, axis=0))
    scores = ad.reshape(ad.matmul(ad.take_slice(m, 1, n, axis=0), support), (n - 1,))
    n_pos = len(episode.positives)
    return ad.take_slice(scores, 0, n_pos, axis=0), ad.take_slice(scores, n_pos, n - 1, axis=0)


def episode_loss(episode: Episode, params: ModelParams, cfg: EncoderConfig,
                 provider: HistoryProvider, margin: float) -> ad.Tensor:
    """Mean hinge loss over (positive, its negatives) pairs."""
    pos, neg = episode_scores(episode, params, cfg, provider)
    k = len(episode.negatives) // len(episode.positives)
    pos_rep = ad.embedding_lookup(ad.reshape(pos, (pos.shape[0], 1)),
                                  np.repeat(np.arange(pos.shape[0]), k))
    return ad.mean(hinge_loss(pos_rep, ad.reshape(neg, (neg.shape[0], 1)), margin))


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    best_val_mrr: float | None
    log: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)


def train(split: MetaSplit, cfg: TrainConfig, provider: HistoryProvider | None = None,
          out_dir=None, progress=None) -> TrainResult:
    """Run ``cfg.episodes`` episodes of hinge-loss training with Adam.

    Every ``eval_every`` episodes (and once at the end) the model is scored
    on meta_val; the best-MRR parameters are kept in ``best_params``. With
    ``out_dir`` the log, periodic checkpoints, ``best.tkgt`` and
    ``final.tkgt`` are written there.
    """
    enc = cfg.encoder
    if provider is None:
        provider = HistoryProvider(split.history_graph(), enc.ell, enc.n_max)
    init_seed, sample_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    params = ModelParams.init(enc, split.n_entities, 2 * split.n_relations,
                              int(init_seed.generate_state(1)[0]))
    rng = np.random.default_rng(sample_seed)
    state = AdamState(lr=cfg.learning_rate)
    sampler = EpisodeSampler(split, cfg) if cfg.episodes else None
    has_val = bool(split.relations_of("meta_val")) and cfg.eval_every > 0
    names = split.vocab.relations if split.vocab else None
    result = TrainResult(params, params, None)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def validate(episode):
        report = evaluate_split("meta_val", split, params, enc, provider, cfg.support_rule,
                                bucket_width=cfg.bucket_width)
        result.val_history.append({"episode": episode, "mrr": report.mrr, "hit10": report.hit10,
                                   "count": report.count})
        if report.count and (result.best_val_mrr is None or report.mrr > result.best_val_mrr):
            result.best_val_mrr = report.mrr
            result.best_params = params.copy()

    for ep in range(cfg.episodes):
        episode = sampler.sample(rng)
        params.zero_grad()
        with Tape():
            loss = episode_loss(episode, params, enc, provider, cfg.margin)
            ad.backward(loss)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(ep, value)
        adam_step(params.tensors, params.grads(), state)
        rel = names[episode.relation] if names else episode.relation
        result.log.append({"episode": ep, "relation": rel, "loss": value})
        if progress is not None:
            progress(ep, value)
        if has_val and (ep + 1) % cfg.eval_every == 0:
            validate(ep + 1)
        if out_dir and cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
            save_archive(os.path.join(out_dir, f"checkpoint_{ep + 1}.tkgt"), params.to_arrays())
    if has_val and cfg.episodes and cfg.episodes % cfg.eval_every:
        validate(cfg.episodes)
    if result.best_val_mrr is None:
        result.best_params = params
    if out_dir:
        write_log(os.path.join(out_dir, "train_log.jsonl"), result.log)
        save_archive(os.path.join(out_dir, "final.tkgt"), params.to_arrays())
        save_archive(os.path.join(out_dir, "best.tkgt"), result.best_params.to_arrays())
        cfg.save(os.path.join(out_dir, "config.json"))
    return result


def write_log(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
