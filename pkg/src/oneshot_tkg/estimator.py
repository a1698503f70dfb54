"""scikit-learn style wrapper around training, encoding and ranking."""
from __future__ import annotations

import os
from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import load_archive
from .dataset import MetaSplit, load_benchmark
from .encoder import ModelParams, encode_batch
from .metrics import CandidateScorer, mrr, rank_from_scores
from .pipeline import history_provider
from .trainer import TrainConfig, train
from .validation import check_entity_times, check_quads, check_support


class OneShotLinkPredictor(BaseEstimator):
    """One-shot object prediction for sparse relations of a temporal KG.

    ``fit`` takes a :class:`MetaSplit` or a benchmark directory. After
    fitting, ``transform`` maps (entity, time) rows to history encodings,
    ``predict`` returns the best object for (subject, time) rows given one
    support quadruple and ``score`` returns the MRR of quadruples ranked
    against that support.
    """

    def __init__(self, d=50, ell=20, n_max=20, n_heads=4, n_layers=1, d_inner=256,
                 mode="attention", margin=10.0, learning_rate=1e-3, episodes=1000,
                 m_queries=32, neg_per_pos=1, query_mode="time_dependent", w=120, seed=0,
                 corrupt="object", eval_every=250, checkpoint_every=0, support_rule="window",
                 bucket_width=7):
        self.d = d
        self.ell = ell
        self.n_max = n_max
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.d_inner = d_inner
        self.mode = mode
        self.margin = margin
        self.learning_rate = learning_rate
        self.episodes = episodes
        self.m_queries = m_queries
        self.neg_per_pos = neg_per_pos
        self.query_mode = query_mode
        self.w = w
        self.seed = seed
        self.corrupt = corrupt
        self.eval_every = eval_every
        self.checkpoint_every = checkpoint_every
        self.support_rule = support_rule
        self.bucket_width = bucket_width

    def _config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def _load_split(self, X):
        if isinstance(X, MetaSplit):
            return X, None
        if isinstance(X, (str, os.PathLike)):
            return load_benchmark(X), X
        raise TypeError("X must be a MetaSplit or a benchmark directory")

    def fit(self, X, y=None):
        cfg = self._config()
        split, data_dir = self._load_split(X)
        self.split_ = split
        self.config_ = cfg
        self.provider_ = history_provider(split, cfg.ell, cfg.n_max, data_dir)
        result = train(split, cfg, self.provider_)
        self.params_ = result.best_params
        self.final_params_ = result.params
        self.best_val_mrr_ = result.best_val_mrr
        self.loss_curve_ = [rec["loss"] for rec in result.log]
        self.n_entities_ = split.n_entities
        return self

    def load(self, X, model_path):
        """Attach a saved parameter archive instead of training."""
        cfg = self._config()
        split, data_dir = self._load_split(X)
        params = ModelParams.from_arrays(load_archive(model_path), cfg.encoder)
        params.check_compatible(split.n_entities, 2 * split.n_relations)
        self.split_, self.config_, self.params_ = split, cfg, params
        self.provider_ = history_provider(split, cfg.ell, cfg.n_max, data_dir)
        self.n_entities_ = split.n_entities
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        rows = check_entity_times(X, self.n_entities_)
        windows = [self.provider_(int(e), int(t)) for e, t in rows]
        return encode_batch(windows, self.params_, self.config_.encoder).data.copy()

    def _scorer(self):
        return CandidateScorer(self.params_, self.config_.encoder, self.provider_)

    def decision_function(self, X, support):
        """Scores (n, n_entities) of every candidate object for (subject, time) rows."""
        check_is_fitted(self, "params_")
        rows = check_entity_times(X, self.n_entities_)
        sup = check_support(support, self.n_entities_, 2 * self.split_.n_relations)
        scorer = self._scorer()
        vec = scorer.transformed_support(sup)
        return np.stack([scorer.scores(int(s), int(t), vec) for s, t in rows])

    def predict(self, X, support):
        return np.argmax(self.decision_function(X, support), axis=1)

    def score(self, X, support, pessimistic=False):
        """MRR of the true objects of quadruples ``X`` ranked against ``support``."""
        check_is_fitted(self, "params_")
        quads = check_quads(X, self.n_entities_, 2 * self.split_.n_relations)
        sup = check_support(support, self.n_entities_, 2 * self.split_.n_relations)
        scorer = self._scorer()
        vec = scorer.transformed_support(sup)
        ranks = [rank_from_scores(scorer.scores(q.subject, q.time, vec), q.object, pessimistic)
                 for q in quads]
        return mrr(ranks)

    def save(self, path):
        check_is_fitted(self, "params_")
        ad.save_archive(path, self.params_.to_arrays())
