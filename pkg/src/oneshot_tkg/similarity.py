"""Residual pair transform and inner-product scoring of support vs. query pairs."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import TemporalKG
from .encoder import EncoderConfig, ModelParams, encode_batch
from .errors import ShapeMismatch


def pair_rep_rows(h: Tensor, params: ModelParams, entities, subj_rows, obj_rows) -> Tensor:
    """Rows [h_s : v_s : h_o : v_o] from a batch of encodings ``h`` (B, out_dim).

    ``entities[i]`` is the entity encoded in row i of ``h``; ``subj_rows`` and
    ``obj_rows`` pick the rows forming each pair.
    """
    entities = np.asarray(entities, dtype=np.int64)
    subj_rows = np.asarray(subj_rows, dtype=np.int64)
    obj_rows = np.asarray(obj_rows, dtype=np.int64)
    emb = params["entity_emb"]
    return ad.concat([
        ad.embedding_lookup(h, subj_rows),
        ad.embedding_lookup(emb, entities[subj_rows]),
        ad.embedding_lookup(h, obj_rows),
        ad.embedding_lookup(emb, entities[obj_rows]),
    ], axis=-1)


def pair_rep(s: int, o: int, t: int, graph: TemporalKG, params: ModelParams,
             cfg: EncoderConfig) -> Tensor:
    windows = [graph.temporal_neighborhood(e, t, cfg.ell, cfg.n_max) for e in (s, o)]
    h = encode_batch(windows, params, cfg)
    return ad.reshape(pair_rep_rows(h, params, [s, o], [0], [1]), (cfg.pair_dim,))


def transform(x: Tensor, params: ModelParams) -> Tensor:
    """W2 relu(W1 x + b1) + b2 + x, applied to the last axis."""
    k = params["sim.W1"].shape[0]
    if x.shape[-1] != k:
        raise ShapeMismatch(f"pair representation has width {x.shape[-1]}, expected {k}")
    hidden = ad.relu(ad.linear(x, params["sim.W1"], params["sim.b1"]))
    return ad.add(ad.linear(hidden, params["sim.W2"], params["sim.b2"]), x)


def score(support: Tensor, query: Tensor, params: ModelParams) -> Tensor:
    """Inner product of the transformed support and query vectors (scalar)."""
    if support.shape != query.shape or support.ndim != 1:
        raise ShapeMismatch(f"score: support {support.shape} vs query {query.shape}")
    return ad.sum(ad.mul(transform(support, params), transform(query, params)))


def score_many(support: Tensor, queries: Tensor, params: ModelParams) -> Tensor:
    """Scores (P,) of P query rows (P, k) against one support vector (k,)."""
    k = support.shape[-1]
    if queries.ndim != 2 or queries.shape[1] != k:
        raise ShapeMismatch(f"score_many: support {support.shape} vs queries {queries.shape}")
    ms = ad.reshape(transform(support, params), (k, 1))
    return ad.reshape(ad.matmul(transform(queries, params), ms), (queries.shape[0],))
