"""End-to-end routines shared by the CLI, the estimator and the tests."""
from __future__ import annotations

import dataclasses
import os
from statistics import fmean

from .core import HistoryProvider, deduplicate, read_events
from .dataset import (FrequencyThresholds, MetaSplit, build_split, load_benchmark,
                      read_history_cache, split_by_frequency, write_benchmark)
from .metrics import MetricsReport, evaluate_split
from .trainer import TrainConfig, TrainResult, train


def build_benchmark(events_path, out_dir, thresholds=FrequencyThresholds(), w: int = 120,
                    ell: int = 20, n_max: int = 20, n_val: int = 5, n_test: int = 14,
                    n_train: int | None = None, seed: int = 0, time_format: str = "label",
                    workers: int = 1) -> MetaSplit:
    quads, vocab = read_events(events_path, time_format)
    quads = deduplicate(quads)
    _, sparse, _ = split_by_frequency(quads, thresholds)
    split = build_split(quads, thresholds, w, n_val, n_test, seed, n_train, vocab=vocab)
    write_benchmark(split, out_dir, ell, n_max, workers, sparse_count=len(sparse))
    return split


def history_provider(split: MetaSplit, ell: int, n_max: int, data_dir=None) -> HistoryProvider:
    """Provider over the split's history graph, primed from ``hist.bin`` when it matches."""
    provider = HistoryProvider(split.history_graph(), ell, n_max)
    path = os.path.join(data_dir, "hist.bin") if data_dir else None
    if path and os.path.exists(path):
        cache = read_history_cache(path, split.meta_quads())
        if (cache.ell, cache.n_max) == (ell, n_max):
            provider.prime([w for pair in cache.records for w in pair])
    return provider


def load_split_and_provider(data_dir, cfg: TrainConfig):
    split = load_benchmark(data_dir)
    return split, history_provider(split, cfg.ell, cfg.n_max, data_dir)


def train_and_evaluate(split: MetaSplit, cfg: TrainConfig, partition: str = "meta_test",
                       provider: HistoryProvider | None = None,
                       out_dir=None) -> tuple[TrainResult, MetricsReport]:
    """Train, then evaluate the validation-selected parameters on ``partition``."""
    if provider is None:
        provider = HistoryProvider(split.history_graph(), cfg.ell, cfg.n_max)
    result = train(split, cfg, provider, out_dir)
    report = evaluate_split(partition, split, result.best_params, cfg.encoder, provider,
                            cfg.support_rule, bucket_width=cfg.bucket_width)
    return result, report


def seed_runs(split: MetaSplit, cfg: TrainConfig, n_seeds: int,
              provider: HistoryProvider | None = None, partition: str = "meta_test"):
    """Train+evaluate with seeds cfg.seed .. cfg.seed + n_seeds - 1."""
    if provider is None:
        provider = HistoryProvider(split.history_graph(), cfg.ell, cfg.n_max)
    runs = []
    for seed in range(cfg.seed, cfg.seed + n_seeds):
        run_cfg = dataclasses.replace(cfg, seed=seed)
        result, report = train_and_evaluate(split, run_cfg, partition, provider)
        runs.append((seed, result, report))
    return runs


def _row(runs, **extra) -> dict:
    reports = [rep for _, _, rep in runs]
    row = dict(extra)
    row["seeds"] = [seed for seed, _, _ in runs]
    for key in ("mrr", "hit1", "hit5", "hit10"):
        row[key] = fmean(getattr(r, key) for r in reports)
    row["per_seed_mrr"] = [r.mrr for r in reports]
    return row


def ablation_grid(split: MetaSplit, base: TrainConfig, n_seeds: int = 5,
                  provider: HistoryProvider | None = None) -> list[dict]:
    """Seed-averaged test metrics for {attention, flat} x {time_dependent, random}."""
    if provider is None:
        provider = HistoryProvider(split.history_graph(), base.ell, base.n_max)
    rows = []
    for mode in ("attention", "flat"):
        for query_mode in ("time_dependent", "random"):
            cfg = dataclasses.replace(base, mode=mode, query_mode=query_mode)
            rows.append(_row(seed_runs(split, cfg, n_seeds, provider), mode=mode,
                             query_mode=query_mode))
    return rows


def margin_sweep(split: MetaSplit, base: TrainConfig, margins, n_seeds: int = 5,
                 provider: HistoryProvider | None = None) -> list[dict]:
    if provider is None:
        provider = HistoryProvider(split.history_graph(), base.ell, base.n_max)
    return [_row(seed_runs(split, dataclasses.replace(base, margin=float(m)), n_seeds, provider),
                 margin=float(m)) for m in margins]


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for c in columns:
            v = row[c]
            if isinstance(v, float):
                cells.append(f"{v:.6f}")
            elif isinstance(v, list):
                cells.append(" ".join(f"{x:.6f}" if isinstance(x, float) else str(x) for x in v))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
