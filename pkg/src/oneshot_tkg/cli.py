"""Command-line entry point: build, train, eval, ablate, margin-sweep, synth.

Exit codes: 0 ok, 2 bad input, 3 infeasible split, 4 archive format, 5 numeric failure.
Errors are reported on stderr as one ``ERR <kind>: <message>`` line.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone

from . import __version__
from .autodiff import load_archive
from .dataset import FrequencyThresholds, load_benchmark
from .encoder import ModelParams
from .errors import ConfigError, InputError, TKGError
from .metrics import evaluate_split
from .pipeline import (ablation_grid, build_benchmark, history_provider, margin_sweep,
                       rows_to_csv)
from .synth import SynthSpec, write_synthetic
from .trainer import TrainConfig, train

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1
ROW_COLUMNS = ["mrr", "hit1", "hit5", "hit10", "per_seed_mrr"]


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def file_digest(path) -> str:
    h = FNV_OFFSET
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h = fnv1a64(chunk, h)
    return f"{h:016x}"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """manifest.json: config, input digests, seeds, version, start/end times.

    Written when the run starts and rewritten by ``finish``.
    """

    def __init__(self, out_dir, command: str, config: dict, inputs, seeds):
        self.path = os.path.join(out_dir, "manifest.json")
        self.doc = {
            "command": command,
            "version": __version__,
            "config": config,
            "inputs": {os.path.basename(p): file_digest(p) for p in inputs},
            "seeds": list(seeds),
            "started": _now(),
            "finished": None,
            "status": "running",
        }
        os.makedirs(out_dir, exist_ok=True)
        self._write()

    def _write(self):
        with open(self.path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.doc, fh, indent=1)
            fh.write("\n")

    def finish(self, status: str = "ok"):
        self.doc["finished"] = _now()
        self.doc["status"] = status
        self._write()


def _data_inputs(data_dir):
    names = ("pretrain.tsv", "fewshot.tsv", "support.tsv", "vocab.json", "split.json", "hist.bin")
    return [os.path.join(data_dir, n) for n in names if os.path.exists(os.path.join(data_dir, n))]


def _require_dir(path):
    if not os.path.isdir(path):
        raise InputError(f"no such benchmark directory: {path}")


def _load_config(path) -> TrainConfig:
    try:
        return TrainConfig.load(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def cmd_build(args) -> int:
    if not os.path.isfile(args.events):
        raise InputError(f"no such events file: {args.events}")
    config = {k: getattr(args, k) for k in ("low", "high", "w", "ell", "nmax", "val", "test",
                                             "train", "seed", "time_format")}
    manifest = RunManifest(args.out, "build", config, [args.events], [args.seed])
    split = build_benchmark(args.events, args.out, FrequencyThresholds(args.low, args.high),
                            args.w, args.ell, args.nmax, args.val, args.test, args.train,
                            args.seed, args.time_format, args.threads)
    tasks = [len(split.relations_of(p)) for p in ("meta_train", "meta_val", "meta_test")]
    print(f"entities={split.n_entities} relations={split.n_relations} "
          f"tasks={tasks[0]}/{tasks[1]}/{tasks[2]} meta_quads={len(split.meta_quads())} "
          f"trainEnd={split.train_end} valEnd={split.val_end} datasetEnd={split.dataset_end}")
    manifest.finish()
    return 0


def cmd_train(args) -> int:
    _require_dir(args.data)
    cfg = _load_config(args.config)
    manifest = RunManifest(args.out, "train", cfg.to_dict(),
                           _data_inputs(args.data) + [args.config], [cfg.seed])
    split = load_benchmark(args.data)
    provider = history_provider(split, cfg.ell, cfg.n_max, args.data)
    every = max(1, cfg.episodes // 20)

    def progress(ep, loss):
        if (ep + 1) % every == 0:
            print(f"episode {ep + 1}/{cfg.episodes} loss {loss:.4f}", flush=True)

    result = train(split, cfg, provider, args.out, progress)
    for rec in result.val_history:
        print(f"val episode {rec['episode']} mrr {rec['mrr']:.4f} hit10 {rec['hit10']:.4f}")
    manifest.finish()
    return 0


def _eval_config(args) -> TrainConfig:
    path = args.config or os.path.join(os.path.dirname(os.path.abspath(args.model)), "config.json")
    if not os.path.exists(path):
        raise InputError(f"no config next to the model and none given: {path}")
    return _load_config(path)


def cmd_eval(args) -> int:
    _require_dir(args.data)
    cfg = _eval_config(args)
    arrays = load_archive(args.model)
    split = load_benchmark(args.data)
    params = ModelParams.from_arrays(arrays, cfg.encoder)
    params.check_compatible(split.n_entities, 2 * split.n_relations)
    provider = history_provider(split, cfg.ell, cfg.n_max, args.data)
    partition = {"val": "meta_val", "test": "meta_test"}[args.split]
    report = evaluate_split(partition, split, params, cfg.encoder, provider, args.support,
                            args.pessimistic, args.bucket_width)
    text = report.to_json(split.vocab)
    if args.out:
        manifest = RunManifest(args.out, "eval", {**cfg.to_dict(), "split": args.split},
                               _data_inputs(args.data) + [args.model], [cfg.seed])
        with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
            fh.write(text)
        with open(os.path.join(args.out, "over_time.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.over_time_csv())
        manifest.finish()
    sys.stdout.write(text)
    return 0


def _grid_config(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    base = doc.get("base", doc)
    return TrainConfig.from_dict(base), doc.get("n_seeds")


def _emit_rows(rows, columns, out_dir, name, manifest):
    text = rows_to_csv(rows, columns)
    if out_dir:
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        manifest.finish()
    sys.stdout.write(text)


def cmd_ablate(args) -> int:
    _require_dir(args.data)
    cfg, grid_seeds = _grid_config(args.grid)
    n_seeds = args.n_seeds or grid_seeds or 5
    seeds = range(cfg.seed, cfg.seed + n_seeds)
    manifest = (RunManifest(args.out, "ablate", cfg.to_dict(), _data_inputs(args.data) + [args.grid],
                            seeds) if args.out else None)
    split = load_benchmark(args.data)
    provider = history_provider(split, cfg.ell, cfg.n_max, args.data)
    rows = ablation_grid(split, cfg, n_seeds, provider)
    _emit_rows(rows, ["mode", "query_mode"] + ROW_COLUMNS, args.out, "ablation.csv", manifest)
    return 0


def _parse_margins(text):
    try:
        margins = [float(m) for m in text.split(",") if m.strip()]
    except ValueError:
        raise ConfigError(f"margins must be a comma-separated list of numbers: {text!r}") from None
    if not margins:
        raise ConfigError("no margins given")
    return margins


def cmd_margin_sweep(args) -> int:
    _require_dir(args.data)
    margins = _parse_margins(args.margins)
    cfg = _load_config(args.config) if args.config else TrainConfig()
    seeds = range(cfg.seed, cfg.seed + args.n_seeds)
    inputs = _data_inputs(args.data) + ([args.config] if args.config else [])
    manifest = (RunManifest(args.out, "margin-sweep", {**cfg.to_dict(), "margins": margins},
                            inputs, seeds) if args.out else None)
    split = load_benchmark(args.data)
    provider = history_provider(split, cfg.ell, cfg.n_max, args.data)
    rows = margin_sweep(split, cfg, margins, args.n_seeds, provider)
    _emit_rows(rows, ["margin"] + ROW_COLUMNS, args.out, "margins.csv", manifest)
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(args.n_entities, args.n_frequent, args.n_sparse, args.horizon, args.lag,
                     args.noise, args.seed, args.history_length)
    os.makedirs(args.out, exist_ok=True)
    truth = write_synthetic(spec, os.path.join(args.out, "events.tsv"),
                            os.path.join(args.out, "truth.json"))
    print(f"wrote {args.out}/events.tsv ({len(truth['sparse'])} sparse relations, "
          f"{truth['noise_events']} noise events)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oneshot-tkg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="construct a one-shot benchmark from an event file")
    b.add_argument("--events", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--low", type=int, default=50)
    b.add_argument("--high", type=int, default=500)
    b.add_argument("--w", type=int, default=120)
    b.add_argument("--ell", type=int, default=20)
    b.add_argument("--nmax", type=int, default=20)
    b.add_argument("--val", type=int, default=5)
    b.add_argument("--test", type=int, default=14)
    b.add_argument("--train", type=int, default=None, help="cap on meta-train relations")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--time-format", choices=("label", "int"), default="label")
    b.add_argument("--threads", type=int, default=1)
    b.set_defaults(func=cmd_build)

    t = sub.add_parser("train", help="episodic training")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True, help="flat JSON training config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="rank a validation or test partition")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--config", default=None, help="defaults to config.json beside the model")
    e.add_argument("--out", default=None)
    e.add_argument("--support", choices=("window", "train"), default="window")
    e.add_argument("--pessimistic", action="store_true", help="count ties against the truth")
    e.add_argument("--bucket-width", type=int, default=7)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="{attention, flat} x {time_dependent, random} grid")
    a.add_argument("--data", required=True)
    a.add_argument("--grid", required=True, help="JSON base config, optionally {'base': ..., 'n_seeds': k}")
    a.add_argument("--out", default=None)
    a.add_argument("--n-seeds", type=int, default=None)
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("margin-sweep", help="train and evaluate once per margin")
    m.add_argument("--data", required=True)
    m.add_argument("--margins", required=True, help="comma-separated, e.g. 1,10,18")
    m.add_argument("--config", default=None)
    m.add_argument("--out", default=None)
    m.add_argument("--n-seeds", type=int, default=5)
    m.set_defaults(func=cmd_margin_sweep)

    s = sub.add_parser("synth", help="write a synthetic event log with a planted rule")
    s.add_argument("--out", required=True)
    s.add_argument("--n-entities", type=int, default=50)
    s.add_argument("--n-frequent", type=int, default=4)
    s.add_argument("--n-sparse", type=int, default=16)
    s.add_argument("--horizon", type=int, default=360)
    s.add_argument("--lag", type=int, default=3)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--history-length", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("ERR ConfigError: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        code = args.func(args)
    except TKGError as exc:
        print(f"ERR {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, UnicodeDecodeError) as exc:
        print(f"ERR InputError: {exc}", file=sys.stderr)
        return 2
    return code


if __name__ == "__main__":
    sys.exit(main())
