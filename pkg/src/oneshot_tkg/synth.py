"""Synthetic event logs with a planted precursor rule.

Sparse relation S_k fires on (a, b, t) exactly when its frequent precursor
relation F_p fired on (a, b, t - lag) and ``a`` belongs to S_k's subject
group. Since the rule is pairwise, a one-hop history of length > lag sees it.
Noise events (uniform relation, pair and time) are added on top.

With the default rates a precursor relation fires ``events_per_tick`` times
per tick (360 events over 360 ticks) and a sparse relation about 90 times,
so the thresholds to use are ``SYNTH_THRESHOLDS`` (20, 150), the (50, 500)
defaults scaled down to a 50-entity log.

Several sparse relations share each precursor (k mod n_frequent_rels), so a
held-out sparse relation usually has a precursor already seen in training.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

SYNTH_THRESHOLDS = (20, 150)


@dataclass(frozen=True)
class SynthSpec:
    n_entities: int = 50
    n_frequent_rels: int = 4
    n_sparse_rels: int = 16
    horizon: int = 360
    precursor_lag: int = 3
    noise_rate: float = 0.05
    seed: int = 0
    history_length: int = 5
    events_per_tick: int = 1
    group_size: int | None = None

    def __post_init__(self):
        if not 0 <= self.noise_rate < 1:
            raise ConfigError("noise_rate must be in [0, 1)")
        if not 1 <= self.precursor_lag < self.history_length:
            raise ConfigError("precursor_lag must be in [1, history_length)")
        if self.n_entities < 2 or self.horizon <= self.precursor_lag:
            raise ConfigError("need >= 2 entities and a horizon longer than the lag")
        if self.n_sparse_rels and not self.n_frequent_rels:
            raise ConfigError("sparse relations need at least one frequent precursor relation")

    @property
    def subject_group_size(self) -> int:
        return self.group_size or max(1, self.n_entities // 4)


def _names(prefix, n):
    width = max(2, len(str(n - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def generate(spec: SynthSpec) -> tuple[list[str], dict]:
    """Event lines (``s\\tr\\to\\tt``, integer ticks) and a ground-truth description."""
    rng = np.random.default_rng(spec.seed)
    ents = _names("e", spec.n_entities)
    freq = _names("F", spec.n_frequent_rels)
    sparse = _names("S", spec.n_sparse_rels)

    precursor = [k % spec.n_frequent_rels for k in range(spec.n_sparse_rels)]
    groups: list[list[int]] = [[] for _ in sparse]
    size = spec.subject_group_size
    for p in range(spec.n_frequent_rels):
        pool: list[int] = []
        for k in (k for k in range(spec.n_sparse_rels) if precursor[k] == p):
            if len(pool) < size:
                pool = [int(e) for e in rng.permutation(spec.n_entities)]
            groups[k] = sorted(pool[:size])
            pool = pool[size:]
    triggered = {}
    for k, p in enumerate(precursor):
        triggered.setdefault(p, []).append(k)

    def pair():
        s = int(rng.integers(spec.n_entities))
        o = int(rng.integers(spec.n_entities - 1))
        return s, o + (o >= s)

    events = []
    for t in range(spec.horizon):
        for p in range(spec.n_frequent_rels):
            for _ in range(spec.events_per_tick):
                s, o = pair()
                events.append((t, ents[s], freq[p], ents[o]))
                if t + spec.precursor_lag < spec.horizon:
                    for k in triggered.get(p, ()):
                        if s in groups[k]:
                            events.append((t + spec.precursor_lag, ents[s], sparse[k], ents[o]))
    relations = freq + sparse
    n_noise = int(round(spec.noise_rate * len(events)))
    for _ in range(n_noise):
        s, o = pair()
        events.append((int(rng.integers(spec.horizon)), ents[s],
                       relations[int(rng.integers(len(relations)))], ents[o]))
    events.sort()
    lines = [f"{s}\t{r}\t{o}\t{t}" for t, s, r, o in events]
    truth = {
        "rule": "S(a, b, t) occurs iff precursor(S)(a, b, t - lag) occurs and a is in group(S)",
        "lag": spec.precursor_lag,
        "noise_events": n_noise,
        "sparse": {sparse[k]: {"precursor": freq[precursor[k]],
                               "subject_group": [ents[e] for e in groups[k]]}
                   for k in range(spec.n_sparse_rels)},
        "spec": asdict(spec),
    }
    return lines, truth


def write_synthetic(spec: SynthSpec, events_path, truth_path=None) -> dict:
    lines, truth = generate(spec)
    with open(events_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(ln + "\n" for ln in lines))
    if truth_path is not None:
        with open(truth_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(truth, fh, indent=1)
            fh.write("\n")
    return truth
