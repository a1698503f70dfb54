from collections import Counter

import pytest

from oneshot_tkg.dataset import FrequencyThresholds
from oneshot_tkg.errors import ConfigError, EmptySparseSet
from oneshot_tkg.pipeline import build_benchmark
from oneshot_tkg.synth import SYNTH_THRESHOLDS, SynthSpec, generate, write_synthetic


def parse(lines):
    return [(s, r, o, int(t)) for s, r, o, t in (ln.split("\t") for ln in lines)]


def test_noise_free_rule_holds_exactly():
    spec = SynthSpec(noise_rate=0.0, seed=4)
    events = parse(generate(spec)[0])
    _, truth = generate(spec)
    present = set(events)
    for s, r, o, t in events:
        if r.startswith("S"):
            info = truth["sparse"][r]
            assert (s, info["precursor"], o, t - spec.precursor_lag) in present
            assert s in info["subject_group"]
    # and the converse: every eligible precursor event fires its sparse relation
    for name, info in truth["sparse"].items():
        group = set(info["subject_group"])
        for s, r, o, t in events:
            if r == info["precursor"] and s in group and t + spec.precursor_lag < spec.horizon:
                assert (s, name, o, t + spec.precursor_lag) in present


def test_counts_fall_in_threshold_bands():
    lines, _ = generate(SynthSpec())
    counts = Counter(r for _, r, _, _ in parse(lines))
    low, high = SYNTH_THRESHOLDS
    assert all(c > high for r, c in counts.items() if r.startswith("F"))
    assert all(low <= c <= high for r, c in counts.items() if r.startswith("S"))
    assert sum(r.startswith("S") for r in counts) == 16


def test_noise_volume():
    lines, truth = generate(SynthSpec(noise_rate=0.05))
    clean, _ = generate(SynthSpec(noise_rate=0.0))
    assert len(lines) - len(clean) == truth["noise_events"]
    assert truth["noise_events"] == round(0.05 * len(clean))


def test_seeded_generation_is_deterministic():
    assert generate(SynthSpec(seed=9)) == generate(SynthSpec(seed=9))
    assert generate(SynthSpec(seed=9))[0] != generate(SynthSpec(seed=10))[0]


@pytest.mark.parametrize("kwargs", [dict(noise_rate=1.0), dict(precursor_lag=5),
                                    dict(n_entities=1), dict(n_frequent_rels=0)])
def test_generator_settings_validation(kwargs):
    with pytest.raises(ConfigError):
        SynthSpec(**kwargs)


def test_no_sparse_relations_is_infeasible(tmp_path):
    events = tmp_path / "ev.tsv"
    write_synthetic(SynthSpec(n_sparse_rels=0), events)
    with pytest.raises(EmptySparseSet) as info:
        build_benchmark(events, tmp_path / "out", FrequencyThresholds(*SYNTH_THRESHOLDS), w=60,
                        ell=5, n_max=8, n_val=1, n_test=1, time_format="int")
    assert info.value.exit_code == 3
