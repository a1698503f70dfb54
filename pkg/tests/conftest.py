import os

import numpy as np
import pytest

from oneshot_tkg import autodiff as ad
from oneshot_tkg.autodiff import Tensor
from oneshot_tkg.core import Quadruple
from oneshot_tkg.dataset import FrequencyThresholds, load_benchmark
from oneshot_tkg.pipeline import build_benchmark
from oneshot_tkg.synth import SYNTH_THRESHOLDS, SynthSpec, write_synthetic

# small benchmark used across modules: w=60 leaves 4 windows of 60 ticks in 360
SYNTH_BUILD = dict(w=60, ell=5, n_max=8, n_val=3, n_test=5, seed=0, time_format="int")


def make_synth_benchmark(root, spec=None, **overrides):
    spec = spec or SynthSpec()
    os.makedirs(root, exist_ok=True)
    events = os.path.join(root, "events.tsv")
    write_synthetic(spec, events, os.path.join(root, "truth.json"))
    kwargs = {**SYNTH_BUILD, **overrides}
    out = os.path.join(root, "bench")
    build_benchmark(events, out, FrequencyThresholds(*SYNTH_THRESHOLDS), **kwargs)
    return out


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    return make_synth_benchmark(str(tmp_path_factory.mktemp("synth")))


@pytest.fixture(scope="session")
def synth_split(synth_dir):
    return load_benchmark(synth_dir)


def random_quads(rng, n, n_entities, n_relations, horizon):
    out = []
    for _ in range(n):
        s = int(rng.integers(n_entities))
        o = int(rng.integers(n_entities - 1))
        o += o >= s
        out.append(Quadruple(s, int(rng.integers(n_relations)), o, int(rng.integers(horizon))))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def autodiff_op_cases(rng):
    """name -> (tensors, scalar closure) covering every differentiable op."""
    r = lambda *s: Tensor(rng.normal(size=s))  # noqa: E731
    a, b = r(3, 4), r(3, 4)
    sq = r(4, 5)
    ids = rng.integers(0, 3, size=(2, 3))
    w = Tensor(rng.normal(size=(3, 4, 2)))
    mask3 = rng.random((3, 4)) < 0.7
    m_w = r(3, 2)
    lb = r(5)
    gain, bias = r(4), r(4)
    c = r(3)
    return {
        "add": ((a, b), lambda: ad.sum(ad.mul(ad.add(a, b), ad.add(a, b)))),
        "sub": ((a, b), lambda: ad.sum(ad.mul(ad.sub(a, b), a))),
        "neg_scale": ((a,), lambda: ad.sum(ad.mul(ad.scale(ad.neg(a), 1.7), a))),
        "mul": ((a, b), lambda: ad.sum(ad.mul(a, b))),
        "relu": ((a,), lambda: ad.sum(ad.mul(ad.relu(a), b))),
        "max_with_zero": ((a,), lambda: ad.sum(ad.mul(ad.max_with_zero(a), b))),
        "softmax": ((a,), lambda: ad.sum(ad.mul(ad.softmax(a), b))),
        "sum_axis": ((a,), lambda: ad.sum(ad.mul(ad.sum(a, axis=0), ad.sum(a, axis=0)))),
        "mean": ((a,), lambda: ad.sum(ad.mul(ad.mean(a, axis=1), c))),
        "reshape_transpose": ((a,), lambda: ad.sum(ad.mul(ad.transpose(ad.reshape(a, (4, 3))),
                                                          ad.reshape(b, (3, 4))))),
        "concat": ((a, b), lambda: ad.sum(ad.mul(ad.concat([a, b]), ad.concat([b, a])))),
        "take_slice": ((a,), lambda: ad.sum(ad.mul(ad.take_slice(a, 1, 3, axis=1),
                                                   ad.take_slice(a, 0, 2, axis=1)))),
        "split": ((a,), lambda: ad.sum(ad.mul(*ad.split(a, [2, 2], axis=-1)))),
        "matmul": ((a, sq), lambda: ad.sum(ad.mul(ad.matmul(a, sq), ad.matmul(a, sq)))),
        "batched_matmul": ((w,), lambda: ad.sum(ad.matmul(w, ad.transpose(w)))),
        "linear": ((a, sq, lb), lambda: ad.sum(ad.mul(ad.linear(a, sq, lb), ad.linear(a, sq, lb)))),
        "embedding_lookup": ((a,), lambda: ad.sum(ad.mul(ad.embedding_lookup(a, ids),
                                                         ad.embedding_lookup(b, ids)))),
        "masked_mean": ((w,), lambda: ad.sum(ad.mul(ad.masked_mean(w, mask3), m_w))),
        "layer_norm": ((a, gain, bias), lambda: ad.sum(ad.mul(ad.layer_norm(a, gain, bias), b))),
    }
