import json

import numpy as np
import pytest
from scipy import stats

from oneshot_tkg.autodiff import Tensor, load_archive
from oneshot_tkg.core import Quadruple
from oneshot_tkg.encoder import ModelParams
from oneshot_tkg.errors import ConfigError, NonFiniteLoss
from oneshot_tkg.trainer import TrainConfig, corrupt, hinge_loss, train

SMALL = dict(d=4, ell=5, n_max=4, n_heads=2, d_inner=8, w=60, m_queries=4)


def test_two_entities_force_the_other():
    rng = np.random.default_rng(0)
    pos = Quadruple(1, 0, 0, 3)
    assert all(corrupt(pos, 2, rng).object == 1 for _ in range(50))


def test_corruption_changes_only_the_object(rng):
    pos = Quadruple(3, 2, 7, 11)
    for _ in range(200):
        neg = corrupt(pos, 10, rng)
        assert neg.object != pos.object
        assert (neg.subject, neg.relation, neg.time) == (3, 2, 11)


def test_corruption_is_uniform_over_other_entities():
    rng = np.random.default_rng(1)
    pos = Quadruple(0, 0, 17, 0)
    objs = [corrupt(pos, 50, rng).object for _ in range(10_000)]
    counts = np.bincount(objs, minlength=50)
    assert counts[17] == 0
    assert stats.chisquare(np.delete(counts, 17)).pvalue > 0.01


def test_both_sides_mode_touches_one_slot(rng):
    pos = Quadruple(3, 2, 7, 11)
    sides = set()
    for _ in range(200):
        neg = corrupt(pos, 10, rng, both_sides=True)
        changed = (neg.subject != pos.subject, neg.object != pos.object)
        assert sum(changed) == 1
        sides.add(changed)
    assert len(sides) == 2


@pytest.mark.parametrize("pos,neg,margin,expected", [
    (0.7, 0.7, 10.0, 10.0),
    (10.5, 0.5, 10.0, 0.0),
    (1.0, 0.2, 10.0, 9.2),
    (5.0, -3.0, 1.0, 0.0),
])
def test_hinge_examples(pos, neg, margin, expected):
    assert hinge_loss(pos, neg, margin) == pytest.approx(expected, abs=1e-12)
    t = hinge_loss(Tensor([pos]), Tensor([neg]), margin)
    assert t.data[0] == pytest.approx(expected, abs=1e-5)


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"d": 4, "dimension": 3})
    with pytest.raises(ConfigError):
        TrainConfig(margin=0)
    cfg = TrainConfig(**SMALL)
    cfg.save(tmp_path / "c.json")
    assert TrainConfig.load(tmp_path / "c.json") == cfg


def test_zero_episodes_keep_initial_parameters(synth_split):
    cfg = TrainConfig(**SMALL, episodes=0, seed=3)
    result = train(synth_split, cfg)
    init_seed, _ = np.random.SeedSequence(3).spawn(2)
    init = ModelParams.init(cfg.encoder, synth_split.n_entities, 2 * synth_split.n_relations,
                            int(init_seed.generate_state(1)[0])).to_arrays()
    got = result.params.to_arrays()
    assert all(np.array_equal(init[k], got[k]) for k in init)


def test_fixed_seed_gives_identical_checkpoints(synth_split, tmp_path):
    cfg = TrainConfig(**SMALL, episodes=30, eval_every=15, checkpoint_every=10, seed=5)
    train(synth_split, cfg, out_dir=tmp_path / "a")
    train(synth_split, cfg, out_dir=tmp_path / "b")
    for name in ("final.tkgt", "best.tkgt", "checkpoint_30.tkgt", "train_log.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    log = [json.loads(ln) for ln in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert [r["episode"] for r in log] == list(range(30))
    assert set(load_archive(tmp_path / "a" / "final.tkgt")) == set(
        ModelParams.shapes(cfg.encoder, synth_split.n_entities, 2 * synth_split.n_relations))


def test_best_params_follow_validation(synth_split):
    cfg = TrainConfig(**SMALL, episodes=40, eval_every=10, seed=1)
    result = train(synth_split, cfg)
    mrrs = [v["mrr"] for v in result.val_history]
    assert len(mrrs) == 4 and result.best_val_mrr == max(mrrs)


def test_non_finite_loss_is_reported(synth_split, monkeypatch):
    from oneshot_tkg import trainer

    real = trainer.episode_loss

    def poisoned(*args, **kwargs):
        out = real(*args, **kwargs)
        out.data[...] = np.nan
        return out
    monkeypatch.setattr(trainer, "episode_loss", poisoned)
    with pytest.raises(NonFiniteLoss) as info:
        train(synth_split, TrainConfig(**SMALL, episodes=3))
    assert info.value.episode == 0 and info.value.exit_code == 5
