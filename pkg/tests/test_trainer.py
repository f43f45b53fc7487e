import json
import math

import numpy as np
import pytest

from imageome.codec import CodecConfig, PhyloCodec
from imageome.phylogeny import discretize, parse_newick
from imageome.synthdata import SynthSpec, make_dataset
from imageome.trainer import Dataset, TrainConfig, Trainer, TrainingDiverged, fit, level_accuracy

TREE = "((A:0.5,B:0.5):0.5,(C:0.5,D:0.5):0.5);"


@pytest.fixture(scope="module")
def data():
    spec = SynthSpec(parse_newick(TREE), 2, H=4, W=4, C_in=3, specimens_per_species=10, seed=0)
    train, test, _ = make_dataset(spec, 0)
    return spec, train, test


def small_cfg(levelmap, **kw):
    base = dict(H=4, W=4, C_in=3, C_p=2, n_l=2, n_p=2, n_np=1, d=3, n_q=8,
                class_counts=levelmap.counts, mlp_hidden=8, quant_distance="l2")
    base.update(kw)
    return CodecConfig(**base)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)


def test_zero_learning_rates_leave_parameters_bitwise_unchanged(data):
    spec, train, _ = data
    m = PhyloCodec.create(small_cfg(spec.levelmap), 0)
    before = m.state()
    tr = Trainer(m, TrainConfig(learning_rate=0.0, adversary_learning_rate=0.0))
    y = spec.levelmap.label_matrix(train.species)
    for _ in range(3):
        tr.train_step(train.x[:8], y[:8])
    after = m.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_adversary_step_touches_only_adversary(data):
    spec, train, _ = data
    m = PhyloCodec.create(small_cfg(spec.levelmap), 0)
    before = m.state()
    tr = Trainer(m, TrainConfig(learning_rate=0.0, adversary_learning_rate=1e-2))
    y = spec.levelmap.label_matrix(train.species)
    tr.train_step(train.x[:8], y[:8])
    after = m.state()
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed and all(k.startswith("adv.") for k in changed)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_raises_with_breakdown(data):
    spec, train, _ = data
    m = PhyloCodec.create(small_cfg(spec.levelmap), 0)
    tr = Trainer(m, TrainConfig())
    x = train.x[:4].copy()
    x[0, 0, 0, 0] = np.inf
    with pytest.raises(TrainingDiverged) as e:
        tr.train_step(x, spec.levelmap.label_matrix(train.species[:4]))
    assert "rec" in e.value.breakdown and e.value.step == 0


def test_empty_batch(data):
    spec, _, _ = data
    tr = Trainer(PhyloCodec.create(small_cfg(spec.levelmap), 0), TrainConfig())
    with pytest.raises(ValueError):
        tr.train_step(np.zeros((0, 4, 4, 3)), np.zeros((0, 2), dtype=int))


def test_fit_logs_checkpoints_and_is_deterministic(data, tmp_path):
    spec, train, test = data
    cfg = small_cfg(spec.levelmap)
    tc = TrainConfig(epochs=3, batch_size=8, seed=5, checkpoint_interval=2)
    m1, log1 = fit(train, spec.levelmap, cfg, tc, heldout=test, out_dir=tmp_path / "a")
    m2, log2 = fit(train, spec.levelmap, cfg, tc, heldout=test)
    assert log1 == log2
    assert all(np.array_equal(m1.state()[k], m2.state()[k]) for k in m1.state())
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[0])["epoch"] == 1
    assert {"rec", "q", "p", "o", "adv", "total", "dead_codes", "heldout_accuracy"} <= set(log1[0])
    assert (tmp_path / "a" / "checkpoint" / "model.json").exists()
    assert (tmp_path / "a" / "checkpoint-epoch0002" / "model.json").exists()


def test_fit_rejects_mismatched_class_counts(data):
    spec, train, _ = data
    cfg = small_cfg(spec.levelmap, class_counts=[3, 4])
    with pytest.raises(ValueError, match="class_counts"):
        fit(train, spec.levelmap, cfg, TrainConfig(epochs=1))


def test_fit_rejects_unknown_species(data):
    spec, train, _ = data
    bad = Dataset(train.ids, ["Z"] * len(train), train.x, train.split)
    with pytest.raises(ValueError, match="missing"):
        fit(bad, spec.levelmap, small_cfg(spec.levelmap), TrainConfig(epochs=1))


def test_training_reduces_phylo_loss(data):
    spec, train, test = data
    cfg = small_cfg(spec.levelmap)
    _, log = fit(train, spec.levelmap, cfg, TrainConfig(epochs=30, batch_size=8, seed=0))
    assert log[-1]["p"] < log[0]["p"]
    assert all(math.isfinite(r["total"]) for r in log)


def test_level_accuracy_empty(data):
    spec, _, _ = data
    m = PhyloCodec.create(small_cfg(spec.levelmap), 0)
    acc = level_accuracy(m, np.zeros((0, 4, 4, 3)), np.zeros((0, 2), dtype=int))
    assert all(math.isnan(a) for a in acc)


def test_without_adversary_term_is_zero(data):
    spec, train, _ = data
    m = PhyloCodec.create(small_cfg(spec.levelmap), 0)
    tr = Trainer(m, TrainConfig(use_adversary=False))
    metrics = tr.train_step(train.x[:8], spec.levelmap.label_matrix(train.species[:8]))
    assert metrics["adv"] == 0.0


def test_levelmap_from_tree_matches_synth_levelmap(data):
    spec, _, _ = data
    assert discretize(parse_newick(TREE), 2).counts == spec.levelmap.counts == [2, 4]
