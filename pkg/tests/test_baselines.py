import logging
import math

import numpy as np
import pytest

from drmm import baselines, data
from drmm.baselines import MatchError, brute_force_assignment, hungarian, match_cost
from drmm.data import GroundTruth
from drmm.geometry import Box
from drmm.mixture import ComponentParams
from drmm.model import ConfigError, ModelConfig, TrainConfig, forward_batch, stack_rasters

BOX = (0.2, 0.2, 0.6, 0.6)


def comp(mu=BOX, p=(1.0, 0.0, 0.0, 0.0)):
    return ComponentParams(1.0, np.array(mu), np.ones(4), np.array(p))


def test_match_cost_examples():
    g = GroundTruth.of(Box(*BOX), 0, 4)
    assert match_cost(g, comp(), (1, 1, 1)) == pytest.approx(0.0, abs=1e-15)
    assert match_cost(g, comp(mu=np.add(BOX, 0.1)), (0, 1, 0)) == pytest.approx(0.4)
    assert match_cost(g, comp(p=(0.25,) * 4), (1, 0, 0)) == pytest.approx(math.log(4))
    with pytest.raises(MatchError):
        match_cost(g, comp(), (-1, 0, 0))


def test_hungarian_examples():
    r = hungarian([[1, 2], [2, 4]])
    assert r.pairs == [(0, 1), (1, 0)] and r.total_cost == 4
    eye = np.ones((4, 4)) * 5 - 4 * np.eye(4)
    assert hungarian(eye).pairs == [(i, i) for i in range(4)]
    r = hungarian(np.full((3, 5), 2.0))
    assert r.total_cost == 6.0 and r.pairs == [(0, 0), (1, 1), (2, 2)]
    with pytest.raises(MatchError):
        hungarian(np.zeros((3, 2)))
    with pytest.raises(MatchError):
        hungarian([[np.inf]])
    assert hungarian(np.zeros((0, 3))).pairs == []


def test_hungarian_beats_random_assignments():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, k = 5, 9
        c = rng.normal(size=(n, k))
        best = hungarian(c).total_cost
        for _ in range(50):
            cols = rng.permutation(k)[:n]
            assert best <= c[np.arange(n), cols].sum() + 1e-12


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 6))
        k = int(rng.integers(n, 7))
        c = rng.integers(0, 5, (n, k)).astype(float) if rng.uniform() < 0.3 else rng.uniform(size=(n, k))
        assert hungarian(c).total_cost == pytest.approx(brute_force_assignment(c).total_cost, abs=1e-12)


@pytest.fixture(scope="module")
def toy():
    return data.generate(0, 16)


@pytest.mark.parametrize("variant", baselines.VARIANTS)
def test_train_bipartite_runs(toy, variant):
    cfg = ModelConfig(num_proposals=8, hidden_sizes=(16,))
    w, hist = baselines.train_bipartite(toy, cfg, TrainConfig(steps=4, batch_size=8), variant=variant, copies=2)
    assert len(hist) == 4 and all(np.isfinite(h["total"]) for h in hist)


def _matched_count(toy, variant, copies):
    """Number of components a GT supervises, read off the gradient of the box deltas."""
    cfg = ModelConfig(num_proposals=12, num_stages=1, hidden_sizes=(8,))
    from drmm.model import init_weights
    from drmm.losses import pack_gts

    w = init_weights(cfg)
    one = [s for s in toy if len(s.gts) == 1][:1]
    tr = forward_batch(w, cfg, stack_rasters(one))
    b, c = pack_gts([s.gts for s in one])
    obj = baselines.bipartite_objective(variant, copies)
    _, _, d_raws, _ = obj(tr, one, b, c)
    return int(np.count_nonzero(np.abs(d_raws[0][0, :, :4]).sum(axis=1)))


@pytest.mark.parametrize("copies", [1, 3])
def test_each_gt_supervises_copies_components(toy, copies):
    assert _matched_count(toy, "matched-nll", copies) == copies
    assert _matched_count(toy, "eq1", copies) == copies


def test_unmatched_components_pushed_to_background(toy):
    cfg = ModelConfig(num_proposals=12, num_stages=1, hidden_sizes=(8,))
    from drmm.model import init_weights
    from drmm.losses import pack_gts

    one = [s for s in toy if len(s.gts) == 1][:1]
    tr = forward_batch(init_weights(cfg), cfg, stack_rasters(one))
    b, c = pack_gts([s.gts for s in one])
    _, _, d_raws, _ = baselines.bipartite_objective("eq1")(tr, one, b, c)
    unmatched = np.abs(d_raws[0][0, :, :4]).sum(axis=1) == 0
    # positive d/d o_bar: gradient descent lowers objectness of unmatched components
    assert np.all(d_raws[0][0, unmatched, -1] > 0)


def test_too_many_copies_skips_scene_with_warning(toy, caplog):
    cfg = ModelConfig(num_proposals=2, num_stages=1, hidden_sizes=(8,))
    with caplog.at_level(logging.WARNING, logger="drmm.baselines"):
        baselines.train_bipartite(toy[:4], cfg, TrainConfig(steps=1, batch_size=4), variant="eq1", copies=3)
    assert "skipped" in caplog.text


def test_bad_variant_and_copies():
    with pytest.raises(ConfigError):
        baselines.bipartite_objective("focal")
    with pytest.raises(ConfigError):
        baselines.bipartite_objective("eq1", copies=0)
