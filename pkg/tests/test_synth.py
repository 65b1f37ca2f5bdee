import dataclasses
import json
import math

import numpy as np
import pytest

from waydcm.choice import BetaVector, fit_mnl, mnl_nll, softmax
from waydcm.features import FEATURES
from waydcm.grid import build_grid
from waydcm.scene import prepare_scene, read_scenes
from waydcm.synth import (
    GenConfig,
    empirical_choice_frequencies,
    generate,
    relabel,
    sample_choices,
    scene_features,
    sidecar_path,
)

SMALL = dict(n_scenes=200, pilot_size=100)


@pytest.fixture(scope="module")
def clean_corpus():
    return generate(GenConfig(noise_sigma=0.0, seed=1, **SMALL))


def test_noise_free_labels_equal_drawn(clean_corpus):
    assert relabel(clean_corpus) == clean_corpus.drawn


def test_noisy_labels_mostly_equal_drawn():
    corpus = generate(GenConfig(seed=2, **SMALL))
    agree = np.mean(np.array(relabel(corpus)) == np.array(corpus.drawn))
    assert agree > 0.95


def test_scenes_round_trip_and_respect_config(tmp_path, clean_corpus):
    cfg = clean_corpus.config
    path = tmp_path / "c.jsonl"
    clean_corpus.write(path)
    back = read_scenes(path)
    assert [s.id for s in back] == [s.id for s in clean_corpus.scenes]
    for s in back:
        assert cfg.n_neighbors[0] <= len(s.neighbors) <= cfg.n_neighbors[1]
        assert s.future.shape == (cfg.t_f, 2) and s.t_obs == cfg.t_obs
        v = s.target.states[-1, 2]
        assert cfg.speed[0] <= v <= cfg.speed[1]
        d = np.hypot(*(s.waypoint - s.target.states[-1, :2]))
        assert cfg.waypoint_distance[0] - 1e-9 <= d <= cfg.waypoint_distance[1] + 1e-9
    meta = json.loads(open(sidecar_path(path)).read())
    assert meta["drawn_k"] == clean_corpus.drawn
    assert meta["true_beta"] == cfg.true_beta.to_dict()


def test_same_seed_byte_identical(tmp_path):
    cfg = GenConfig(n_scenes=20, pilot_size=30, seed=9)
    for name in ("a", "b"):
        generate(cfg).write(tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.meta.json").read_bytes() == (tmp_path / "b.meta.json").read_bytes()
    other = generate(dataclasses.replace(cfg, seed=10))
    assert [s.waypoint.tolist() for s in other.scenes] != [s.waypoint.tolist() for s in generate(cfg).scenes]


def nearest_hit_rate(beta_ddist, seed=4):
    beta = BetaVector.from_values([0.0, 0.0, 0.0, 0.0, beta_ddist], FEATURES)
    corpus = generate(GenConfig(true_beta=beta, seed=seed, **SMALL))
    hits = sum(k == int(np.argmin(scene_features(s, corpus.config)[2][:, 4])) for s, k in zip(corpus.scenes, corpus.drawn))
    return hits / len(corpus.scenes)


@pytest.mark.xfail(
    strict=True,
    reason="alternatives differ by metres in ddist while its scaler spread is ~200 m; -100 leaves near-ties (about 64% hit rate)",
)
def test_ddist_minus_100_picks_nearest_alternative():
    assert nearest_hit_rate(-100.0) >= 0.99


def test_ddist_limit_picks_nearest_alternative():
    assert nearest_hit_rate(-1e6) >= 0.99
    assert nearest_hit_rate(-100.0) < nearest_hit_rate(-1e4)


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(noise_sigma=-1.0)
    with pytest.raises(ValueError):
        GenConfig(speed=(5.0, 1.0))
    with pytest.raises(ValueError):
        GenConfig(n_scenes=-1)
    with pytest.raises(ValueError):
        GenConfig(true_beta=BetaVector.from_values([-1.0, -1.0, -1.0], FEATURES[:3]))


def test_empty_corpus():
    assert generate(GenConfig(n_scenes=0, pilot_size=10)).scenes == []


# --- sampling frequencies -------------------------------------------------------------


def test_uniform_fifteen_way_frequencies():
    table = empirical_choice_frequencies(sample_choices(np.zeros((15, 5)), np.zeros(5), 15000, seed=0), np.full(15, 1 / 15))
    assert np.all(np.abs(table.freqs - 1 / 15) <= 0.01)
    assert table.counts.sum() == 15000


def test_two_way_frequencies():
    X = np.array([[1.0, 0, 0, 0, 0], [0.0, 0, 0, 0, 0]])
    probs = softmax(X @ np.array([1.0, 0, 0, 0, 0]))
    assert probs[0] == pytest.approx(0.731, abs=5e-4)
    table = empirical_choice_frequencies(sample_choices(X, [1.0, 0, 0, 0, 0], 10000, seed=1), probs)
    assert np.all(np.abs(table.freqs - probs) <= 0.02)


@pytest.mark.parametrize("seed", range(10))
def test_arbitrary_context_within_three_sigma(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(15, 5))
    beta = rng.normal(size=5)
    probs = softmax(X @ beta)
    table = empirical_choice_frequencies(sample_choices(X, beta, 20000, seed=seed), probs)
    assert table.max_z <= 3.0


def test_frequency_table_chi2():
    t = empirical_choice_frequencies([0, 0, 1, 1], [0.5, 0.5])
    assert t.chi2 == 0.0 and t.max_z == 0.0


# --- waypoint signal -----------------------------------------------------------------------


def _design(corpus, scenes):
    return np.stack([corpus.scaler.transform(scene_features(s, corpus.config)[2]) for s in scenes])


def test_shuffled_waypoints_raise_held_out_nll():
    corpus = generate(GenConfig(n_scenes=1200, pilot_size=200, seed=5))
    # move each scene's target-frame waypoint into another scene
    perm = np.random.default_rng(0).permutation(len(corpus.scenes))
    shuffled = []
    for i, scene in enumerate(corpus.scenes):
        donor = corpus.scenes[perm[i]]
        local = prepare_scene(donor).frame.to_local(donor.waypoint[None])[0]
        wp = prepare_scene(scene).frame.to_world(local[None])[0]
        shuffled.append(dataclasses.replace(scene, waypoint=wp))
    y = np.array(relabel(corpus))
    X = _design(corpus, corpus.scenes)
    Xs = _design(corpus, shuffled)
    tr, te = slice(0, 900), slice(900, None)
    true_fit = fit_mnl(X[tr], y[tr])
    shuf_fit = fit_mnl(Xs[tr], y[tr])
    assert mnl_nll(shuf_fit.beta, Xs[te], y[te]) > mnl_nll(true_fit.beta, X[te], y[te])


def test_grid_scales_with_observed_speed(clean_corpus):
    s = clean_corpus.scenes[0]
    prepared, grid, _ = scene_features(s, clean_corpus.config)
    v = prepared.target.states[-1, 2]
    assert grid.maxl == pytest.approx(max(1.5 * v * clean_corpus.config.horizon, 2.0))
    assert build_grid(v, clean_corpus.config.horizon).maxl == grid.maxl
    assert math.isfinite(grid.maxl)
