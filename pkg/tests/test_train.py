import json
import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from waydcm import autodiff as ad
from waydcm.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from waydcm.data import build_example, collate
from waydcm.model import ModelConfig, forward, init_params
from waydcm.synth import GenConfig, generate
from waydcm.train import (
    Adam,
    MixtureTrajectory,
    NumericalError,
    TrainConfig,
    batch_losses,
    best_mode,
    evaluate,
    gaussian_nll,
    loss_cls,
    loss_reg,
    loss_score,
    mode_nll,
    predict,
    run_epoch,
    train,
    write_train_log,
)

from .conftest import toy_batch, toy_config
from .oracles import bivariate_logpdf

SMALL = ModelConfig(embed=8, enc_hidden=12, attn_dim=6, dec_hidden=12, goal_embed=4)


@pytest.fixture(scope="module")
def corpus():
    cfg = GenConfig(n_scenes=60, t_f=6, pilot_size=60, seed=3)
    return [build_example(s) for s in generate(cfg).scenes]


# --- closed-form losses ----------------------------------------------------------


def test_gaussian_nll_matches_explicit_covariance(rng):
    for _ in range(50):
        mu = rng.normal(size=2) * 3
        sigma = rng.uniform(0.1, 4, 2)
        rho = rng.uniform(-0.95, 0.95)
        y = rng.normal(size=2) * 3
        got = gaussian_nll(mu, sigma, np.float64(rho), y)
        assert got == pytest.approx(-bivariate_logpdf(mu, sigma, rho, y), rel=1e-12, abs=1e-12)


def test_gaussian_nll_at_mean_unit_scale():
    assert gaussian_nll(np.zeros(2), np.ones(2), np.float64(0.0), np.zeros(2)) == pytest.approx(math.log(2 * math.pi))


def mixture(rng, L=3, T=4):
    return MixtureTrajectory(rng.normal(size=(L, T, 2)) * 5, rng.uniform(0.5, 2, (L, T, 2)), rng.uniform(-0.5, 0.5, (L, T)), np.full(L, 1 / L))


def test_mixture_validation():
    with pytest.raises(ValueError):
        MixtureTrajectory(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), np.zeros((1, 2)), np.ones(1))
    with pytest.raises(ValueError):
        MixtureTrajectory(np.zeros((1, 2, 2)), np.ones((1, 2, 2)), np.ones((1, 2)), np.ones(1))


def test_loss_reg_is_min_over_modes(rng):
    m = mixture(rng)
    truth = rng.normal(size=(4, 2))
    per = [sum(-bivariate_logpdf(m.mu[l, t], m.sigma[l, t], m.rho[l, t], truth[t]) for t in range(4)) for l in range(3)]
    np.testing.assert_allclose(mode_nll(m, truth), per, rtol=1e-12)
    assert loss_reg(m, truth) == pytest.approx(min(per), rel=1e-12)
    with pytest.raises(ValueError):
        mode_nll(m, truth[:3])


def test_score_and_cls_losses(rng):
    m = mixture(rng)
    truth = m.mu[2] + 0.01
    assert best_mode(m, truth) == 2
    assert loss_score([0.2, 0.3, 0.5], m, truth) == pytest.approx(-math.log(0.5))
    assert loss_cls([0.1, 0.9], 1) == pytest.approx(-math.log(0.9))


def test_batch_losses_match_per_scene_oracles():
    cfg = toy_config()
    batch = toy_batch(cfg, 2)
    with ad.no_grad():
        fwd = forward(init_params(cfg, 2), cfg, batch)
    _, parts = batch_losses(fwd, batch, cfg)
    mu, sigma, rho = ad.gaussian_params(fwd.raw.data, cfg.pos_scale)
    reg, score, cls = [], [], []
    for b in range(batch.size):
        m = MixtureTrajectory(mu[b], sigma[b], rho[b], np.exp(fwd.mode_logp.data[b]))
        reg.append(loss_reg(m, batch.future[b]))
        score.append(loss_score(m.probs, m, batch.future[b]))
        cls.append(loss_cls(np.exp(fwd.goal_logp.data[b]), batch.k_star[b]))
    assert parts.l_reg == pytest.approx(np.mean(reg), rel=1e-10)
    assert parts.l_score == pytest.approx(np.mean(score), rel=1e-10)
    assert parts.l_cls == pytest.approx(np.mean(cls), rel=1e-10)
    assert parts.total == parts.l_reg + parts.l_score + parts.l_cls


def test_total_is_weighted_sum():
    cfg = toy_config()
    batch = toy_batch(cfg, 5)
    p = init_params(cfg, 5)
    with ad.no_grad():
        total, parts = batch_losses(forward(p, cfg, batch), batch, cfg, (0.5, 2.0, 3.0))
    assert float(total.data) == pytest.approx(0.5 * parts.l_reg + 2.0 * parts.l_score + 3.0 * parts.l_cls, rel=1e-14)
    assert parts.total == pytest.approx(float(total.data), rel=1e-14)


def test_losing_modes_get_no_regression_gradient():
    cfg = toy_config(n_modes=3)
    batch = toy_batch(cfg, 1, B=2)
    with ad.no_grad():
        fwd = forward(init_params(cfg, 1), cfg, batch)
    raw = ad.parameter(fwd.raw.data.copy())
    stub = SimpleNamespace(raw=raw, mode_logp=fwd.mode_logp, goal_logp=fwd.goal_logp)
    total, _ = batch_losses(stub, batch, cfg, (1.0, 0.0, 0.0))
    total.backward()
    winners = ad.bivariate_nll(fwd.raw, batch.future[:, None], cfg.pos_scale).data.sum(-1).argmin(axis=1)
    for b, w in enumerate(winners):
        assert np.any(raw.grad[b, w] != 0)
        assert np.all(np.delete(raw.grad[b], w, axis=0) == 0)


def test_lstm_variant_has_no_cls_loss():
    cfg = toy_config("LSTM")
    batch = toy_batch(cfg)
    with ad.no_grad():
        _, parts = batch_losses(forward(init_params(cfg), cfg, batch), batch, cfg)
    assert parts.l_cls == 0.0


# --- optimizer and loop --------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    p = {"w": ad.parameter(np.array([1.0, -2.0, 0.0]))}
    p["w"].grad = np.array([3.0, -0.5, 0.0])
    Adam(p, lr=0.1).step()
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9, 0.0], atol=1e-7)


def test_empty_epoch_leaves_params_unchanged(corpus):
    cfg = TrainConfig(variant="WayDCM2")
    model = replace(SMALL, t_f=6)
    params = init_params(model, 0)
    before = {k: v.data.copy() for k, v in params.items()}
    out = run_epoch(params, Adam(params), model, [], None, cfg)
    assert math.isnan(out.total)
    for k, v in params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_nonfinite_loss_raises_with_batch_id(corpus):
    cfg = TrainConfig(epochs=1, batch_size=8, loss_weights=(math.nan, 1.0, 1.0))
    with pytest.raises(NumericalError, match=r"epoch 1, batch 0"):
        train(corpus, cfg, model_base=SMALL)


def test_training_is_deterministic(corpus):
    cfg = TrainConfig(epochs=2, batch_size=8, seed=4)
    a = train(corpus, cfg, model_base=SMALL)
    b = train(corpus, cfg, model_base=SMALL)
    assert a.log == b.log
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


@pytest.mark.parametrize("variant", ["LSTM", "WayDCM2"])
def test_training_lowers_validation_loss(corpus, variant):
    res = train(corpus, TrainConfig(variant=variant, epochs=6, batch_size=8, lr=3e-3, val_fraction=0.2), model_base=SMALL)
    assert [r["epoch"] for r in res.log] == list(range(7))
    assert min(r["val_total"] for r in res.log[1:]) < res.log[0]["val_total"]
    assert res.log[res.best_epoch]["val_total"] == min(r["val_total"] for r in res.log)
    assert (res.beta is None) == (variant == "LSTM")


def test_warm_start_lowers_initial_cls_loss(corpus):
    res = train(corpus, TrainConfig(variant="TrajDCM", epochs=0), model_base=SMALL)
    zero = train(corpus, TrainConfig(variant="TrajDCM", epochs=0, beta_init="zero"), model_base=SMALL)
    assert res.best_epoch == 0
    assert np.all(zero.params["dcm.beta"].data == 0)
    assert res.log[0]["l_cls"] < zero.log[0]["l_cls"]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(variant="nope")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(beta_init="random")


def test_train_log_csv(tmp_path):
    rows = [{"epoch": 0, "l_reg": 1.5, "l_score": 0.1, "l_cls": np.float64(0.2), "total": 1.8, "val_total": 1.9}]
    path = tmp_path / "log.csv"
    write_train_log(path, rows, ["a=1"])
    assert path.read_text().splitlines() == ["# a=1", "epoch,l_reg,l_score,l_cls,total,val_total", "0,1.5,0.1,0.2,1.8,1.9"]


# --- evaluation and checkpoints ------------------------------------------------------------


def test_thread_count_does_not_change_predictions(corpus, monkeypatch):
    res = train(corpus, TrainConfig(epochs=0), model_base=SMALL)
    one = predict(res.params, res.model, corpus, res.scaler, batch_size=7, threads=1)
    monkeypatch.setenv("WAYDCM_THREADS", "4")
    many = predict(res.params, res.model, corpus, res.scaler, batch_size=7)
    for a, b in ((one.mu, many.mu), (one.mode_probs, many.mode_probs), (one.goal_probs, many.goal_probs)):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(one.mode_probs.sum(axis=1), 1.0, atol=1e-12)
    assert evaluate(res.params, res.model, corpus, res.scaler).row() == evaluate(res.params, res.model, corpus, res.scaler, batch_size=5).row()


def test_checkpoint_round_trip(tmp_path, corpus):
    res = train(corpus, TrainConfig(epochs=1, batch_size=16), model_base=SMALL)
    path = save_checkpoint(tmp_path / "m.json", res.params, res.model, res.scaler, {"seed": 0})
    ck = load_checkpoint(path)
    assert ck.model == res.model and ck.manifest["seed"] == 0
    assert set(ck.manifest["beta"]) == set(res.model.features)
    for k in res.params:
        np.testing.assert_array_equal(ck.params[k].data, res.params[k].data)
    batch = collate(corpus[:4], res.model, res.scaler)
    with ad.no_grad():
        a = forward(res.params, res.model, batch).raw.data
        b = forward(ck.params, ck.model, batch).raw.data
    np.testing.assert_array_equal(a, b)
    save_checkpoint(tmp_path / "m2.json", ck.params, ck.model, ck.scaler, {"seed": 0})
    assert (tmp_path / "m2.bin").read_bytes() == (tmp_path / "m.bin").read_bytes()


def test_checkpoint_mismatches_name_the_parameter(tmp_path):
    cfg = toy_config()
    from waydcm.features import FeatureScaler

    path = save_checkpoint(tmp_path / "m.json", init_params(cfg), cfg, FeatureScaler())
    manifest = json.loads(path.read_text())

    def rewrite(**changes):
        m = json.loads(json.dumps(manifest))
        m.update(changes)
        path.write_text(json.dumps(m))

    rewrite(model={**manifest["model"], "enc_hidden": 9})
    with pytest.raises(CheckpointError, match="'enc\\."):
        load_checkpoint(path)
    rewrite(params=manifest["params"][1:])
    with pytest.raises(CheckpointError, match=repr(manifest["params"][0]["name"])):
        load_checkpoint(path)
    rewrite(format="other/1")
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(path)
    rewrite()
    (tmp_path / "m.bin").write_bytes(b"\0" * 8)
    with pytest.raises(CheckpointError, match="blob"):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")
