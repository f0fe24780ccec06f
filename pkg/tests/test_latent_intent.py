import copy

import numpy as np
import pytest

from errors import ContractError, DimensionError
from latent_intent import (ModeConfig, ModePrior, intention_embed, intention_embed_batch, intention_features,
                           log_marginal, phi_prime, phi_prime_agents)
from model import LatentFormer
from selftest import tiny_config, tiny_scene
from tensor import Tensor


def test_mode_config_range():
    z = ModeConfig([0, 2], K=3)
    assert np.array_equal(z.one_hot(), [[1, 0, 0], [0, 0, 1]])
    with pytest.raises(ContractError):
        ModeConfig([0, 3], K=3)
    with pytest.raises(ContractError):
        ModeConfig([-1], K=3)
    with pytest.raises(DimensionError):
        ModeConfig([], K=3)


def test_intention_tokens_are_agent_major():
    feats = intention_features(np.array([1, 0]), K=3)
    assert feats.shape == (6, 2)
    assert feats[:, 0].tolist() == [0, 1, 0, 1, 0, 0]
    assert feats[:, 1].tolist() == [0, 0, 0, 1, 1, 1]


def test_batched_embedding_matches_single_config():
    model = LatentFormer(tiny_config(), seed=0)
    params = model.params.scope("intent")
    configs = np.array([[0, 1], [2, 2]])
    batch = intention_embed_batch(configs, 3, params).data
    for b, row in enumerate(configs):
        assert np.allclose(batch[b], intention_embed(ModeConfig(row, 3), params).data, rtol=0, atol=1e-14)
    with pytest.raises(ContractError):
        intention_embed_batch(np.array([[0, 3]]), 3, params)
    with pytest.raises(DimensionError):
        intention_embed_batch(np.array([0, 1]), 3, params)


def test_prior_is_a_distribution_per_agent():
    cfg = tiny_config()
    model = LatentFormer(cfg, seed=1)
    scene = tiny_scene(1, n_agents=2, cfg=cfg)
    prior = model.prior(model.encode(scene))
    assert prior.shape == (2, cfg.modes)
    assert np.allclose(prior.probs.sum(axis=-1), 1.0, atol=1e-12)
    assert prior.argmax().shape == (2,)


def test_prior_without_interaction_ignores_other_agents():
    cfg = tiny_config(interaction=False)
    model = LatentFormer(cfg, seed=2)
    scene = tiny_scene(2, n_agents=2, cfg=cfg)
    moved = copy.deepcopy(scene)
    moved.agents[1].past = moved.agents[1].past + 0.5
    first = model.prior(model.encode(scene)).log_probs.data
    second = model.prior(model.encode(moved)).log_probs.data
    assert np.allclose(first[0], second[0], atol=1e-12)
    assert not np.allclose(first[1], second[1])


def test_phi_prime_layout():
    cfg = tiny_config()
    model = LatentFormer(cfg, seed=3)
    ctx = model.encode(tiny_scene(3, n_agents=2, cfg=cfg)).ctx
    intentions = intention_embed_batch(np.array([[0, 1], [1, 2], [2, 0]]), cfg.modes, model.params.scope("intent"))
    prime = phi_prime(ctx, intentions)
    assert prime.shape == (3, 2 * (cfg.tau + 1) + 2 * cfg.modes, cfg.d_m)
    agents = phi_prime_agents(ctx, cfg.modes)
    assert agents[-2 * cfg.modes:].tolist() == [0, 0, 0, 1, 1, 1]


def test_log_marginal_uses_log_sum_exp():
    prior = ModePrior(log_probs=Tensor(np.log([[0.5, 0.5], [0.25, 0.75]])))
    nll = np.array([[1.0, 2.0], [1000.0, 1001.0]])
    expected = np.log(0.5 * np.exp(-1.0) + 0.5 * np.exp(-2.0))
    expected += -1000.0 + np.log(0.25 + 0.75 * np.exp(-1.0))
    assert log_marginal(nll, prior) == pytest.approx(expected, rel=1e-12)
    assert log_marginal(nll, prior, valid=[True, False]) == pytest.approx(
        np.log(0.5 * np.exp(-1.0) + 0.5 * np.exp(-2.0)), rel=1e-12)


@pytest.mark.parametrize("shift", [-3.5, 0.25, 40.0])
def test_log_marginal_shifts_by_agent_count(shift):
    prior = ModePrior(log_probs=Tensor(np.log([[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]])))
    nll = np.array([[1.0, 2.5, 0.5], [4.0, 3.0, 7.0]])
    assert log_marginal(nll + shift, prior) == pytest.approx(log_marginal(nll, prior) - 2 * shift, abs=1e-10)


def test_log_marginal_input_checks():
    prior = ModePrior(log_probs=Tensor(np.log([[0.5, 0.5]])))
    with pytest.raises(DimensionError):
        log_marginal(np.zeros((1, 3)), prior)
    with pytest.raises(ContractError):
        log_marginal(np.array([[np.inf, 1.0]]), prior)
