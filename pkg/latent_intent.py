"""
Latent Intention
================

The discrete intention latent Z: one of K modes per agent. Provides the
intention tokens that condition the decoder and the learned per-agent mode
prior, read out from K learnable query vectors through the
prior-decoder layers.

Token layout for both the intention tokens and the prior queries is agent-major:
token a*K + k belongs to agent a and mode k.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from config import ModelConfig
from errors import ContractError, DimensionError
from nn_blocks import AttentionMask, ffn, init_tdl_d, tdl_d
from tensor import (ParamScope, Tensor, broadcast_to, concat, linear, log_softmax, reshape,
                    normal_table, uniform_fan_in)
from trajectory_encoder import ContextEncoding

logger = logging.getLogger(__name__)


@dataclass
class ModeConfig:
    """One active mode per agent."""
    modes: np.ndarray
    K: int

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=np.int64)
        if self.modes.ndim != 1 or self.modes.size < 1:
            raise DimensionError(f"mode config needs one mode per agent, got shape {self.modes.shape}")
        if self.K < 1:
            raise ContractError(f"K must be >= 1, got {self.K}")
        if self.modes.min() < 0 or self.modes.max() >= self.K:
            raise ContractError(f"mode index out of range [0, {self.K}): {self.modes.tolist()}")

    @property
    def agents(self) -> int:
        return self.modes.size

    def one_hot(self) -> np.ndarray:
        return np.eye(self.K)[self.modes]

    @classmethod
    def uniform(cls, agents: int, mode: int, K: int) -> "ModeConfig":
        return cls(np.full(agents, mode), K)


@dataclass
class ModePrior:
    """Per-agent categorical over K modes; `log_probs` stays on the tape."""
    log_probs: Tensor

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    @property
    def shape(self):
        return self.log_probs.shape

    def argmax(self) -> np.ndarray:
        return self.log_probs.data.argmax(axis=-1)


# --------------------------------------------------------------------------
# Intention tokens
# --------------------------------------------------------------------------

def init_latent_intent(scope: ParamScope, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d_m = cfg.d_m
    scope.add("embed.w", uniform_fan_in(rng, (2, d_m), 2))
    scope.add("embed.b", np.zeros(d_m))
    scope.add("queries", normal_table(rng, (cfg.modes, d_m)))
    scope.add("query_in.w", uniform_fan_in(rng, (d_m + 1, d_m), d_m + 1))
    scope.add("query_in.b", np.zeros(d_m))
    block = cfg.block_config()
    for i in range(cfg.prior_layers):
        init_tdl_d(scope.scope(f"tdl{i}"), block, rng, with_map=cfg.map_mode != "none")
    scope.add("readout.w1", uniform_fan_in(rng, (d_m, d_m), d_m))
    scope.add("readout.b1", np.zeros(d_m))
    scope.add("readout.w2", uniform_fan_in(rng, (d_m, 1), d_m))
    scope.add("readout.b2", np.zeros(1))


def intention_features(modes: np.ndarray, K: int) -> np.ndarray:
    """(one-hot bit, agent index) per token for a batch of configs.

    `modes` is [..., A]; the result is [..., A*K, 2].
    """
    modes = np.asarray(modes, dtype=np.int64)
    agents = modes.shape[-1]
    bits = (modes[..., :, None] == np.arange(K)).astype(np.float64)
    index = np.broadcast_to(np.arange(agents, dtype=np.float64)[:, None], bits.shape)
    return np.stack([bits, index], axis=-1).reshape(modes.shape[:-1] + (agents * K, 2))


def intention_embed(z: ModeConfig, params: ParamScope) -> Tensor:
    """Intention tokens [A*K, d_m] for one mode config."""
    return linear(Tensor(intention_features(z.modes, z.K)), params["embed.w"], params["embed.b"])


def intention_embed_batch(configs: np.ndarray, K: int, params: ParamScope) -> Tensor:
    """Intention tokens for B configs at once: [B, A*K, d_m]."""
    configs = np.asarray(configs, dtype=np.int64)
    if configs.ndim != 2:
        raise DimensionError(f"config batch must be [B, A], got {configs.shape}")
    if configs.min() < 0 or configs.max() >= K:
        raise ContractError(f"mode index out of range [0, {K})")
    return linear(Tensor(intention_features(configs, K)), params["embed.w"], params["embed.b"])


def phi_prime(ctx: ContextEncoding, intentions: Tensor) -> Tensor:
    """Concatenate `phi_S` and the intention tokens along the token axis, broadcasting `phi_S` over configs."""
    phi_S = ctx.phi_S
    if intentions.ndim == 3:
        phi_S = broadcast_to(phi_S, (intentions.shape[0],) + phi_S.shape)
    return concat([phi_S, intentions], axis=-2)


def phi_prime_agents(ctx: ContextEncoding, K: int) -> np.ndarray:
    """Agent id of every `phi_prime` token."""
    return np.concatenate([ctx.token_agents, np.repeat(np.arange(ctx.slots), K)])


def phi_prime_valid(ctx: ContextEncoding, K: int) -> np.ndarray:
    return np.concatenate([ctx.token_valid, np.repeat(ctx.valid, K)])


# --------------------------------------------------------------------------
# Mode prior
# --------------------------------------------------------------------------

def prior_queries(agents: int, params: ParamScope, cfg: ModelConfig) -> Tensor:
    """P_k concatenated with the agent index, projected back to d_m: [A*K, d_m]."""
    K = cfg.modes
    table = broadcast_to(params["queries"], (agents, K, cfg.d_m))
    index = np.broadcast_to(np.arange(agents, dtype=np.float64)[:, None, None], (agents, K, 1))
    tokens = reshape(concat([table, Tensor(index)], axis=-1), (agents * K, cfg.d_m + 1))
    return linear(tokens, params["query_in.w"], params["query_in.b"])


def prior_masks(ctx: ContextEncoding, cfg: ModelConfig):
    query_agents = np.repeat(np.arange(ctx.slots), cfg.modes)
    query_valid = np.repeat(ctx.valid, cfg.modes)
    self_mask = AttentionMask.by_agent(query_agents, query_agents, cfg.interaction,
                                       key_valid=query_valid, query_valid=query_valid)
    ctx_mask = AttentionMask.by_agent(query_agents, ctx.token_agents, cfg.interaction,
                                      key_valid=ctx.token_valid, query_valid=query_valid)
    return self_mask, ctx_mask


def mode_prior(ctx: ContextEncoding, phi_map: Optional[Tensor], params: ParamScope,
               cfg: ModelConfig) -> ModePrior:
    """Softmax over modes of the readout after the prior-decoder layers; depends on no mode config."""
    x = prior_queries(ctx.slots, params, cfg)
    self_mask, ctx_mask = prior_masks(ctx, cfg)
    block = cfg.block_config()
    for i in range(cfg.prior_layers):
        x = tdl_d(x, ctx.phi_S, phi_map, params.scope(f"tdl{i}"), block, self_mask, ctx_mask)
    hidden = ffn(x, params.scope("readout"))
    logits = reshape(hidden, (ctx.slots, cfg.modes))
    return ModePrior(log_probs=log_softmax(logits, axis=-1))


def log_marginal(nll_per_mode: np.ndarray, prior: ModePrior, valid: Optional[Sequence[bool]] = None) -> float:
    """Σ_a log Σ_k p(S^a | k) p(k), with the inner sum done by log-sum-exp."""
    nll = np.asarray(nll_per_mode, dtype=np.float64)
    log_prior = prior.log_probs.data
    if nll.shape != log_prior.shape:
        raise DimensionError(f"nll {nll.shape} and prior {log_prior.shape} disagree")
    if not np.all(np.isfinite(nll)):
        raise ContractError("per-mode NLL must be finite")
    per_agent = np_logsumexp(-nll + log_prior, axis=-1)
    if valid is not None:
        per_agent = per_agent[np.asarray(valid, dtype=bool)]
    return float(per_agent.sum())
