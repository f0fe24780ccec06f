"""
Trajectory Decoder
==================

Joint multi-agent decoding through stacked `tdl_c` layers and a bivariate
Gaussian output head. Three regimes share the layers:

* teacher forced: token (t, a) carries the ground-truth state S_t (S_0 at t = 0)
  and predicts S_{t+1}; one pass under the time-causal mask.
* autoregressive: the same network rolled out step by step, feeding back the
  mean or a sample of each predicted Gaussian.
* non-autoregressive: tokens carry only a time position and an agent embedding;
  all steps come out of a single unmasked pass.

Every decode runs over a batch of B mode configs [B, A] so a sweep over modes
costs one call. Decoder tokens are time-major like the encoder's.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from config import ModelConfig
from errors import DimensionError, ParameterError
from latent_intent import ModeConfig, intention_embed_batch, phi_prime, phi_prime_agents, phi_prime_valid
from nn_blocks import AttentionMask, init_tdl_c, tdl_c
from tensor import (ParamScope, Tensor, add, broadcast_to, clip, concat, embedding, exp, getitem, linear,
                    mul, normal_table, relu, reshape, swapaxes, tanh, uniform_fan_in)
from trajectory_encoder import ContextEncoding, state_features

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-3
SIGMA_MAX = 1e3
RHO_SCALE = 0.99
LOG_SIGMA_MIN = float(np.log(SIGMA_MIN))
LOG_SIGMA_MAX = float(np.log(SIGMA_MAX))


class Regime(str, Enum):
    TEACHER_FORCED = "teacher_forced"
    AUTOREGRESSIVE = "autoregressive"
    NON_AUTOREGRESSIVE = "non_autoregressive"


@dataclass
class GaussianSeq:
    """(μx, μy, σx, σy, ρ) per agent and future step: params [..., A, T, 5]."""
    params: Tensor

    def __post_init__(self):
        if self.params.shape[-1] != 5:
            raise DimensionError(f"Gaussian parameters need a last axis of 5, got {self.params.shape}")

    @property
    def mean(self) -> np.ndarray:
        return self.params.data[..., 0:2]

    @property
    def sigma(self) -> np.ndarray:
        return self.params.data[..., 2:4]

    @property
    def rho(self) -> np.ndarray:
        return self.params.data[..., 4]

    @property
    def agents(self) -> int:
        return self.params.shape[-3]

    @property
    def horizon(self) -> int:
        return self.params.shape[-2]

    def config(self, b: int) -> "GaussianSeq":
        """Slice one config out of a batched sequence."""
        return GaussianSeq(getitem(self.params, b))


@dataclass
class TrajectorySample:
    """Predicted points [..., A, T, 2] and the mode configs that produced them."""
    points: np.ndarray
    configs: np.ndarray

    def mode_config(self, b: int, K: int) -> ModeConfig:
        return ModeConfig(self.configs[b], K)


# --------------------------------------------------------------------------
# Parameters and masks
# --------------------------------------------------------------------------

def init_decoder(scope: ParamScope, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d_m = cfg.d_m
    scope.add("embed.w", uniform_fan_in(rng, (3, d_m), 3))
    scope.add("embed.b", np.zeros(d_m))
    scope.add("pos", normal_table(rng, (cfg.horizon, d_m)))
    scope.add("agent", normal_table(rng, (cfg.max_agents, d_m)))
    block = cfg.block_config()
    for i in range(cfg.decoder_layers):
        init_tdl_c(scope.scope(f"tdl{i}"), block, rng, with_map=cfg.map_mode != "none")
    for i in range(cfg.head_layers):
        out = 5 if i == cfg.head_layers - 1 else d_m
        scope.add(f"head.l{i}.w", uniform_fan_in(rng, (d_m, out), d_m))
        scope.add(f"head.l{i}.b", np.zeros(out))


def build_time_causal_mask(A: int, T: int, interaction: bool = True,
                           valid: Optional[np.ndarray] = None) -> AttentionMask:
    """Token (t, a) sees every token (t', a') with t' <= t.

    With interaction off only the agent's own earlier tokens stay visible.
    """
    times = np.repeat(np.arange(T), A)
    agents = np.tile(np.arange(A), T)
    causal = times[None, :] <= times[:, None]
    token_valid = None if valid is None else np.tile(np.asarray(valid, dtype=bool), T)
    return AttentionMask(causal) & AttentionMask.by_agent(agents, agents, interaction,
                                                          key_valid=token_valid, query_valid=token_valid)


def self_mask(A: int, T: int, cfg: ModelConfig, valid: np.ndarray, causal: bool) -> AttentionMask:
    if causal:
        return build_time_causal_mask(A, T, cfg.interaction, valid)
    agents = np.tile(np.arange(A), T)
    token_valid = np.tile(valid, T)
    return AttentionMask.by_agent(agents, agents, cfg.interaction, key_valid=token_valid, query_valid=token_valid)


def context_mask(ctx: ContextEncoding, T: int, cfg: ModelConfig) -> AttentionMask:
    query_agents = np.tile(np.arange(ctx.slots), T)
    query_valid = np.tile(ctx.valid, T)
    return AttentionMask.by_agent(query_agents, phi_prime_agents(ctx, cfg.modes), cfg.interaction,
                                  key_valid=phi_prime_valid(ctx, cfg.modes), query_valid=query_valid)


# --------------------------------------------------------------------------
# Output head
# --------------------------------------------------------------------------

def squash(raw: Tensor) -> Tensor:
    """Map raw head outputs to valid Gaussian parameters.

    μ passes through, σ = exp(raw) clamped to [1e-3, 1e3] (zero gradient at the
    clamp), ρ = 0.99 tanh(raw).
    """
    mu = getitem(raw, (Ellipsis, slice(0, 2)))
    sigma = exp(clip(getitem(raw, (Ellipsis, slice(2, 4))), LOG_SIGMA_MIN, LOG_SIGMA_MAX))
    rho = mul(tanh(getitem(raw, (Ellipsis, slice(4, 5)))), RHO_SCALE)
    return concat([mu, sigma, rho], axis=-1)


def gaussian_head(h: Tensor, params: ParamScope, cfg: ModelConfig, agents: int = 1) -> GaussianSeq:
    """N feed-forward layers from time-major tokens [..., T*A, d_m] to a GaussianSeq [..., A, T, 5]."""
    x = h
    for i in range(cfg.head_layers):
        x = linear(x, params[f"head.l{i}.w"], params[f"head.l{i}.b"])
        if i < cfg.head_layers - 1:
            x = relu(x)
    out = squash(x)
    steps = out.shape[-2] // agents
    out = reshape(out, out.shape[:-2] + (steps, agents, 5))
    return GaussianSeq(swapaxes(out, -3, -2))


# --------------------------------------------------------------------------
# Decoding
# --------------------------------------------------------------------------

def _configs(ctx: ContextEncoding, z) -> np.ndarray:
    if isinstance(z, ModeConfig):
        configs = z.modes[None, :]
    else:
        configs = np.asarray(z, dtype=np.int64)
    if configs.ndim != 2 or configs.shape[1] != ctx.slots:
        raise DimensionError(f"mode configs must be [B, {ctx.slots}], got {configs.shape}")
    return configs


def _layers(x: Tensor, prime: Tensor, phi_map: Optional[Tensor], params: ParamScope, cfg: ModelConfig,
            smask: AttentionMask, cmask: AttentionMask) -> Tensor:
    block = cfg.block_config()
    for i in range(cfg.decoder_layers):
        x = tdl_c(x, prime, phi_map, params.scope(f"tdl{i}"), block, smask, cmask)
    return x


def embed_inputs(states: np.ndarray, params: ParamScope) -> Tensor:
    """Embed input states [B, A, t, 2] to time-major tokens [B, t*A, d_m] with time positions."""
    steps, agents = states.shape[-2], states.shape[-3]
    tokens = linear(Tensor(state_features(states)), params["embed.w"], params["embed.b"])
    return add(tokens, embedding(params["pos"], np.repeat(np.arange(steps), agents)))


def _run(inputs: Tensor, ctx: ContextEncoding, phi_map: Optional[Tensor], configs: np.ndarray,
         intent_params: ParamScope, params: ParamScope, cfg: ModelConfig, causal: bool) -> GaussianSeq:
    steps = inputs.shape[-2] // ctx.slots
    prime = phi_prime(ctx, intention_embed_batch(configs, cfg.modes, intent_params))
    smask = self_mask(ctx.slots, steps, cfg, ctx.valid, causal)
    cmask = context_mask(ctx, steps, cfg)
    hidden = _layers(inputs, prime, phi_map, params, cfg, smask, cmask)
    return gaussian_head(hidden, params, cfg, agents=ctx.slots)


def teacher_inputs(last_observed: np.ndarray, gt_future: np.ndarray) -> np.ndarray:
    """Shift right: S_0 at step 0 then ground truth S_1..S_{T-1}, as [A, T, 2]."""
    return np.concatenate([last_observed[:, None, :], gt_future[:, :-1, :]], axis=1)


def decode_teacher_forced(ctx: ContextEncoding, phi_map: Optional[Tensor], z, gt_future: np.ndarray,
                          last_observed: np.ndarray, intent_params: ParamScope, params: ParamScope,
                          cfg: ModelConfig) -> GaussianSeq:
    """Gaussians for S_1..S_T under ground-truth inputs, batched over configs: [B, A, T, 5]."""
    configs = _configs(ctx, z)
    gt_future = np.asarray(gt_future, dtype=np.float64)
    if gt_future.shape != (ctx.slots, cfg.horizon, 2):
        raise DimensionError(f"ground truth must be [{ctx.slots}, {cfg.horizon}, 2], got {gt_future.shape}")
    states = teacher_inputs(np.asarray(last_observed, dtype=np.float64), gt_future)
    batch = np.ascontiguousarray(np.broadcast_to(states, (len(configs),) + states.shape))
    return _run(embed_inputs(batch, params), ctx, phi_map, configs, intent_params, params, cfg, causal=True)


def sample_gaussian(mean: np.ndarray, sigma: np.ndarray, rho: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Draw one point per bivariate Gaussian."""
    z = rng.standard_normal(mean.shape)
    x = mean[..., 0] + sigma[..., 0] * z[..., 0]
    y = mean[..., 1] + sigma[..., 1] * (rho * z[..., 0] + np.sqrt(1.0 - rho * rho) * z[..., 1])
    return np.stack([x, y], axis=-1)


def decode_autoregressive(ctx: ContextEncoding, phi_map: Optional[Tensor], z, last_observed: np.ndarray,
                          intent_params: ParamScope, params: ParamScope, cfg: ModelConfig,
                          select: str = "mean", seed: int = 0) -> Tuple[TrajectorySample, GaussianSeq]:
    """Roll out T steps, re-decoding the growing prefix and feeding back detached points.

    The returned GaussianSeq keeps the tape of every step's prediction so the
    autoregressive likelihood can be trained.
    """
    if select not in ("mean", "sample"):
        raise ParameterError(f"select must be 'mean' or 'sample', got {select!r}")
    configs = _configs(ctx, z)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    start = np.asarray(last_observed, dtype=np.float64)[:, None, :]
    states = np.ascontiguousarray(np.broadcast_to(start, (len(configs),) + start.shape))
    predicted, points = [], []
    for t in range(cfg.horizon):
        gauss = _run(embed_inputs(states, params), ctx, phi_map, configs, intent_params, params, cfg, causal=True)
        last = getitem(gauss.params, (Ellipsis, slice(t, t + 1), slice(None)))
        predicted.append(last)
        mean = last.data[..., 0, 0:2]
        if select == "mean":
            nxt = mean
        else:
            nxt = sample_gaussian(mean, last.data[..., 0, 2:4], last.data[..., 0, 4], rng)
        points.append(nxt)
        states = np.concatenate([states, nxt[..., None, :]], axis=-2)
    seq = GaussianSeq(concat(predicted, axis=-2))
    return TrajectorySample(points=np.stack(points, axis=-2), configs=configs), seq


def decode_non_autoregressive(ctx: ContextEncoding, phi_map: Optional[Tensor], z, intent_params: ParamScope,
                              params: ParamScope, cfg: ModelConfig) -> GaussianSeq:
    """All T steps in one unmasked pass from time positions and agent embeddings."""
    configs = _configs(ctx, z)
    T, A = cfg.horizon, ctx.slots
    tokens = add(embedding(params["pos"], np.repeat(np.arange(T), A)),
                 embedding(params["agent"], np.tile(np.arange(A), T)))
    tokens = broadcast_to(tokens, (len(configs),) + tokens.shape)
    return _run(tokens, ctx, phi_map, configs, intent_params, params, cfg, causal=False)
