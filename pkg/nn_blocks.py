"""
Attention and Transformer Blocks
================================

Scaled dot-product attention, multi-head attention and the three block types
the model stacks: the encoder block, the prior-decoder layer with layer
normalisation and the trajectory-decoder layer without it.

Blocks are functions of their inputs and a ParamScope; `init_*` functions
register the parameters a block reads.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from errors import ContractError, DimensionError, ParameterError
from tensor import (ParamScope, Tensor, add, layer_norm, linear, matmul, mul, relu, reshape,
                    softmax, swapaxes, uniform_fan_in)

LN_EPS = 1e-5


@dataclass(frozen=True)
class BlockConfig:
    """Width and variant switches shared by every block."""
    d_m: int = 256
    heads: int = 8
    ffn_mult: int = 4
    attn_scale: bool = True
    literal_eqs: bool = True

    def __post_init__(self):
        if self.d_m < 1 or self.heads < 1 or self.d_m % self.heads != 0:
            raise ParameterError(f"d_m={self.d_m} must be a positive multiple of heads={self.heads}")
        if self.ffn_mult < 1:
            raise ParameterError(f"ffn_mult must be >= 1, got {self.ffn_mult}")

    @property
    def d_q(self) -> int:
        return self.d_m // self.heads

    @property
    def d_v(self) -> int:
        return self.d_m // self.heads


@dataclass(frozen=True)
class AttentionMask:
    """Boolean [n_q, n_k] matrix; True means the query may attend to the key."""
    allowed: np.ndarray

    def __post_init__(self):
        allowed = np.asarray(self.allowed, dtype=bool)
        if allowed.ndim != 2:
            raise DimensionError(f"attention mask must be 2-D, got shape {allowed.shape}")
        if not np.all(allowed.any(axis=1)):
            raise ContractError("attention mask leaves a query row with no allowed key")
        object.__setattr__(self, "allowed", allowed)

    @property
    def shape(self):
        return self.allowed.shape

    @classmethod
    def full(cls, n_q: int, n_k: int) -> "AttentionMask":
        return cls(np.ones((n_q, n_k), dtype=bool))

    @classmethod
    def by_agent(cls, query_agents: np.ndarray, key_agents: np.ndarray, interaction: bool = True,
                 key_valid: Optional[np.ndarray] = None,
                 query_valid: Optional[np.ndarray] = None) -> "AttentionMask":
        """Mask from per-token agent ids.

        With interaction off a query only sees keys of its own agent. Invalid
        (padded) keys are hidden from valid queries; padded queries keep their
        own-agent keys so no row is empty.
        """
        query_agents, key_agents = np.asarray(query_agents), np.asarray(key_agents)
        same = query_agents[:, None] == key_agents[None, :]
        allowed = np.ones_like(same) if interaction else same.copy()
        if key_valid is not None:
            kv = np.asarray(key_valid, dtype=bool)[None, :]
            qv = np.ones(len(query_agents), dtype=bool) if query_valid is None else np.asarray(query_valid, bool)
            allowed &= kv | ~qv[:, None]
            allowed |= ~qv[:, None] & same
        return cls(allowed)

    def __and__(self, other: "AttentionMask") -> "AttentionMask":
        return AttentionMask(self.allowed & other.allowed)


# --------------------------------------------------------------------------
# Attention
# --------------------------------------------------------------------------

def attn(Q: Tensor, K: Tensor, V: Tensor, mask: Optional[AttentionMask] = None,
         scaled: bool = True) -> Tensor:
    """Softmax(Q Kᵀ s) V over the last two axes, leading axes broadcast.

    `s` is 1/sqrt(d_q) when `scaled`, else 1. Masked keys get zero weight.
    """
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention shape mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    if mask is not None and mask.shape != (Q.shape[-2], K.shape[-2]):
        raise DimensionError(f"mask {mask.shape} does not match [{Q.shape[-2]}, {K.shape[-2]}]")
    scores = matmul(Q, swapaxes(K, -1, -2))
    if scaled:
        scores = mul(scores, 1.0 / np.sqrt(Q.shape[-1]))
    weights = softmax(scores, axis=-1, mask=None if mask is None else mask.allowed)
    return matmul(weights, V)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    shape = x.shape
    return swapaxes(reshape(x, shape[:-1] + (heads, shape[-1] // heads)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    merged = swapaxes(x, -3, -2)
    shape = merged.shape
    return reshape(merged, shape[:-2] + (shape[-2] * shape[-1],))


def init_multi_head_attn(scope: ParamScope, cfg: BlockConfig, rng: np.random.Generator) -> None:
    for name in ("w_q", "w_k", "w_v", "w_o"):
        scope.add(name, uniform_fan_in(rng, (cfg.d_m, cfg.d_m), cfg.d_m))


def multi_head_attn(Q: Tensor, K: Tensor, V: Tensor, mask: Optional[AttentionMask],
                    params: ParamScope, cfg: BlockConfig) -> Tensor:
    """Per-head projections, attention per head, concatenation and output projection.

    Head i uses columns [i*d_q, (i+1)*d_q) of each input projection.
    """
    for x in (Q, K, V):
        if x.shape[-1] != cfg.d_m:
            raise DimensionError(f"multi-head attention input last dim {x.shape[-1]} != d_m {cfg.d_m}")
    q = _split_heads(matmul(Q, params["w_q"]), cfg.heads)
    k = _split_heads(matmul(K, params["w_k"]), cfg.heads)
    v = _split_heads(matmul(V, params["w_v"]), cfg.heads)
    heads = attn(q, k, v, mask, scaled=cfg.attn_scale)
    return matmul(_merge_heads(heads), params["w_o"])


# --------------------------------------------------------------------------
# Feed-forward and normalisation
# --------------------------------------------------------------------------

def init_ffn(scope: ParamScope, cfg: BlockConfig, rng: np.random.Generator) -> None:
    inner = cfg.ffn_mult * cfg.d_m
    scope.add("w1", uniform_fan_in(rng, (cfg.d_m, inner), cfg.d_m))
    scope.add("b1", np.zeros(inner))
    scope.add("w2", uniform_fan_in(rng, (inner, cfg.d_m), inner))
    scope.add("b2", np.zeros(cfg.d_m))


def ffn(x: Tensor, params: ParamScope) -> Tensor:
    return linear(relu(linear(x, params["w1"], params["b1"])), params["w2"], params["b2"])


def init_layer_norm(scope: ParamScope, d_m: int) -> None:
    scope.add("gain", np.ones(d_m))
    scope.add("bias", np.zeros(d_m))


def _ln(x: Tensor, params: ParamScope) -> Tensor:
    return layer_norm(x, params["gain"], params["bias"], LN_EPS)


# --------------------------------------------------------------------------
# Blocks
# --------------------------------------------------------------------------

def init_te_block(scope: ParamScope, cfg: BlockConfig, rng: np.random.Generator) -> None:
    init_multi_head_attn(scope.scope("attn"), cfg, rng)
    init_ffn(scope.scope("ffn"), cfg, rng)
    init_layer_norm(scope.scope("ln1"), cfg.d_m)
    init_layer_norm(scope.scope("ln2"), cfg.d_m)


def te_block(X: Tensor, params: ParamScope, cfg: BlockConfig,
             mask: Optional[AttentionMask] = None) -> Tensor:
    """Encoder block: x1 = LN(X + attn(X)); out = LN(x1 + FFN(x1))."""
    if X.shape[-1] != cfg.d_m:
        raise DimensionError(f"te_block input last dim {X.shape[-1]} != d_m {cfg.d_m}")
    x1 = _ln(add(X, multi_head_attn(X, X, X, mask, params.scope("attn"), cfg)), params.scope("ln1"))
    return _ln(add(x1, ffn(x1, params.scope("ffn"))), params.scope("ln2"))


def init_tdl_d(scope: ParamScope, cfg: BlockConfig, rng: np.random.Generator, with_map: bool = True) -> None:
    init_multi_head_attn(scope.scope("self_attn"), cfg, rng)
    init_multi_head_attn(scope.scope("ctx_attn"), cfg, rng)
    if with_map:
        init_multi_head_attn(scope.scope("map_attn"), cfg, rng)
    init_ffn(scope.scope("ffn"), cfg, rng)
    init_layer_norm(scope.scope("ln_self"), cfg.d_m)
    init_layer_norm(scope.scope("ln_ctx"), cfg.d_m)
    if with_map:
        init_layer_norm(scope.scope("ln_map"), cfg.d_m)
    init_layer_norm(scope.scope("ln_ffn"), cfg.d_m)


def tdl_d(X: Tensor, phi_S: Tensor, phi_map: Optional[Tensor], params: ParamScope, cfg: BlockConfig,
          self_mask: Optional[AttentionMask] = None, ctx_mask: Optional[AttentionMask] = None) -> Tensor:
    """Prior-decoder layer with layer normalisation after every sublayer.

    With `literal_eqs` the self-attention sublayer has no residual:
    x3 = LN(attn(X)); otherwise x3 = LN(X + attn(X)). The map sublayer is
    skipped when `phi_map` is None.
    """
    self_out = multi_head_attn(X, X, X, self_mask, params.scope("self_attn"), cfg)
    x3 = _ln(self_out if cfg.literal_eqs else add(X, self_out), params.scope("ln_self"))
    x2 = _ln(add(x3, multi_head_attn(x3, phi_S, phi_S, ctx_mask, params.scope("ctx_attn"), cfg)),
             params.scope("ln_ctx"))
    x1 = x2
    if phi_map is not None:
        x1 = _ln(add(x2, multi_head_attn(x2, phi_map, phi_map, None, params.scope("map_attn"), cfg)),
                 params.scope("ln_map"))
    return _ln(add(x1, ffn(x1, params.scope("ffn"))), params.scope("ln_ffn"))


def init_tdl_c(scope: ParamScope, cfg: BlockConfig, rng: np.random.Generator, with_map: bool = True) -> None:
    init_multi_head_attn(scope.scope("self_attn"), cfg, rng)
    init_multi_head_attn(scope.scope("ctx_attn"), cfg, rng)
    if with_map:
        init_multi_head_attn(scope.scope("map_attn"), cfg, rng)
    init_ffn(scope.scope("ffn"), cfg, rng)


def tdl_c(X: Tensor, phi_prime: Tensor, phi_map: Optional[Tensor], params: ParamScope, cfg: BlockConfig,
          self_mask: Optional[AttentionMask] = None, ctx_mask: Optional[AttentionMask] = None) -> Tensor:
    """Trajectory-decoder layer: the tdl_d structure with every layer norm removed."""
    self_out = multi_head_attn(X, X, X, self_mask, params.scope("self_attn"), cfg)
    x3 = self_out if cfg.literal_eqs else add(X, self_out)
    x2 = add(x3, multi_head_attn(x3, phi_prime, phi_prime, ctx_mask, params.scope("ctx_attn"), cfg))
    x1 = x2
    if phi_map is not None:
        x1 = add(x2, multi_head_attn(x2, phi_map, phi_map, None, params.scope("map_attn"), cfg))
    return add(x1, ffn(x1, params.scope("ffn")))


# --------------------------------------------------------------------------
# Closed-form parameter counts
# --------------------------------------------------------------------------

def multi_head_attn_param_count(cfg: BlockConfig) -> int:
    return 4 * cfg.d_m * cfg.d_m


def ffn_param_count(cfg: BlockConfig) -> int:
    inner = cfg.ffn_mult * cfg.d_m
    return 2 * cfg.d_m * inner + inner + cfg.d_m


def te_block_param_count(cfg: BlockConfig) -> int:
    return multi_head_attn_param_count(cfg) + ffn_param_count(cfg) + 2 * 2 * cfg.d_m


def tdl_d_param_count(cfg: BlockConfig, with_map: bool = True) -> int:
    sublayers = 3 if with_map else 2
    return sublayers * multi_head_attn_param_count(cfg) + ffn_param_count(cfg) + (sublayers + 1) * 2 * cfg.d_m


def tdl_c_param_count(cfg: BlockConfig, with_map: bool = True) -> int:
    sublayers = 3 if with_map else 2
    return sublayers * multi_head_attn_param_count(cfg) + ffn_param_count(cfg)
