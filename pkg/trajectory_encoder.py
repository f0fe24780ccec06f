"""
Trajectory Encoder
==================

Embeds every agent's observed track into the context sequence `phi_S`. Each
state (x, y) gets the agent index appended, one shared linear layer maps it to
d_m, a learned per-time-step position is added and the tokens, ordered time-major
(t ascending, agent ascending within t), pass through the encoder blocks.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from config import ModelConfig
from errors import CapacityError, ContractError, DimensionError
from nn_blocks import AttentionMask, init_te_block, te_block
from tensor import ParamScope, Tensor, add, concat, embedding, getitem, linear, normal_table, uniform_fan_in

logger = logging.getLogger(__name__)


@dataclass
class ObservationBatch:
    """Observed states [A_slots, τ+1, 2] with a validity flag per agent slot."""
    states: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.states.ndim != 3 or self.states.shape[-1] != 2:
            raise DimensionError(f"observed states must be [A, τ+1, 2], got {self.states.shape}")
        if self.valid.shape != (self.states.shape[0],):
            raise DimensionError(f"valid mask {self.valid.shape} does not match {self.states.shape[0]} slots")
        if not self.valid.any():
            raise ContractError("observation needs at least one valid agent")
        if not np.all(np.isfinite(self.states[self.valid])):
            raise ContractError("observed coordinates must be finite")

    @classmethod
    def from_tracks(cls, pasts: Sequence[np.ndarray], capacity: Optional[int] = None) -> "ObservationBatch":
        """Stack per-agent pasts, zero-padding up to `capacity` slots."""
        pasts = [np.asarray(p, dtype=np.float64) for p in pasts]
        slots = len(pasts) if capacity is None else capacity
        if slots < len(pasts):
            raise CapacityError(f"{len(pasts)} agents do not fit in {slots} slots")
        steps = pasts[0].shape[0]
        states = np.zeros((slots, steps, 2))
        for i, p in enumerate(pasts):
            states[i] = p
        valid = np.arange(slots) < len(pasts)
        return cls(states=states, valid=valid)

    @property
    def slots(self) -> int:
        return self.states.shape[0]

    @property
    def agent_count(self) -> int:
        return int(self.valid.sum())

    @property
    def steps(self) -> int:
        return self.states.shape[1]


@dataclass
class ContextEncoding:
    """`phi_S` [A·(τ+1), d_m] plus the token ↔ (agent, time) bookkeeping."""
    phi_S: Tensor
    slots: int
    steps: int
    valid: np.ndarray

    def position(self, agent: int, t: int) -> int:
        return t * self.slots + agent

    def agent_time(self, position: int) -> Tuple[int, int]:
        return position % self.slots, position // self.slots

    @property
    def token_agents(self) -> np.ndarray:
        return np.tile(np.arange(self.slots), self.steps)

    @property
    def token_valid(self) -> np.ndarray:
        return np.tile(self.valid, self.steps)


def init_trajectory_encoder(scope: ParamScope, cfg: ModelConfig, rng: np.random.Generator) -> None:
    scope.add("embed.w", uniform_fan_in(rng, (3, cfg.d_m), 3))
    scope.add("embed.b", np.zeros(cfg.d_m))
    scope.add("pos", normal_table(rng, (cfg.tau + 1, cfg.d_m)))
    block = cfg.block_config()
    for i in range(cfg.encoder_blocks):
        init_te_block(scope.scope(f"te{i}"), block, rng)


def state_features(states: np.ndarray, agent_ids: Optional[np.ndarray] = None) -> np.ndarray:
    """(x, y, agent index) per state, reordered time-major to [steps·A, 3].

    `states` is [..., A, steps, 2]; leading axes are kept. `agent_ids` replaces
    the index feature when `states` holds a subset of the slots.
    """
    agents, steps = states.shape[-3], states.shape[-2]
    ids = np.arange(agents) if agent_ids is None else np.asarray(agent_ids)
    index = np.broadcast_to(ids.astype(np.float64)[:, None, None], states.shape[:-1] + (1,))
    feats = np.concatenate([states, index], axis=-1)
    feats = np.swapaxes(feats, -3, -2)
    return feats.reshape(states.shape[:-3] + (steps * agents, 3))


def embed_states(obs: ObservationBatch, params: ParamScope, cfg: ModelConfig,
                 slots: Optional[np.ndarray] = None) -> Tensor:
    """Tokens for the agent slots in `slots` (all slots by default), time-major."""
    if obs.slots > cfg.max_agents:
        raise CapacityError(f"scene has {obs.slots} agent slots, model capacity is {cfg.max_agents}")
    if obs.steps != cfg.tau + 1:
        raise DimensionError(f"observation has {obs.steps} states, model expects τ+1 = {cfg.tau + 1}")
    slots = np.arange(obs.slots) if slots is None else np.asarray(slots)
    tokens = linear(Tensor(state_features(obs.states[slots], agent_ids=slots)), params["embed.w"], params["embed.b"])
    times = np.repeat(np.arange(obs.steps), len(slots))
    return add(tokens, embedding(params["pos"], times))


def group_mask(slots: np.ndarray, steps: int, interaction: bool) -> AttentionMask:
    agents = np.tile(np.asarray(slots), steps)
    return AttentionMask.by_agent(agents, agents, interaction=interaction)


def slot_order(obs: ObservationBatch) -> np.ndarray:
    """Index into the real-then-padded token stack for every t*A + a position."""
    times = np.arange(obs.steps)[:, None] * obs.slots
    positions = np.concatenate([(times + np.flatnonzero(obs.valid)).ravel(),
                                (times + np.flatnonzero(~obs.valid)).ravel()])
    order = np.empty(len(positions), dtype=int)
    order[positions] = np.arange(len(positions))
    return order


def encode_group(obs: ObservationBatch, slots: np.ndarray, params: ParamScope, cfg: ModelConfig,
                 interaction: bool) -> Tensor:
    x = embed_states(obs, params, cfg, slots)
    mask = group_mask(slots, obs.steps, interaction)
    block = cfg.block_config()
    for i in range(cfg.encoder_blocks):
        x = te_block(x, params.scope(f"te{i}"), block, mask)
    return x


def encode(obs: ObservationBatch, params: ParamScope, cfg: ModelConfig) -> ContextEncoding:
    """Self-attention over the real agent-time tokens.

    Real and padded slots are encoded as separate groups, so real tokens go
    through the same arithmetic whatever the slot capacity. A padded token only
    attends to its own slot.
    """
    x = encode_group(obs, np.flatnonzero(obs.valid), params, cfg, cfg.interaction)
    pad = np.flatnonzero(~obs.valid)
    if len(pad):
        x = concat([x, encode_group(obs, pad, params, cfg, interaction=False)], axis=0)
        x = getitem(x, slot_order(obs))
    return ContextEncoding(phi_S=x, slots=obs.slots, steps=obs.steps, valid=obs.valid.copy())
