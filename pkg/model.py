"""
LatentFormer Model
==================

Assembles the trajectory encoder, map encoder, intention latent and decoder
around one ParamStore, and reads/writes checkpoints.

Parameter scopes: `encoder.*`, `map.*` (absent when the model runs without a
map), `intent.*` and `decoder.*`. A checkpoint directory holds `manifest.json`
and `params.bin`, plus `optimizer.bin` when training state is saved.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional

import numpy as np

from config import ModelConfig, model_config_from_dict
from decoder import (GaussianSeq, Regime, decode_autoregressive, decode_non_autoregressive,
                     decode_teacher_forced, init_decoder, sample_gaussian)
from errors import CapacityError, ConfigError, ContractError, FormatError
from latent_intent import ModePrior, init_latent_intent, mode_prior
from map_encoder import MapTokens, encode_map, init_map_encoder
from scene_data import Scene
from tensor import ParamStore, Tensor, make_rng
from trajectory_encoder import ContextEncoding, encode, init_trajectory_encoder

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "latentformer-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST = "manifest.json"
PARAMS_BLOB = "params.bin"
OPTIMIZER_BLOB = "optimizer.bin"


@dataclass
class EncoderContext:
    """Context and map tokens for one scene."""
    ctx: ContextEncoding
    map_tokens: Optional[MapTokens]

    @property
    def phi_map(self) -> Optional[Tensor]:
        return None if self.map_tokens is None else self.map_tokens.phi_map


class LatentFormer:
    """Multi-agent trajectory predictor with a discrete intention latent."""

    kind = "latentformer"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        self.seed = int(seed)
        self.params = ParamStore()
        rng = make_rng(seed)
        init_trajectory_encoder(self.params.scope("encoder"), config, rng)
        if config.map_mode != "none":
            init_map_encoder(self.params.scope("map"), config, rng)
        init_latent_intent(self.params.scope("intent"), config, rng)
        init_decoder(self.params.scope("decoder"), config, rng)
        logger.debug(f"Initialised LatentFormer with {self.params.num_parameters()} parameters")

    # predictor protocol
    @property
    def tau(self) -> int:
        return self.config.tau

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def modes(self) -> int:
        return self.config.modes

    def parameter_counts(self) -> Dict[str, int]:
        return {scope: self.params.num_parameters(scope + ".") for scope in ("encoder", "map", "intent", "decoder")}

    def check_scene(self, scene: Scene) -> None:
        if scene.tau != self.config.tau or scene.horizon != self.config.horizon:
            raise ConfigError(f"scene {scene.id} has tau={scene.tau}, T={scene.horizon}; model expects "
                              f"tau={self.config.tau}, T={self.config.horizon}")
        if scene.n_agents > self.config.max_agents:
            raise CapacityError(f"scene {scene.id} has {scene.n_agents} agents, capacity is "
                                f"{self.config.max_agents}")

    # ------------------------------------------------------------------
    # Forward passes
    # ------------------------------------------------------------------

    def encode(self, scene: Scene, params: Optional[ParamStore] = None) -> EncoderContext:
        params = self.params if params is None else params
        self.check_scene(scene)
        ctx = encode(scene.observation(), params.scope("encoder"), self.config)
        tokens = None
        if self.config.map_mode != "none":
            tokens = encode_map(scene.mask, params.scope("map"), self.config)
        return EncoderContext(ctx=ctx, map_tokens=tokens)

    def prior(self, enc: EncoderContext, params: Optional[ParamStore] = None) -> ModePrior:
        params = self.params if params is None else params
        return mode_prior(enc.ctx, enc.phi_map, params.scope("intent"), self.config)

    def decode(self, enc: EncoderContext, scene: Scene, configs: np.ndarray, regime: Regime,
               params: Optional[ParamStore] = None, select: str = "mean", seed: int = 0) -> GaussianSeq:
        """Gaussians [B, A, T, 5] for a batch of mode configs under one regime."""
        params = self.params if params is None else params
        intent, dec = params.scope("intent"), params.scope("decoder")
        if regime == Regime.TEACHER_FORCED:
            return decode_teacher_forced(enc.ctx, enc.phi_map, configs, scene.future_array(),
                                         scene.last_observed(), intent, dec, self.config)
        if regime == Regime.AUTOREGRESSIVE:
            _, seq = decode_autoregressive(enc.ctx, enc.phi_map, configs, scene.last_observed(), intent, dec,
                                           self.config, select=select, seed=seed)
            return seq
        return decode_non_autoregressive(enc.ctx, enc.phi_map, configs, intent, dec, self.config)

    def inference_params(self) -> ParamStore:
        """Snapshot without gradient tracking, shareable across threads."""
        return self.params.frozen()

    def predict_modes(self, scene: Scene, k: Optional[int] = None, select: str = "mean", seed: int = 0,
                      params: Optional[ParamStore] = None) -> np.ndarray:
        """One trajectory per mode: [k, A, T, 2], all agents conditioned on mode k jointly."""
        k = self.config.modes if k is None else k
        if not 1 <= k <= self.config.modes:
            raise ContractError(f"k must be in 1..{self.config.modes}, got {k}")
        params = self.inference_params() if params is None else params
        enc = self.encode(scene, params)
        configs = np.repeat(np.arange(k)[:, None], scene.n_agents, axis=1)
        intent, dec = params.scope("intent"), params.scope("decoder")
        if self.config.decoding == "non_autoregressive":
            seq = decode_non_autoregressive(enc.ctx, enc.phi_map, configs, intent, dec, self.config)
            if select == "mean":
                return seq.mean.copy()
            return sample_gaussian(seq.mean, seq.sigma, seq.rho, make_rng(seed))
        sample, _ = decode_autoregressive(enc.ctx, enc.phi_map, configs, scene.last_observed(), intent, dec,
                                          self.config, select=select, seed=seed)
        return sample.points

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def manifest(self, epoch: Optional[int] = None, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        document = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "seed": self.seed,
            "epoch": epoch,
            "config": asdict(self.config),
            "num_parameters": self.params.num_parameters(),
            "blob": PARAMS_BLOB,
            "parameters": self.params.layout(),
            "optimizer": None,
        }
        if extra:
            document.update(extra)
        return document

    def save(self, directory: str, epoch: Optional[int] = None, optimizer_state: Optional[np.ndarray] = None,
             extra: Optional[Dict[str, Any]] = None) -> str:
        os.makedirs(directory, exist_ok=True)
        document = self.manifest(epoch, extra)
        self.params.write_blob(os.path.join(directory, PARAMS_BLOB))
        if optimizer_state is not None:
            np.asarray(optimizer_state, dtype="<f8").tofile(os.path.join(directory, OPTIMIZER_BLOB))
            document["optimizer"] = {"blob": OPTIMIZER_BLOB, "values": int(np.asarray(optimizer_state).size)}
        path = os.path.join(directory, MANIFEST)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(document, indent=2, sort_keys=True) + "\n")
        logger.info(f"Saved checkpoint to {directory}")
        return path

    @classmethod
    def load(cls, directory: str) -> "LatentFormer":
        document = read_manifest(directory)
        if document.get("kind") != cls.kind:
            raise FormatError(f"checkpoint kind {document.get('kind')!r} is not {cls.kind!r}")
        try:
            config = model_config_from_dict(document["config"])
        except ConfigError as e:
            raise FormatError(f"checkpoint config invalid: {e}") from None
        model = cls(config, seed=int(document.get("seed", 0)))
        try:
            model.params.read_blob(os.path.join(directory, document.get("blob", PARAMS_BLOB)),
                                   document["parameters"])
        except ContractError as e:
            raise FormatError(f"checkpoint does not match model: {e}") from None
        logger.info(f"Loaded checkpoint from {directory}")
        return model


def read_manifest(directory: str) -> Dict[str, Any]:
    path = os.path.join(directory, MANIFEST)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not valid JSON: {e.msg}") from None
    if document.get("format") != CHECKPOINT_FORMAT or document.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path} is not a version {CHECKPOINT_VERSION} LatentFormer checkpoint")
    return document


def read_optimizer_state(directory: str) -> Optional[np.ndarray]:
    document = read_manifest(directory)
    entry = document.get("optimizer")
    if not entry:
        return None
    values = np.fromfile(os.path.join(directory, entry["blob"]), dtype="<f8")
    if values.size != entry["values"]:
        raise FormatError(f"optimizer state holds {values.size} values, manifest says {entry['values']}")
    return values


class OracleModel:
    """Predicts the ground-truth future for every mode; for pipeline checks."""

    kind = "oracle"

    def __init__(self, tau: int = 4, horizon: int = 6, modes: int = 12):
        self.tau = tau
        self.horizon = horizon
        self.modes = modes

    def check_scene(self, scene: Scene) -> None:
        if scene.tau != self.tau or scene.horizon != self.horizon:
            raise ConfigError(f"scene {scene.id} has tau={scene.tau}, T={scene.horizon}; oracle expects "
                              f"tau={self.tau}, T={self.horizon}")

    def inference_params(self) -> None:
        return None

    def predict_modes(self, scene: Scene, k: Optional[int] = None, select: str = "mean", seed: int = 0,
                      params: Any = None) -> np.ndarray:
        k = self.modes if k is None else k
        self.check_scene(scene)
        return np.repeat(scene.future_array()[None], k, axis=0)

    def save(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        document = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": self.kind,
                    "tau": self.tau, "horizon": self.horizon, "modes": self.modes}
        path = os.path.join(directory, MANIFEST)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(document, indent=2, sort_keys=True) + "\n")
        return path


def load_predictor(directory: str):
    """Load whichever predictor a checkpoint directory holds."""
    document = read_manifest(directory)
    kind = document.get("kind")
    if kind == OracleModel.kind:
        return OracleModel(tau=int(document["tau"]), horizon=int(document["horizon"]),
                           modes=int(document["modes"]))
    if kind == LatentFormer.kind:
        return LatentFormer.load(directory)
    raise FormatError(f"unknown checkpoint kind {kind!r}")
