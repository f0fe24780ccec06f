"""
EM Training
===========

Bivariate Gaussian likelihood, the exact and factorised E-step posteriors,
the EM objective, SGD with momentum, the triangular cyclic learning rate and
the training loop with its teacher-forced → autoregressive schedule.

E-step: the posterior over each agent's mode is computed with the parameters
frozen from A·K teacher-forced decodes that sweep one agent's mode at a
time while the others stay at the prior's argmax. M-step: one update of
−Σ_a Σ_k q_a(k) [log p(S^a | k) + log p_a(k)] on the live parameters θ.
"""

import itertools
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import logsumexp

from config import TrainConfig, worker_count
from decoder import GaussianSeq, Regime
from errors import CapacityError, ContractError, DimensionError, TrainingError
from model import PARAMS_BLOB, LatentFormer, read_manifest, read_optimizer_state
from scene_data import Scene, SceneSet
from tensor import (ParamStore, Tensor, add, backward, div, getitem, log, mul, reshape, sub, tsum)

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
METRICS_FILE = "metrics.jsonl"
EXACT_MAX_AGENTS = 2
EXACT_MAX_MODES = 3


# --------------------------------------------------------------------------
# Likelihood
# --------------------------------------------------------------------------

def bivariate_nll(g: GaussianSeq, target: np.ndarray) -> Tensor:
    """Per-agent NLL summed over time: [..., A] from Gaussians [..., A, T, 5] and targets [A, T, 2].

    Each step contributes log(2π σx σy √(1−ρ²)) +
    [(dx/σx)² + (dy/σy)² − 2ρ dx dy / (σx σy)] / (2(1−ρ²)).
    """
    target = np.asarray(target, dtype=np.float64)
    if g.params.shape[-3:-1] != target.shape[:2] or target.shape[-1] != 2:
        raise DimensionError(f"targets {target.shape} do not match Gaussians {g.params.shape}")
    p = g.params
    dx = sub(target[..., 0], getitem(p, (Ellipsis, 0)))
    dy = sub(target[..., 1], getitem(p, (Ellipsis, 1)))
    sx, sy, rho = getitem(p, (Ellipsis, 2)), getitem(p, (Ellipsis, 3)), getitem(p, (Ellipsis, 4))
    one_minus = sub(1.0, mul(rho, rho))
    ux, uy = div(dx, sx), div(dy, sy)
    quad = sub(add(mul(ux, ux), mul(uy, uy)), mul(mul(rho, 2.0), mul(ux, uy)))
    log_norm = add(add(log(sx), log(sy)), add(mul(log(one_minus), 0.5), LOG_2PI))
    per_step = add(log_norm, div(quad, mul(one_minus, 2.0)))
    return tsum(per_step, axis=-1)


def bivariate_density(mean: np.ndarray, sigma: np.ndarray, rho: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Density on a grid, for normalisation checks."""
    dx, dy = (x - mean[0]) / sigma[0], (y - mean[1]) / sigma[1]
    one_minus = 1.0 - rho * rho
    quad = (dx * dx + dy * dy - 2.0 * rho * dx * dy) / (2.0 * one_minus)
    return np.exp(-quad) / (2.0 * np.pi * sigma[0] * sigma[1] * np.sqrt(one_minus))


# --------------------------------------------------------------------------
# Posteriors
# --------------------------------------------------------------------------

@dataclass
class Posterior:
    """Per-agent posterior q [A, K] with the baseline config its sweep held fixed."""
    q: np.ndarray
    baseline: np.ndarray
    nll: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.any(self.q < 0) or not np.allclose(self.q.sum(axis=-1), 1.0, rtol=0.0, atol=1e-12):
            raise ContractError("posterior rows must be nonnegative and sum to 1")

    @property
    def configs(self) -> np.ndarray:
        return sweep_configs(self.baseline, self.q.shape[1])


@dataclass
class JointPosterior:
    """Exact posterior over every joint config, enumerated lexicographically."""
    configs: np.ndarray
    q: np.ndarray
    K: int

    def marginals(self) -> np.ndarray:
        agents = self.configs.shape[1]
        out = np.zeros((agents, self.K))
        for a in range(agents):
            np.add.at(out[a], self.configs[:, a], self.q)
        return out


def sweep_configs(baseline: np.ndarray, K: int) -> np.ndarray:
    """Row a*K + k is the baseline with agent a switched to mode k: [A*K, A]."""
    baseline = np.asarray(baseline, dtype=np.int64)
    agents = baseline.size
    configs = np.tile(baseline, (agents * K, 1))
    for a in range(agents):
        configs[a * K:(a + 1) * K, a] = np.arange(K)
    return configs


def sweep_nll(nll: np.ndarray, K: int) -> np.ndarray:
    """Pick NLL_a(k) out of sweep NLLs [A*K, A] → [A, K]."""
    agents = nll.shape[1]
    rows = np.arange(agents)[:, None] * K + np.arange(K)[None, :]
    return nll[rows, np.arange(agents)[:, None]]


def _normalise(scores: np.ndarray) -> np.ndarray:
    return np.exp(scores - logsumexp(scores, axis=-1, keepdims=True))


def posterior_from_sweep(nll: np.ndarray, log_prior: np.ndarray, baseline: np.ndarray) -> Posterior:
    """q_a(k) ∝ exp(−NLL_a(k)) p_a(k), normalised per agent."""
    K = log_prior.shape[1]
    per_mode = sweep_nll(np.asarray(nll), K)
    return Posterior(q=_normalise(-per_mode + log_prior), baseline=np.asarray(baseline), nll=per_mode)


def exact_configs(agents: int, K: int) -> np.ndarray:
    return np.array(list(itertools.product(range(K), repeat=agents)), dtype=np.int64)


def joint_posterior(nll: np.ndarray, log_prior: np.ndarray, configs: np.ndarray) -> JointPosterior:
    """q(z) ∝ exp(−Σ_a NLL_a(z)) Π_a p_a(z_a) from per-config NLLs [B, A]."""
    agents, K = log_prior.shape
    scores = -np.asarray(nll).sum(axis=1) + log_prior[np.arange(agents), configs].sum(axis=1)
    return JointPosterior(configs=configs, q=_normalise(scores), K=K)


def posterior_exact(model: LatentFormer, scene: Scene, params: Optional[ParamStore] = None) -> JointPosterior:
    """Enumerate all K^A joint configs; only for A <= 2 and K <= 3."""
    K, agents = model.config.modes, scene.n_agents
    if agents > EXACT_MAX_AGENTS or K > EXACT_MAX_MODES:
        raise CapacityError(f"exact posterior enumerates K^A configs; limited to A <= {EXACT_MAX_AGENTS}, "
                            f"K <= {EXACT_MAX_MODES} (got A={agents}, K={K})")
    params = model.inference_params() if params is None else params
    enc = model.encode(scene, params)
    log_prior = model.prior(enc, params).log_probs.data
    configs = exact_configs(agents, K)
    nll = bivariate_nll(model.decode(enc, scene, configs, Regime.TEACHER_FORCED, params), scene.future_array()).data
    return joint_posterior(nll, log_prior, configs)


def _factorized(model: LatentFormer, scene: Scene, params: ParamStore,
                regime: Regime) -> Tuple[Posterior, np.ndarray]:
    enc = model.encode(scene, params)
    prior = model.prior(enc, params)
    baseline = prior.argmax()
    seq = model.decode(enc, scene, sweep_configs(baseline, model.config.modes), regime, params)
    nll = bivariate_nll(seq, scene.future_array()).data
    return posterior_from_sweep(nll, prior.log_probs.data, baseline), seq.mean


def posterior_factorized(model: LatentFormer, scene: Scene, params: Optional[ParamStore] = None,
                         regime: Regime = Regime.TEACHER_FORCED) -> Posterior:
    """Per-agent posterior from A·K decodes around the prior's argmax config."""
    params = model.inference_params() if params is None else params
    return _factorized(model, scene, params, regime)[0]


def posterior_gap(model: LatentFormer, scene: Scene) -> float:
    """Total-variation distance between the factorised posterior and the exact marginals."""
    params = model.inference_params()
    exact = posterior_exact(model, scene, params).marginals()
    factorized = posterior_factorized(model, scene, params).q
    gap = float(0.5 * np.abs(exact - factorized).sum(axis=1).max())
    logger.info(f"Factorised posterior TV gap on scene {scene.id}: {gap:.4g}")
    return gap


# --------------------------------------------------------------------------
# Objective
# --------------------------------------------------------------------------

def em_objective(nll: Tensor, log_prior: Tensor, q: np.ndarray) -> Tensor:
    """Σ_a Σ_k q_a(k) (NLL_a(k) − log p_a(k)) from sweep NLLs [A*K, A]."""
    agents, K = q.shape
    rows = (np.arange(agents)[:, None] * K + np.arange(K)[None, :]).reshape(-1)
    cols = np.repeat(np.arange(agents), K)
    per_mode = reshape(getitem(nll, (rows, cols)), (agents, K))
    return tsum(mul(sub(per_mode, log_prior), q))


def em_loss(model: LatentFormer, scene: Scene, q: Posterior, params: Optional[ParamStore] = None,
            regime: Regime = Regime.TEACHER_FORCED) -> Tensor:
    """EM objective with the posterior held fixed, decoded under `params` (θ by default)."""
    enc = model.encode(scene, params)
    prior = model.prior(enc, params)
    seq = model.decode(enc, scene, q.configs, regime, params)
    return em_objective(bivariate_nll(seq, scene.future_array()), prior.log_probs, q.q)


def initial_loss(scene: Scene, K: int) -> float:
    """EM loss of a model whose head and prior readout are zero: unit Gaussians at the origin, uniform prior."""
    gt = scene.future_array()
    return float(gt.shape[0] * gt.shape[1] * LOG_2PI + 0.5 * (gt * gt).sum() + gt.shape[0] * np.log(K))


# --------------------------------------------------------------------------
# Optimiser and schedule
# --------------------------------------------------------------------------

class SGDMomentum:
    """v ← μ v + g; θ ← θ − lr v."""

    def __init__(self, params: ParamStore, lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        for name, tensor in self.params.items():
            if tensor.grad is None:
                grad = np.zeros_like(tensor.data)
            else:
                grad = tensor.grad
            v = self.momentum * self.velocity[name] + grad
            self.velocity[name] = v
            tensor.data -= lr * v

    def state(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.velocity.values()]) if self.velocity else np.zeros(0)

    def load_state(self, flat: np.ndarray) -> None:
        total = sum(v.size for v in self.velocity.values())
        if flat.size != total:
            raise ContractError(f"optimizer state has {flat.size} values, expected {total}")
        position = 0
        for name, v in self.velocity.items():
            self.velocity[name] = flat[position:position + v.size].reshape(v.shape).copy()
            position += v.size


def global_grad_norm(params: ParamStore) -> float:
    total = 0.0
    for _, tensor in params.items():
        if tensor.grad is not None:
            total += float((tensor.grad * tensor.grad).sum())
    return float(np.sqrt(total))


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their global norm is at most `max_norm`; returns the norm before clipping."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for _, tensor in params.items():
            if tensor.grad is not None:
                tensor.grad = tensor.grad * scale
    return norm


def cyclic_lr(epoch: int, cfg: TrainConfig) -> float:
    """Triangular wave from lr down to lr * lr_min_ratio and back every lr_period epochs."""
    high, low = cfg.lr, cfg.lr * cfg.lr_min_ratio
    position = (epoch % cfg.lr_period) / cfg.lr_period
    return low + (high - low) * abs(1.0 - 2.0 * position)


def phase_for(epoch: int, model: LatentFormer, cfg: TrainConfig) -> Regime:
    if model.config.decoding == "non_autoregressive":
        return Regime.NON_AUTOREGRESSIVE
    return Regime.TEACHER_FORCED if epoch < cfg.switch_epoch else Regime.AUTOREGRESSIVE


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

@dataclass
class SceneStep:
    loss: float
    min_ade: float


@dataclass
class TrainResult:
    model: LatentFormer
    metrics: pd.DataFrame
    out_dir: Optional[str] = None


def sweep_min_ade(means: np.ndarray, gt: np.ndarray, K: int) -> float:
    """Mean over agents of the best ADE among each agent's swept modes."""
    agents = gt.shape[0]
    best = []
    for a in range(agents):
        own = means[a * K:(a + 1) * K, a]
        best.append(np.linalg.norm(own - gt[a], axis=-1).mean(axis=-1).min())
    return float(np.mean(best))


def scene_step(model: LatentFormer, scene: Scene, phase: Regime, scale: float,
               posterior: Optional[Posterior] = None) -> SceneStep:
    """E-step (unless given) and M-step gradient accumulation for one scene."""
    gt = scene.future_array()
    K = model.config.modes
    enc = model.encode(scene)
    prior = model.prior(enc)
    if posterior is None:
        baseline = prior.argmax()
        seq = model.decode(enc, scene, sweep_configs(baseline, K), phase)
        nll = bivariate_nll(seq, gt)
        posterior = posterior_from_sweep(nll.data, prior.log_probs.data, baseline)
        min_ade = sweep_min_ade(seq.mean, gt, K)
    else:
        seq = model.decode(enc, scene, posterior.configs, phase)
        nll = bivariate_nll(seq, gt)
        min_ade = float("nan")
    loss = em_objective(nll, prior.log_probs, posterior.q)
    value = float(loss.data)
    if np.isfinite(value):
        backward(mul(loss, scale))
    return SceneStep(loss=value, min_ade=min_ade)


def _frozen_posterior(model: LatentFormer, scene: Scene, frozen: ParamStore) -> Tuple[Posterior, float]:
    post, means = _factorized(model, scene, frozen, Regime.TEACHER_FORCED)
    return post, sweep_min_ade(means, scene.future_array(), model.config.modes)


def _dump_nonfinite(out_dir: Optional[str], epoch: int, phase: Regime, lr: float,
                    scenes: Sequence[Scene], losses: Sequence[float]) -> str:
    directory = out_dir or tempfile.mkdtemp(prefix="latentformer-")
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"nonfinite_epoch{epoch:04d}.json")
    document = {"epoch": epoch, "phase": phase.value, "lr": lr,
                "scenes": [{"id": s.id, "loss": repr(l), "past": s.past_array().tolist(),
                            "future": s.future_array().tolist()} for s, l in zip(scenes, losses)]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)
    return path


def train_batch(model: LatentFormer, optimizer: SGDMomentum, scenes: Sequence[Scene], phase: Regime,
                lr: float, grad_clip: float) -> Tuple[List[float], List[float], float]:
    """One M-step update over a batch; returns per-scene losses, min ADEs and the pre-clip grad norm."""
    model.params.zero_grad()
    scale = 1.0 / len(scenes)
    pre = [None] * len(scenes)
    ades_frozen = [float("nan")] * len(scenes)
    if phase == Regime.AUTOREGRESSIVE:
        frozen = model.params.frozen()
        results = Parallel(n_jobs=min(worker_count(), len(scenes)), prefer="threads")(
            delayed(_frozen_posterior)(model, s, frozen) for s in scenes)
        pre = [r[0] for r in results]
        ades_frozen = [r[1] for r in results]
    losses, ades = [], []
    for scene, post, ade in zip(scenes, pre, ades_frozen):
        step = scene_step(model, scene, phase, scale, post)
        losses.append(step.loss)
        ades.append(step.min_ade if post is None else ade)
    norm = clip_grad_norm(model.params, grad_clip)
    if all(np.isfinite(losses)) and np.isfinite(norm):
        optimizer.step(lr)
    return losses, ades, norm


def write_metrics(path: str, records: Sequence[Dict]) -> None:
    """One JSON object per epoch; floats are written at full precision."""
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")


def read_metrics(path: str) -> List[Dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def train(model: LatentFormer, dataset: SceneSet, cfg: TrainConfig, out_dir: Optional[str] = None,
          resume: bool = False, on_epoch=None) -> TrainResult:
    """Run EM training; checkpoints and the metrics log go to `out_dir` after every epoch."""
    cfg.validate()
    if len(dataset) == 0:
        raise ContractError("training needs a nonempty dataset")
    for scene in dataset:
        model.check_scene(scene)
    optimizer = SGDMomentum(model.params, cfg.lr, cfg.momentum)
    records: List[Dict] = []
    start_epoch = 0
    if resume:
        if out_dir is None:
            raise ContractError("resume needs a checkpoint directory")
        manifest = read_manifest(out_dir)
        model.params.read_blob(os.path.join(out_dir, manifest.get("blob", PARAMS_BLOB)), manifest["parameters"])
        state = read_optimizer_state(out_dir)
        if state is not None:
            optimizer.load_state(state)
        start_epoch = int(manifest.get("epoch") or 0)
        metrics_path = os.path.join(out_dir, METRICS_FILE)
        if os.path.isfile(metrics_path) and os.path.getsize(metrics_path) > 0:
            records = read_metrics(metrics_path)
        logger.info(f"Resuming from epoch {start_epoch} in {out_dir}")

    for epoch in range(start_epoch, cfg.epochs):
        started = time.perf_counter()
        phase = phase_for(epoch, model, cfg)
        batch_size = cfg.batch_ar if phase == Regime.AUTOREGRESSIVE else cfg.batch_tf
        lr = cyclic_lr(epoch, cfg)
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(len(dataset))
        losses, ades, norms = [], [], []
        for begin in range(0, len(order), batch_size):
            batch = [dataset[int(i)] for i in order[begin:begin + batch_size]]
            batch_losses, batch_ades, norm = train_batch(model, optimizer, batch, phase, lr, cfg.grad_clip)
            if not all(np.isfinite(batch_losses)) or not np.isfinite(norm):
                dump = _dump_nonfinite(out_dir, epoch, phase, lr, batch, batch_losses)
                raise TrainingError(f"non-finite loss at epoch {epoch}", dump_path=dump)
            losses.extend(batch_losses)
            ades.extend(batch_ades)
            norms.append(norm)
        record = {
            "epoch": epoch,
            "phase": phase.value,
            "lr": lr,
            "loss": float(np.mean(losses)),
            "tf_min_ade": float(np.nanmean(ades)) if not np.all(np.isnan(ades)) else None,
            "grad_norm": float(np.max(norms)),
            "seconds": round(time.perf_counter() - started, 3),
        }
        records.append(record)
        logger.info(f"epoch {epoch} [{phase.value}] lr={lr:.2e} loss={record['loss']:.4f} "
                    f"minADE={record['tf_min_ade']} grad={record['grad_norm']:.3f}")
        if out_dir is not None:
            model.save(out_dir, epoch=epoch + 1, optimizer_state=optimizer.state(),
                       extra={"train": asdict(cfg)})
            write_metrics(os.path.join(out_dir, METRICS_FILE), records)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(model=model, metrics=pd.DataFrame(records), out_dir=out_dir)
