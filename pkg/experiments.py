"""
Experiments
===========

Ablation runs over model variants and seeds, the AR vs NAR decoding benchmark
and the route-diversity check on intersection scenes.
"""

import logging
import time
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import RunConfig
from decoder import Regime
from errors import ConfigError, ContractError
from evaluation import evaluate, predict_all, report_from_predictions
from model import LatentFormer
from scene_data import Scene, SceneSet, exit_arm
from training import train

logger = logging.getLogger(__name__)

VARIANTS: Dict[str, Dict] = {
    "full": {},
    "cnn_map": {"map_mode": "cnn"},
    "no_map": {"map_mode": "none"},
    "no_interaction": {"interaction": False},
    "non_autoregressive": {"decoding": "non_autoregressive"},
}
METRICS = ("min_ade", "avg_ade", "min_fde", "avg_fde", "offroad_rate")


# --------------------------------------------------------------------------
# Ablation
# --------------------------------------------------------------------------

@dataclass
class AblationResult:
    runs: pd.DataFrame
    summary: pd.DataFrame

    def ordering_holds(self, better: str, worse: str, metric: str = "min_ade") -> bool:
        """`better` beats `worse` on the mean by more than either variant's across-seed std."""
        row_b, row_w = self.summary.loc[better], self.summary.loc[worse]
        margin = row_w[(metric, "mean")] - row_b[(metric, "mean")]
        spread = max(np.nan_to_num(row_b[(metric, "std")]), np.nan_to_num(row_w[(metric, "std")]))
        return bool(margin > spread)


def variant_config(run: RunConfig, variant: str) -> RunConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    return RunConfig(profile=run.profile, model=replace(run.model, **VARIANTS[variant]),
                     train=replace(run.train)).validate()


def run_ablation(train_set: SceneSet, test_set: SceneSet, run: RunConfig,
                 variants: Optional[Sequence[str]] = None, seeds: Sequence[int] = (0, 1, 2),
                 k: Optional[int] = None) -> AblationResult:
    """Train and evaluate each variant once per seed; summary holds mean/std per metric."""
    variants = list(variants or VARIANTS)
    rows: List[Dict] = []
    for variant in variants:
        config = variant_config(run, variant)
        for seed in seeds:
            print(f"🔄 Training {variant} (seed {seed})...")
            model = LatentFormer(config.model, seed=seed)
            result = train(model, train_set, replace(config.train, seed=seed))
            report = evaluate(result.model, test_set, k=k)
            row = {"variant": variant, "seed": seed, "epochs": len(result.metrics),
                   "final_loss": float(result.metrics["loss"].iloc[-1]), "rf": report.rf}
            row.update({m: getattr(report, m) for m in METRICS})
            rows.append(row)
            logger.info(f"{variant} seed {seed}: minADE={report.min_ade:.4f} minFDE={report.min_fde:.4f}")
    runs = pd.DataFrame(rows)
    summary = runs.groupby("variant", sort=False)[list(METRICS)].agg(["mean", "std"])
    print(f"✅ Ablation finished: {len(variants)} variants x {len(seeds)} seeds")
    return AblationResult(runs=runs, summary=summary)


def epochs_to_reach(metrics: pd.DataFrame, target_loss: float) -> Optional[int]:
    """First epoch whose mean loss is at or below `target_loss`, None if never."""
    hits = metrics.index[metrics["loss"] <= target_loss]
    return None if len(hits) == 0 else int(metrics.loc[hits[0], "epoch"])


# --------------------------------------------------------------------------
# Decoding benchmark
# --------------------------------------------------------------------------

def benchmark_decoding(model: LatentFormer, scene: Scene, repeats: int = 5) -> pd.DataFrame:
    """Wall-clock seconds of one K-mode decode under each regime, median of `repeats`."""
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    params = model.inference_params()
    enc = model.encode(scene, params)
    configs = np.repeat(np.arange(model.modes)[:, None], scene.n_agents, axis=1)
    rows = []
    for regime in (Regime.AUTOREGRESSIVE, Regime.NON_AUTOREGRESSIVE):
        timings = []
        for _ in range(repeats):
            started = time.perf_counter()
            model.decode(enc, scene, configs, regime, params)
            timings.append(time.perf_counter() - started)
        passes = model.horizon if regime == Regime.AUTOREGRESSIVE else 1
        rows.append({"regime": regime.value, "median_s": float(np.median(timings)),
                     "min_s": float(np.min(timings)), "passes": passes})
    frame = pd.DataFrame(rows).set_index("regime")
    speedup = frame.loc["autoregressive", "median_s"] / max(frame.loc["non_autoregressive", "median_s"], 1e-12)
    logger.info(f"NAR decode is {speedup:.2f}x faster than AR on scene {scene.id}")
    return frame


# --------------------------------------------------------------------------
# Route diversity
# --------------------------------------------------------------------------

@dataclass
class RouteDiversity:
    ambiguous_agents: int
    ambiguous_scenes: int
    agent_fraction: float
    scene_fraction: float
    rf: object


def ambiguous_agents(scene: Scene) -> List[int]:
    """Agents still on their approach at the last observation whose true future leaves it."""
    out = []
    for a, agent in enumerate(scene.agents):
        if agent.route == "follow":
            continue
        entry = exit_arm(agent.past[-1])
        final = exit_arm(agent.future[-1])
        if entry != "center" and final not in ("center", entry):
            out.append(a)
    return out


def exits_reached(modes: np.ndarray, agent: int, entry: str) -> set:
    arms = {exit_arm(sample[agent, -1]) for sample in modes}
    return arms - {"center", entry}


def route_diversity(model, sceneset: SceneSet, k: Optional[int] = None) -> RouteDiversity:
    """Share of route-ambiguous agents (and scenes) whose K mode means reach >= 2 exit arms."""
    k = model.modes if k is None else k
    predictions = predict_all(model, sceneset, k)
    hits, total, scene_hits, scenes = 0, 0, 0, 0
    for scene, modes in zip(sceneset, predictions):
        agents = ambiguous_agents(scene)
        if not agents:
            continue
        scenes += 1
        multi = [len(exits_reached(modes, a, exit_arm(scene.agents[a].past[-1]))) >= 2 for a in agents]
        hits += sum(multi)
        total += len(multi)
        scene_hits += any(multi)
    if total == 0:
        raise ContractError("scene set has no route-ambiguous agents")
    report = report_from_predictions(sceneset, predictions, k)
    result = RouteDiversity(ambiguous_agents=total, ambiguous_scenes=scenes, agent_fraction=hits / total,
                            scene_fraction=scene_hits / scenes, rf=report.rf)
    logger.info(f"Multimodality: {scene_hits}/{scenes} scenes, {hits}/{total} agents reach >= 2 exits")
    return result
