"""
Evaluation Metrics
==================

ADE / FDE over K mode-conditioned trajectories, their min and avg aggregates,
the ratio factor RF = avgFDE / minFDE and the evaluation report.

Aggregation order: per agent take the min (or mean) over the K samples, then
average over all agents of all scenes.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from config import worker_count
from errors import ContractError, DimensionError, FormatError
from model import OracleModel, load_predictor
from scene_data import Scene, SceneSet, parse_record_line

logger = logging.getLogger(__name__)

EXACT_HIT = "exact-hit"
ORDER_TOLERANCE = 1e-12

__all__ = ["EXACT_HIT", "EvalReport", "OracleModel", "SceneMetrics", "ade", "aggregate", "evaluate", "fde",
           "load_predictions", "load_predictor", "rf", "save_predictions"]


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} must both be [T, 2]")
    return pred, gt


def ade(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance over the horizon."""
    pred, gt = _check_pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred: np.ndarray, gt: np.ndarray) -> float:
    """Euclidean distance at the last step."""
    pred, gt = _check_pair(pred, gt)
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def aggregate(errors: Sequence[float]) -> Tuple[float, float]:
    """(min, avg) over one agent's K samples."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ContractError("aggregate needs at least one sample (K >= 1)")
    return float(errors.min()), float(errors.mean())


def rf(avg_fde: float, min_fde: float) -> Union[float, str]:
    """avgFDE / minFDE, or the exact-hit sentinel when minFDE is 0."""
    if min_fde < 0 or avg_fde < 0:
        raise ContractError(f"FDE values must be nonnegative, got avg={avg_fde}, min={min_fde}")
    if min_fde == 0:
        return EXACT_HIT
    return avg_fde / min_fde


@dataclass
class SceneMetrics:
    scene_id: str
    n_agents: int
    min_ade: float
    avg_ade: float
    min_fde: float
    avg_fde: float
    offroad_rate: float


@dataclass
class EvalReport:
    """Aggregate and per-scene metrics over K samples per agent."""
    k: int
    provenance: str
    n_scenes: int
    n_agents: int
    min_ade: float
    avg_ade: float
    min_fde: float
    avg_fde: float
    rf: Union[float, str]
    offroad_rate: float
    scenes: List[SceneMetrics] = field(default_factory=list)

    def check_invariants(self) -> "EvalReport":
        for low, high, name in ((self.min_ade, self.avg_ade, "ADE"), (self.min_fde, self.avg_fde, "FDE")):
            if low > high + ORDER_TOLERANCE * max(1.0, abs(high)):
                raise ContractError(f"min{name} {low} exceeds avg{name} {high}")
        if self.rf != EXACT_HIT and self.rf < 1.0 - ORDER_TOLERANCE:
            raise ContractError(f"RF {self.rf} is below 1")
        return self

    def summary(self) -> Dict:
        record = asdict(self)
        record.pop("scenes")
        return record

    def to_dict(self) -> Dict:
        record = self.summary()
        record["scenes"] = [asdict(s) for s in self.scenes]
        return record

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def scene_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(s) for s in self.scenes])

    def to_text(self) -> str:
        rf_text = self.rf if isinstance(self.rf, str) else f"{self.rf:.4f}"
        lines = [
            f"LatentFormer evaluation: {self.n_scenes} scenes, {self.n_agents} agents, K={self.k} ({self.provenance})",
            "",
            pd.DataFrame([{"minADE": self.min_ade, "avgADE": self.avg_ade, "minFDE": self.min_fde,
                           "avgFDE": self.avg_fde, "RF": rf_text, "offroad": self.offroad_rate}]).to_string(
                index=False, float_format=lambda v: f"{v:.4f}"),
            "",
        ]
        if self.scenes:
            lines.append(self.scene_frame().to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        return "\n".join(lines) + "\n"


def agent_errors(preds: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample ADE and FDE for every agent: preds [K, A, T, 2], gt [A, T, 2] → two [A, K] arrays."""
    preds, gt = np.asarray(preds, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if preds.ndim != 4 or preds.shape[1:] != gt.shape:
        raise DimensionError(f"predictions {preds.shape} do not match ground truth {gt.shape}")
    dist = np.linalg.norm(preds - gt[None], axis=-1)
    return dist.mean(axis=-1).T, dist[..., -1].T


def _scene_metrics(scene: Scene, preds: np.ndarray) -> Tuple[SceneMetrics, np.ndarray, np.ndarray, float]:
    ades, fdes = agent_errors(preds, scene.future_array())
    per_ade = np.array([aggregate(row) for row in ades])
    per_fde = np.array([aggregate(row) for row in fdes])
    offroad = float(1.0 - scene.mask.contains(preds).mean())
    metrics = SceneMetrics(scene_id=scene.id, n_agents=scene.n_agents,
                           min_ade=float(per_ade[:, 0].mean()), avg_ade=float(per_ade[:, 1].mean()),
                           min_fde=float(per_fde[:, 0].mean()), avg_fde=float(per_fde[:, 1].mean()),
                           offroad_rate=offroad)
    return metrics, per_ade, per_fde, offroad


def report_from_predictions(sceneset: SceneSet, predictions: Sequence[np.ndarray], k: int,
                            provenance: str = "mode-mean") -> EvalReport:
    """Assemble the report from per-scene predictions [K, A, T, 2]."""
    scene_rows, ade_rows, fde_rows, offroad_points, total_points = [], [], [], 0.0, 0
    for scene, preds in zip(sceneset, predictions):
        metrics, per_ade, per_fde, offroad = _scene_metrics(scene, preds)
        scene_rows.append(metrics)
        ade_rows.append(per_ade)
        fde_rows.append(per_fde)
        offroad_points += offroad * preds[..., 0].size
        total_points += preds[..., 0].size
    pooled_ade, pooled_fde = np.concatenate(ade_rows), np.concatenate(fde_rows)
    min_fde, avg_fde = float(pooled_fde[:, 0].mean()), float(pooled_fde[:, 1].mean())
    report = EvalReport(k=k, provenance=provenance, n_scenes=len(scene_rows), n_agents=int(pooled_ade.shape[0]),
                        min_ade=float(pooled_ade[:, 0].mean()), avg_ade=float(pooled_ade[:, 1].mean()),
                        min_fde=min_fde, avg_fde=avg_fde, rf=rf(avg_fde, min_fde),
                        offroad_rate=offroad_points / total_points, scenes=scene_rows)
    return report.check_invariants()


def predict_all(model, sceneset: SceneSet, k: int, select: str = "mean", seed: int = 0,
                n_jobs: Optional[int] = None) -> List[np.ndarray]:
    """Mode-conditioned predictions for every scene, in scene order."""
    for scene in sceneset:
        model.check_scene(scene)
    params = model.inference_params()
    jobs = n_jobs or worker_count()
    return Parallel(n_jobs=jobs, prefer="threads")(
        delayed(model.predict_modes)(scene, k, select, seed + i, params) for i, scene in enumerate(sceneset))


def evaluate(model, sceneset: SceneSet, k: Optional[int] = None, select: str = "mean", seed: int = 0,
             n_jobs: Optional[int] = None) -> EvalReport:
    """Decode each scene once per mode and compute all metrics; deterministic for fixed inputs."""
    if len(sceneset) == 0:
        raise ContractError("cannot evaluate an empty scene set")
    k = model.modes if k is None else k
    predictions = predict_all(model, sceneset, k, select, seed, n_jobs)
    report = report_from_predictions(sceneset, predictions, k, "mode-mean" if select == "mean" else "sampled")
    logger.info(f"Evaluated {report.n_scenes} scenes: minADE={report.min_ade:.4f} minFDE={report.min_fde:.4f} "
                f"RF={report.rf}")
    return report


# ----------------------------------------------------------------------
# Prediction files
# ----------------------------------------------------------------------

PREDICTIONS_FORMAT = "latentformer-predictions"
PREDICTIONS_VERSION = 1


def save_predictions(path: str, sceneset: SceneSet, predictions: Sequence[np.ndarray], k: int,
                     provenance: str = "mode-mean") -> None:
    """Line-delimited JSON: a header, then one {"id", "modes": [K, A, T, 2]} record per scene."""
    header = {"format": PREDICTIONS_FORMAT, "version": PREDICTIONS_VERSION, "k": k,
              "provenance": provenance, "scenes": len(sceneset)}
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for scene, preds in zip(sceneset, predictions):
            f.write(json.dumps({"id": scene.id, "modes": np.asarray(preds, dtype=np.float64).tolist()},
                               sort_keys=True) + "\n")
    logger.info(f"Wrote predictions for {len(sceneset)} scenes to {path}")


def load_predictions(path: str) -> Tuple[Dict, Dict[str, np.ndarray]]:
    """(header, {scene id: [K, A, T, 2]}) from a prediction file."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [(number, text) for number, text in enumerate(f.read().split("\n"), start=1) if text.strip()]
    if not lines:
        raise FormatError("prediction file is empty", line=1)
    header = parse_record_line(lines[0][1], lines[0][0])
    if header.get("format") != PREDICTIONS_FORMAT or header.get("version") != PREDICTIONS_VERSION:
        raise FormatError(f"not a version {PREDICTIONS_VERSION} prediction file", line=1)
    k = header.get("k")
    if not isinstance(k, int) or k < 1:
        raise FormatError("header field k must be a positive integer", line=1)
    predictions = {}
    for number, text in lines[1:]:
        record = parse_record_line(text, number)
        scene_id = record.get("id")
        if not isinstance(scene_id, str):
            raise FormatError("prediction record has no string id", line=number)
        try:
            modes = np.array(record["modes"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed modes: {e}", line=number, scene_id=scene_id) from None
        if modes.ndim != 4 or modes.shape[0] != k or modes.shape[-1] != 2:
            raise FormatError(f"modes must be [{k}, A, T, 2], got {list(modes.shape)}", line=number,
                              scene_id=scene_id)
        if scene_id in predictions:
            raise FormatError("duplicate scene id", line=number, scene_id=scene_id)
        predictions[scene_id] = modes
    return header, predictions
