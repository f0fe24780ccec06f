import json

import numpy as np
import pytest

from errors import ConfigError, ContractError, DimensionError, FormatError
from evaluation import (EXACT_HIT, ade, aggregate, agent_errors, evaluate, fde, load_predictions, predict_all,
                        report_from_predictions, rf, save_predictions)
from model import LatentFormer, OracleModel
from scene_data import SceneSet, generate_sceneset
from selftest import tiny_config, tiny_scene


@pytest.fixture
def small_set():
    return generate_sceneset(4, seed=3)


def test_identical_trajectories_have_zero_error():
    gt = np.random.default_rng(0).normal(size=(6, 2))
    assert ade(gt, gt) == 0.0 and fde(gt, gt) == 0.0


def test_constant_offset():
    gt = np.random.default_rng(1).normal(size=(6, 2))
    assert ade(gt + [1.0, 0.0], gt) == pytest.approx(1.0, abs=1e-12)
    assert fde(gt + [1.0, 0.0], gt) == pytest.approx(1.0, abs=1e-12)


def test_translation_invariance():
    rng = np.random.default_rng(2)
    pred, gt = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    shift = np.array([0.25, -0.5])
    assert ade(pred + shift, gt + shift) == pytest.approx(ade(pred, gt), abs=1e-12)
    assert fde(pred + shift, gt + shift) == pytest.approx(fde(pred, gt), abs=1e-12)


def test_length_mismatch():
    with pytest.raises(DimensionError):
        ade(np.zeros((5, 2)), np.zeros((6, 2)))


def test_aggregate():
    assert aggregate([0.5, 1.5]) == (0.5, 1.0)
    assert aggregate([0.7]) == (0.7, 0.7)
    with pytest.raises(ContractError):
        aggregate([])


def test_ratio_factor():
    assert rf(2.0, 0.5) == 4.0
    assert rf(0.8, 0.8) == 1.0
    assert round(rf(1.81, 0.72), 2) == 2.51
    assert rf(1.0, 0.0) == EXACT_HIT
    with pytest.raises(ContractError):
        rf(-1.0, 0.5)


def test_agent_errors_layout():
    gt = np.zeros((2, 3, 2))
    preds = np.zeros((4, 2, 3, 2))
    preds[2, 1, :, 0] = 1.0
    ades, fdes = agent_errors(preds, gt)
    assert ades.shape == (2, 4)
    assert ades[1, 2] == 1.0 and fdes[1, 2] == 1.0
    assert ades.sum() == 1.0


def test_oracle_reports_zero_error(small_set):
    report = evaluate(OracleModel(modes=3), small_set)
    assert report.k == 3
    assert report.min_ade == 0.0 and report.avg_fde == 0.0
    assert report.rf == EXACT_HIT
    assert report.n_agents == sum(s.n_agents for s in small_set)


def test_identical_samples_give_unit_ratio(small_set):
    predictions = []
    for scene in small_set:
        predictions.append(np.repeat((scene.future_array() + [0.5, 0.0])[None], 3, axis=0))
    report = report_from_predictions(small_set, predictions, k=3)
    assert report.rf == pytest.approx(1.0)
    assert report.min_ade == pytest.approx(0.5)


def test_pooled_means_are_over_agents_not_scenes(small_set):
    predictions = []
    for i, scene in enumerate(small_set):
        offset = np.array([float(i), 0.0])
        predictions.append((scene.future_array() + offset)[None])
    report = report_from_predictions(small_set, predictions, k=1)
    counts = np.array([s.n_agents for s in small_set])
    assert report.min_ade == pytest.approx((counts * np.arange(len(small_set))).sum() / counts.sum())


def test_random_model_report_respects_ordering():
    cfg = tiny_config()
    data = SceneSet(scenes=[tiny_scene(i, 2, cfg) for i in range(3)], tau=cfg.tau, horizon=cfg.horizon)
    report = evaluate(LatentFormer(cfg, seed=0), data, n_jobs=2)
    assert report.k == cfg.modes
    assert report.min_ade <= report.avg_ade and report.min_fde <= report.avg_fde
    assert report.rf == EXACT_HIT or report.rf >= 1.0
    assert 0.0 <= report.offroad_rate <= 1.0
    again = evaluate(LatentFormer(cfg, seed=0), data, n_jobs=1)
    assert again.to_json() == report.to_json()


def test_horizon_mismatch_is_a_config_error(small_set):
    with pytest.raises(ConfigError):
        evaluate(OracleModel(horizon=5), small_set)


def test_report_serialisation(small_set):
    report = evaluate(OracleModel(modes=2), small_set)
    document = json.loads(report.to_json())
    assert document["rf"] == EXACT_HIT
    assert len(document["scenes"]) == len(small_set)
    assert "minADE" in report.to_text()


def test_prediction_file_round_trip(tmp_path, small_set):
    path = str(tmp_path / "preds.jsonl")
    predictions = predict_all(OracleModel(modes=2), small_set, 2)
    save_predictions(path, small_set, predictions, 2)
    header, by_id = load_predictions(path)
    assert header["k"] == 2 and header["provenance"] == "mode-mean"
    assert list(by_id) == [s.id for s in small_set]
    assert np.array_equal(by_id[small_set[0].id], predictions[0])


@pytest.mark.parametrize("lines,line_no", [
    ([], 1),
    (['{"format": "other", "version": 1, "k": 2}'], 1),
    (['{"format": "latentformer-predictions", "version": 1, "k": 0}'], 1),
    (['{"format": "latentformer-predictions", "version": 1, "k": 1}', '{"modes": []}'], 2),
    (['{"format": "latentformer-predictions", "version": 1, "k": 1}', '{"id": "s", "modes": [[1, 2]]}'], 2),
    (['{"format": "latentformer-predictions", "version": 1, "k": 1}', "not json"], 2),
    (['{"format": "latentformer-predictions", "version": 1, "k": 1}',
      '{"id": "s", "modes": [[[[0, 0]]]]}', "", '{"id": "s", "modes": [[[[0, 0]]]]}'], 4),
])
def test_malformed_prediction_files(tmp_path, lines, line_no):
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines))
    with pytest.raises(FormatError) as info:
        load_predictions(str(path))
    assert info.value.line == line_no
