import numpy as np
import pandas as pd
import pytest

from config import profile_config
from errors import ConfigError, ContractError
from experiments import (VARIANTS, AblationResult, ambiguous_agents, benchmark_decoding, epochs_to_reach,
                         exits_reached, route_diversity, run_ablation, variant_config)
from model import LatentFormer, OracleModel
from scene_data import generate_follow, generate_sceneset, split_sceneset
from selftest import tiny_config, tiny_scene
from training import train


def test_variant_config():
    run = profile_config("small")
    assert variant_config(run, "no_map").model.map_mode == "none"
    assert variant_config(run, "non_autoregressive").model.decoding == "non_autoregressive"
    assert variant_config(run, "full").model == run.model
    assert run.model.map_mode == "transformer"
    with pytest.raises(ConfigError):
        variant_config(run, "bigger")


def test_epochs_to_reach():
    metrics = pd.DataFrame({"epoch": [0, 1, 2, 3], "loss": [5.0, 3.0, 1.0, 0.5]})
    assert epochs_to_reach(metrics, 1.0) == 2
    assert epochs_to_reach(metrics, 0.1) is None


def test_ordering_needs_a_margin_beyond_spread():
    summary = pd.DataFrame({("min_ade", "mean"): [1.0, 1.5, 1.05], ("min_ade", "std"): [0.1, 0.1, 0.2]},
                           index=["full", "no_map", "cnn_map"])
    result = AblationResult(runs=pd.DataFrame(), summary=summary)
    assert result.ordering_holds("full", "no_map")
    assert not result.ordering_holds("full", "cnn_map")


def test_ambiguous_agents_skip_followers():
    assert ambiguous_agents(generate_follow(seed=0)) == []


def test_exits_reached():
    modes = np.array([[[[20.0, -2.0]]], [[[2.0, 20.0]]], [[[0.0, 0.0]]]])
    assert exits_reached(modes, agent=0, entry="west") == {"east", "north"}
    assert exits_reached(modes, agent=0, entry="east") == {"north"}


def test_oracle_reaches_a_single_exit():
    data = generate_sceneset(60, seed=2, max_agents_per_scene=4)
    result = route_diversity(OracleModel(modes=3), data)
    assert result.ambiguous_agents > 0
    assert result.agent_fraction == 0.0 and result.rf == "exact-hit"


def test_route_diversity_needs_ambiguous_agents():
    with pytest.raises(ContractError):
        route_diversity(OracleModel(modes=2), generate_sceneset(3, seed=0, kind="follow"))


def test_benchmark_frame():
    cfg = tiny_config()
    frame = benchmark_decoding(LatentFormer(cfg, seed=0), tiny_scene(0, 2, cfg), repeats=2)
    assert list(frame.index) == ["autoregressive", "non_autoregressive"]
    assert frame.loc["autoregressive", "passes"] == cfg.horizon
    assert (frame["median_s"] > 0).all()
    with pytest.raises(ContractError):
        benchmark_decoding(LatentFormer(cfg, seed=0), tiny_scene(0, 2, cfg), repeats=0)


def test_variants_cover_the_ablation_axes():
    assert set(VARIANTS) == {"full", "cnn_map", "no_map", "no_interaction", "non_autoregressive"}


@pytest.mark.slow
def test_ablation_runs_every_variant():
    run = profile_config("small")
    run.train.epochs = 2
    run.train.tf_to_ar_switch = 1
    train_set, test_set = split_sceneset(generate_sceneset(6, seed=0), test_fraction=0.34, seed=0)
    result = run_ablation(train_set, test_set, run, variants=["full", "no_map"], seeds=[0, 1])
    assert len(result.runs) == 4
    assert list(result.summary.index) == ["full", "no_map"]
    assert np.isfinite(result.summary[("min_ade", "mean")]).all()


@pytest.mark.slow
def test_autoregressive_and_non_autoregressive_training_curves():
    run = profile_config("small")
    data = generate_sceneset(8, seed=3)
    curves = {}
    for variant in ("full", "non_autoregressive"):
        config = variant_config(run, variant)
        config.train.epochs = 6
        config.train.tf_to_ar_switch = 4
        result = train(LatentFormer(config.model, seed=0), data, config.train)
        curves[variant] = result.metrics
    assert list(curves["non_autoregressive"]["phase"].unique()) == ["non_autoregressive"]
    assert list(curves["full"]["phase"])[-2:] == ["autoregressive", "autoregressive"]
    target = float(curves["full"]["loss"].iloc[-1])
    reached = epochs_to_reach(curves["full"], target)
    assert reached is not None and reached <= 5


@pytest.mark.slow
def test_route_diversity_of_a_fresh_model():
    cfg = profile_config("small").model
    data = generate_sceneset(20, seed=5, max_agents_per_scene=4)
    result = route_diversity(LatentFormer(cfg, seed=0), data)
    assert 0.0 <= result.agent_fraction <= 1.0 and 0.0 <= result.scene_fraction <= 1.0
    assert result.ambiguous_scenes <= len(data)
