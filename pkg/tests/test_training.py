import os

import numpy as np
import pytest
from scipy.stats import multivariate_normal

import training
from config import TrainConfig
from decoder import GaussianSeq, Regime
from errors import CapacityError, ConfigError, ContractError, DimensionError, TrainingError
from model import LatentFormer
from scene_data import SceneSet
from selftest import GRAD_TOLERANCE, grad_case, tiny_config, tiny_scene
from tensor import Tensor, backward, gradcheck
from training import (METRICS_FILE, SceneStep, SGDMomentum, bivariate_density, bivariate_nll, clip_grad_norm,
                      cyclic_lr, em_loss, em_objective, exact_configs, global_grad_norm, initial_loss,
                      joint_posterior, phase_for, posterior_exact, posterior_factorized, posterior_from_sweep,
                      posterior_gap, read_metrics, sweep_configs, sweep_nll, train, write_metrics)


def tiny_set(n=3, n_agents=2, cfg=None):
    cfg = cfg or tiny_config()
    return SceneSet(scenes=[tiny_scene(i, n_agents, cfg) for i in range(n)], tau=cfg.tau, horizon=cfg.horizon)


def test_nll_matches_scipy_log_density():
    rng = np.random.default_rng(0)
    mean, sigma = rng.normal(size=(2, 3, 2)), rng.uniform(0.5, 2.0, size=(2, 3, 2))
    rho = rng.uniform(-0.9, 0.9, size=(2, 3))
    target = rng.normal(size=(2, 3, 2))
    params = np.concatenate([mean, sigma, rho[..., None]], axis=-1)
    nll = bivariate_nll(GaussianSeq(Tensor(params)), target).data
    expected = np.zeros(2)
    for a in range(2):
        for t in range(3):
            sx, sy, r = sigma[a, t, 0], sigma[a, t, 1], rho[a, t]
            cov = [[sx * sx, r * sx * sy], [r * sx * sy, sy * sy]]
            expected[a] -= multivariate_normal(mean[a, t], cov).logpdf(target[a, t])
    assert np.allclose(nll, expected, rtol=1e-10)


def test_nll_shape_check():
    with pytest.raises(DimensionError):
        bivariate_nll(GaussianSeq(Tensor(np.ones((2, 3, 5)))), np.zeros((2, 4, 2)))


def test_density_integrates_to_one():
    xs = np.linspace(-10, 10, 801)
    x, y = np.meshgrid(xs, xs)
    density = bivariate_density(np.array([0.5, -0.3]), np.array([1.0, 1.5]), 0.6, x, y)
    assert density.sum() * (xs[1] - xs[0]) ** 2 == pytest.approx(1.0, abs=1e-4)


def test_sweep_layout():
    configs = sweep_configs(np.array([1, 0]), K=3)
    assert configs.tolist() == [[0, 0], [1, 0], [2, 0], [1, 0], [1, 1], [1, 2]]
    nll = np.arange(12, dtype=float).reshape(6, 2)
    assert sweep_nll(nll, 3).tolist() == [[0, 2, 4], [7, 9, 11]]


def test_posterior_from_sweep_is_normalised_bayes_rule():
    nll = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0], [9.0, 1.0], [9.0, 2.0], [9.0, 3.0]])
    log_prior = np.log(np.array([[0.2, 0.3, 0.5], [1 / 3, 1 / 3, 1 / 3]]))
    post = posterior_from_sweep(nll, log_prior, np.array([0, 0]))
    expected = np.array([0.2 * np.exp(-1), 0.3 * np.exp(-2), 0.5 * np.exp(-3)])
    assert np.allclose(post.q[0], expected / expected.sum(), atol=1e-14)
    assert np.allclose(post.q.sum(axis=1), 1.0, atol=1e-14)


@pytest.mark.parametrize("shift", [-7.0, 3.0, 250.0])
def test_posteriors_ignore_a_constant_added_to_every_nll(shift):
    rng = np.random.default_rng(1)
    log_prior = np.log(rng.dirichlet(np.ones(3), size=2))
    sweep = rng.uniform(0.0, 10.0, size=(6, 2))
    base = posterior_from_sweep(sweep, log_prior, np.array([0, 0]))
    shifted = posterior_from_sweep(sweep + shift, log_prior, np.array([0, 0]))
    assert np.allclose(shifted.q, base.q, rtol=0.0, atol=1e-12)
    configs = exact_configs(2, 3)
    joint = rng.uniform(0.0, 10.0, size=(len(configs), 2))
    assert np.allclose(joint_posterior(joint + shift, log_prior, configs).q,
                       joint_posterior(joint, log_prior, configs).q, rtol=0.0, atol=1e-12)


def test_posterior_rejects_unnormalised_rows():
    with pytest.raises(ContractError):
        training.Posterior(q=np.array([[0.5, 0.4]]), baseline=np.array([0]))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_factorised_posterior_is_exact_for_one_agent(seed):
    model = LatentFormer(tiny_config(), seed=seed)
    scene = tiny_scene(seed, n_agents=1)
    assert np.array_equal(posterior_factorized(model, scene).q, posterior_exact(model, scene).marginals())


def test_posterior_gap_is_a_distance():
    model = LatentFormer(tiny_config(), seed=4)
    gap = posterior_gap(model, tiny_scene(4, n_agents=2))
    assert 0.0 <= gap <= 1.0


def test_exact_posterior_refuses_large_enumerations():
    model = LatentFormer(tiny_config(), seed=0)
    with pytest.raises(CapacityError):
        posterior_exact(model, tiny_scene(0, n_agents=3))


def test_em_objective_weights_by_posterior():
    nll = Tensor(np.array([[1.0, 9.0], [2.0, 9.0], [9.0, 3.0], [9.0, 4.0]]))
    log_prior = Tensor(np.log([[0.5, 0.5], [0.25, 0.75]]))
    q = np.array([[0.1, 0.9], [0.6, 0.4]])
    expected = (0.1 * (1 - np.log(0.5)) + 0.9 * (2 - np.log(0.5))
                + 0.6 * (3 - np.log(0.25)) + 0.4 * (4 - np.log(0.75)))
    assert em_objective(nll, log_prior, q).item() == pytest.approx(expected, rel=1e-12)


def test_zeroed_model_reaches_closed_form_initial_loss():
    cfg = tiny_config()
    model = LatentFormer(cfg, seed=0)
    last = cfg.head_layers - 1
    for name in (f"decoder.head.l{last}.w", f"decoder.head.l{last}.b", "intent.readout.w2", "intent.readout.b2"):
        model.params[name].data[...] = 0.0
    scene = tiny_scene(0, n_agents=2, cfg=cfg)
    loss = em_loss(model, scene, posterior_factorized(model, scene)).item()
    assert loss == pytest.approx(initial_loss(scene, cfg.modes), rel=1e-10)


def test_em_surrogate_does_not_increase_at_a_fixed_posterior():
    model = LatentFormer(tiny_config(), seed=5)
    scene = tiny_scene(5, n_agents=2)
    q = posterior_factorized(model, scene)
    optimizer = SGDMomentum(model.params, lr=1e-4, momentum=0.0)
    losses = []
    for _ in range(4):
        model.params.zero_grad()
        loss = em_loss(model, scene, q)
        losses.append(loss.item())
        backward(loss)
        clip_grad_norm(model.params, 1.0)
        optimizer.step()
    losses.append(em_loss(model, scene, q).item())
    assert all(after <= before for before, after in zip(losses, losses[1:])), losses
    assert losses[-1] < losses[0]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_em_loss_gradients(seed):
    fn, tensors = grad_case("em_loss", seed)
    result = gradcheck(fn, tensors, max_entries=12, seed=seed)
    assert result.passed(GRAD_TOLERANCE), result.errors


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bivariate_nll_gradients(seed):
    fn, tensors = grad_case("bivariate_nll", seed)
    result = gradcheck(fn, tensors, seed=seed)
    assert result.passed(GRAD_TOLERANCE), result.errors


def test_sgd_momentum_update_and_state():
    model = LatentFormer(tiny_config(), seed=0)
    name, tensor = next(iter(model.params.items()))
    before = tensor.data.copy()
    tensor.grad = np.ones_like(before)
    optimizer = SGDMomentum(model.params, lr=0.1, momentum=0.9)
    optimizer.step()
    optimizer.step()
    assert np.allclose(tensor.data, before - 0.1 * 1.0 - 0.1 * 1.9)
    state = optimizer.state()
    restored = SGDMomentum(model.params, lr=0.1, momentum=0.9)
    restored.load_state(state)
    assert np.array_equal(restored.velocity[name], optimizer.velocity[name])
    with pytest.raises(ContractError):
        restored.load_state(state[:-1])


def test_clip_grad_norm_caps_global_norm():
    model = LatentFormer(tiny_config(), seed=0)
    for _, tensor in model.params.items():
        tensor.grad = np.full_like(tensor.data, 3.0)
    before = clip_grad_norm(model.params, 5.0)
    assert before > 5.0
    assert global_grad_norm(model.params) == pytest.approx(5.0)
    assert clip_grad_norm(model.params, 10.0) == pytest.approx(5.0)


def test_cyclic_learning_rate_is_triangular():
    cfg = TrainConfig(lr=1.0, lr_min_ratio=0.1, lr_period=10)
    assert cyclic_lr(0, cfg) == pytest.approx(1.0)
    assert cyclic_lr(5, cfg) == pytest.approx(0.1)
    assert cyclic_lr(10, cfg) == pytest.approx(1.0)
    assert cyclic_lr(2, cfg) == pytest.approx(cyclic_lr(8, cfg))


def test_phase_schedule():
    cfg = TrainConfig(epochs=8)
    model = LatentFormer(tiny_config(), seed=0)
    assert [phase_for(e, model, cfg) for e in (0, 5, 6, 7)] == [Regime.TEACHER_FORCED] * 2 + [
        Regime.AUTOREGRESSIVE] * 2
    nar = LatentFormer(tiny_config(decoding="non_autoregressive"), seed=0)
    assert phase_for(7, nar, cfg) == Regime.NON_AUTOREGRESSIVE


def quick_config(**overrides):
    values = dict(epochs=3, tf_to_ar_switch=2, batch_tf=2, batch_ar=2, lr=1e-3)
    values.update(overrides)
    return TrainConfig(**values)


def test_training_writes_checkpoint_and_metrics(tmp_path):
    out = str(tmp_path / "ckpt")
    result = train(LatentFormer(tiny_config(), seed=0), tiny_set(), quick_config(), out_dir=out)
    assert list(result.metrics["phase"]) == ["teacher_forced", "teacher_forced", "autoregressive"]
    assert set(result.metrics.columns) >= {"epoch", "phase", "lr", "loss", "tf_min_ade", "grad_norm", "seconds"}
    assert np.isfinite(result.metrics["loss"]).all()
    assert os.path.isfile(os.path.join(out, METRICS_FILE))
    loaded = LatentFormer.load(out)
    assert np.array_equal(loaded.params.flat_values(), result.model.params.flat_values())


def test_training_is_deterministic():
    data = tiny_set()
    first = train(LatentFormer(tiny_config(), seed=0), data, quick_config()).model.params.flat_values()
    second = train(LatentFormer(tiny_config(), seed=0), data, quick_config()).model.params.flat_values()
    assert np.array_equal(first, second)


def test_resume_matches_uninterrupted_run(tmp_path):
    data = tiny_set()
    full = train(LatentFormer(tiny_config(), seed=0), data, quick_config())
    out = str(tmp_path / "ckpt")
    train(LatentFormer(tiny_config(), seed=0), data, quick_config(epochs=2), out_dir=out)
    resumed = train(LatentFormer(tiny_config(), seed=0), data, quick_config(), out_dir=out, resume=True)
    assert len(resumed.metrics) == 3
    assert np.array_equal(resumed.model.params.flat_values(), full.model.params.flat_values())
    for column in ("lr", "loss", "grad_norm"):
        assert resumed.metrics[column].tolist() == full.metrics[column].tolist()


def test_metrics_log_keeps_full_precision(tmp_path):
    path = str(tmp_path / METRICS_FILE)
    records = [{"epoch": 0, "phase": "teacher_forced", "loss": 0.1 + 0.2, "tf_min_ade": None},
               {"epoch": 1, "phase": "autoregressive", "loss": 1 / 3, "tf_min_ade": 2.718281828459045}]
    write_metrics(path, records)
    assert read_metrics(path) == records


def test_nonfinite_loss_aborts_with_dump(tmp_path, monkeypatch):
    monkeypatch.setattr(training, "scene_step", lambda *args, **kwargs: SceneStep(loss=float("nan"),
                                                                                  min_ade=float("nan")))
    with pytest.raises(TrainingError) as info:
        train(LatentFormer(tiny_config(), seed=0), tiny_set(), quick_config(), out_dir=str(tmp_path))
    assert os.path.isfile(info.value.dump_path)


def test_training_rejects_mismatched_scenes():
    data = tiny_set(cfg=tiny_config(horizon=4))
    with pytest.raises(ConfigError):
        train(LatentFormer(tiny_config(), seed=0), data, quick_config())


@pytest.mark.slow
def test_small_profile_overfits_eight_scenes():
    from config import profile_config
    from scene_data import generate_sceneset

    run = profile_config("small")
    data = generate_sceneset(8, seed=0, kind="intersection")
    model = LatentFormer(run.model, seed=0)
    cfg = quick_config(epochs=500, tf_to_ar_switch=500, batch_tf=8, lr=run.train.lr)
    result = train(model, data, cfg)
    assert result.metrics["tf_min_ade"].min() < 0.1
