import json
import math

import numpy as np
import pytest
from scipy import integrate, stats

from diffgraph.errors import NonFiniteGradientError
from diffgraph.pipeline import Pipeline
from diffgraph.planner import VgaeDims, VgaeParams, load_params, rollout_gradient, sample_rollout
from diffgraph.trainer import (
    AdamWState,
    TrainConfig,
    TrainStepReport,
    adamw_update,
    baselines,
    batch_loss_and_grad,
    load_optimizer_state,
    report_json,
    save_checkpoint,
    train,
    train_step,
)
from diffgraph.workflows import training_prompts

from .oracles import finite_difference_check, frozen_batch, random_params, random_subgraph

SMALL = VgaeDims(d_node=6, d_h1=5, d_h=4, d_ffn=6)


def test_config_validation():
    for bad in ({"batch_size": 0}, {"rollouts_per_prompt": 0}, {"lr": 0.0},
                {"baseline": "x"}, {"estimator": "x"},
                {"baseline": "prompt_mean", "rollouts_per_prompt": 1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    TrainConfig(baseline="batch_mean", rollouts_per_prompt=1)


def test_baselines_examples():
    r = np.array([1.0, 2.0, 3.0, 10.0, 20.0])
    g = np.array([0, 0, 0, 1, 1])
    np.testing.assert_allclose(baselines(r, g, TrainConfig()), [2.5, 2.0, 1.5, 20.0, 10.0])
    np.testing.assert_allclose(baselines(r, g, TrainConfig(baseline="batch_mean")), np.full(5, 7.2))
    assert not baselines(r, g, TrainConfig(baseline="none")).any()


def test_equal_rewards_give_zero_loss(rng):
    params = random_params(rng, SMALL)
    _, ros, _, groups = frozen_batch(rng, params, d_node=6)
    rewards = np.full(len(ros), 0.42)
    for cfg in (TrainConfig(), TrainConfig(baseline="batch_mean")):
        loss, grads = batch_loss_and_grad(params, ros, rewards, cfg, groups)
        assert loss == 0.0 and all(not g.any() for g in grads.values())
        new, _ = adamw_update(params, grads, AdamWState.zeros_like(params), cfg)
        for name, arr in params.items():
            np.testing.assert_array_equal(new[name], arr * (1 - cfg.lr * cfg.weight_decay))


@pytest.mark.parametrize("cfg", [
    TrainConfig(),
    TrainConfig(baseline="batch_mean", kl_weight=0.3),
    TrainConfig(entropy_weight=0.05),
    TrainConfig(baseline="none", estimator="literal"),
], ids=["default", "kl", "entropy", "literal"])
def test_gradient_matches_finite_differences(cfg):
    worst, per, n = finite_difference_check(seed=2, cfg=cfg)
    assert n == sum(int(np.prod(s)) for s in SMALL.shapes().values())
    assert worst < 1e-3, per


def test_encoder_gradients_are_live():
    # a check that only ever sees zeros would pass vacuously
    rng = np.random.default_rng(4)
    params = random_params(rng, SMALL)
    _, ros, rewards, groups = frozen_batch(rng, params, d_node=6)
    _, grads = batch_loss_and_grad(params, ros, rewards, TrainConfig(), groups)
    assert all(np.abs(g).max() > 0 for g in grads.values())


def test_estimator_sanity_against_integration():
    """1 expert, u(w) = 1 - (w - 0.7)^2; gradient w.r.t. the two Beta logits."""
    a0, b0 = 0.3, 0.8
    dims = VgaeDims(d_node=6, d_h1=3, d_h=2, d_ffn=3)
    params = VgaeParams.zeros(dims)
    params.arrays["dec_b2"][:] = [a0, b0]        # decoder output is exactly (a0, b0)
    sub = random_subgraph(np.random.default_rng(0), n_ckpt=1, n_peft=0, n_ref=2)

    def u(w):
        return 1.0 - (w - 0.7) ** 2

    n = 10_000
    est = np.empty((n, 2))
    for i in range(n):
        ro = sample_rollout(sub, params, i)
        est[i] = rollout_gradient(ro, params, float(u(ro.w[0])))["dec_b2"]
    mean, se = est.mean(axis=0), est.std(axis=0, ddof=1) / math.sqrt(n)

    def expected(a, b):
        al, be = 1 + math.exp(a), 1 + math.exp(b)
        return integrate.quad(lambda w: u(w) * stats.beta.pdf(w, al, be), 0, 1, epsabs=1e-13)[0]

    h = 1e-5
    truth = np.array([(expected(a0 + h, b0) - expected(a0 - h, b0)) / (2 * h),
                      (expected(a0, b0 + h) - expected(a0, b0 - h)) / (2 * h)])
    assert np.all(np.abs(mean - truth) < 3 * se), (mean, truth, se)

    # the trainer's surrogate with no baseline is minus the same average
    ros = [sample_rollout(sub, params, i) for i in range(200)]
    rewards = np.array([u(r.w[0]) for r in ros])
    _, grads = batch_loss_and_grad(params, ros, rewards, TrainConfig(baseline="none",
                                                                     rollouts_per_prompt=1))
    np.testing.assert_allclose(-grads["dec_b2"], est[:200].mean(axis=0), rtol=1e-10)


def test_adamw_first_step_closed_form(rng):
    params = random_params(rng, SMALL)
    grads = {n: rng.standard_normal(a.shape) for n, a in params.items()}
    cfg = TrainConfig(lr=0.01, weight_decay=0.1)
    new, state = adamw_update(params, grads, AdamWState.zeros_like(params), cfg)
    assert state.step == 1
    for n, p in params.items():
        g = grads[n]
        # bias-corrected first step is g / |g| up to eps
        want = p * (1 - 0.01 * 0.1) - 0.01 * g / (np.abs(g) + cfg.adam_eps)
        np.testing.assert_allclose(new[n], want, rtol=1e-12, atol=1e-15)


@pytest.fixture(scope="module")
def small_pipe(small_built, testbed):
    return Pipeline(small_built.graph, testbed)


def small_prompts(testbed, n=6):
    return training_prompts(testbed, n, clusters=[0, 1], attributes=[0, 1])


def test_train_step_deterministic(small_pipe, testbed):
    params = VgaeParams.initialize(VgaeDims(), 0)
    batch = small_prompts(testbed, 1)
    cfg = TrainConfig(batch_size=1)
    outs = []
    for _ in range(2):
        p, s, rep = train_step(params, AdamWState.zeros_like(params), small_pipe, batch, cfg,
                               np.random.default_rng(9))
        outs.append((p, rep))
    assert outs[0][0].same_as(outs[1][0])
    assert outs[0][1].mean_reward == outs[1][1].mean_reward
    assert not outs[0][0].same_as(params)
    assert len(outs[0][1].samples) == cfg.rollouts_per_prompt


def test_train_respects_max_steps_and_logs(small_pipe, testbed):
    logs = []
    cfg = TrainConfig(batch_size=2, max_steps=3, epochs=10)
    p, state = train(VgaeParams.initialize(VgaeDims(), 0), small_pipe, small_prompts(testbed), cfg,
                     log=logs.append)
    assert state.step == 3 and [r.step for r in logs] == [1, 2, 3]
    rec = json.loads(report_json(logs[0], cfg.lr))
    assert set(rec) == {"step", "mean_reward", "grad_norm", "lr"} and rec["grad_norm"] >= 0
    p2, _ = train(VgaeParams.initialize(VgaeDims(), 0), small_pipe, small_prompts(testbed), cfg)
    assert p.same_as(p2)
    with pytest.raises(ValueError):
        train(p, small_pipe, [], cfg)


def test_epochs_cover_prompts_without_replacement(small_pipe, testbed):
    logs = []
    prompts = small_prompts(testbed, 6)
    train(VgaeParams.initialize(VgaeDims(), 0), small_pipe, prompts,
          TrainConfig(batch_size=2, epochs=1, max_steps=None, rollouts_per_prompt=2), log=logs.append)
    seen = [pid for r in logs for pid, _, _ in r.samples[::2]]
    assert sorted(seen) == sorted(p.id for p in prompts)


def test_non_finite_reward_aborts(small_pipe, testbed, monkeypatch):
    params = VgaeParams.initialize(VgaeDims(), 0)
    monkeypatch.setattr(small_pipe, "reward", lambda prep, w: (float("nan"), np.zeros(5)))
    with pytest.raises(NonFiniteGradientError):
        train_step(params, AdamWState.zeros_like(params), small_pipe, small_prompts(testbed, 1),
                   TrainConfig(batch_size=1), np.random.default_rng(0))


def test_checkpoint_round_trip(tmp_path, rng):
    params = random_params(rng, VgaeDims()).as_float32()
    state = AdamWState(17, {n: rng.standard_normal(a.shape).astype(np.float32).astype(np.float64)
                            for n, a in params.items()},
                       {n: rng.uniform(0, 1, a.shape).astype(np.float32).astype(np.float64)
                        for n, a in params.items()})
    save_checkpoint(tmp_path / "vgae.bin", params, state, TrainConfig())
    assert load_params(tmp_path / "vgae.bin").same_as(params)
    back = load_optimizer_state(str(tmp_path / "vgae.bin") + ".opt")
    assert back.step == 17
    for n in params.arrays:
        assert back.m[n].tobytes() == state.m[n].tobytes()
        assert back.v[n].tobytes() == state.v[n].tobytes()


def test_report_json_is_stable():
    rep = TrainStepReport(3, 0.123456789012345, 2.5)
    assert report_json(rep, 1e-3) == '{"grad_norm": 2.5, "lr": 0.001, "mean_reward": 0.123456789012, "step": 3}'
