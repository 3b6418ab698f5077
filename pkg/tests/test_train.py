import math
from dataclasses import replace

import numpy as np
import pytest

from impulse_assist import policy as pol
from impulse_assist.train import (
    CURVE_COLUMNS, Adam, TrainConfig, _loss_and_grads, collect, gae, make_task, observation_stats, ppo_update,
    tracking_reward, train_loop)


@pytest.fixture(scope="module")
def task():
    return make_task("free-body-dash")


def _params(task, seed=0):
    spec = pol.ObservationSpec.for_model(task.model)
    p = pol.init_policy(spec, seed=seed)
    p.obs_mean, p.obs_std = observation_stats(task, spec)
    return p


def test_reward_examples():
    assert tracking_reward(0, 0, 0, np.zeros(6)) == pytest.approx(0.9)
    assert tracking_reward(0, 0, 0, np.array([1.0, 0, 0, 0, 0, 0])) == pytest.approx(0.8)
    assert tracking_reward(1e9, 1e9, 1e9, np.array([0, 2.0, 0, 0, 0, 0])) == pytest.approx(-0.4)


def test_gae_hand_examples():
    a, ret = gae([1.0], [0.0], [1], 0.99, 0.95)
    assert a[0] == 1.0 and ret[0] == 1.0
    a, ret = gae([1, 1, 1], [0, 0, 0], [0, 0, 1], 1.0, 1.0)
    np.testing.assert_array_equal(a, [3, 2, 1])
    r, v, d = np.array([0.5, -1.0, 2.0]), np.array([0.2, 0.1, -0.3]), np.array([0, 0, 0])
    a, _ = gae(r, v, d, 0.9, 0.0, bootstrap=0.7)
    delta = r + 0.9 * np.r_[v[1:], 0.7] - v
    np.testing.assert_allclose(a, delta, atol=1e-15)
    with pytest.raises(ValueError):
        gae([1, 2], [0], [0, 1], 0.9, 0.9)


def test_gae_reward_to_go_with_unit_discount(rng):
    r = rng.normal(size=9)
    a, ret = gae(r, rng.normal(size=9), np.r_[np.zeros(8), 1], 1.0, 1.0)
    np.testing.assert_allclose(ret, np.cumsum(r[::-1])[::-1], atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=0.0)
    with pytest.raises(ValueError):
        TrainConfig(clip_eps=0.0)
    with pytest.raises(ValueError):
        TrainConfig.ablation("everything")
    assert TrainConfig.ablation("both").disable_compass and TrainConfig.ablation("both").disable_sparsity


def test_adam_first_step_is_lr_times_sign():
    a = [np.array([1.0, -2.0])]
    opt = Adam(a, lr=0.1)
    opt.step(a, [np.array([3.0, -0.5])])
    np.testing.assert_allclose(a[0], [0.9, -1.9], atol=1e-7)


@pytest.fixture(scope="module")
def batch(task):
    p = _params(task)
    b, results = collect(p, task, TrainConfig(), [0, 1], np.random.default_rng(0))
    return p, b, results


def test_batch_contract(batch):
    p, b, results = batch
    assert len(b) == sum(r.I_total.shape[0] for r in results)
    assert np.all(np.isfinite(b.logp))
    assert int(b.dones.sum()) == 2
    assert b.F_ref.shape == (len(b), 6) and b.I_base.shape == (len(b), 6)


def test_fresh_batch_has_unit_ratio(batch):
    p, b, _ = batch
    adv = np.random.default_rng(1).normal(size=len(b))
    stats, _ = _loss_and_grads(p, b, adv, TrainConfig())
    assert stats["clip_fraction"] == 0.0
    assert stats["policy_loss"] == pytest.approx(-adv.mean(), abs=1e-9)
    assert abs(stats["kl"]) < 1e-12


def test_loss_gradients_match_finite_differences(batch):
    p, b, _ = batch
    small = replace(b, obs=b.obs[:6], actions=b.actions[:6], logp=b.logp[:6] - 0.05, rewards=b.rewards[:6],
                    values=b.values[:6], dones=b.dones[:6], F_ref=b.F_ref[:6], I_base=b.I_base[:6],
                    advantages=b.advantages[:6], returns=b.returns[:6])
    adv = np.linspace(-1, 1, 6)
    cfg = TrainConfig()
    _, grads = _loss_and_grads(p, small, adv, cfg)

    def total():
        s, _ = _loss_and_grads(p, small, adv, cfg)
        return (s["policy_loss"] + cfg.value_coef * s["value_loss"] + cfg.w_c * s["compass_loss"]
                + cfg.w_s * s["sparsity_loss"])

    rng = np.random.default_rng(5)
    for ai in (0, len(grads) - 2, len(grads) - 1, 4):
        arr = p.arrays()[ai]
        for _ in range(3):
            i = tuple(rng.integers(0, s) for s in arr.shape)
            old = arr[i]
            arr[i] = old + 1e-6
            fp = total()
            arr[i] = old - 1e-6
            fm = total()
            arr[i] = old
            assert grads[ai][i] == pytest.approx((fp - fm) / 2e-6, rel=1e-4, abs=1e-8)


def test_ablation_flags_zero_aux_losses(batch):
    p, b, _ = batch
    adv = b.advantages
    s, _ = _loss_and_grads(p, b, adv, TrainConfig.ablation("both"))
    assert s["compass_loss"] == 0.0 and s["sparsity_loss"] == 0.0
    s, _ = _loss_and_grads(p, b, adv, TrainConfig(w_c=0.0, w_s=0.0))
    assert s["compass_loss"] == 0.0 and s["sparsity_loss"] == 0.0
    s, _ = _loss_and_grads(p, b, adv, TrainConfig())
    assert s["compass_loss"] > 0.0 and s["sparsity_loss"] > 0.0


def test_advantage_scaling_keeps_gradient_direction(batch):
    p, b, _ = batch
    cfg = TrainConfig(w_c=0.0, w_s=0.0, value_coef=0.0)
    adv = b.advantages - b.advantages.mean()
    _, g1 = _loss_and_grads(p, b, adv, cfg)
    _, g2 = _loss_and_grads(p, b, adv / adv.std(), cfg)
    v1 = np.concatenate([g.ravel() for g in g1])
    v2 = np.concatenate([g.ravel() for g in g2])
    assert v1 @ v2 / (np.linalg.norm(v1) * np.linalg.norm(v2)) == pytest.approx(1.0, abs=1e-12)


def test_naive_mode_ignores_baseline(task):
    p = _params(task)
    cfg = TrainConfig.ablation("naive")
    b1, _ = collect(p, task, cfg, [3], np.random.default_rng(2))
    zeroed = replace(task, baseline=replace(task.baseline, I_base=np.zeros_like(task.baseline.I_base),
                                            W_assist=np.zeros_like(task.baseline.W_assist)))
    b2, _ = collect(p, zeroed, cfg, [3], np.random.default_rng(2))
    for f in ("obs", "actions", "rewards", "logp"):
        np.testing.assert_array_equal(getattr(b1, f), getattr(b2, f))


def test_ppo_update_is_deterministic(batch, task):
    _, b, _ = batch
    sums = []
    for _ in range(2):
        p = _params(task)
        ppo_update(p, b, TrainConfig(epochs=2), Adam(p.arrays()), np.random.default_rng(9))
        sums.append(p.checksum())
    assert sums[0] == sums[1] != _params(task).checksum()


def test_zero_learning_rate_keeps_parameters(task):
    res = train_loop(task, TrainConfig(lr=0.0, iterations=3, env_count=2, epochs=1), early_stop=False)
    assert res.params.checksum() == _params(task).checksum()
    assert [r["iteration"] for r in res.curves] == [0, 1, 2]
    betas = [r["mean_beta_lin"] for r in res.curves]
    assert max(betas) - min(betas) < 0.05


def test_curves_csv_contract(task):
    res = train_loop(task, TrainConfig(iterations=2, env_count=2, epochs=1), early_stop=False)
    lines = res.curves_csv().strip().splitlines()
    assert lines[0].split(",") == list(CURVE_COLUMNS)
    assert len(lines) == 3
    assert all(math.isfinite(float(x)) for ln in lines[1:] for x in ln.split(","))
