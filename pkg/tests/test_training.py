import math

import numpy as np
import pytest

from beliefrl import autodiff as ad
from beliefrl import training
from beliefrl.categorical import log_softmax, sample_from_uniform
from beliefrl.env import TRAIN_STREAM, Action, EnvConfig, episode_rng, posterior_moments, reset, step
from beliefrl.policies import VARIANTS, PolicyConfig, make_policy
from beliefrl.training import (
    METRIC_COLUMNS,
    DivergenceError,
    Rollout,
    TrainConfig,
    actor_critic_loss,
    belief_aux_loss,
    collect_rollouts,
    init_params,
    loss_and_grad,
    read_metrics_csv,
    recompose_total,
    returns_and_advantages,
    train_run,
    write_metrics_csv,
)


def test_discounted_return_example():
    r = np.array([[-0.05], [-0.05], [1.0]])
    G, _ = returns_and_advantages(r, np.ones_like(r, dtype=bool), np.zeros_like(r), 0.99)
    assert G[0, 0] == pytest.approx(0.880600, abs=1e-12)


def test_undiscounted_return():
    r = np.array([[-0.05], [1.0]])
    G, _ = returns_and_advantages(r, np.ones_like(r, dtype=bool), np.zeros_like(r), 1.0)
    assert G[0, 0] == pytest.approx(0.95, abs=1e-15)


def test_perfect_values_zero_advantage_and_padding():
    r = np.array([[-0.05, 1.0], [1.0, 0.0]])
    mask = np.array([[True, True], [True, False]])
    G, _ = returns_and_advantages(r, mask, np.zeros_like(r), 0.9)
    assert G[1, 1] == 0.0
    _, A = returns_and_advantages(r, mask, G, 0.9)
    np.testing.assert_array_equal(A, 0.0)


def _two_step_rollout(actions=(Action.WAIT, Action.GUESS_POS), rewards=(-0.05, 1.0)):
    return Rollout(
        obs=np.array([[0.4], [1.3]]),
        actions=np.array([[int(actions[0])], [int(actions[1])]]),
        rewards=np.array([[rewards[0]], [rewards[1]]]),
        mask=np.ones((2, 1), dtype=bool),
        log_prob=np.zeros((2, 1)),
        value=np.zeros((2, 1)),
        entropy=np.zeros((2, 1)),
        mu=None,
        log_sigma=None,
        commit_step=np.array([1]),
        commit_logits=np.array([[0.0, 0.0, 0.0]]),
        sigma=np.array([0.8]),
        z=np.array([1.0]),
    )


def test_two_step_loss_by_hand():
    # Constant logits and value: output-layer weights zero, biases set.
    pol = make_policy("mlp")
    st = init_params(pol, 0)
    b_pi = np.array([0.2, -0.1, 0.3])
    st.view("head.pi.b")[...] = b_pi
    st.view("head.v.b")[...] = 0.4
    cfg = TrainConfig(policy=PolicyConfig(variant="mlp"))
    lb = actor_critic_loss(pol, st.bind(None), _two_step_rollout(), cfg)

    lse = math.log(sum(math.exp(v) for v in b_pi))
    lp = [b - lse for b in b_pi]
    G0, G1 = -0.05 + 0.99 * 1.0, 1.0
    A0, A1 = G0 - 0.4, G1 - 0.4
    pl = -(lp[0] * A0 + lp[1] * A1) / 2
    vl = ((0.4 - G0) ** 2 + (0.4 - G1) ** 2) / 2
    H = -sum(math.exp(v) * v for v in lp)
    assert lb.policy_loss == pytest.approx(pl, abs=1e-12)
    assert lb.value_loss == pytest.approx(vl, abs=1e-12)
    assert lb.entropy == pytest.approx(H, abs=1e-12)
    assert lb.belief_aux == 0.0
    assert lb.total == pytest.approx(pl + 0.5 * vl - 0.01 * H, abs=1e-12)


def test_zero_advantage_and_exact_value():
    pol = make_policy("mlp")
    pv = init_params(pol, 0).bind(None)
    cfg = TrainConfig(policy=PolicyConfig(variant="mlp"))
    ro = _two_step_rollout()
    zeros = np.zeros((2, 1))
    lb = actor_critic_loss(pol, pv, ro, cfg, returns=zeros, advantages=zeros)
    assert lb.policy_loss == 0.0
    assert lb.value_loss == 0.0  # fresh value head outputs exactly 0 = G


def _aux_rollout(obs, sigma):
    obs = np.asarray(obs, dtype=float).reshape(-1, 1)
    ro = _two_step_rollout()
    ro.obs, ro.mask, ro.sigma = obs, np.ones_like(obs, dtype=bool), np.array([sigma])
    return ro


def test_aux_loss_single_step_example():
    ro = _aux_rollout([2.0], 1.0)
    mus = ad.Var(np.zeros((1, 1, 8)))
    loss = belief_aux_loss(mus, ad.Var(np.zeros((1, 1, 8))), ro, 1.0, 0.0)
    assert float(loss.value) == pytest.approx(math.tanh(2.0) ** 2, abs=1e-12)
    # 0.92936 is the square of the rounded 0.96403; exact value 0.9293492
    assert float(loss.value) == pytest.approx(0.92936, abs=2e-5)


def test_aux_loss_zero_at_targets_and_with_zero_betas():
    ro = _aux_rollout([0.5, -0.2, 1.1], 0.7)
    mu = np.zeros((3, 1, 8))
    ls = np.zeros((3, 1, 8))
    for t in range(3):
        pm = posterior_moments(ro.obs[: t + 1, 0], 0.7)
        mu[t, 0, 0], ls[t, 0, 0] = pm.mean, pm.log_variance
    assert float(belief_aux_loss(ad.Var(mu), ad.Var(ls), ro, 1.0, 1.0).value) == pytest.approx(0.0, abs=1e-30)
    rnd = np.random.default_rng(0).normal(size=(3, 1, 8))
    assert float(belief_aux_loss(ad.Var(rnd), ad.Var(rnd), ro, 0.0, 0.0).value) == 0.0


def test_aux_broadcast_target_counts_every_dim():
    ro = _aux_rollout([2.0], 1.0)
    zeros = ad.Var(np.zeros((1, 1, 8)))
    loss = belief_aux_loss(zeros, zeros, ro, 1.0, 0.0, target="broadcast")
    assert float(loss.value) == pytest.approx(8 * math.tanh(2.0) ** 2, abs=1e-12)


def test_privileged_with_zero_betas_matches_plain_belief():
    kw = dict(batch_episodes=16, opt_steps=0, beta_mu=0.0, beta_sigma=0.0)
    pri = TrainConfig(policy=PolicyConfig(variant="belief_privileged"), **kw)
    bel = TrainConfig(policy=PolicyConfig(variant="belief"), **kw)
    pol_p, pol_b = make_policy(pri.policy), make_policy(bel.policy)
    st = init_params(pol_b, 3)
    st.vector += np.random.default_rng(0).normal(scale=0.3, size=st.size)
    ro = collect_rollouts(pol_b, st, EnvConfig(), 16, 0)
    lp, gp = loss_and_grad(pol_p, st, ro, pri)
    lb, gb = loss_and_grad(pol_b, st, ro, bel)
    assert lp.total == lb.total
    np.testing.assert_array_equal(gp, gb)


def test_ppo_gradient_matches_plain_at_unit_ratio():
    pol = make_policy("belief")
    st = init_params(pol, 1)
    st.vector += np.random.default_rng(2).normal(scale=0.3, size=st.size)
    ro = collect_rollouts(pol, st, EnvConfig(), 32, 1)
    plain = TrainConfig(policy=pol.config)
    clipped = TrainConfig(policy=pol.config, ppo_clip=0.2)
    _, g1 = loss_and_grad(pol, st, ro, plain)
    _, g2 = loss_and_grad(pol, st, ro, clipped)
    np.testing.assert_allclose(g1, g2, rtol=1e-9, atol=1e-12)


def test_single_episode_rollout_and_never_commit():
    pol = make_policy("mlp")
    st = init_params(pol, 0)
    ro = collect_rollouts(pol, st, EnvConfig(), 1, 0)
    assert ro.n_episodes == 1 and ro.obs.shape == (10, 1)
    # Large wait bias: no episode ever guesses.
    st.view("head.pi.b")[...] = [50.0, 0.0, 0.0]
    ro = collect_rollouts(pol, st, EnvConfig(), 20, 0)
    np.testing.assert_array_equal(ro.commit_step, -1)
    assert np.all(np.isnan(ro.commit_logits))
    np.testing.assert_array_equal(ro.latency(10), 10.0)
    np.testing.assert_allclose(ro.episode_returns, -0.5)


def test_uniform_policy_matches_analytic_return():
    # Wait w.p. 1/3 at each of 10 steps (-0.05 each); guesses average 0.
    expected = -0.05 * sum((1 / 3) ** (t + 1) for t in range(10))
    pol = make_policy("mlp")
    st = init_params(pol, 0)
    ret = np.concatenate([collect_rollouts(pol, st, EnvConfig(), 25_000, 7, start=k * 25_000).episode_returns for k in range(4)])
    se = ret.std(ddof=1) / math.sqrt(ret.size)
    assert abs(ret.mean() - expected) < 3 * se


@pytest.mark.parametrize("variant", ["belief", "rwkv_belief"])
def test_batched_rollout_matches_scalar_env(variant):
    """Step episodes one at a time through env.step with the same streams."""
    pol = make_policy(variant)
    st = init_params(pol, 0)
    st.vector += np.random.default_rng(5).normal(scale=0.5, size=st.size)
    pv = st.bind(None)
    cfg = EnvConfig()
    n = 12
    ro = collect_rollouts(pol, st, cfg, n, 4, TRAIN_STREAM, start=30)
    for i in range(n):
        g = episode_rng(4, TRAIN_STREAM, 30 + i)
        es, x = reset(cfg, g)
        au = g.random(cfg.max_steps)
        state = pol.initial_state(1)
        total, t = 0.0, 0
        while not es.done:
            state, out = pol.step(pv, state, np.array([x]))
            logits = out.logits.value
            a = int(sample_from_uniform(logits, au[t])[0])
            assert a == ro.actions[t, i]
            assert log_softmax(logits)[0, a] == pytest.approx(ro.log_prob[t, i], abs=1e-12)
            res = step(es, a)
            total += res.reward
            x = res.obs
            t += 1
        assert total == pytest.approx(ro.episode_returns[i], abs=1e-12)
        assert t == ro.lengths[i]


def test_zero_steps_returns_initialisation():
    cfg = TrainConfig(opt_steps=0, policy=PolicyConfig(variant="belief"))
    res = train_run(cfg, 2)
    assert res.params.vector.tobytes() == init_params(make_policy("belief"), 2).vector.tobytes()
    assert res.metrics == []


def _smoke(variant, steps=6, **kw):
    cfg = TrainConfig(opt_steps=steps, batch_episodes=32, snapshot_every=3, snapshot_episodes=64, policy=PolicyConfig(variant=variant), **kw)
    return cfg, train_run(cfg, 0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_smoke_run_finite_and_recomposes(variant, tmp_path):
    cfg, res = _smoke(variant)
    assert len(res.metrics) == 6 and len(res.snapshots) == 2
    for row in res.metrics:
        assert all(math.isfinite(row[c]) for c in METRIC_COLUMNS)
        assert recompose_total(row, cfg.c_v, cfg.c_e) == row["total"]
    write_metrics_csv(tmp_path / "m.csv", res.metrics, ["variant=" + variant])
    back = read_metrics_csv(tmp_path / "m.csv")
    assert back == res.metrics


def test_training_is_deterministic():
    _, a = _smoke("belief_gated", steps=3)
    _, b = _smoke("belief_gated", steps=3)
    assert a.metrics == b.metrics
    assert a.params.vector.tobytes() == b.params.vector.tobytes()


def test_ppo_multi_epoch_runs():
    _, res = _smoke("belief", steps=3, ppo_clip=0.2, update_epochs=3)
    assert all(math.isfinite(r["total"]) for r in res.metrics)


def test_large_entropy_bonus_keeps_policy_near_uniform():
    cfg = TrainConfig(opt_steps=150, batch_episodes=64, c_e=10.0, snapshot_every=0, policy=PolicyConfig(variant="mlp"))
    res = train_run(cfg, 0)
    final = np.mean([r["entropy"] for r in res.metrics[-10:]])
    assert final > math.log(3.0) - 0.05


def test_training_improves_return():
    cfg = TrainConfig(opt_steps=120, batch_episodes=128, snapshot_every=0, policy=PolicyConfig(variant="belief"))
    res = train_run(cfg, 0)
    early = np.mean([r["mean_return"] for r in res.metrics[:10]])
    late = np.mean([r["mean_return"] for r in res.metrics[-10:]])
    assert late > early + 0.3


def test_divergence_raises_with_dump(monkeypatch):
    real = training.loss_and_grad

    def poisoned(*args):
        lb, g = real(*args)
        g[0] = np.nan
        return lb, g

    monkeypatch.setattr(training, "loss_and_grad", poisoned)
    with pytest.raises(DivergenceError) as info:
        _smoke("belief", steps=2)
    assert info.value.dump["step"] == 0 and math.isnan(info.value.dump["grad_norm"])


def test_config_validation():
    from beliefrl.env import ConfigError

    with pytest.raises(ConfigError):
        TrainConfig(seq_len=5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(aux_target="all").validate()
    with pytest.raises(ConfigError):
        TrainConfig(ppo_clip=0.0).validate()
