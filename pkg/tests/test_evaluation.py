import math

import numpy as np
import pytest

from beliefrl.env import ConfigError, EnvConfig
from beliefrl.evaluation import (
    EvalConfig,
    SeedEval,
    aggregate,
    bucket_index,
    commit_records,
    ece,
    evaluate,
    partition_buckets,
    sigma_sweep,
    spearman,
)
from beliefrl.policies import make_policy
from beliefrl.training import collect_rollouts, init_params


def test_ece_perfect_and_half():
    assert ece(np.ones(100), np.ones(100, dtype=bool)).ece == 0.0
    rep = ece(np.ones(100), np.arange(100) % 2 == 0)
    assert rep.ece == pytest.approx(0.5, abs=1e-15)
    assert rep.counts[-1] == 100


def test_ece_calibrated_source():
    rng = np.random.default_rng(0)
    conf = rng.uniform(0.5, 1.0, 100_000)
    assert ece(conf, rng.random(100_000) < conf).ece < 0.01


def test_ece_bins_by_hand():
    conf = np.array([0.52, 0.58, 0.97, 0.99])
    correct = np.array([True, False, True, True])
    rep = ece(conf, correct, n_bins=5)
    # Bins [0.5,0.6): conf 0.55 acc 0.5; [0.9,1.0]: conf 0.98 acc 1.0
    assert rep.ece == pytest.approx(0.5 * 0.05 + 0.5 * 0.02, abs=1e-15)
    np.testing.assert_array_equal(rep.counts, [2, 0, 0, 0, 2])
    assert np.isnan(rep.accuracy[1])


def test_ece_rejects_empty_and_out_of_range():
    with pytest.raises(ValueError):
        ece([], [])
    with pytest.raises(ValueError):
        ece([0.3], [True])


def test_commit_records_renormalise_guess_logits():
    pol = make_policy("mlp")
    st = init_params(pol, 0)
    ro = collect_rollouts(pol, st, EnvConfig(), 50, 0)
    ro.commit_logits[:] = [5.0, np.log(3.0), 0.0]
    conf, correct = commit_records(ro)
    done = ro.commit_step >= 0
    assert conf.size == done.sum()
    np.testing.assert_allclose(conf, 0.75, rtol=1e-14)
    np.testing.assert_array_equal(correct, ro.z[done] == 1)


def test_regime_buckets_partition_training_range():
    env, cfg = EnvConfig(), EvalConfig()
    sig = np.concatenate([np.linspace(0.3, 1.2, 1001), [0.9, 1.05, 1.2]])
    buckets = partition_buckets(env, cfg)
    idx = bucket_index(sig, env, cfg)
    for k, b in enumerate(buckets):
        inside = (sig >= b.sigma_lo) & ((sig < b.sigma_hi) if k < 2 else (sig <= b.sigma_hi))
        np.testing.assert_array_equal(inside, idx == k)
    # Reported regimes are unions of buckets.
    regs = {r.name: r for r in cfg.regimes(env)}
    np.testing.assert_array_equal(regs["hard"].contains(sig), idx >= 1)
    np.testing.assert_array_equal(regs["very_hard"].contains(sig), idx == 2)


def test_eval_config_validation():
    EvalConfig().validate(EnvConfig())
    with pytest.raises(ConfigError):
        EvalConfig(very_hard=(0.8, 1.2)).validate()
    with pytest.raises(ConfigError):
        EvalConfig(hard=(0.9, 1.5), very_hard=(1.0, 1.5)).validate(EnvConfig())
    with pytest.raises(ConfigError):
        EvalConfig(sweep_sigmas=(0.3, 0.0)).validate()
    assert len(EvalConfig().sweep_sigmas) == 16
    assert EvalConfig().sweep_sigmas[0] == 0.3 and EvalConfig().sweep_sigmas[-1] == 1.8


def test_uniform_policy_evaluation_matches_oracle():
    expected = -0.05 * sum((1 / 3) ** (t + 1) for t in range(10))
    pol = make_policy("mlp")
    st = init_params(pol, 0)
    env = EnvConfig()
    ev = evaluate(pol, st, env, 20_000, 0, EvalConfig().regimes(env))
    assert abs(ev.returns["mean"] - expected) < 3 * ev.stderr["mean"]
    assert ev.counts["mean"] == 20_000
    assert ev.counts["hard"] > ev.counts["very_hard"] > 0
    # Uniform random guesses are right half the time at any confidence.
    assert ev.calibration.committed_fraction > 0.99


def test_evaluate_is_chunk_invariant():
    pol = make_policy("belief")
    st = init_params(pol, 1)
    st.vector += np.random.default_rng(0).normal(scale=0.3, size=st.size)
    a = evaluate(pol, st, EnvConfig(), 3000, 1, chunk=4096)
    b = evaluate(pol, st, EnvConfig(), 3000, 1, chunk=700)
    assert a.returns == b.returns and a.calibration.ece == b.calibration.ece


def test_identical_ranges_reproduce_id_evaluation():
    pol = make_policy("belief")
    st = init_params(pol, 1)
    env = EnvConfig()
    same = EvalConfig(ood=(env.sigma_lo, env.sigma_hi)).ood_env(env)
    assert same == env
    a = evaluate(pol, st, env, 2000, 0)
    b = evaluate(pol, st, same, 2000, 0)
    assert a.returns == b.returns


def _seed_eval(seed, ret, e):
    from beliefrl.evaluation import CalibrationReport

    cal = CalibrationReport(e, np.linspace(0.5, 1, 11), np.zeros(10), np.zeros(10), np.zeros(10, dtype=int))
    return SeedEval(seed, {"mean": ret}, {"mean": 0.0}, {"mean": 1}, {"mean": 2.0}, cal, 10)


def test_aggregate_population_std():
    rep = aggregate([_seed_eval(0, 0.90, 0.1), _seed_eval(1, 0.92, 0.2), _seed_eval(2, 0.94, 0.3)], "abc")
    assert rep.mean["mean"] == pytest.approx(0.92)
    assert rep.std["mean"] == pytest.approx(math.sqrt(((0.02) ** 2 * 2) / 3))
    assert rep.ece_mean == pytest.approx(0.2) and rep.episodes == 30 and rep.config_hash == "abc"


def test_single_sigma_sweep_matches_degenerate_evaluate():
    from beliefrl.env import SWEEP_STREAM

    pol = make_policy("belief")
    st = init_params(pol, 0)
    rows = sigma_sweep(pol, st, [0.7], 1000, 0)
    assert len(rows) == 1
    ev = evaluate(pol, st, EnvConfig(0.7, 0.7), 1000, 0, domain=SWEEP_STREAM, start=0)
    assert rows[0].mean_return == ev.returns["mean"]
    assert rows[0].mean_latency == ev.latency["mean"]
    with pytest.raises(ConfigError):
        sigma_sweep(pol, st, [0.0], 10, 0)


def test_spearman_monotone():
    assert spearman([1, 2, 3, 4], [0.1, 0.5, 0.6, 2.0]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
