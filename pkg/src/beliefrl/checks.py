"""Self-tests that need no trained checkpoint.

Each check returns a :class:`CheckResult` naming what was measured and the
bound it was held to.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .categorical import entropy, softmax
from .env import TRAIN_STREAM, posterior_moments
from .evaluation import ece
from .gradcheck import finite_diff_check
from .params import ParamStore, load_checkpoint, save_checkpoint
from .policies import LINEAR_STATE_VARIANTS, VARIANTS, PolicyConfig, make_policy, stability_probe
from .training import TrainConfig, actor_critic_loss, collect_rollouts, init_params, returns_and_advantages, train_run, write_metrics_csv


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    bound: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: measured {self.measured:.3g} vs bound {self.bound:.3g}{extra}"


def frozen_gradcheck_problem(variant: str, seed: int = 0, episodes: int = 12, jitter: float = 0.3):
    """A rollout plus a deterministic (loss, grad) closure over the flat parameters.

    Parameters are jittered away from the zero-initialised heads so every
    block carries gradient; returns and advantages are frozen at the base
    parameters so the closure is a fixed function of theta.
    """
    cfg = TrainConfig(policy=PolicyConfig(variant=variant), batch_episodes=episodes, opt_steps=0)
    policy = make_policy(cfg.policy)
    store = init_params(policy, seed)
    rng = np.random.default_rng([seed, 99])
    store.vector += jitter * rng.standard_normal(store.size)
    rollout = collect_rollouts(policy, store, cfg.env, episodes, seed, TRAIN_STREAM)
    G, A = returns_and_advantages(rollout.rewards, rollout.mask, rollout.value, cfg.gamma)

    def loss_and_grad(theta: np.ndarray) -> tuple[float, np.ndarray]:
        st = ParamStore(list(policy.specs))
        st.vector[:] = theta
        tape = ad.Tape()
        lb = actor_critic_loss(policy, st.bind(tape), rollout, cfg, G, A)
        return lb.total, st.flatten_grads(ad.backward(tape, lb.total_var))

    return store.vector.copy(), loss_and_grad


def check_gradients(
    variants=VARIANTS,
    tolerance: float = 1e-4,
    n_coords: int = 64,
    corrupt: Callable[[np.ndarray], np.ndarray] | None = None,
) -> list[CheckResult]:
    """`corrupt` (tests only) tampers with the analytic gradient."""
    out = []
    for v in variants:
        theta, fn = frozen_gradcheck_problem(v)
        if corrupt is not None:
            base = fn

            def fn(th, base=base):
                loss, g = base(th)
                return loss, corrupt(g)

        rep = finite_diff_check(fn, theta, tolerance, n_coords, rng=np.random.default_rng(1))
        out.append(CheckResult(f"gradient[{v}]", rep.passed, rep.max_rel_error, tolerance, f"{len(rep.coords)} coords"))
    return out


def brute_force_posterior(observations, sigma: float) -> tuple[float, float]:
    """Two-hypothesis Bayes with explicit likelihood products."""
    xs = np.asarray(observations, dtype=np.float64)
    norm = 1.0 / (math.sqrt(2.0 * math.pi) * sigma)
    lp = float(np.prod(norm * np.exp(-((xs - 1.0) ** 2) / (2 * sigma * sigma))))
    lm = float(np.prod(norm * np.exp(-((xs + 1.0) ** 2) / (2 * sigma * sigma))))
    s = lp + lm
    return (lp - lm) / s, 4.0 * lp * lm / (s * s)


def check_posterior(n: int = 1000, rtol: float = 1e-10, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        length = int(rng.integers(1, 11))
        sigma = float(rng.uniform(0.5, 1.8))
        z = rng.choice([-1.0, 1.0])
        xs = z + sigma * rng.standard_normal(length)
        pm = posterior_moments(xs, sigma)
        bm, bv = brute_force_posterior(xs, sigma)
        worst = max(worst, abs(pm.mean - bm) / max(abs(bm), 1e-300), abs(pm.variance - bv) / max(abs(bv), 1e-300))
    return CheckResult("posterior oracle vs brute-force Bayes", worst <= rtol, worst, rtol, f"{n} cases")


def check_stability(steps: int = 10_000, input_bound: float = 3.0, seed: int = 0) -> list[CheckResult]:
    out = []
    for v in LINEAR_STATE_VARIANTS:
        policy = make_policy(v)
        store = init_params(policy, seed)
        # Spread decays toward 1 so the bound is exercised, not trivially slack.
        rng = np.random.default_rng([seed, 7])
        for name in ("rec.theta1", "rec.theta2"):
            store.view(name)[...] = rng.uniform(0.0, 5.0, size=store.view(name).shape)
        res = stability_probe(policy, store, input_bound, steps, np.random.default_rng([seed, 8]))
        out.append(
            CheckResult(f"stability[{v}]", res.within_bound, res.sup_state_norm, res.bound, f"rho={res.rho:.4f}, {steps} steps")
        )
    return out


def check_ece_calibrated(n: int = 100_000, bound: float = 0.01, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    conf = rng.uniform(0.5, 1.0, size=n)
    correct = rng.random(n) < conf
    rep = ece(conf, correct, 10)
    return CheckResult("ECE of calibrated synthetic source", rep.ece < bound, rep.ece, bound, f"N={n}")


def check_softmax_identities(tol: float = 1e-12) -> CheckResult:
    h = float(entropy(np.zeros(3)))
    err = abs(h - math.log(3.0))
    rng = np.random.default_rng(0)
    logits = rng.normal(scale=20.0, size=(1000, 3))
    p = softmax(logits)
    err = max(err, float(np.abs(p.sum(axis=1) - 1.0).max()))
    ok = err <= tol and bool(np.all(p > 0))
    return CheckResult("softmax sums / uniform entropy = ln 3", ok, err, tol)


def check_checkpoint_roundtrip(seed: int = 0) -> CheckResult:
    policy = make_policy("belief_gated")
    store = init_params(policy, seed)
    store.vector += np.random.default_rng(3).standard_normal(store.size) * 1e-3
    with tempfile.TemporaryDirectory() as d:
        save_checkpoint(store, Path(d) / "ck", {"seed": seed})
        loaded, _ = load_checkpoint(Path(d) / "ck", list(policy.specs))
    same = loaded.vector.tobytes() == store.vector.tobytes()
    return CheckResult("checkpoint round-trip bit-exact", same, 0.0 if same else 1.0, 0.0)


def check_determinism(seed: int = 0) -> CheckResult:
    cfg = TrainConfig(opt_steps=4, batch_episodes=32, policy=PolicyConfig(variant="belief_privileged"), snapshot_every=2, snapshot_episodes=64)
    blobs = []
    with tempfile.TemporaryDirectory() as d:
        for k in range(2):
            res = train_run(cfg, seed)
            write_metrics_csv(Path(d) / f"m{k}.csv", res.metrics)
            save_checkpoint(res.params, Path(d) / f"c{k}", {"seed": seed})
            blobs.append((Path(d) / f"m{k}.csv").read_bytes() + (Path(d) / f"c{k}.bin").read_bytes())
    same = blobs[0] == blobs[1]
    return CheckResult("full-run determinism byte-exact", same, 0.0 if same else 1.0, 0.0)


def run_all(quick: bool = False) -> list[CheckResult]:
    t0 = time.perf_counter()
    results = check_gradients()
    results.append(check_posterior())
    results += check_stability(steps=2_000 if quick else 10_000)
    results.append(check_ece_calibrated())
    results.append(check_softmax_identities())
    results.append(check_checkpoint_roundtrip())
    results.append(check_determinism())
    elapsed = time.perf_counter() - t0
    results.append(CheckResult("self-test runtime (s)", elapsed < 300, elapsed, 300.0))
    return results


__all__ = [
    "CheckResult",
    "run_all",
    "check_gradients",
    "check_posterior",
    "check_stability",
    "check_ece_calibrated",
    "check_softmax_identities",
    "check_checkpoint_roundtrip",
    "check_determinism",
    "frozen_gradcheck_problem",
    "brute_force_posterior",
]
