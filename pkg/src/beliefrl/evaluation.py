"""Evaluation: regime-bucketed returns, decision-time calibration, noise sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .categorical import softmax
from .env import EVAL_STREAM, SWEEP_STREAM, ConfigError, EnvConfig
from .params import ParamStore
from .policies import Policy
from .training import Rollout, collect_rollouts


@dataclass(frozen=True)
class RegimeSpec:
    name: str
    sigma_lo: float
    sigma_hi: float

    def contains(self, sigma: np.ndarray) -> np.ndarray:
        return (sigma >= self.sigma_lo) & (sigma <= self.sigma_hi)


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 20000
    hard: tuple[float, float] = (0.9, 1.2)
    very_hard: tuple[float, float] = (1.05, 1.2)
    ood: tuple[float, float] = (1.2, 1.8)
    n_bins: int = 10
    sweep_sigmas: tuple[float, ...] = tuple(round(0.3 + 0.1 * i, 1) for i in range(16))
    sweep_episodes: int = 5000
    greedy: bool = False

    def validate(self, train_env: EnvConfig | None = None) -> EvalConfig:
        if self.episodes < 1 or self.sweep_episodes < 1:
            raise ConfigError("eval: episode counts must be >= 1")
        if self.n_bins < 1:
            raise ConfigError("eval: n_bins must be >= 1")
        for name in ("hard", "very_hard", "ood"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"eval: {name} range must satisfy 0 < lo <= hi")
        if not self.hard[0] <= self.very_hard[0] <= self.very_hard[1] <= self.hard[1]:
            raise ConfigError("eval: very_hard must lie inside hard")
        if any(s <= 0 for s in self.sweep_sigmas) or not self.sweep_sigmas:
            raise ConfigError("eval: sweep sigmas must be positive and non-empty")
        if train_env is not None:
            if not (train_env.sigma_lo <= self.hard[0] and self.hard[1] <= train_env.sigma_hi):
                raise ConfigError("eval: hard regime must lie inside the training range")
        return self

    def regimes(self, env: EnvConfig) -> list[RegimeSpec]:
        return [
            RegimeSpec("mean", env.sigma_lo, env.sigma_hi),
            RegimeSpec("hard", *self.hard),
            RegimeSpec("very_hard", *self.very_hard),
        ]

    def ood_env(self, train_env: EnvConfig) -> EnvConfig:
        return EnvConfig(
            sigma_lo=self.ood[0],
            sigma_hi=self.ood[1],
            max_steps=train_env.max_steps,
            wait_penalty=train_env.wait_penalty,
            correct_reward=train_env.correct_reward,
            incorrect_reward=train_env.incorrect_reward,
        )


def partition_buckets(env: EnvConfig, cfg: EvalConfig) -> list[RegimeSpec]:
    """Disjoint sigma buckets whose unions give the reported regimes.

    easy = [lo, hard_lo), hard_only = [hard_lo, very_hard_lo),
    very_hard = [very_hard_lo, hi]. Boundaries go to the upper bucket.
    """
    return [
        RegimeSpec("easy", env.sigma_lo, cfg.hard[0]),
        RegimeSpec("hard_only", cfg.hard[0], cfg.very_hard[0]),
        RegimeSpec("very_hard", cfg.very_hard[0], env.sigma_hi),
    ]


def bucket_index(sigma: np.ndarray, env: EnvConfig, cfg: EvalConfig) -> np.ndarray:
    edges = np.array([cfg.hard[0], cfg.very_hard[0]])
    return np.searchsorted(edges, sigma, side="right")


@dataclass
class CalibrationReport:
    ece: float
    bin_edges: np.ndarray
    conf_mean: np.ndarray
    accuracy: np.ndarray
    counts: np.ndarray
    committed_fraction: float = 1.0


def commit_records(rollout: Rollout) -> tuple[np.ndarray, np.ndarray]:
    """Binary confidence and correctness at the commit step of each guessing episode.

    The two guess logits are renormalised into P(z=+1) vs P(z=-1); the
    confidence is the larger of the two and the prediction its sign.
    """
    done = rollout.commit_step >= 0
    lg = rollout.commit_logits[done][:, 1:]
    p = softmax(lg)
    conf = p.max(axis=1)
    pred = np.where(p[:, 0] >= p[:, 1], 1.0, -1.0)
    return conf, pred == rollout.z[done]


def ece(confidence, correct, n_bins: int = 10, total_episodes: int | None = None) -> CalibrationReport:
    """Equal-width bins over [0.5, 1]; ECE = sum_b (n_b / N) |acc_b - conf_b|."""
    conf = np.asarray(confidence, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("ECE is undefined for an empty record set")
    if np.any(conf < 0.5 - 1e-12) or np.any(conf > 1.0 + 1e-12):
        raise ValueError("binary confidences must lie in [0.5, 1]")
    edges = np.linspace(0.5, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=corr, minlength=n_bins)
    nz = counts > 0
    conf_mean = np.where(nz, conf_sum / np.maximum(counts, 1), np.nan)
    acc = np.where(nz, acc_sum / np.maximum(counts, 1), np.nan)
    gaps = np.abs(acc_sum[nz] - conf_sum[nz])  # = n_b |acc_b - conf_b|
    value = float(gaps.sum() / conf.size)
    frac = conf.size / total_episodes if total_episodes else 1.0
    return CalibrationReport(value, edges, conf_mean, acc, counts, frac)


@dataclass
class SeedEval:
    """One checkpoint evaluated on one environment."""

    seed: int
    returns: dict[str, float]
    stderr: dict[str, float]
    counts: dict[str, int]
    latency: dict[str, float]
    calibration: CalibrationReport | None
    episodes: int


def evaluate(
    policy: Policy,
    params: ParamStore,
    env: EnvConfig,
    episodes: int,
    seed: int,
    regimes: list[RegimeSpec] | None = None,
    n_bins: int = 10,
    greedy: bool = False,
    domain: int = EVAL_STREAM,
    start: int = 0,
    chunk: int = 4096,
) -> SeedEval:
    """Sample `episodes` fresh episodes and bucket them by hidden sigma.

    Without `regimes` the whole run is one "mean" regime.
    """
    if episodes < 1:
        raise ConfigError("evaluate: episodes must be >= 1")
    parts = []
    for s in range(0, episodes, chunk):
        parts.append(collect_rollouts(policy, params, env, min(chunk, episodes - s), seed, domain, start + s, greedy))
    ret = np.concatenate([r.episode_returns for r in parts])
    sig = np.concatenate([r.sigma for r in parts])
    lat = np.concatenate([r.latency(env.max_steps) for r in parts])
    confs, corrs = zip(*(commit_records(r) for r in parts))
    conf, corr = np.concatenate(confs), np.concatenate(corrs)
    regimes = regimes or [RegimeSpec("mean", env.sigma_lo, env.sigma_hi)]
    out = SeedEval(seed, {}, {}, {}, {}, None, episodes)
    for reg in regimes:
        m = reg.contains(sig)
        n = int(m.sum())
        out.counts[reg.name] = n
        out.returns[reg.name] = float(ret[m].mean()) if n else float("nan")
        out.stderr[reg.name] = float(ret[m].std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
        out.latency[reg.name] = float(lat[m].mean()) if n else float("nan")
    out.calibration = ece(conf, corr, n_bins, total_episodes=episodes) if conf.size else None
    return out


@dataclass
class EvalReport:
    """Across-seed aggregate: mean and population std of per-seed values."""

    regimes: list[str]
    mean: dict[str, float]
    std: dict[str, float]
    latency: dict[str, float]
    ece_mean: float
    ece_std: float
    per_seed: list[SeedEval] = field(default_factory=list)
    episodes: int = 0
    config_hash: str = ""


def aggregate(evals: list[SeedEval], config_hash: str = "") -> EvalReport:
    names = list(evals[0].returns)
    mean = {k: float(np.mean([e.returns[k] for e in evals])) for k in names}
    std = {k: float(np.std([e.returns[k] for e in evals])) for k in names}
    lat = {k: float(np.mean([e.latency[k] for e in evals])) for k in names}
    eces = [e.calibration.ece for e in evals if e.calibration is not None]
    return EvalReport(
        names,
        mean,
        std,
        lat,
        float(np.mean(eces)) if eces else float("nan"),
        float(np.std(eces)) if eces else float("nan"),
        list(evals),
        sum(e.episodes for e in evals),
        config_hash,
    )


@dataclass
class SweepRow:
    sigma: float
    mean_return: float
    stderr: float
    mean_latency: float
    episodes: int


def sigma_sweep(
    policy: Policy,
    params: ParamStore,
    sigmas,
    episodes_per_sigma: int,
    seed: int,
    base_env: EnvConfig | None = None,
    greedy: bool = False,
) -> list[SweepRow]:
    """Evaluate at each fixed sigma (degenerate range, no per-episode resampling)."""
    base = base_env or EnvConfig()
    rows = []
    for i, s in enumerate(sigmas):
        if not s > 0:
            raise ConfigError(f"sweep sigma must be positive, got {s}")
        env = EnvConfig(s, s, base.max_steps, base.wait_penalty, base.correct_reward, base.incorrect_reward)
        ev = evaluate(policy, params, env, episodes_per_sigma, seed, greedy=greedy, domain=SWEEP_STREAM, start=i << 32)
        rows.append(SweepRow(float(s), ev.returns["mean"], ev.stderr["mean"], ev.latency["mean"], episodes_per_sigma))
    return rows


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)
