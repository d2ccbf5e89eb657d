"""Rollout collection, actor-critic loss and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tape, Var
from .categorical import log_softmax, sample_from_uniform
from .env import EVAL_STREAM, TRAIN_STREAM, ConfigError, EnvConfig, draw_batch, posterior_prefix_targets
from .optim import AdamState, adam_step
from .params import ParamStore
from .policies import Policy, PolicyConfig, make_policy

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step",
    "policy_loss",
    "value_loss",
    "entropy",
    "belief_aux",
    "total",
    "mean_return",
    "mean_commit_step",
    "grad_norm",
)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, dump: dict[str, float]) -> None:
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    opt_steps: int = 1600
    batch_episodes: int = 256
    seq_len: int = 10
    seeds: tuple[int, ...] = (0, 1, 2)
    gamma: float = 0.99
    c_v: float = 0.5
    c_e: float = 0.01
    beta_mu: float = 1.0
    beta_sigma: float = 1.0
    lr: float = 3e-3
    # "slice": supervise belief dim 0 only; "broadcast": every dim.
    aux_target: str = "slice"
    # Variance floor for privileged log-variance targets.
    aux_log_var_floor: float = math.log(1e-3)
    ppo_clip: float | None = None
    update_epochs: int = 1
    snapshot_every: int = 200
    snapshot_episodes: int = 2000
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def validate(self) -> TrainConfig:
        for name in ("batch_episodes", "seq_len", "update_epochs", "snapshot_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train: {name} must be >= 1")
        if self.opt_steps < 0:
            raise ConfigError("train: opt_steps must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("train: gamma must lie in (0, 1]")
        for name in ("c_v", "c_e", "beta_mu", "beta_sigma", "lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train: {name} must be >= 0")
        if self.aux_target not in ("slice", "broadcast"):
            raise ConfigError("train: aux_target must be 'slice' or 'broadcast'")
        if self.ppo_clip is not None and self.ppo_clip <= 0:
            raise ConfigError("train: ppo_clip must be positive when set")
        if self.seq_len != self.env.max_steps:
            raise ConfigError(f"train: seq_len ({self.seq_len}) must equal env.max_steps ({self.env.max_steps})")
        if not self.seeds:
            raise ConfigError("train: seeds must be non-empty")
        self.env.validate()
        self.policy.validate()
        return self


@dataclass
class Rollout:
    """Batched trajectories, time-major. Entries past termination are padding."""

    obs: np.ndarray  # (T, B) observation fed at step t (0 after termination)
    actions: np.ndarray  # (T, B) int, -1 after termination
    rewards: np.ndarray  # (T, B)
    mask: np.ndarray  # (T, B) bool, True where a decision was taken
    log_prob: np.ndarray
    value: np.ndarray
    entropy: np.ndarray
    mu: np.ndarray | None  # (T, B, d_b)
    log_sigma: np.ndarray | None
    commit_step: np.ndarray  # (B,) int, -1 if the episode never guessed
    commit_logits: np.ndarray  # (B, 3), NaN if never guessed
    sigma: np.ndarray  # (B,) hidden, for evaluation and oracle targets only
    z: np.ndarray  # (B,) hidden

    @property
    def n_episodes(self) -> int:
        return self.obs.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=0)

    @property
    def episode_returns(self) -> np.ndarray:
        return (self.rewards * self.mask).sum(axis=0)

    def latency(self, seq_len: int) -> np.ndarray:
        """Commit step per episode; never-committing episodes count as seq_len."""
        return np.where(self.commit_step >= 0, self.commit_step, seq_len).astype(np.float64)


@dataclass
class LossBreakdown:
    policy_loss: float
    value_loss: float
    entropy: float
    belief_aux: float
    total: float
    total_var: Var | None = field(default=None, repr=False)


def collect_rollouts(
    policy: Policy,
    params: ParamStore,
    env_config: EnvConfig,
    n: int,
    seed: int,
    domain: int = TRAIN_STREAM,
    start: int = 0,
    greedy: bool = False,
) -> Rollout:
    """Simulate `n` episodes with fresh recurrent state, sampling from pi.

    Episode i uses the generator keyed on (seed, domain, start + i).
    """
    if n < 1:
        raise ConfigError("collect_rollouts: n must be >= 1")
    batch = draw_batch(env_config, seed, domain, start, n)
    T = env_config.max_steps
    cfg = env_config
    pv = params.bind(None)
    state = policy.initial_state(n)

    obs = np.zeros((T, n))
    actions = np.full((T, n), -1, dtype=np.int64)
    rewards = np.zeros((T, n))
    mask = np.zeros((T, n), dtype=bool)
    logp = np.zeros((T, n))
    value = np.zeros((T, n))
    ent = np.zeros((T, n))
    d_b = policy.config.d_belief
    mu = np.zeros((T, n, d_b)) if policy.has_belief else None
    ls = np.zeros((T, n, d_b)) if policy.has_belief else None
    commit_step = np.full(n, -1, dtype=np.int64)
    commit_logits = np.full((n, 3), np.nan)

    alive = np.ones(n, dtype=bool)
    x = batch.z + batch.sigma * batch.noise[0]
    for t in range(T):
        obs[t] = np.where(alive, x, 0.0)
        state, out = policy.step(pv, state, obs[t])
        logits = out.logits.value
        if not np.all(np.isfinite(logits)):
            raise NumericError(f"non-finite logits at step {t}")
        lp = log_softmax(logits)
        a = np.argmax(logits, axis=-1) if greedy else sample_from_uniform(logits, batch.action_u[t])
        mask[t] = alive
        actions[t] = np.where(alive, a, -1)
        logp[t] = np.where(alive, lp[np.arange(n), a], 0.0)
        value[t] = np.where(alive, out.value.value, 0.0)
        ent[t] = np.where(alive, -(np.exp(lp) * lp).sum(-1), 0.0)
        if mu is not None:
            mu[t] = out.mu.value
            ls[t] = out.log_sigma.value
        guess = alive & (a != 0)
        correct = np.where(a == 1, 1.0, -1.0) == batch.z
        r = np.where(a == 0, -cfg.wait_penalty, np.where(correct, cfg.correct_reward, cfg.incorrect_reward))
        rewards[t] = np.where(alive, r, 0.0)
        commit_step[guess] = t
        commit_logits[guess] = logits[guess]
        alive = alive & ~guess
        if t + 1 < T:
            x = batch.z + batch.sigma * batch.noise[t + 1]
        else:
            alive[:] = False
    return Rollout(obs, actions, rewards, mask, logp, value, ent, mu, ls, commit_step, commit_logits, batch.sigma, batch.z)


def returns_and_advantages(rewards: np.ndarray, mask: np.ndarray, values: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Discounted Monte Carlo returns (no bootstrap) and A = G - V.

    Arrays are time-major (T, B); padded entries get 0.
    """
    r = np.where(mask, rewards, 0.0)
    G = np.zeros_like(r)
    acc = np.zeros(r.shape[1:])
    for t in range(r.shape[0] - 1, -1, -1):
        acc = r[t] + gamma * acc
        G[t] = acc
    G = np.where(mask, G, 0.0)
    return G, np.where(mask, G - values, 0.0)


@dataclass
class _Replay:
    logits: list[Var]
    values: list[Var]
    mus: list[Var]
    log_sigmas: list[Var]


def _replay(policy: Policy, pv: dict[str, Var], rollout: Rollout) -> _Replay:
    state = policy.initial_state(rollout.n_episodes)
    rep = _Replay([], [], [], [])
    for t in range(rollout.obs.shape[0]):
        state, out = policy.step(pv, state, rollout.obs[t])
        rep.logits.append(out.logits)
        rep.values.append(out.value)
        if out.mu is not None:
            rep.mus.append(out.mu)
            rep.log_sigmas.append(out.log_sigma)
    return rep


def _masked_mean(x: Var, mask: np.ndarray, count: float) -> Var:
    return ad.total(ad.mul(x, mask.astype(np.float64))) * (1.0 / count)


def belief_aux_loss(
    mus: Var,
    log_sigmas: Var,
    rollout: Rollout,
    beta_mu: float,
    beta_sigma: float,
    target: str = "slice",
    log_var_floor: float = -np.inf,
) -> Var:
    """beta_mu ||mu - mu*||^2 + beta_sigma ||log S - log S*||^2, averaged over steps.

    `mus` and `log_sigmas` are (T, B, d_b). Targets are the exact label
    posterior after each observation prefix, computed from the hidden sigma;
    they are constants, so gradients reach the policy only.
    """
    if rollout.sigma is None or not np.all(np.isfinite(rollout.sigma)):
        raise ad.ContractError("belief_aux_loss needs the hidden sigma of every episode")
    mean_t, logvar_t = posterior_prefix_targets(rollout.obs, rollout.sigma)
    logvar_t = np.maximum(logvar_t, log_var_floor)
    count = float(rollout.mask.sum())
    if target == "slice":
        dmu = ad.square(mus[:, :, 0] - mean_t)
        dls = ad.square(log_sigmas[:, :, 0] - logvar_t)
    else:
        dmu = ad.sum_last(ad.square(mus - mean_t[..., None]))
        dls = ad.sum_last(ad.square(log_sigmas - logvar_t[..., None]))
    return _masked_mean(dmu, rollout.mask, count) * beta_mu + _masked_mean(dls, rollout.mask, count) * beta_sigma


def actor_critic_loss(
    policy: Policy,
    pv: dict[str, Var],
    rollout: Rollout,
    config: TrainConfig,
    returns: np.ndarray | None = None,
    advantages: np.ndarray | None = None,
) -> LossBreakdown:
    """Replay the rollout through the policy and build the total loss.

    total = policy_loss + c_v * value_loss - c_e * entropy + belief_aux, with
    means taken over every decision step of every episode.
    """
    rep = _replay(policy, pv, rollout)
    mask = rollout.mask
    count = float(mask.sum())
    logits = ad.stack(rep.logits)  # (T, B, 3)
    values = ad.stack(rep.values)  # (T, B)
    if returns is None:
        returns, advantages = returns_and_advantages(rollout.rewards, mask, values.value, config.gamma)
    logp_all = ad.log_softmax(logits)
    onehot = np.zeros(logits.shape)
    T, B = mask.shape
    tt, bb = np.nonzero(mask)
    onehot[tt, bb, rollout.actions[tt, bb]] = 1.0
    logp = ad.sum_last(ad.mul(logp_all, onehot))
    if config.ppo_clip is None:
        surrogate = ad.mul(logp, advantages)
    else:
        ratio = ad.exp(logp - rollout.log_prob)
        eps = config.ppo_clip
        rv = ratio.value
        clipped = ((advantages > 0) & (rv > 1 + eps)) | ((advantages < 0) & (rv < 1 - eps))
        surrogate = ad.where(clipped, np.clip(rv, 1 - eps, 1 + eps) * advantages, ad.mul(ratio, advantages))
    policy_loss = _masked_mean(surrogate, mask, count) * -1.0
    value_loss = _masked_mean(ad.square(values - returns), mask, count)
    ent = ad.sum_last(ad.mul(ad.exp(logp_all), logp_all)) * -1.0
    entropy = _masked_mean(ent, mask, count)

    total = policy_loss + value_loss * config.c_v - entropy * config.c_e
    aux_val = 0.0
    if policy.variant == "belief_privileged" and (config.beta_mu > 0 or config.beta_sigma > 0):
        aux = belief_aux_loss(
            ad.stack(rep.mus),
            ad.stack(rep.log_sigmas),
            rollout,
            config.beta_mu,
            config.beta_sigma,
            config.aux_target,
            config.aux_log_var_floor,
        )
        total = total + aux
        aux_val = float(aux.value)
    else:
        total = total + 0.0
    return LossBreakdown(
        float(policy_loss.value),
        float(value_loss.value),
        float(entropy.value),
        aux_val,
        float(total.value),
        total,
    )


def recompose_total(row: dict[str, float], c_v: float, c_e: float) -> float:
    """Recompute the logged total in the same float order as the loss."""
    return ((row["policy_loss"] + row["value_loss"] * c_v) - row["entropy"] * c_e) + row["belief_aux"]


def loss_and_grad(policy: Policy, store: ParamStore, rollout: Rollout, config: TrainConfig) -> tuple[LossBreakdown, np.ndarray]:
    tape = Tape()
    pv = store.bind(tape)
    lb = actor_critic_loss(policy, pv, rollout, config)
    grads = ad.backward(tape, lb.total_var)
    return lb, store.flatten_grads(grads)


def init_params(policy: Policy, seed: int) -> ParamStore:
    return policy.new_params(np.random.default_rng([int(seed), 0]))


@dataclass
class TrainResult:
    params: ParamStore
    metrics: list[dict[str, float]]
    snapshots: list[dict[str, float]]


def train_run(
    config: TrainConfig,
    seed: int,
    on_step: Callable[[dict[str, float]], None] | None = None,
) -> TrainResult:
    """Collect a batch, take one Adam step, repeat for opt_steps iterations."""
    config.validate()
    policy = make_policy(config.policy)
    store = init_params(policy, seed)
    opt = AdamState(lr=config.lr)
    metrics: list[dict[str, float]] = []
    snapshots: list[dict[str, float]] = []
    B = config.batch_episodes
    for k in range(config.opt_steps):
        try:
            rollout = collect_rollouts(policy, store, config.env, B, seed, TRAIN_STREAM, start=k * B)
        except NumericError as exc:
            raise DivergenceError(f"rollout failed at step {k}: {exc}", {"step": k}) from exc
        for epoch in range(config.update_epochs):
            lb_e, grad = loss_and_grad(policy, store, rollout, config)
            gnorm_e = float(np.sqrt(grad @ grad))
            if not (math.isfinite(lb_e.total) and math.isfinite(gnorm_e)):
                dump = {
                    "step": k,
                    "epoch": epoch,
                    "policy_loss": lb_e.policy_loss,
                    "value_loss": lb_e.value_loss,
                    "entropy": lb_e.entropy,
                    "belief_aux": lb_e.belief_aux,
                    "grad_norm": gnorm_e,
                }
                raise DivergenceError(f"non-finite loss at step {k}", dump)
            if epoch == 0:
                # Logged losses describe the batch before any update.
                lb, gnorm = lb_e, gnorm_e
            adam_step(store.vector, grad, opt)
        lat = rollout.latency(config.seq_len)
        row = {
            "step": k,
            "policy_loss": lb.policy_loss,
            "value_loss": lb.value_loss,
            "entropy": lb.entropy,
            "belief_aux": lb.belief_aux,
            "total": lb.total,
            "mean_return": float(rollout.episode_returns.mean()),
            "mean_commit_step": float(lat.mean()),
            "grad_norm": gnorm,
        }
        metrics.append(row)
        if on_step is not None:
            on_step(row)
        if config.snapshot_every and (k + 1) % config.snapshot_every == 0:
            snap = collect_rollouts(
                policy, store, config.env, config.snapshot_episodes, seed, EVAL_STREAM, start=(1 << 36) + k * config.snapshot_episodes
            )
            snapshots.append({"step": k + 1, "mean_return": float(snap.episode_returns.mean())})
            log.info("seed %d step %d: snapshot return %.4f", seed, k + 1, snapshots[-1]["mean_return"])
    return TrainResult(store, metrics, snapshots)


def write_metrics_csv(path: Path | str, rows: list[dict[str, float]], header: list[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        for line in header or []:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([int(r["step"])] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])


def read_metrics_csv(path: Path | str) -> list[dict[str, float]]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [{k: float(v) for k, v in r.items()} for r in reader]
