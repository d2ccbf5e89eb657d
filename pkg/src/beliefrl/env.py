"""Hidden-noise stop-or-guess environment and its exact label posterior.

Each episode draws a label z in {-1, +1} and a noise scale sigma, then emits
x_t = z + sigma * eps_t. The agent waits (small cost) or guesses the sign.

All per-episode randomness comes from one generator keyed on
(run seed, stream domain, episode index). ``reset`` consumes, in order: one
uniform for z, one uniform for sigma and ``max_steps`` standard normals for
the whole noise sequence. Anything drawn afterwards (action sampling) comes
from the same generator, so scalar and batched simulation agree draw for draw.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError

TERMINAL_OBS = 0.0

# Stream domains for episode generators.
TRAIN_STREAM = 1
EVAL_STREAM = 2
SWEEP_STREAM = 3


class ConfigError(ValueError):
    """Invalid configuration value."""


class Action(enum.IntEnum):
    WAIT = 0
    GUESS_POS = 1
    GUESS_NEG = 2


@dataclass(frozen=True)
class EnvConfig:
    sigma_lo: float = 0.3
    sigma_hi: float = 1.2
    max_steps: int = 10
    wait_penalty: float = 0.05
    correct_reward: float = 1.0
    incorrect_reward: float = -1.0

    def validate(self) -> EnvConfig:
        if not (self.sigma_lo > 0 and self.sigma_lo <= self.sigma_hi):
            raise ConfigError(f"env: need 0 < sigma_lo <= sigma_hi, got {self.sigma_lo}, {self.sigma_hi}")
        if int(self.max_steps) != self.max_steps or self.max_steps < 1:
            raise ConfigError(f"env: max_steps must be an integer >= 1, got {self.max_steps}")
        return self


@dataclass
class EpisodeState:
    z: int
    sigma: float
    t: int = 0
    done: bool = False
    last_obs: float = 0.0
    noise: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    observations: list[float] = field(default_factory=list, repr=False)
    config: EnvConfig = field(default_factory=EnvConfig, repr=False)


@dataclass(frozen=True)
class StepResult:
    obs: float
    reward: float
    done: bool


@dataclass(frozen=True)
class PosteriorMoments:
    mean: float
    variance: float
    # log(1 - mean^2) evaluated without cancellation; finite even when
    # the variance underflows to 0.
    log_variance: float


def episode_rng(seed: int, domain: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed), (int(domain) << 40) | int(index)]))


def _draw(config: EnvConfig, rng: np.random.Generator) -> tuple[int, float, np.ndarray]:
    u = rng.random(2)
    z = 1 if u[0] < 0.5 else -1
    sigma = config.sigma_lo + (config.sigma_hi - config.sigma_lo) * u[1]
    noise = rng.standard_normal(config.max_steps)
    return z, float(sigma), noise


def reset(config: EnvConfig, rng: np.random.Generator) -> tuple[EpisodeState, float]:
    config.validate()
    z, sigma, noise = _draw(config, rng)
    x0 = z + sigma * noise[0]
    state = EpisodeState(z=z, sigma=sigma, noise=noise, last_obs=x0, observations=[x0], config=config)
    return state, x0


def step(state: EpisodeState, action: Action | int, rng: np.random.Generator | None = None) -> StepResult:
    """Advance one step. Noise was drawn at reset, so `rng` is not consumed."""
    if state.done:
        raise ContractError("step() called on a finished episode")
    cfg = state.config
    action = Action(int(action))
    if action is Action.WAIT:
        state.t += 1
        if state.t >= cfg.max_steps:
            state.done = True
            state.last_obs = TERMINAL_OBS
            return StepResult(TERMINAL_OBS, -cfg.wait_penalty, True)
        x = state.z + state.sigma * state.noise[state.t]
        state.last_obs = x
        state.observations.append(x)
        return StepResult(x, -cfg.wait_penalty, False)
    guess = 1 if action is Action.GUESS_POS else -1
    state.done = True
    state.last_obs = TERMINAL_OBS
    reward = cfg.correct_reward if guess == state.z else cfg.incorrect_reward
    return StepResult(TERMINAL_OBS, reward, True)


def _log_sech2(y):
    a = np.abs(y)
    return 2.0 * (math.log(2.0) - a - np.log1p(np.exp(-2.0 * a)))


def posterior_moments(observations, sigma: float) -> PosteriorMoments:
    """Exact moments of z given observations, uniform prior, known sigma."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    y = float(np.sum(np.asarray(observations, dtype=np.float64))) / (sigma * sigma)
    mean = math.tanh(y)
    log_var = float(_log_sech2(y))
    # exp(log sech^2) equals 1 - mean^2 but keeps full relative precision near |mean| = 1.
    return PosteriorMoments(mean, math.exp(log_var), log_var)


def posterior_prefix_targets(obs: np.ndarray, sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and log-variance after each observation prefix.

    obs has shape (T, B) and sigma shape (B,); entry t uses x_0..x_t.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ConfigError("sigma must be positive")
    y = np.cumsum(obs, axis=0) / (sigma * sigma)
    return np.tanh(y), _log_sech2(y)


@dataclass
class EpisodeBatch:
    """Pre-drawn randomness for a batch of episodes (one generator each)."""

    z: np.ndarray
    sigma: np.ndarray
    noise: np.ndarray  # (max_steps, B)
    action_u: np.ndarray  # (max_steps, B)

    @property
    def size(self) -> int:
        return self.z.shape[0]


def draw_batch(
    config: EnvConfig,
    seed: int,
    domain: int,
    start: int,
    n: int,
) -> EpisodeBatch:
    config.validate()
    T = config.max_steps
    z = np.empty(n)
    sigma = np.empty(n)
    noise = np.empty((T, n))
    au = np.empty((T, n))
    for i in range(n):
        g = episode_rng(seed, domain, start + i)
        z[i], sigma[i], noise[:, i] = _draw(config, g)
        au[:, i] = g.random(T)
    return EpisodeBatch(z, sigma, noise, au)
