"""Actor-critic policy architectures.

Every variant exposes the same per-step interface::

    state = policy.initial_state(batch)
    state, out = policy.step(params, state, obs)

where ``params`` maps parameter names to :class:`~beliefrl.autodiff.Var`
(taped leaves during training, constants during rollouts), ``obs`` is a
float array of shape (B,) and ``out`` is a :class:`PolicyOutput`.

The recurrent variants share diagonal linear accumulators

    s1 <- a1 * s1 + b1 * x
    s2 <- a2 * s2 + b2 * x**2

with decays a = sigmoid(theta) so every decay lies in (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .env import ConfigError
from .params import ParamSpec, ParamStore

VARIANTS = ("mlp", "summary", "belief", "belief_gated", "belief_privileged", "rwkv_belief")
BELIEF_VARIANTS = ("belief", "belief_gated", "belief_privileged", "rwkv_belief")
# Variants whose recurrence is the diagonal accumulator pair above.
LINEAR_STATE_VARIANTS = ("summary", "belief", "belief_gated", "belief_privileged")


@dataclass(frozen=True)
class AdapterConfig:
    enabled: bool = False
    rank: int = 4


@dataclass(frozen=True)
class PolicyConfig:
    variant: str = "belief"
    d_state: int = 16
    d_belief: int = 8
    hidden: int = 32
    # Width of the summary baseline's opaque readout; 14 matches the belief
    # variant's parameter count to within a few parameters.
    d_summary: int = 14
    rwkv_width: int = 16
    rwkv_ffn: int = 32
    init_decay: float = 0.9
    adapter: AdapterConfig = field(default_factory=AdapterConfig)

    def validate(self) -> PolicyConfig:
        if self.variant not in VARIANTS:
            raise ConfigError(f"policy: unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("d_state", "d_belief", "hidden", "d_summary", "rwkv_width", "rwkv_ffn"):
            if getattr(self, name) < 1:
                raise ConfigError(f"policy: {name} must be >= 1")
        if not 0.0 < self.init_decay < 1.0:
            raise ConfigError("policy: init_decay must lie in (0, 1)")
        if self.adapter.enabled:
            if self.variant not in BELIEF_VARIANTS:
                raise ConfigError(f"policy: adapter needs a belief variant, got {self.variant!r}")
            if not 1 <= self.adapter.rank <= 2 * self.d_belief:
                raise ConfigError(f"policy: adapter rank must be in [1, {2 * self.d_belief}]")
        return self


@dataclass
class PolicyOutput:
    logits: Var  # (B, 3): Wait, GuessPos, GuessNeg
    value: Var  # (B,)
    mu: Var | None = None
    log_sigma: Var | None = None
    gate: Var | None = None


@dataclass
class BeliefState:
    mu: Var
    log_sigma: Var


@dataclass
class RecurrentState:
    s1: Var
    s2: Var
    t: int = 0


@dataclass
class RwkvBlockState:
    h: Var  # channel-mix output of the previous step
    # The WKV memory is (num, den) = decayed sums of (exp(k) v, exp(k)),
    # carried as avg = num / den and log_den = log den so it never overflows.
    avg: Var
    log_den: Var
    prev_x: Var  # previous embedded input
    t: int = 0


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _dense_specs(prefix: str, n_in: int, n_out: int, init: object = "uniform", bias: bool = True) -> list[ParamSpec]:
    specs = [ParamSpec(f"{prefix}.w", (n_out, n_in), init)]
    if bias:
        specs.append(ParamSpec(f"{prefix}.b", (n_out,), "zeros"))
    return specs


class Policy:
    """Shared trunk/heads plumbing; subclasses define the feature path."""

    variant = "base"
    has_belief = False

    def __init__(self, config: PolicyConfig) -> None:
        self.config = config.validate()
        self.specs = self._feature_specs() + self._adapter_specs() + self._head_specs()
        self._store_template = ParamStore(self.specs)

    @property
    def n_params(self) -> int:
        return self._store_template.size

    def new_params(self, rng: np.random.Generator) -> ParamStore:
        store = ParamStore(list(self.specs))
        store.initialize(rng)
        return store

    # -- pieces -----------------------------------------------------------

    def _feature_dim(self) -> int:
        raise NotImplementedError

    def _feature_specs(self) -> list[ParamSpec]:
        raise NotImplementedError

    def _adapter_specs(self) -> list[ParamSpec]:
        ad_cfg = self.config.adapter
        if not ad_cfg.enabled:
            return []
        d = self._feature_dim()
        return _dense_specs("adapter.g", d, ad_cfg.rank) + [ParamSpec("adapter.u", (d, ad_cfg.rank), "zeros")]

    def _head_specs(self) -> list[ParamSpec]:
        h = self.config.hidden
        return (
            _dense_specs("head.l1", self._feature_dim(), h)
            + _dense_specs("head.l2", h, h)
            # Zero output layers: the initial policy is uniform and the value 0.
            + _dense_specs("head.pi", h, 3, init="zeros")
            + _dense_specs("head.v", h, 1, init="zeros")
        )

    def adapt(self, p: dict[str, Var], b: Var) -> Var:
        """b + U tanh(G b + c): low-rank residual correction of the belief vector."""
        if not self.config.adapter.enabled:
            return b
        return adapter_apply(p, b)

    def heads(self, p: dict[str, Var], feat: Var) -> tuple[Var, Var]:
        h1 = ad.dense(feat, p["head.l1.w"], p["head.l1.b"], "tanh")
        h2 = ad.dense(h1, p["head.l2.w"], p["head.l2.b"], "tanh")
        logits = ad.dense(h2, p["head.pi.w"], p["head.pi.b"])
        value = ad.dense(h2, p["head.v.w"], p["head.v.b"])[:, 0]
        return logits, value

    def initial_state(self, batch: int):
        raise NotImplementedError

    def step(self, p: dict[str, Var], state, obs: np.ndarray):
        raise NotImplementedError


def adapter_apply(p: dict[str, Var], b: Var) -> Var:
    g = ad.dense(b, p["adapter.g.w"], p["adapter.g.b"], "tanh")
    return b + ad.linear(g, p["adapter.u"])


class MlpPolicy(Policy):
    """Memoryless: two tanh layers over the current observation."""

    variant = "mlp"

    def _feature_dim(self) -> int:
        return 1

    def _feature_specs(self) -> list[ParamSpec]:
        return []

    def initial_state(self, batch: int) -> None:
        return None

    def step(self, p, state, obs):
        feat = Var(np.asarray(obs, dtype=np.float64).reshape(-1, 1))
        logits, value = self.heads(p, feat)
        return None, PolicyOutput(logits, value)


class _AccumulatorPolicy(Policy):
    def _recurrence_specs(self) -> list[ParamSpec]:
        d = self.config.d_state
        theta0 = ("const", _logit(self.config.init_decay))
        return [
            ParamSpec("rec.theta1", (d,), theta0),
            ParamSpec("rec.theta2", (d,), theta0),
            # Input maps are (d, 1) matrices so fan-in is 1.
            ParamSpec("rec.b1", (d, 1)),
            ParamSpec("rec.b2", (d, 1)),
        ]

    def initial_state(self, batch: int) -> RecurrentState:
        d = self.config.d_state
        return RecurrentState(Var(np.zeros((batch, d))), Var(np.zeros((batch, d))), 0)

    def decays(self, p) -> tuple[Var, Var]:
        return ad.sigmoid(p["rec.theta1"]), ad.sigmoid(p["rec.theta2"])

    def write_terms(self, p, obs: np.ndarray) -> tuple[Var, Var]:
        x = np.asarray(obs, dtype=np.float64).reshape(-1, 1)
        return ad.linear(x, p["rec.b1"]), ad.linear(x * x, p["rec.b2"])

    def accumulate(self, p, state: RecurrentState, obs) -> RecurrentState:
        a1, a2 = self.decays(p)
        w1, w2 = self.write_terms(p, obs)
        return RecurrentState(a1 * state.s1 + w1, a2 * state.s2 + w2, state.t + 1)


class SummaryPolicy(_AccumulatorPolicy):
    """Same accumulators, but heads read one opaque linear summary of (s1, s2)."""

    variant = "summary"

    def _feature_dim(self) -> int:
        return self.config.d_summary

    def _feature_specs(self) -> list[ParamSpec]:
        return self._recurrence_specs() + _dense_specs("summary", 2 * self.config.d_state, self.config.d_summary)

    def step(self, p, state, obs):
        state = self.accumulate(p, state, obs)
        feat = ad.dense(ad.concat([state.s1, state.s2]), p["summary.w"], p["summary.b"])
        logits, value = self.heads(p, feat)
        return state, PolicyOutput(logits, value)


class BeliefPolicy(_AccumulatorPolicy):
    """Heads read (mu, log Sigma) with mu from s1 and log Sigma from (s1, s2)."""

    variant = "belief"
    has_belief = True

    def _feature_dim(self) -> int:
        return 2 * self.config.d_belief

    def _feature_specs(self) -> list[ParamSpec]:
        d, db = self.config.d_state, self.config.d_belief
        return self._recurrence_specs() + _dense_specs("belief.mu", d, db) + _dense_specs("belief.ls", 2 * d, db)

    def readout(self, p, state: RecurrentState) -> BeliefState:
        mu = ad.dense(state.s1, p["belief.mu.w"], p["belief.mu.b"])
        log_sigma = ad.dense(ad.concat([state.s1, state.s2]), p["belief.ls.w"], p["belief.ls.b"])
        return BeliefState(mu, log_sigma)

    def _emit(self, p, belief: BeliefState, gate=None) -> PolicyOutput:
        feat = self.adapt(p, ad.concat([belief.mu, belief.log_sigma]))
        logits, value = self.heads(p, feat)
        return PolicyOutput(logits, value, belief.mu, belief.log_sigma, gate)

    def step(self, p, state, obs):
        state = self.accumulate(p, state, obs)
        return state, self._emit(p, self.readout(p, state))


class PrivilegedBeliefPolicy(BeliefPolicy):
    """Architecturally identical to BeliefPolicy; differs only in its training loss."""

    variant = "belief_privileged"


class GatedBeliefPolicy(BeliefPolicy):
    """Belief statistics gate the carry/write mix of the accumulators.

    g = sigmoid(W_g [mu; log Sigma]) is computed from the belief read out of
    the previous state, then s = g * (a * s_prev) + (1 - g) * write. The
    heads read the belief recomputed from the gated state.
    """

    variant = "belief_gated"

    def _feature_specs(self) -> list[ParamSpec]:
        return super()._feature_specs() + [ParamSpec("gate.w", (self.config.d_state, 2 * self.config.d_belief))]

    def step(self, p, state, obs):
        prev = self.readout(p, state)
        gate = ad.sigmoid(ad.linear(ad.concat([prev.mu, prev.log_sigma]), p["gate.w"]))
        a1, a2 = self.decays(p)
        w1, w2 = self.write_terms(p, obs)
        keep = 1.0 - gate
        s1 = gate * (a1 * state.s1) + keep * w1
        s2 = gate * (a2 * state.s2) + keep * w2
        state = RecurrentState(s1, s2, state.t + 1)
        return state, self._emit(p, self.readout(p, state), gate)


class RwkvBeliefPolicy(Policy):
    """Single RWKV-style block with a belief readout branching off time-mix.

    Time-mix: token-shift interpolation between the embedded input and the
    incoming feature state h_{t-1}, then a decayed weighted average of values
    (numerator/denominator accumulators, kept in log space) gated by the
    receptance. The belief branch z = tanh(psi [u; num/den; log den]) feeds
    mu = W_mu z and log Sigma = W_Sigma z.
    Channel-mix (squared-relu) produces the next feature state, which the
    heads never read. Block inputs are layer-normalised as in RWKV.
    """

    variant = "rwkv_belief"
    has_belief = True

    def _feature_dim(self) -> int:
        return 2 * self.config.d_belief

    def _feature_specs(self) -> list[ParamSpec]:
        w, f, db = self.config.rwkv_width, self.config.rwkv_ffn, self.config.d_belief
        # exp(-exp(decay)) = init_decay
        decay0 = math.log(-math.log(self.config.init_decay))
        return (
            _dense_specs("rwkv.emb", 1, w)
            + [
                ParamSpec("rwkv.mix_k", (w,), ("const", 0.5)),
                ParamSpec("rwkv.mix_v", (w,), ("const", 0.5)),
                ParamSpec("rwkv.mix_r", (w,), ("const", 0.5)),
                ParamSpec("rwkv.decay", (w,), ("const", decay0)),
                ParamSpec("rwkv.bonus", (w,), "zeros"),
            ]
            + _dense_specs("rwkv.key", w, w, bias=False)
            + _dense_specs("rwkv.val", w, w, bias=False)
            + _dense_specs("rwkv.rec", w, w, bias=False)
            + _dense_specs("rwkv.out", w, w, bias=False)
            + _dense_specs("rwkv.ffn_k", w, f, bias=False)
            + _dense_specs("rwkv.ffn_v", f, w, bias=False)
            + _dense_specs("rwkv.ffn_r", w, w, bias=False)
            + _dense_specs("psi", 3 * w, w)
            + _dense_specs("belief.mu", w, db, bias=False)
            + _dense_specs("belief.ls", w, db, bias=False)
        )

    def initial_state(self, batch: int) -> RwkvBlockState:
        w = self.config.rwkv_width
        zero = lambda: Var(np.zeros((batch, w)))  # noqa: E731
        # den = 0 before the first token.
        return RwkvBlockState(zero(), zero(), Var(np.full((batch, w), -np.inf)), zero(), 0)

    def time_mix(self, p, x: Var, state: RwkvBlockState):
        """Returns (u, avg, log_den, wkv) with the memory updated past this token."""
        shift = state.h
        xk = p["rwkv.mix_k"] * x + (1.0 - p["rwkv.mix_k"]) * shift
        xv = p["rwkv.mix_v"] * x + (1.0 - p["rwkv.mix_v"]) * shift
        xr = p["rwkv.mix_r"] * x + (1.0 - p["rwkv.mix_r"]) * shift
        k = ad.linear(xk, p["rwkv.key.w"])
        v = ad.linear(xv, p["rwkv.val.w"])
        r = ad.sigmoid(ad.linear(xr, p["rwkv.rec.w"]))
        # wkv = (num + e^{u+k} v) / (den + e^{u+k}), a convex mix of avg and v.
        uk = p["rwkv.bonus"] + k
        lw = ad.logaddexp(state.log_den, uk)
        wkv = state.avg * ad.exp(state.log_den - lw) + v * ad.exp(uk - lw)
        out = ad.linear(r * wkv, p["rwkv.out.w"])
        # num' = fade num + e^k v and den' = fade den + e^k, fade = exp(-exp(decay)).
        carried = state.log_den - ad.exp(p["rwkv.decay"])
        log_den = ad.logaddexp(carried, k)
        avg = state.avg * ad.exp(carried - log_den) + v * ad.exp(k - log_den)
        return out, avg, log_den, wkv

    def channel_mix(self, p, u: Var) -> Var:
        k = ad.square(ad.relu(ad.linear(u, p["rwkv.ffn_k.w"])))
        return ad.sigmoid(ad.linear(u, p["rwkv.ffn_r.w"])) * ad.linear(k, p["rwkv.ffn_v.w"])

    def block(self, p, x: np.ndarray, state: RwkvBlockState):
        """One block step; returns (state, belief, feature h_t, u_t)."""
        emb = ad.dense(np.asarray(x, dtype=np.float64).reshape(-1, 1), p["rwkv.emb.w"], p["rwkv.emb.b"])
        xe = ad.layer_norm(emb)
        u, avg, log_den, _ = self.time_mix(p, xe, state)
        z = ad.dense(ad.concat([u, avg, log_den]), p["psi.w"], p["psi.b"], "tanh")
        belief = BeliefState(ad.linear(z, p["belief.mu.w"]), ad.linear(z, p["belief.ls.w"]))
        # Residual keeps the shift partner tied to the current input; the
        # layer norms keep every block input bounded.
        h = xe + self.channel_mix(p, ad.layer_norm(u))
        return RwkvBlockState(h, avg, log_den, xe, state.t + 1), belief, h, u

    def step(self, p, state, obs):
        state, belief, _, _ = self.block(p, obs, state)
        feat = self.adapt(p, ad.concat([belief.mu, belief.log_sigma]))
        logits, value = self.heads(p, feat)
        return state, PolicyOutput(logits, value, belief.mu, belief.log_sigma)


_CLASSES = {
    "mlp": MlpPolicy,
    "summary": SummaryPolicy,
    "belief": BeliefPolicy,
    "belief_gated": GatedBeliefPolicy,
    "belief_privileged": PrivilegedBeliefPolicy,
    "rwkv_belief": RwkvBeliefPolicy,
}


def make_policy(config: PolicyConfig | str) -> Policy:
    if isinstance(config, str):
        config = PolicyConfig(variant=config)
    config.validate()
    return _CLASSES[config.variant](config)


@dataclass
class ProbeResult:
    sup_state_norm: float
    bound: float
    rho: float
    input_gain: float

    @property
    def within_bound(self) -> bool:
        return self.sup_state_norm <= self.bound * (1.0 + 1e-12)


def stability_probe(
    policy: Policy,
    params: ParamStore,
    input_bound: float,
    steps: int,
    rng: np.random.Generator,
    runs: int = 16,
) -> ProbeResult:
    """Drive the accumulators with |x| <= input_bound and track sup ||(s1, s2)||.

    Analytic bound: each channel obeys |s_i| <= |b_i| X_i / (1 - a_i) with
    X = input_bound for s1 and input_bound**2 for s2, which is below
    C / (1 - rho) with C = sqrt(||b1||^2 X^2 + ||b2||^2 X^4) and rho the
    largest decay. The gated update is a convex mix of a carry below a * |s|
    and a write below |b| X, so the same box is invariant. Runs start from
    random states inside that box.
    """
    if policy.variant not in LINEAR_STATE_VARIANTS:
        raise ConfigError(f"stability_probe needs an accumulator variant, got {policy.variant!r}")
    pv = params.bind(None)
    a1 = ad._sigmoid(params.view("rec.theta1"))
    a2 = ad._sigmoid(params.view("rec.theta2"))
    b1 = params.view("rec.b1")[:, 0]
    b2 = params.view("rec.b2")[:, 0]
    X = float(input_bound)
    rho = float(max(a1.max(), a2.max()))
    gain = float(math.sqrt((b1 @ b1) * X**2 + (b2 @ b2) * X**4))
    bound = gain / (1.0 - rho)
    box1 = np.abs(b1) * X / (1.0 - a1)
    box2 = np.abs(b2) * X * X / (1.0 - a2)
    state = RecurrentState(
        Var(rng.uniform(-1, 1, size=(runs, b1.size)) * box1),
        Var(rng.uniform(-1, 1, size=(runs, b2.size)) * box2),
    )
    sup = float(np.sqrt((state.s1.value**2).sum(1) + (state.s2.value**2).sum(1)).max())
    # Half the runs see saturated constant inputs, half see uniform noise.
    signs = rng.choice([-1.0, 1.0], size=runs)
    for _ in range(steps):
        x = rng.uniform(-X, X, size=runs)
        x[: runs // 2] = signs[: runs // 2] * X
        state, _ = policy.step(pv, state, x)
        norms = np.sqrt((state.s1.value**2).sum(1) + (state.s2.value**2).sum(1))
        sup = max(sup, float(norms.max()))
    return ProbeResult(sup, bound, rho, gain)
