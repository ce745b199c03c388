"""Confounded episodic POMDP simulators and offline datasets.

Two generative models are provided: a binary partially observable bandit
(optionally extended to two stages) and a continuous-state chain with
two-component Gaussian-mixture emissions. In both, the behavior policy
reads the hidden state, so the state confounds action, reward and
transition in the logged data. Hidden states are kept on generated
datasets for diagnostics only; estimators never touch them.

Randomness comes from Philox counter-based generators, one stream for
state/emission noise and one for actions, both keyed by the user seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, NamedTuple

import numpy as np

from .errors import ConfigError, InputError
from .policy import ACTION_SIGNS, LogLinearPolicy, PolicyParams

_STREAMS = {"env": 0, "behavior": 1, "rollout": 2}


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent Philox generator for the named stream of ``seed``."""
    ss = np.random.SeedSequence([int(seed), _STREAMS[name]])
    return np.random.Generator(np.random.Philox(ss))


def reward(s, a, slope: float = 4.0):
    """Logistic reward 2 / (1 + exp(-slope * s * a)) - 1 with signed action ``a``."""
    z = slope * np.asarray(s, dtype=float) * np.asarray(a, dtype=float)
    # tanh form of the same expression; stays finite for large |z|
    return np.tanh(z / 2.0)


class Trajectory(NamedTuple):
    o0: np.ndarray
    steps: list[tuple[np.ndarray, int, float]]


@dataclass
class OfflineDataset:
    """N trajectories ``{o_0, (o_t, a_t, r_t)_{t=1..T}}`` stored as arrays.

    ``obs`` has shape (N, T, obs_dim), ``actions`` (N, T) with indices in
    ``[0, action_count)``, ``rewards`` (N, T). ``states`` optionally holds
    the hidden states S_0..S_T of simulated data.
    """

    o0: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    action_count: int = 2
    seed: int | None = None
    states: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.o0 = np.asarray(self.o0, dtype=float)
        if self.o0.ndim == 1:
            self.o0 = self.o0[:, None]
        self.obs = np.asarray(self.obs, dtype=float)
        if self.obs.ndim == 2:
            self.obs = self.obs[:, :, None]
        self.actions = np.asarray(self.actions, dtype=int)
        self.rewards = np.asarray(self.rewards, dtype=float)
        n, horizon, obs_dim = self.obs.shape
        if self.o0.shape != (n, obs_dim):
            raise InputError(f"o0 shape {self.o0.shape} inconsistent with obs {self.obs.shape}")
        if self.actions.shape != (n, horizon) or self.rewards.shape != (n, horizon):
            raise InputError("actions/rewards must have shape (N, T)")
        if np.any((self.actions < 0) | (self.actions >= self.action_count)):
            raise InputError("action index out of range")

    @property
    def n(self) -> int:
        return self.obs.shape[0]

    @property
    def horizon(self) -> int:
        return self.obs.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[2]

    def __len__(self) -> int:
        return self.n

    def onehot(self, t: int) -> np.ndarray:
        """One-hot encoding of a_t, shape (N, |A|)."""
        return np.eye(self.action_count)[self.actions[:, t - 1]]

    def history(self, t: int) -> np.ndarray:
        """Flattened H_{t-1} = (o_1, onehot(a_1), ..., o_{t-1}, onehot(a_{t-1}))."""
        parts = []
        for s in range(1, t):
            parts.append(self.obs[:, s - 1])
            parts.append(self.onehot(s))
        if not parts:
            return np.zeros((self.n, 0))
        return np.concatenate(parts, axis=1)

    def trajectories(self) -> Iterator[Trajectory]:
        for i in range(self.n):
            steps = [(self.obs[i, t], int(self.actions[i, t]), float(self.rewards[i, t]))
                     for t in range(self.horizon)]
            yield Trajectory(self.o0[i], steps)

    def with_rewards(self, rewards) -> "OfflineDataset":
        return replace(self, rewards=np.asarray(rewards, dtype=float))

    def subset(self, idx) -> "OfflineDataset":
        idx = np.asarray(idx)
        states = None if self.states is None else self.states[idx]
        return OfflineDataset(self.o0[idx], self.obs[idx], self.actions[idx], self.rewards[idx],
                              self.action_count, self.seed, states)


# chooser(t, states_t, obs_t, hist_{t-1}, rng) -> action indices
Chooser = Callable[[int, np.ndarray, np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


class _ChainEnv:
    """Shared simulation loop; subclasses define the hidden dynamics."""

    horizon: int
    reward_slope: float
    behavior_stay: float

    def _initial_state(self, rng, n):
        raise NotImplementedError

    def _emit(self, rng, s):
        raise NotImplementedError

    def _emit_o0(self, rng, s0):
        return self._emit(rng, s0)

    def _first_state(self, rng, s0):
        raise NotImplementedError

    def _next_state(self, rng, s, a_signed):
        raise NotImplementedError

    def behavior_chooser(self) -> Chooser:
        """Takes the action matching sign(S_t) with probability ``behavior_stay``."""
        def choose(t, s, obs, hist, rng):
            match = rng.random(s.shape[0]) < self.behavior_stay
            sign = np.where(s > 0, 1.0, -1.0)
            signed = np.where(match, sign, -sign)
            return np.where(signed > 0, 0, 1)
        return choose

    def simulate(self, n: int, seed: int, chooser: Chooser, action_stream: str = "behavior"):
        if int(n) < 1:
            raise InputError(f"sample size must be >= 1, got {n}")
        rng_env = stream(seed, "env")
        rng_act = stream(seed, action_stream)
        horizon = self.horizon
        states = np.zeros((n, horizon + 1))
        s = self._initial_state(rng_env, n)
        states[:, 0] = s
        o0 = self._emit_o0(rng_env, s)
        obs = np.zeros((n, horizon))
        actions = np.zeros((n, horizon), dtype=int)
        rewards = np.zeros((n, horizon))
        hist = np.zeros((n, 0))
        for t in range(1, horizon + 1):
            s = self._first_state(rng_env, s) if t == 1 else self._next_state(
                rng_env, s, ACTION_SIGNS[actions[:, t - 2]])
            states[:, t] = s
            o = self._emit(rng_env, s)
            obs[:, t - 1] = o
            a = np.asarray(chooser(t, s, o[:, None], hist, rng_act), dtype=int)
            actions[:, t - 1] = a
            rewards[:, t - 1] = reward(s, ACTION_SIGNS[a], self.reward_slope)
            hist = np.concatenate([hist, o[:, None], np.eye(2)[a]], axis=1)
        return OfflineDataset(o0, obs, actions, rewards, 2, seed, states)

    def sample(self, n: int, seed: int) -> OfflineDataset:
        """Offline data under the state-dependent behavior policy."""
        return self.simulate(n, seed, self.behavior_chooser())


@dataclass(frozen=True)
class TabularBanditSpec(_ChainEnv):
    """Binary hidden state, observation and action, all in {+1, -1}.

    ``p_s1`` is P(S_0 = +1); O_0 is emitted from S_0 and S_1 copies S_0
    with probability ``p_s1_eq_s0``. With ``horizon=2`` the chain continues
    as S_2 = S_1 * A_1 with probability ``p_transition_keep`` (else the
    opposite sign).
    """

    p_s1: float = 0.5
    p_obs_correct: float = 0.8
    p_o0_correct: float = 0.8
    p_s1_eq_s0: float = 0.95
    behavior_stay: float = 0.3
    reward_slope: float = 4.0
    horizon: int = 1
    p_transition_keep: float = 0.95

    def __post_init__(self):
        for name in ("p_s1", "p_obs_correct", "p_o0_correct", "p_s1_eq_s0",
                     "behavior_stay", "p_transition_keep"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} is not a probability")
        if self.horizon not in (1, 2):
            raise ConfigError("tabular environment supports horizon 1 or 2")

    def _flip(self, rng, x, p_keep):
        return np.where(rng.random(x.shape[0]) < p_keep, x, -x)

    def _initial_state(self, rng, n):
        return np.where(rng.random(n) < self.p_s1, 1.0, -1.0)

    def _emit(self, rng, s):
        return self._flip(rng, s, self.p_obs_correct)

    def _emit_o0(self, rng, s):
        return self._flip(rng, s, self.p_o0_correct)

    def _first_state(self, rng, s0):
        return self._flip(rng, s0, self.p_s1_eq_s0)

    def _next_state(self, rng, s, a_signed):
        return self._flip(rng, s * a_signed, self.p_transition_keep)


@dataclass(frozen=True)
class ContinuousChainSpec(_ChainEnv):
    """Continuous hidden chain.

    S_0 ~ U(s0_low, s0_high); every observation (O_0 included) is drawn
    from ``obs_weight * N(S, obs_sd) + (1 - obs_weight) * N(-S, obs_sd)``;
    S_1 ~ N(S_0, s1_sd); S_{t+1} ~ N(S_t * A_t, transition_sd).
    """

    s0_low: float = -2.0
    s0_high: float = 2.0
    obs_weight: float = 0.8
    obs_sd: float = 0.1
    s1_sd: float = 0.1
    transition_sd: float = 0.01
    behavior_stay: float = 0.3
    reward_slope: float = 4.0
    horizon: int = 2

    def __post_init__(self):
        if min(self.obs_sd, self.s1_sd, self.transition_sd) <= 0:
            raise ConfigError("noise standard deviations must be positive")
        if not 0.0 <= self.obs_weight <= 1.0 or not 0.0 <= self.behavior_stay <= 1.0:
            raise ConfigError("mixture weight and behavior_stay must be probabilities")
        if self.s0_high <= self.s0_low:
            raise ConfigError("s0_high must exceed s0_low")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")

    def _initial_state(self, rng, n):
        return rng.uniform(self.s0_low, self.s0_high, n)

    def _emit(self, rng, s):
        sign = np.where(rng.random(s.shape[0]) < self.obs_weight, 1.0, -1.0)
        return rng.normal(sign * s, self.obs_sd)

    def _first_state(self, rng, s0):
        return rng.normal(s0, self.s1_sd)

    def _next_state(self, rng, s, a_signed):
        return rng.normal(s * a_signed, self.transition_sd)


def sample_tabular(spec: TabularBanditSpec, n: int, seed: int) -> OfflineDataset:
    return spec.sample(n, seed)


def sample_continuous(spec: ContinuousChainSpec, n: int, seed: int) -> OfflineDataset:
    return spec.sample(n, seed)


def policy_chooser(policy: LogLinearPolicy, params: PolicyParams) -> Chooser:
    """Target policy acting on observations and history only."""
    def choose(t, s, obs, hist, rng):
        return policy.sample(params, t, obs, hist, rng)
    return choose


def rollout_value(env: _ChainEnv, policy: LogLinearPolicy, params: PolicyParams,
                  episodes: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo value of the target policy and its standard error.

    Episodes are simulated with access to hidden states, so this is an
    evaluation oracle, not an offline estimator.
    """
    if int(episodes) < 1:
        raise InputError("episodes must be >= 1")
    if policy.horizon != env.horizon:
        raise InputError(f"policy horizon {policy.horizon} != environment horizon {env.horizon}")
    ds = env.simulate(int(episodes), seed, policy_chooser(policy, params), "rollout")
    totals = ds.rewards.sum(axis=1)
    se = float(totals.std(ddof=1) / np.sqrt(totals.size)) if totals.size > 1 else 0.0
    return float(totals.mean()), se


def mc_policy_gradient(env: _ChainEnv, policy: LogLinearPolicy, params: PolicyParams,
                       episodes: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """On-policy Monte-Carlo gradient (score times reward-to-go) with standard errors."""
    ds = env.simulate(int(episodes), seed, policy_chooser(policy, params), "rollout")
    to_go = np.cumsum(ds.rewards[:, ::-1], axis=1)[:, ::-1]
    per_episode = np.zeros((ds.n, params.dim))
    for t in range(1, ds.horizon + 1):
        score = policy.grad_log_prob(params, t, ds.actions[:, t - 1], ds.obs[:, t - 1],
                                     ds.history(t))
        per_episode += score * to_go[:, t - 1:t]
    se = per_episode.std(axis=0, ddof=1) / np.sqrt(ds.n)
    return per_episode.mean(axis=0), se
