"""Log-linear history-dependent policies.

Stage ``t`` (1-based) uses ``pi_t(a | o, h) ∝ exp(theta_t . phi_t(a, o, h))``.
The full parameter vector concatenates the per-stage blocks, so every
stage-``t`` score is zero outside block ``t``.

Action index 0 is the signed action +1 and index 1 is -1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import InputError

ACTION_SIGNS = np.array([1.0, -1.0])


@dataclass(frozen=True)
class PolicyParams:
    """Concatenated parameter vector with per-stage block sizes."""

    theta: np.ndarray
    block_sizes: tuple[int, ...]

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
        if theta.size != sum(self.block_sizes):
            raise InputError(
                f"theta has length {theta.size}, blocks sum to {sum(self.block_sizes)}")
        if not np.all(np.isfinite(theta)):
            raise InputError("theta has non-finite entries")

    @classmethod
    def zeros(cls, block_sizes) -> "PolicyParams":
        return cls(np.zeros(sum(block_sizes)), tuple(block_sizes))

    @property
    def dim(self) -> int:
        return self.theta.size

    @property
    def horizon(self) -> int:
        return len(self.block_sizes)

    def offset(self, t: int) -> int:
        """Index of the first coordinate of block ``t``."""
        self._check_stage(t)
        return sum(self.block_sizes[: t - 1])

    def block(self, t: int) -> slice:
        start = self.offset(t)
        return slice(start, start + self.block_sizes[t - 1])

    def with_theta(self, theta) -> "PolicyParams":
        return PolicyParams(theta, self.block_sizes)

    def _check_stage(self, t: int):
        if not 1 <= t <= len(self.block_sizes):
            raise InputError(f"stage {t} outside 1..{len(self.block_sizes)}")


class FeatureMap(Protocol):
    """Per-stage features for every action at once.

    ``__call__(t, obs, hist)`` takes ``obs`` of shape (n, obs_dim) and the
    flattened history of shape (n, (t-1)*(obs_dim+action_count)) and
    returns an array of shape (n, action_count, stage_dims[t-1]).
    """

    stage_dims: tuple[int, ...]
    action_count: int

    def __call__(self, t: int, obs: np.ndarray, hist: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class TabularIndicatorFeatures:
    """One-hot indicator of (action, observation) per stage.

    Coordinate ``a_idx * len(obs_values) + o_idx`` of stage ``t`` is 1 when
    the action has index ``a_idx`` and the observation equals
    ``obs_values[o_idx]``.
    """

    horizon: int = 1
    obs_values: tuple[float, ...] = (1.0, -1.0)
    action_count: int = 2

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return (self.action_count * len(self.obs_values),) * self.horizon

    def __call__(self, t, obs, hist=None):
        o = np.asarray(obs, dtype=float).reshape(len(obs), -1)[:, 0]
        onehot_o = (o[:, None] == np.asarray(self.obs_values)[None, :]).astype(float)
        if not np.all(onehot_o.sum(axis=1) == 1):
            raise InputError("observation outside the declared tabular support")
        n, k = onehot_o.shape
        out = np.zeros((n, self.action_count, self.action_count * k))
        for a in range(self.action_count):
            out[:, a, a * k:(a + 1) * k] = onehot_o
        return out


@dataclass(frozen=True)
class SignIndicatorFeatures:
    """Four features per stage for binary actions and scalar observations:

    2o*1{a>0, o>0}, 2o*1{a<0, o>0}, 2o*1{a>0, o<0}, 2o*1{a<0, o<0}.
    """

    horizon: int = 2
    action_count: int = 2

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return (4,) * self.horizon

    def __call__(self, t, obs, hist=None):
        o = np.asarray(obs, dtype=float).reshape(len(obs), -1)[:, 0]
        pos = (o > 0).astype(float)
        neg = (o < 0).astype(float)
        out = np.zeros((o.size, 2, 4))
        out[:, 0, 0] = 2 * o * pos
        out[:, 1, 1] = 2 * o * pos
        out[:, 0, 2] = 2 * o * neg
        out[:, 1, 3] = 2 * o * neg
        return out


def _batch(obs, hist):
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim <= 1
    obs = np.atleast_2d(obs.reshape(1, -1) if single else obs)
    if hist is None:
        hist = np.zeros((obs.shape[0], 0))
    hist = np.asarray(hist, dtype=float)
    if hist.ndim == 1:
        hist = hist.reshape(1, -1) if single else hist.reshape(-1, 1)
    return obs, hist, single


class LogLinearPolicy:
    """Softmax policy over a :class:`FeatureMap`."""

    def __init__(self, features: FeatureMap):
        self.features = features

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return tuple(self.features.stage_dims)

    @property
    def action_count(self) -> int:
        return self.features.action_count

    @property
    def horizon(self) -> int:
        return len(self.stage_dims)

    def zero_params(self) -> PolicyParams:
        return PolicyParams.zeros(self.stage_dims)

    def _check(self, params: PolicyParams, t: int):
        if params.block_sizes != self.stage_dims:
            raise InputError(
                f"parameter blocks {params.block_sizes} do not match features {self.stage_dims}")
        params._check_stage(t)

    def _phi(self, t, obs, hist):
        phi = np.asarray(self.features(t, obs, hist), dtype=float)
        if phi.shape != (obs.shape[0], self.action_count, self.stage_dims[t - 1]):
            raise InputError(f"feature map returned shape {phi.shape}")
        return phi

    def _probs(self, params, t, obs, hist):
        phi = self._phi(t, obs, hist)
        logits = phi @ params.theta[params.block(t)]
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        return w / w.sum(axis=1, keepdims=True), phi

    def action_probs(self, params: PolicyParams, t: int, obs, hist=None) -> np.ndarray:
        """Action distribution, shape (n, |A|), or (|A|,) for one observation."""
        self._check(params, t)
        obs, hist, single = _batch(obs, hist)
        p, _ = self._probs(params, t, obs, hist)
        return p[0] if single else p

    def _scores(self, params, t, obs, hist):
        """Block-t scores for every action: phi(a) - sum_a' pi(a') phi(a')."""
        p, phi = self._probs(params, t, obs, hist)
        mean_phi = np.einsum("na,nad->nd", p, phi)
        return p, phi - mean_phi[:, None, :]

    def grad_log_prob_all(self, params, t, obs, hist=None) -> np.ndarray:
        """Scores of all actions, shape (n, |A|, d_theta)."""
        self._check(params, t)
        obs, hist, _ = _batch(obs, hist)
        _, score = self._scores(params, t, obs, hist)
        out = np.zeros(score.shape[:2] + (params.dim,))
        out[:, :, params.block(t)] = score
        return out

    def grad_prob_all(self, params, t, obs, hist=None) -> np.ndarray:
        """Gradients of pi(a | o, h) for all actions, shape (n, |A|, d_theta)."""
        self._check(params, t)
        obs, hist, _ = _batch(obs, hist)
        p, score = self._scores(params, t, obs, hist)
        out = np.zeros(score.shape[:2] + (params.dim,))
        out[:, :, params.block(t)] = p[:, :, None] * score
        return out

    def _pick(self, all_vals, actions, single):
        actions = np.atleast_1d(np.asarray(actions, dtype=int))
        if actions.size == 1 and all_vals.shape[0] > 1:
            actions = np.full(all_vals.shape[0], actions[0])
        if np.any((actions < 0) | (actions >= self.action_count)):
            raise InputError("action index out of range")
        picked = all_vals[np.arange(all_vals.shape[0]), actions]
        return picked[0] if single else picked

    def grad_log_prob(self, params, t, actions, obs, hist=None) -> np.ndarray:
        single = np.asarray(obs).ndim <= 1
        return self._pick(self.grad_log_prob_all(params, t, obs, hist), actions, single)

    def grad_prob(self, params, t, actions, obs, hist=None) -> np.ndarray:
        single = np.asarray(obs).ndim <= 1
        return self._pick(self.grad_prob_all(params, t, obs, hist), actions, single)

    def log_prob(self, params, t, actions, obs, hist=None) -> np.ndarray:
        single = np.asarray(obs).ndim <= 1
        p = self.action_probs(params, t, obs, hist)
        return np.log(self._pick(np.atleast_2d(p), actions, single))

    def sample(self, params, t, obs, hist, rng: np.random.Generator) -> np.ndarray:
        """Draw one action index per row."""
        p = np.atleast_2d(self.action_probs(params, t, obs, hist))
        u = rng.random(p.shape[0])
        return np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), self.action_count - 1)
