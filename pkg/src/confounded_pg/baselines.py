"""Comparison methods: an observation-as-state gradient estimator and behavior cloning."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bridge import bridge_inputs, first_stage_points, next_stage_points, response_vectors
from .env import OfflineDataset
from .errors import InputError, NumericError
from .linalg import KernelConfig, cross_gram, factor_gram, median_bandwidth
from .policy import FeatureMap, LogLinearPolicy, PolicyParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NaiveConfig:
    """Regression used by :func:`naive_gradient`.

    ``tabular_frequency`` averages responses within each distinct input
    cell; ``kernel_ridge`` minimizes ``mean (y - f(w))^2 + penalty ||f||^2``
    over a Gaussian RKHS (median-heuristic bandwidth unless ``kernel`` is
    given).
    """

    regression: str = "tabular_frequency"
    penalty: float = 1e-3
    kernel: KernelConfig | None = None

    def __post_init__(self):
        if self.regression not in ("tabular_frequency", "kernel_ridge"):
            raise InputError(f"unknown regression {self.regression!r}")
        if not np.isfinite(self.penalty) or self.penalty < 0:
            raise InputError("penalty must be non-negative")


class _CellMeans:
    def __init__(self, w: np.ndarray, y: np.ndarray):
        self.cells, inv = np.unique(w, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        counts = np.bincount(inv, minlength=len(self.cells)).astype(float)
        sums = np.zeros((len(self.cells), y.shape[1]))
        np.add.at(sums, inv, y)
        self.means = sums / counts[:, None]

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        out = np.zeros((pts.shape[0], self.means.shape[1]))
        lookup = {row.tobytes(): i for i, row in enumerate(self.cells)}
        missing = 0
        for n, row in enumerate(pts):
            i = lookup.get(np.ascontiguousarray(row).tobytes())
            if i is None:
                missing += 1
            else:
                out[n] = self.means[i]
        if missing:
            log.warning("%d evaluation points fall in cells without data; using 0", missing)
        return out


class _KernelRidge:
    """Kernel ridge regression on the clipped eigen-factorization of the Gram matrix.

    ``f(w) = k(w, W) V diag(1 / (s + n * penalty)) V^T y``; the
    factorization and the features of fixed evaluation points are cached so
    that refits for new responses cost O(N r).
    """

    def __init__(self, w: np.ndarray, cfg: NaiveConfig):
        self.kernel = cfg.kernel or KernelConfig(median_bandwidth(w))
        self.fac = factor_gram(w, self.kernel)
        self.w = w
        self.shrink = 1.0 / (self.fac.vals + w.shape[0] * cfg.penalty)

    def features(self, pts: np.ndarray) -> np.ndarray:
        out = np.empty((pts.shape[0], self.fac.rank))
        for lo in range(0, pts.shape[0], 2048):
            out[lo:lo + 2048] = cross_gram(pts[lo:lo + 2048], self.w, self.kernel) @ self.fac.vecs
        return out

    def latent(self, y: np.ndarray) -> np.ndarray:
        return self.shrink[:, None] * (self.fac.vecs.T @ y)


class NaiveEstimator:
    """Observation-as-state gradient estimator with per-dataset caching.

    Runs the same backward recursion as the bridge estimator, but each
    stage regresses the responses directly on ``(a_t, o_t, h_{t-1})``
    instead of solving a conditional moment problem. Under confounding
    the regression targets are biased and the estimate stays biased as
    N grows.
    """

    def __init__(self, ds: OfflineDataset, policy: LogLinearPolicy, cfg: NaiveConfig | None = None):
        if policy.horizon != ds.horizon:
            raise InputError("policy and dataset horizons differ")
        self.ds, self.policy = ds, policy
        self.cfg = cfg or NaiveConfig()
        self.inputs = [bridge_inputs(ds, t)[0] for t in range(1, ds.horizon + 1)]
        # evaluation points: stage t+1 inputs for t=1..T-1, then first-stage points
        self.eval_points = [
            [next_stage_points(ds, t, a) for a in range(ds.action_count)]
            for t in range(1, ds.horizon)
        ] + [[first_stage_points(ds, a) for a in range(ds.action_count)]]
        self._models = None

    def _kernel_models(self):
        if self._models is None:
            self._models = [_KernelRidge(w, self.cfg) for w in self.inputs]
            self._feats = []
            for t in range(1, self.ds.horizon + 1):
                pts = self.eval_points[t - 2] if t > 1 else self.eval_points[-1]
                self._feats.append(sum(self._models[t - 1].features(p) for p in pts))
        return self._models

    def _predict_sum(self, t: int, y: np.ndarray) -> np.ndarray:
        """Sum over actions of the stage-t regression at its evaluation points."""
        pts = self.eval_points[t - 2] if t > 1 else self.eval_points[-1]
        if self.cfg.regression == "tabular_frequency":
            model = _CellMeans(self.inputs[t - 1], y)
            return sum(model(p) for p in pts)
        self._kernel_models()
        return self._feats[t - 1] @ self._models[t - 1].latent(y)

    def estimate(self, params: PolicyParams) -> tuple[np.ndarray, float]:
        ds, d = self.ds, params.dim
        next_sum = None
        for t in range(ds.horizon, 0, -1):
            y = response_vectors(ds, t, next_sum, self.policy, params)
            next_sum = self._predict_sum(t, y)
            next_sum[:, :params.offset(t)] = 0.0
        est = next_sum.mean(axis=0)
        if not np.all(np.isfinite(est)):
            raise NumericError("naive estimate is not finite")
        return est[:d].copy(), float(est[d])


def naive_gradient(ds: OfflineDataset, policy: LogLinearPolicy, params: PolicyParams,
                   cfg: NaiveConfig | None = None, return_value: bool = False):
    """Observation-as-state policy gradient; see :class:`NaiveEstimator`."""
    grad, value = NaiveEstimator(ds, policy, cfg).estimate(params)
    return (grad, value) if return_value else grad


def naive_gradient_ascent(ds: OfflineDataset, policy: LogLinearPolicy, theta0: PolicyParams,
                          steps: float = 0.5, iterations: int = 50,
                          cfg: NaiveConfig | None = None) -> tuple[list, list]:
    """Gradient ascent driven by :func:`naive_gradient`; returns (iterates, value estimates)."""
    if iterations < 1:
        raise InputError("iterations must be at least 1")
    est = NaiveEstimator(ds, policy, cfg)
    params, iterates, values = theta0, [theta0], []
    for k in range(iterations + 1):
        grad, value = est.estimate(params)
        values.append(value)
        if k == iterations:
            break
        params = params.with_theta(params.theta + steps * grad)
        iterates.append(params)
    return iterates, values


def log_likelihood(ds: OfflineDataset, policy: LogLinearPolicy, params: PolicyParams) -> float:
    """Mean over trajectories of sum_t log pi_t(a_t | o_t, h_{t-1})."""
    total = np.zeros(ds.n)
    for t in range(1, ds.horizon + 1):
        total += policy.log_prob(params, t, ds.actions[:, t - 1], ds.obs[:, t - 1], ds.history(t))
    return float(total.mean())


def behavior_cloning(ds: OfflineDataset, features: FeatureMap | LogLinearPolicy,
                     iters: int = 500, lr: float = 0.01, init: PolicyParams | None = None,
                     return_history: bool = False):
    """Fit the policy class to the logged actions by full-batch gradient ascent
    on the mean log-likelihood."""
    if iters < 1:
        raise InputError("iters must be at least 1")
    if lr <= 0:
        raise InputError("lr must be positive")
    policy = features if isinstance(features, LogLinearPolicy) else LogLinearPolicy(features)
    if policy.horizon != ds.horizon:
        raise InputError("feature map and dataset horizons differ")
    params = init or policy.zero_params()
    hist = [ds.history(t) for t in range(1, ds.horizon + 1)]
    trace = []
    for _ in range(iters):
        grad = np.zeros(params.dim)
        ll = np.zeros(ds.n)
        for t in range(1, ds.horizon + 1):
            a, o = ds.actions[:, t - 1], ds.obs[:, t - 1]
            grad += policy.grad_log_prob(params, t, a, o, hist[t - 1]).mean(axis=0)
            ll += policy.log_prob(params, t, a, o, hist[t - 1])
        trace.append(float(ll.mean()))
        if not (np.isfinite(trace[-1]) and np.all(np.isfinite(grad))):
            raise NumericError(f"behavior cloning diverged after {len(trace)} iterations")
        params = params.with_theta(params.theta + lr * grad)
    return (params, trace) if return_history else params
