"""Plug-in policy gradient estimator and offline policy gradient ascent."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .bridge import BridgeFitter, BridgeHyper, BridgeStage
from .env import OfflineDataset
from .errors import InputError, NumericError
from .policy import LogLinearPolicy, PolicyParams

log = logging.getLogger(__name__)

OUTPUT_MODES = ("uniform_random", "best_estimated_value", "last")


@dataclass
class GradientEstimate:
    """Estimated gradient and value of one policy.

    ``diagnostics`` holds one dict per stage (stage, active_offset,
    coefficient norm).
    """

    grad: np.ndarray
    value: float
    diagnostics: list = field(default_factory=list)
    stages: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.grad)) and np.isfinite(self.value)):
            raise NumericError("gradient estimate has non-finite entries")


@dataclass
class AscentTrace:
    iterates: list
    estimates: list
    steps: list
    hyper: BridgeHyper | None = None

    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.estimates])


def _summaries(stages: list[BridgeStage]) -> list[dict]:
    return [{"stage": s.t, "active_offset": s.active_offset,
             "coeff_norm": float(np.linalg.norm(s.coeffs))} for s in stages]


def estimate_gradient(ds: OfflineDataset, policy: LogLinearPolicy, params: PolicyParams,
                      hyper: BridgeHyper | None = None, fitter: BridgeFitter | None = None,
                      keep_stages: bool = False) -> GradientEstimate:
    """``mean_n sum_a b_1(a, o_1^n)``: gradient from the first d coordinates, value from the last.

    Pass a :class:`BridgeFitter` to reuse kernel factorizations across calls.
    """
    fitter = fitter or BridgeFitter(ds, policy, hyper)
    stages = fitter.fit(params, hyper)
    est = fitter.plug_in(stages[0])
    d = params.dim
    return GradientEstimate(est[:d].copy(), float(est[d]), _summaries(stages),
                            stages if keep_stages else None)


def gradient_ascent(ds: OfflineDataset, policy: LogLinearPolicy, theta0: PolicyParams,
                    steps=0.5, iterations: int = 50, hyper: BridgeHyper | None = None,
                    cross_validate: bool = False, cv_seed: int = 0,
                    callback=None) -> AscentTrace:
    """``theta <- theta + eta_k * g_hat(theta)`` for ``iterations`` steps.

    ``steps`` is a constant step size or a sequence of length
    ``iterations``. The returned trace holds ``iterations + 1`` iterates,
    each with its gradient and value estimate. With ``cross_validate`` the
    hyperparameters are chosen once at ``theta0`` and kept fixed.
    """
    if iterations < 1:
        raise InputError("iterations must be at least 1")
    etas = np.broadcast_to(np.asarray(steps, dtype=float), (iterations,)).copy() \
        if np.ndim(steps) == 0 else np.asarray(steps, dtype=float)
    if etas.shape != (iterations,):
        raise InputError(f"expected {iterations} step sizes, got {etas.size}")
    if np.any(etas <= 0) or not np.all(np.isfinite(etas)):
        raise InputError("step sizes must be positive")
    fitter = BridgeFitter(ds, policy, hyper)
    if cross_validate:
        hyper, _ = fitter.cross_validate(theta0, seed=cv_seed)
        fitter.hyper = hyper
    hyper = fitter.hyper
    params = theta0
    iterates, estimates = [params], []
    for k in range(iterations + 1):
        try:
            est = estimate_gradient(ds, policy, params, hyper, fitter)
        except NumericError as exc:
            raise NumericError(f"iteration {k}: {exc}") from exc
        estimates.append(est)
        if callback is not None:
            callback(k, params, est)
        if k == iterations:
            break
        params = params.with_theta(params.theta + etas[k] * est.grad)
        iterates.append(params)
    return AscentTrace(iterates, estimates, list(etas), hyper)


def select_output(trace: AscentTrace, mode: str = "best_estimated_value",
                  seed: int = 0) -> PolicyParams:
    """Pick an iterate: ``best_estimated_value`` (argmax of value estimates,
    first on ties), ``last``, or ``uniform_random`` over theta^(0..K-1)."""
    if not trace.iterates:
        raise InputError("empty trace")
    if mode == "last":
        return trace.iterates[-1]
    if mode == "best_estimated_value":
        if not trace.estimates:
            raise InputError("trace has no value estimates")
        return trace.iterates[int(np.argmax(trace.values()))]
    if mode == "uniform_random":
        pool = max(1, len(trace.iterates) - 1)
        return trace.iterates[int(np.random.default_rng(seed).integers(pool))]
    raise InputError(f"unknown output mode {mode!r}; expected one of {OUTPUT_MODES}")


def write_trace_csv(trace: AscentTrace, path) -> None:
    """Columns: k, value_estimate, grad_norm, theta_0..theta_{d-1}."""
    d = trace.iterates[0].dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "value_estimate", "grad_norm"] + [f"theta_{i}" for i in range(d)])
        for k, (p, est) in enumerate(zip(trace.iterates, trace.estimates)):
            w.writerow([k, f"{est.value:.12g}", f"{np.linalg.norm(est.grad):.12g}"]
                       + [f"{v:.12g}" for v in p.theta])
