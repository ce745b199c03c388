"""Experiment drivers behind the command-line interface.

Configuration files are flat ``key = value`` lists (``#`` comments allowed).
Keys are the fields of :class:`ExperimentConfig`; any other key must name a
field of the selected environment spec and overrides it, for example
``p_obs_correct = 1.0``. List-valued keys (``n``, ``methods``) take
comma-separated values.
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import NaiveConfig, NaiveEstimator, behavior_cloning
from .bridge import BridgeFitter, BridgeHyper, fit_all, fit_stage, saddle_point_alpha
from .env import ContinuousChainSpec, OfflineDataset, TabularBanditSpec, mc_policy_gradient, rollout_value
from .errors import ConfigError, InputError
from .estimator import OUTPUT_MODES, estimate_gradient, gradient_ascent, select_output
from .io import format_dataset, write_csv, write_params
from .linalg import KernelConfig, gram_matrix, median_bandwidth
from .policy import LogLinearPolicy, PolicyParams, SignIndicatorFeatures, TabularIndicatorFeatures
from .tabular import (estimate_tables, identify_gradient_tabular, normalized_error, oracle_gradient,
                      population_tables)

log = logging.getLogger(__name__)

METHODS = ("proposed", "naive", "cloning", "tabular_ident")
ENVS = ("tabular", "continuous")


@dataclass
class ExperimentConfig:
    env: str = "tabular"
    methods: tuple[str, ...] = ("proposed", "naive")
    n: tuple[int, ...] = (500,)
    k: int = 50
    replicates: int = 1
    seed: int = 1
    out: str = "-"
    lam: float = 0.1
    xi: float = 0.1
    mu: float = 0.01
    cv: bool = False
    step_size: float = 0.5
    output_mode: str = "best_estimated_value"
    naive_regression: str = ""  # empty: cell means for tabular, kernel ridge for continuous
    naive_penalty: float = 1e-3
    bc_iters: int = 500
    bc_lr: float = 0.01
    episodes: int = 100_000
    oracle_episodes: int = 1_000_000
    policy_out: str = ""
    workers: int = 1
    env_overrides: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentConfig":
        if self.env not in ENVS:
            raise ConfigError(f"env must be one of {ENVS}, got {self.env!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if any(v < 1 for v in self.n) or not self.n:
            raise ConfigError("n must be a list of positive integers")
        for name in ("k", "replicates", "bc_iters", "episodes", "oracle_episodes", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lam", "xi", "mu", "step_size", "bc_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.naive_penalty < 0:
            raise ConfigError("naive_penalty must be non-negative")
        if self.output_mode not in OUTPUT_MODES:
            raise ConfigError(f"output_mode must be one of {OUTPUT_MODES}")
        if self.naive_regression not in ("", "tabular_frequency", "kernel_ridge"):
            raise ConfigError(f"unknown naive_regression {self.naive_regression!r}")
        try:
            self.spec()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid environment override: {exc}") from exc
        return self

    # -- derived objects -----------------------------------------------------
    def spec(self):
        if self.env == "tabular":
            return TabularBanditSpec(**self.env_overrides)
        return ContinuousChainSpec(**self.env_overrides)

    def policy(self) -> LogLinearPolicy:
        if self.env == "tabular":
            return LogLinearPolicy(TabularIndicatorFeatures(horizon=self.spec().horizon))
        return LogLinearPolicy(SignIndicatorFeatures(horizon=self.spec().horizon))

    def hyper(self) -> BridgeHyper:
        return BridgeHyper(self.lam, self.xi, self.mu)

    def naive(self) -> NaiveConfig:
        reg = self.naive_regression or (
            "tabular_frequency" if self.env == "tabular" else "kernel_ridge")
        return NaiveConfig(reg, self.naive_penalty)


_SEQ = {"methods": str, "n": int}


def _coerce(name: str, typ: str, raw: str):
    raw = raw.strip()
    try:
        if name in _SEQ:
            return tuple(_SEQ[name](v.strip()) for v in raw.split(",") if v.strip())
        if typ == "bool":
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("1", "true", "yes", "on")
        if typ == "int":
            v = float(raw)
            if v != int(v):
                raise ValueError(f"not an integer: {raw!r}")
            return int(v)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from exc


def _spec_field_types(env: str) -> dict:
    cls = TabularBanditSpec if env == "tabular" else ContinuousChainSpec
    return {f.name: str(f.type) for f in dataclasses.fields(cls)}


def apply_settings(cfg: ExperimentConfig, settings: dict) -> ExperimentConfig:
    """Set fields from string values; unknown keys must be environment fields."""
    own = {f.name: str(f.type) for f in dataclasses.fields(ExperimentConfig) if f.name != "env_overrides"}
    if "env" in settings:
        cfg.env = settings["env"].strip()
    spec_fields = _spec_field_types(cfg.env)
    for key, raw in settings.items():
        if key == "env":
            continue
        if key in own:
            setattr(cfg, key, _coerce(key, own[key], raw))
        elif key in spec_fields:
            cfg.env_overrides[key] = _coerce(key, str(spec_fields[key]), raw)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    return cfg


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` file into a dict of strings."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[experiment]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return dict(parser["experiment"])


# -- commands ------------------------------------------------------------------

def _sample(cfg: ExperimentConfig, n: int, seed: int) -> OfflineDataset:
    return cfg.spec().sample(n, seed)


def run_generate(cfg: ExperimentConfig, out=None, report=None) -> OfflineDataset:
    out, report = out or sys.stdout, report or sys.stderr
    ds = _sample(cfg, cfg.n[0], cfg.seed)
    text = format_dataset(ds)
    if cfg.out in ("", "-"):
        out.write(text)
    else:
        path = Path(cfg.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    freq = np.bincount(ds.actions.ravel(), minlength=ds.action_count) / ds.actions.size
    print(f"generated N={ds.n} T={ds.horizon} obs_dim={ds.obs_dim} seed={cfg.seed}; "
          f"mean reward per step {ds.rewards.mean():.4f}; action frequencies "
          + " ".join(f"{f:.3f}" for f in freq), file=report)
    return ds


def true_gradient(cfg: ExperimentConfig, params: PolicyParams) -> np.ndarray:
    """Enumeration oracle for tabular specs, Monte-Carlo oracle for the continuous chain."""
    spec, policy = cfg.spec(), cfg.policy()
    if cfg.env == "tabular":
        return oracle_gradient(spec, policy, params)
    grad, _ = mc_policy_gradient(spec, policy, params, cfg.oracle_episodes, cfg.seed)
    return grad


def bench_estimate(method: str, cfg: ExperimentConfig, ds: OfflineDataset,
                   params: PolicyParams) -> np.ndarray:
    policy = cfg.policy()
    if method == "proposed":
        fitter = BridgeFitter(ds, policy, cfg.hyper())
        if cfg.cv:
            fitter.hyper, _ = fitter.cross_validate(params)
        return estimate_gradient(ds, policy, params, fitter=fitter).grad
    if method == "naive":
        return NaiveEstimator(ds, policy, cfg.naive()).estimate(params)[0]
    if method == "tabular_ident":
        if cfg.env != "tabular" or ds.horizon != 1:
            raise ConfigError("tabular_ident needs the single-stage tabular environment")
        return identify_gradient_tabular(estimate_tables(ds), policy, params)
    raise ConfigError(f"method {method!r} does not estimate gradients")


def _bench_task(task) -> tuple:
    method, n, r, cfg, params, truth = task
    ds = _sample(cfg, n, cfg.seed + r)
    return method, n, r + 1, normalized_error(bench_estimate(method, cfg, ds, params), truth)


def run_gradient_bench(cfg: ExperimentConfig, report=None) -> list[tuple]:
    """Normalized gradient errors at the uniform policy for every (method, N, replicate)."""
    methods = [m for m in cfg.methods if m != "cloning"]
    if not methods:
        raise ConfigError("gradient-bench needs at least one gradient method")
    params = cfg.policy().zero_params()
    truth = true_gradient(cfg, params)
    tasks = [(method, n, r, cfg, params, truth)
             for method in methods for n in cfg.n for r in range(cfg.replicates)]
    if cfg.workers > 1:
        # map keeps (method, N, replicate) order whatever the completion order
        with ProcessPoolExecutor(cfg.workers) as pool:
            rows = list(pool.map(_bench_task, tasks))
    else:
        rows = [_bench_task(task) for task in tasks]
    write_csv(cfg.out, ["method", "N", "replicate", "error"], rows)
    dest = sys.stderr if cfg.out in ("", "-") else (report or sys.stdout)
    print(format_table(rows, methods, cfg.n), file=dest)
    return rows


def format_table(rows, methods, ns) -> str:
    """Rows N, columns methods, cells ``mean (sd)`` of the normalized error."""
    width = max(14, *(len(m) + 2 for m in methods))
    lines = ["N".ljust(8) + "".join(m.ljust(width) for m in methods)]
    for n in ns:
        cells = []
        for m in methods:
            e = np.array([r[3] for r in rows if r[0] == m and r[1] == n])
            sd = e.std(ddof=1) if e.size > 1 else 0.0
            cells.append(f"{e.mean():.3f} ({sd:.3f})".ljust(width))
        lines.append(str(n).ljust(8) + "".join(cells))
    return "\n".join(lines)


def run_optimize(cfg: ExperimentConfig, report=None) -> dict:
    """Policy optimization with the requested methods on one dataset.

    Emits rows (method, k, estimated_value, rollout_value); behavior
    cloning has no iterations, so its single policy is repeated for every k
    with an empty estimated value.
    """
    spec, policy = cfg.spec(), cfg.policy()
    ds = _sample(cfg, cfg.n[0], cfg.seed)
    theta0 = policy.zero_params()
    rows, summary = [], {}

    def rollout(p):
        return rollout_value(spec, policy, p, cfg.episodes, cfg.seed)[0]

    t0 = time.perf_counter()
    if "proposed" in cfg.methods:
        trace = gradient_ascent(ds, policy, theta0, cfg.step_size, cfg.k, cfg.hyper(),
                                cross_validate=cfg.cv, cv_seed=cfg.seed)
        vals = [rollout(p) for p in trace.iterates]
        rows += [("proposed", k, e.value, v) for k, (e, v) in enumerate(zip(trace.estimates, vals))]
        chosen = select_output(trace, cfg.output_mode, seed=cfg.seed)
        summary["proposed"] = rollout(chosen)
        summary["proposed_policy"] = chosen
        if cfg.policy_out or cfg.out not in ("", "-"):
            write_params(chosen, cfg.policy_out or str(Path(cfg.out).with_suffix(".policy")))
    if "naive" in cfg.methods:
        est = NaiveEstimator(ds, policy, cfg.naive())
        p = theta0
        for k in range(cfg.k + 1):
            g, v = est.estimate(p)
            rows.append(("naive", k, v, rollout(p)))
            if k < cfg.k:
                p = p.with_theta(p.theta + cfg.step_size * g)
        summary["naive"] = rows[-1][3]
    if "cloning" in cfg.methods:
        bc = behavior_cloning(ds, policy, cfg.bc_iters, cfg.bc_lr)
        v = rollout(bc)
        rows += [("cloning", k, "", v) for k in range(cfg.k + 1)]
        summary["cloning"] = v
    if "tabular_ident" in cfg.methods:
        raise ConfigError("tabular_ident is an estimator, not an optimizer; use gradient-bench")
    write_csv(cfg.out, ["method", "k", "estimated_value", "rollout_value"], rows)
    dest = sys.stderr if cfg.out in ("", "-") else (report or sys.stdout)
    for m in ("proposed", "naive", "cloning"):
        if m in summary:
            label = {"proposed": f"proposed ({cfg.output_mode})", "naive": "naive (final)",
                     "cloning": "cloning"}[m]
            print(f"{label}: rollout value {summary[m]:.4f}", file=dest)
    print(f"elapsed {time.perf_counter() - t0:.1f} s", file=dest)
    return summary


# -- self-check ----------------------------------------------------------------

def _check_scores(rng) -> float:
    """Worst relative error of analytic vs central-difference gradients."""
    policy = LogLinearPolicy(SignIndicatorFeatures(horizon=2))
    worst = 0.0
    h = 1e-5
    for _ in range(100):
        p = PolicyParams(rng.uniform(-2, 2, 8), (4, 4))
        t = int(rng.integers(1, 3))
        o = rng.uniform(-2, 2, 1)
        hist = np.concatenate([rng.uniform(-2, 2, 1), np.eye(2)[rng.integers(2)]]) if t == 2 else None
        a = int(rng.integers(2))
        analytic = np.concatenate([policy.grad_log_prob(p, t, a, o, hist),
                                   policy.grad_prob(p, t, a, o, hist)])
        fd = np.zeros_like(analytic)
        for j in range(8):
            e = np.zeros(8)
            e[j] = h
            lp = [policy.log_prob(p.with_theta(p.theta + s * e), t, a, o, hist) for s in (1, -1)]
            pp = [policy.action_probs(p.with_theta(p.theta + s * e), t, o, hist)[a] for s in (1, -1)]
            fd[j] = (lp[0] - lp[1]) / (2 * h)
            fd[8 + j] = (pp[0] - pp[1]) / (2 * h)
        worst = max(worst, float(np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12)))
    return worst


def saddle_instance(seed: int, n: int = 15, d: int = 4):
    """Random well-conditioned problem: points ``w``, ``x``, responses with
    d+1 columns, and hyperparameters carrying fixed kernels."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(n, 3))
    x = np.hstack([w[:, :2], rng.normal(size=(n, 1))])
    y = rng.normal(size=(n, d + 1))
    lam, xi, mu = rng.uniform(0.01, 0.5, 3)
    hyper = BridgeHyper(lam, xi, mu, KernelConfig(0.5 * median_bandwidth(w)),
                        KernelConfig(0.5 * median_bandwidth(x)))
    return w, x, y, hyper


def _check_saddle() -> float:
    """Worst relative gap between both closed-form solvers and the game's stationary point."""
    worst = 0.0
    for s in range(10):
        w, x, y, hyper = saddle_instance(s)
        ref = saddle_point_alpha(gram_matrix(w, hyper.kernel_b), gram_matrix(x, hyper.kernel_f),
                                 y, hyper)
        for method in ("dense", "factored"):
            a = fit_stage(w, x, y, hyper, method=method).coeffs
            worst = max(worst, float(np.linalg.norm(a - ref) / np.linalg.norm(ref)))
    return worst


def _check_identification(rng, pinv_tol) -> float:
    spec = TabularBanditSpec()
    policy = LogLinearPolicy(TabularIndicatorFeatures())
    tables = population_tables(spec)
    worst = 0.0
    for _ in range(50):
        p = PolicyParams(rng.uniform(-2, 2, 4), (4,))
        est = identify_gradient_tabular(tables, policy, p, pinv_tol=pinv_tol)
        worst = max(worst, normalized_error(est, oracle_gradient(spec, policy, p)))
    return worst


def _check_structure(rng) -> float:
    """Largest magnitude in structurally zero bridge coordinates of a T=2 fit."""
    spec = ContinuousChainSpec()
    policy = LogLinearPolicy(SignIndicatorFeatures(horizon=2))
    ds = spec.sample(200, 3)
    p = PolicyParams(rng.uniform(-1, 1, 8), (4, 4))
    stage2 = fit_all(ds, policy, p)[1]
    pts = np.concatenate([np.eye(2)[rng.integers(0, 2, 100)], rng.uniform(-2, 2, (100, 1)),
                          rng.uniform(-2, 2, (100, 1)), np.eye(2)[rng.integers(0, 2, 100)]], axis=1)
    return float(np.abs(stage2.evaluate(pts)[:, :4]).max())


def _check_zero_reward() -> float:
    spec = TabularBanditSpec()
    policy = LogLinearPolicy(TabularIndicatorFeatures())
    ds = spec.sample(100, 5)
    ds = ds.with_rewards(np.zeros_like(ds.rewards))
    est = estimate_gradient(ds, policy, policy.zero_params())
    return float(max(np.abs(est.grad).max(), abs(est.value)))


def run_selfcheck(pinv_tol: float | None = None, report=None) -> bool:
    """Fast property checks; returns True when all pass."""
    report = report or sys.stdout
    rng = np.random.default_rng(20240601)
    checks = [
        ("score finite differences", lambda: _check_scores(rng), 1e-5),
        ("saddle-point oracle (N=15)", _check_saddle, 1e-8),
        ("population identification", lambda: _check_identification(rng, pinv_tol), 1e-10),
        ("structural zeros (T=2)", lambda: _check_structure(rng), 0.0),
        ("zero rewards give zero estimates", _check_zero_reward, 0.0),
    ]
    ok = True
    t0 = time.perf_counter()
    for name, fn, tol in checks:
        try:
            val = fn()
            passed = val <= tol
            detail = f"{val:.3g} (tolerance {tol:g})"
        except (InputError, ArithmeticError, ValueError) as exc:
            passed, detail = False, f"error: {exc}"
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}", file=report)
    print(f"self-check {'passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f} s", file=report)
    return ok


__all__ = ["ExperimentConfig", "apply_settings", "read_config_file", "run_generate",
           "run_gradient_bench", "run_optimize", "run_selfcheck"]
