"""Exact identification for the binary partially observable bandit.

For a single-stage discrete problem the policy gradient is a product of
observable probability matrices::

    grad V = sum_{a, o1, r} r * grad pi(a | o1)
             * P(r, o1 | O0, a) @ pinv(P(O1 | O0, a)) @ P(O1)

This module builds those matrices from data (:func:`estimate_tables`) or
analytically from the simulator parameters (:func:`population_tables`),
evaluates the formula, and provides brute-force enumeration oracles for
the true value and gradient that read the hidden state.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .env import OfflineDataset, TabularBanditSpec, reward
from .errors import InputError
from .linalg import pinv
from .policy import ACTION_SIGNS, LogLinearPolicy, PolicyParams

log = logging.getLogger(__name__)

#: more distinct values than this means the column is not discrete
MAX_LEVELS = 16


@dataclass
class EmpiricalTables:
    """Probability tables of the offline distribution.

    Attributes
    ----------
    r_values, o1_values, o0_values : np.ndarray
        Supports of R_1, O_1 and O_0.
    p_ro_given_o0a : np.ndarray, shape (|A|, |R|, |O1|, |O0|)
        P(r, o1 | o0, a).
    p_o1_given_o0a : np.ndarray, shape (|A|, |O1|, |O0|)
        P(o1 | o0, a).
    p_o1 : np.ndarray, shape (|O1|,)
        Marginal P(o1).
    empty_cells : np.ndarray of bool, shape (|A|, |O0|)
        Conditioning cells (a, o0) without data; their columns are zero.
    """

    r_values: np.ndarray
    o1_values: np.ndarray
    o0_values: np.ndarray
    p_ro_given_o0a: np.ndarray
    p_o1_given_o0a: np.ndarray
    p_o1: np.ndarray
    empty_cells: np.ndarray

    @property
    def action_count(self) -> int:
        return self.p_o1_given_o0a.shape[0]


def _levels(x: np.ndarray, what: str) -> np.ndarray:
    vals = np.unique(x)
    if vals.size > MAX_LEVELS:
        raise InputError(f"{what} has {vals.size} distinct values; expected discrete data")
    return vals


def estimate_tables(ds: OfflineDataset) -> EmpiricalTables:
    """Frequency estimates of the tables from a single-stage dataset."""
    if ds.horizon != 1 or ds.obs_dim != 1:
        raise InputError("tabular identification needs T=1 and scalar observations")
    o0 = ds.o0[:, 0]
    o1 = ds.obs[:, 0, 0]
    a = ds.actions[:, 0]
    r = ds.rewards[:, 0]
    r_vals = _levels(r, "reward")
    o1_vals = _levels(o1, "O_1")
    o0_vals = _levels(o0, "O_0")
    ri = np.searchsorted(r_vals, r)
    oi = np.searchsorted(o1_vals, o1)
    zi = np.searchsorted(o0_vals, o0)
    n_a = ds.action_count
    counts = np.zeros((n_a, r_vals.size, o1_vals.size, o0_vals.size))
    np.add.at(counts, (a, ri, oi, zi), 1.0)
    cell = counts.sum(axis=(1, 2))  # (A, O0)
    empty = cell == 0
    if empty.any():
        log.warning("empty conditioning cells (action, o0): %s", np.argwhere(empty).tolist())
    denom = np.where(empty, 1.0, cell)
    p_ro = counts / denom[:, None, None, :]
    p_o1_given = p_ro.sum(axis=1)
    p_o1 = np.bincount(oi, minlength=o1_vals.size) / ds.n
    return EmpiricalTables(r_vals, o1_vals, o0_vals, p_ro, p_o1_given, p_o1, empty)


def reward_levels(spec: TabularBanditSpec) -> np.ndarray:
    return np.unique([reward(s, a, spec.reward_slope) for s in (1.0, -1.0) for a in (1.0, -1.0)])


def population_tables(spec: TabularBanditSpec) -> EmpiricalTables:
    """Exact tables of the offline distribution implied by ``spec`` (T=1)."""
    if spec.horizon != 1:
        raise InputError("population tables are defined for the single-stage bandit")
    vals = np.array([-1.0, 1.0])
    r_vals = reward_levels(spec)
    joint = np.zeros((2, r_vals.size, 2, 2))  # (a, r, o1, o0)
    for s0, o0, s1, o1, ai in itertools.product(vals, vals, vals, vals, (0, 1)):
        a = ACTION_SIGNS[ai]
        p = (spec.p_s1 if s0 > 0 else 1 - spec.p_s1)
        p *= spec.p_o0_correct if o0 == s0 else 1 - spec.p_o0_correct
        p *= spec.p_s1_eq_s0 if s1 == s0 else 1 - spec.p_s1_eq_s0
        p *= spec.p_obs_correct if o1 == s1 else 1 - spec.p_obs_correct
        p *= spec.behavior_stay if a == s1 else 1 - spec.behavior_stay
        ri = int(np.argmin(np.abs(r_vals - reward(s1, a, spec.reward_slope))))
        joint[ai, ri, int(o1 > 0), int(o0 > 0)] += p
    cell = joint.sum(axis=(1, 2))
    empty = cell == 0
    p_ro = joint / np.where(empty, 1.0, cell)[:, None, None, :]
    p_o1 = joint.sum(axis=(0, 1, 3))
    return EmpiricalTables(r_vals, vals, vals, p_ro, p_ro.sum(axis=1), p_o1, empty)


def _bridge_weights(tables: EmpiricalTables, pinv_tol: float | None):
    """w[a, r, o1] = P(r, o1 | O0, a) @ pinv(P(O1 | O0, a)) @ P(O1)."""
    n_a = tables.action_count
    w = np.zeros(tables.p_ro_given_o0a.shape[:3])
    for a in range(n_a):
        m = tables.p_o1_given_o0a[a]
        inv = pinv(m, tol=pinv_tol)
        rank = np.linalg.matrix_rank(m)
        if rank < min(m.shape) or np.linalg.matrix_rank(inv) < min(m.shape):
            warnings.warn(f"P(O1 | O0, a={a}) is rank deficient; identification may fail",
                          RuntimeWarning, stacklevel=3)
        w[a] = tables.p_ro_given_o0a[a] @ inv @ tables.p_o1
    return w


def identify_gradient_tabular(tables: EmpiricalTables, policy: LogLinearPolicy,
                              params: PolicyParams, pinv_tol: float | None = None) -> np.ndarray:
    """Policy gradient from observable tables via the matrix formula."""
    w = _bridge_weights(tables, pinv_tol)
    grad_pi = policy.grad_prob_all(params, 1, tables.o1_values[:, None])  # (O1, A, d)
    # sum over a, r, o1 of r * grad pi(a | o1) * w[a, r, o1]
    return np.einsum("r,aro,oad->d", tables.r_values, w, grad_pi)


def identify_value_tabular(tables: EmpiricalTables, policy: LogLinearPolicy,
                           params: PolicyParams, pinv_tol: float | None = None) -> float:
    w = _bridge_weights(tables, pinv_tol)
    pi = policy.action_probs(params, 1, tables.o1_values[:, None])  # (O1, A)
    return float(np.einsum("r,aro,oa->", tables.r_values, w, pi))


def _enumerate(spec: TabularBanditSpec):
    """All hidden/observed paths with their environment probability.

    Returns the path weight excluding the target policy, observations
    (P, T), action indices (P, T), and total reward (P,).
    """
    horizon = spec.horizon
    vals = (1.0, -1.0)
    p_s1 = spec.p_s1 * spec.p_s1_eq_s0 + (1 - spec.p_s1) * (1 - spec.p_s1_eq_s0)
    weights, obs, acts, totals = [], [], [], []
    for combo in itertools.product(vals, vals, (0, 1), repeat=horizon):
        w = 1.0
        total = 0.0
        prev_s = prev_a = None
        o_path, a_path = [], []
        for t in range(horizon):
            s, o, ai = combo[3 * t: 3 * t + 3]
            a = ACTION_SIGNS[ai]
            if t == 0:
                w *= p_s1 if s > 0 else 1 - p_s1
            else:
                keep = s == prev_s * prev_a
                w *= spec.p_transition_keep if keep else 1 - spec.p_transition_keep
            w *= spec.p_obs_correct if o == s else 1 - spec.p_obs_correct
            total += float(reward(s, a, spec.reward_slope))
            o_path.append(o)
            a_path.append(ai)
            prev_s, prev_a = s, a
        weights.append(w)
        obs.append(o_path)
        acts.append(a_path)
        totals.append(total)
    return np.array(weights), np.array(obs), np.array(acts, dtype=int), np.array(totals)


def _path_terms(spec, policy, params):
    w, obs, acts, totals = _enumerate(spec)
    n_paths, horizon = acts.shape
    prob = np.ones(n_paths)
    score = np.zeros((n_paths, params.dim))
    hist = np.zeros((n_paths, 0))
    for t in range(1, horizon + 1):
        o = obs[:, t - 1:t]
        a = acts[:, t - 1]
        p = policy.action_probs(params, t, o, hist)
        prob *= p[np.arange(n_paths), a]
        score += policy.grad_log_prob(params, t, a, o, hist)
        hist = np.concatenate([hist, o, np.eye(policy.action_count)[a]], axis=1)
    return w * prob, score, totals


def oracle_value(spec: TabularBanditSpec, policy: LogLinearPolicy, params: PolicyParams) -> float:
    """True value of the target policy by enumerating the joint support."""
    p, _, totals = _path_terms(spec, policy, params)
    return float(p @ totals)


def oracle_gradient(spec: TabularBanditSpec, policy: LogLinearPolicy,
                    params: PolicyParams) -> np.ndarray:
    """True policy gradient: sum over paths of P(path) * total reward * score."""
    p, score, totals = _path_terms(spec, policy, params)
    return (p * totals) @ score


def normalized_error(estimate, truth) -> float:
    """||estimate - truth|| / ||truth||."""
    truth = np.asarray(truth, dtype=float)
    return float(np.linalg.norm(np.asarray(estimate) - truth) / np.linalg.norm(truth))
