"""Sequential kernel min-max estimation of value and gradient bridges.

At stage ``t`` the bridge ``b_t: W_t -> R^{d+1}`` (gradient coordinates
first, value last) solves the conditional moment restriction
``E[b_t(W_t) - Y_t | X_t] = 0`` with ``W_t = (a_t, o_t, h_{t-1})`` and
instrument ``X_t = (a_t, h_{t-1}, o_0)``. With Gaussian RKHS classes for
the bridge and the test functions, the regularized min-max problem has the
closed form::

    M     = K_F^{1/2} (lam / (N xi) K_F + I)^{-1} K_F^{1/2}
    alpha = pinv(K_B M K_B + 4 xi mu K_B) K_B M Y
    b(w)  = sum_n alpha_n k_B(W_n, w)

Stages are fitted backward from ``T`` to 1 starting from a zero bridge.
Coordinates belonging to parameter blocks of earlier stages are
identically zero at stage ``t`` and are never solved.

Two solvers are available. ``"dense"`` evaluates the formula above
literally. ``"factored"`` (the default) works in the eigenbasis of both
Gram matrices, with eigenvalues clipped at 1e-10 trace/N as in
:func:`~confounded_pg.linalg.sym_psqrt`. Writing ``K_B = U L U'``, the
solution is ``alpha = U L^{-1/2} (L^{1/2} U'MU L^{1/2} + 4 xi mu I)^{-1}
L^{1/2} U'M Y``: the r x r system has eigenvalues at least ``4 xi mu``,
whereas the dense left-hand side is numerically singular for smooth
kernels, so the factored form is both faster (O(N r^2)) and more
accurate. The two agree on well-conditioned problems. Kernel
factorizations do not depend on the policy, so :class:`BridgeFitter`
computes them once per dataset and reuses them across policy updates.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .env import OfflineDataset
from .errors import InputError, NumericError
from .linalg import (KernelConfig, KernelFactor, cross_gram, factor_gram,
                     gram_matrix, median_bandwidth, pinv, sym_psqrt)
from .policy import LogLinearPolicy, PolicyParams

log = logging.getLogger(__name__)

CV_GRID = (1e-3, 1e-2, 1e-1)
_CHUNK = 2048


@dataclass(frozen=True)
class BridgeHyper:
    """Tuning parameters of the min-max problem.

    ``kernel_b`` and ``kernel_f`` fix the bridge and test-function kernels
    for every stage; when ``None`` the median heuristic is applied to each
    stage's inputs.
    """

    lam: float = 0.1
    xi: float = 0.1
    mu: float = 0.01
    kernel_b: KernelConfig | None = None
    kernel_f: KernelConfig | None = None

    def __post_init__(self):
        for name in ("lam", "xi", "mu"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise InputError(f"{name} must be positive, got {v}")


def bridge_inputs(ds: OfflineDataset, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Encoded ``W_t = (onehot a_t, o_t, h_{t-1})`` and ``X_t = (onehot a_t, h_{t-1}, o_0)``."""
    if not 1 <= t <= ds.horizon:
        raise InputError(f"stage {t} outside 1..{ds.horizon}")
    a = ds.onehot(t)
    h = ds.history(t)
    w = np.concatenate([a, ds.obs[:, t - 1], h], axis=1)
    x = np.concatenate([a, h, ds.o0], axis=1)
    return w, x


def encode_w(a, o, h, action_count: int = 2) -> np.ndarray:
    """Encode bridge arguments (action indices, observations, histories) as rows of W."""
    o = np.asarray(o, dtype=float)
    o = o.reshape(1, -1) if o.ndim <= 1 else o
    n = o.shape[0]
    a = np.broadcast_to(np.atleast_1d(np.asarray(a, dtype=int)), (n,))
    h = np.zeros((n, 0)) if h is None else np.asarray(h, dtype=float).reshape(n, -1)
    return np.concatenate([np.eye(action_count)[a], o, h], axis=1)


def next_stage_points(ds: OfflineDataset, t: int, a_next: int) -> np.ndarray:
    """Rows ``(onehot a', o_{t+1}, h_t)`` at which the stage-``t+1`` bridge is needed."""
    n = ds.n
    a = np.zeros((n, ds.action_count))
    a[:, a_next] = 1.0
    return np.concatenate([a, ds.obs[:, t], ds.history(t + 1)], axis=1)


def first_stage_points(ds: OfflineDataset, a: int) -> np.ndarray:
    """Rows ``(onehot a, o_1)`` used by the plug-in gradient."""
    oh = np.zeros((ds.n, ds.action_count))
    oh[:, a] = 1.0
    return np.concatenate([oh, ds.obs[:, 0]], axis=1)


@dataclass
class BridgeStage:
    """Fitted bridge ``b_t(w) = sum_n coeffs[n] k(anchors[n], w)``.

    ``coeffs`` has shape (N, d+1); columns before ``active_offset`` are
    structural zeros. ``latent`` and ``basis`` are set by the factored
    solver (``coeffs == basis @ latent``) and allow cheap evaluation on
    precomputed features.
    """

    t: int
    anchors: np.ndarray
    coeffs: np.ndarray
    active_offset: int
    kernel: KernelConfig
    latent: np.ndarray | None = field(default=None, repr=False)
    hyper: BridgeHyper | None = None

    @property
    def dim(self) -> int:
        return self.coeffs.shape[1]

    def evaluate(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        points = points.reshape(1, -1) if points.ndim == 1 else points
        if points.shape[1] != self.anchors.shape[1]:
            raise InputError(
                f"bridge inputs have dimension {points.shape[1]}, anchors {self.anchors.shape[1]}")
        out = np.zeros((points.shape[0], self.dim))
        active = self.coeffs[:, self.active_offset:]
        for lo in range(0, points.shape[0], _CHUNK):
            k = cross_gram(points[lo:lo + _CHUNK], self.anchors, self.kernel)
            out[lo:lo + _CHUNK, self.active_offset:] = k @ active
        return out


def zero_stage(t: int, anchors: np.ndarray, dim: int, active_offset: int,
               kernel: KernelConfig) -> BridgeStage:
    return BridgeStage(t, anchors, np.zeros((anchors.shape[0], dim)), active_offset, kernel)


def eval_bridge(stage: BridgeStage, a, o, h=None, action_count: int = 2) -> np.ndarray:
    """Evaluate a fitted bridge at action index ``a``, observation ``o``, history ``h``."""
    pts = encode_w(a, o, h, action_count)
    out = stage.evaluate(pts)
    return out[0] if np.asarray(o).ndim <= 1 else out


def response_vectors(ds: OfflineDataset, t: int, next_sum: np.ndarray | None,
                     policy: LogLinearPolicy, params: PolicyParams) -> np.ndarray:
    """Responses Y_t of shape (N, d+1).

    ``next_sum[n]`` is ``sum_{a'} b_{t+1}(a', o_{t+1}^n, h_t^n)``; pass
    ``None`` at the last stage, where the next bridge is zero.
    """
    d = params.dim
    n = ds.n
    if next_sum is None:
        if t != ds.horizon:
            raise InputError(f"stage {t} < T={ds.horizon} needs the next-stage bridge")
        next_sum = np.zeros((n, d + 1))
    elif t == ds.horizon:
        raise InputError("the last stage has no next-stage bridge")
    next_sum = np.asarray(next_sum, dtype=float)
    if next_sum.shape != (n, d + 1):
        raise InputError(f"next-stage sums have shape {next_sum.shape}, expected {(n, d + 1)}")
    obs = ds.obs[:, t - 1]
    hist = ds.history(t)
    acts = ds.actions[:, t - 1]
    pi = policy.action_probs(params, t, obs, hist)[np.arange(n), acts]
    grad_pi = policy.grad_prob(params, t, acts, obs, hist)
    ret = ds.rewards[:, t - 1] + next_sum[:, d]
    y = np.empty((n, d + 1))
    y[:, :d] = ret[:, None] * grad_pi + next_sum[:, :d] * pi[:, None]
    y[:, d] = ret * pi
    y[:, :params.offset(t)] = 0.0
    return y


def m_matrix(gram_f, hyper: BridgeHyper, n: int) -> np.ndarray:
    """``K_F^{1/2} (lam/(n xi) K_F + I)^{-1} K_F^{1/2}``."""
    gram_f = np.asarray(gram_f, dtype=float)
    w = np.linalg.eigvalsh(0.5 * (gram_f + gram_f.T)) if gram_f.size else np.zeros(0)
    if w.size and w.min() < -1e-8 * max(1.0, abs(w.max())):
        raise NumericError(f"test-function Gram matrix is not PSD (min eigenvalue {w.min():.3g})")
    root = sym_psqrt(gram_f)
    ratio = hyper.lam / (n * hyper.xi)
    inner = np.linalg.solve(ratio * gram_f + np.eye(gram_f.shape[0]), root)
    m = root @ inner
    return 0.5 * (m + m.T)


def closed_form_alpha(gram_b, gram_f, y, hyper: BridgeHyper,
                      pinv_tol: float | None = None) -> np.ndarray:
    """``pinv(K_B M K_B + 4 xi mu K_B) K_B M Y`` evaluated densely."""
    y = np.asarray(y, dtype=float)
    n = gram_b.shape[0]
    m = m_matrix(gram_f, hyper, n)
    kmk = gram_b @ m @ gram_b
    lhs = 0.5 * (kmk + kmk.T) + 4.0 * hyper.xi * hyper.mu * gram_b
    return pinv(lhs, tol=pinv_tol) @ (gram_b @ (m @ y))


def fit_stage(w, x, y, hyper: BridgeHyper, t: int = 1, active_offset: int = 0,
              method: str = "factored") -> BridgeStage:
    """Closed-form bridge for one stage.

    ``w`` and ``x`` are the encoded bridge inputs and instruments, ``y``
    the response matrix; columns before ``active_offset`` are skipped and
    returned as exact zeros. ``method="dense"`` evaluates the formula
    literally with N x N matrices; ``"factored"`` uses the eigenbasis form,
    which stays accurate when the Gram matrices are numerically singular.
    """
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    y = y[:, None] if y.ndim == 1 else y
    if not (w.shape[0] == x.shape[0] == y.shape[0]):
        raise InputError("w, x and y must have the same number of rows")
    if method not in ("dense", "factored"):
        raise InputError(f"unknown solver {method!r}")
    kb = hyper.kernel_b or KernelConfig(median_bandwidth(w))
    kf = hyper.kernel_f or KernelConfig(median_bandwidth(x))
    coeffs = np.zeros_like(y)
    latent = None
    if active_offset < y.shape[1]:
        if method == "dense":
            coeffs[:, active_offset:] = closed_form_alpha(
                gram_matrix(w, kb), gram_matrix(x, kf), y[:, active_offset:], hyper)
        else:
            st = _FactoredStage(w, x, kb, kf, "auto")
            latent = np.zeros((st.basis.shape[1], y.shape[1]))
            latent[:, active_offset:] = st.solve(y[:, active_offset:], hyper)
            coeffs[:, active_offset:] = st.basis @ latent[:, active_offset:]
    return BridgeStage(t, w, coeffs, active_offset, kb, latent, hyper)


class _FactoredStage:
    """Eigen-factors of one stage's Gram matrices plus precomputed features.

    ``basis = U_B diag(lam_B)^{-1/2}``; features of any point ``w`` are
    ``k_B(w, anchors) @ basis``, so that ``b(w) = features @ latent``.
    """

    def __init__(self, w, x, kb: KernelConfig, kf: KernelConfig, method: str):
        self.w = w
        self.fb: KernelFactor = factor_gram(w, kb, method=method)
        self.ff: KernelFactor = factor_gram(x, kf, method=method)
        self.kb = kb
        self.sqrt_b = np.sqrt(self.fb.vals)
        self.basis = self.fb.vecs / self.sqrt_b
        self.proj = self.fb.vecs.T @ self.ff.vecs  # U_B^T U_F
        self.anchor_features = self.fb.vecs * self.sqrt_b  # K_B basis on the anchors
        self._ops: dict = {}
        self._anchor_groups = None

    def features(self, points) -> np.ndarray:
        # repeated rows (discrete data) are evaluated once
        if self._anchor_groups is None:
            uw, inv = np.unique(self.w, axis=0, return_inverse=True)
            summed = np.zeros((uw.shape[0], self.basis.shape[1]))
            np.add.at(summed, inv.reshape(-1), self.basis)
            self._anchor_groups = (uw, summed)
        uw, summed = self._anchor_groups
        up, inv = np.unique(points, axis=0, return_inverse=True)
        out = np.empty((up.shape[0], self.basis.shape[1]))
        for lo in range(0, up.shape[0], _CHUNK):
            out[lo:lo + _CHUNK] = cross_gram(up[lo:lo + _CHUNK], uw, self.kb) @ summed
        return out[inv.reshape(-1)]

    def operator(self, hyper: BridgeHyper):
        """Matrices (R, V_F^T) with ``latent = R @ (V_F^T @ Y)``."""
        key = (hyper.lam, hyper.xi, hyper.mu)
        if key not in self._ops:
            n = self.w.shape[0]
            ratio = hyper.lam / (n * hyper.xi)
            g = self.ff.vals / (ratio * self.ff.vals + 1.0)
            pg = self.proj * g
            s = self.sqrt_b
            inner = (s[:, None] * (pg @ self.proj.T)) * s[None, :]
            inner += 4.0 * hyper.xi * hyper.mu * np.eye(s.size)
            inner = 0.5 * (inner + inner.T)
            rmat = np.linalg.solve(inner, s[:, None] * pg) if s.size else np.zeros((0, g.size))
            self._ops[key] = rmat
        return self._ops[key]

    def solve(self, y: np.ndarray, hyper: BridgeHyper) -> np.ndarray:
        return self.operator(hyper) @ (self.ff.vecs.T @ y)


class BridgeFitter:
    """Backward recursion over stages for a fixed dataset.

    Kernel bandwidths, factorizations and all kernel evaluations needed by
    the recursion are computed once; :meth:`fit` then costs O(N r^2) per
    stage for any policy parameters and hyperparameters.
    """

    def __init__(self, ds: OfflineDataset, policy: LogLinearPolicy,
                 hyper: BridgeHyper | None = None, method: str = "auto"):
        if policy.horizon != ds.horizon:
            raise InputError(f"policy horizon {policy.horizon} != dataset horizon {ds.horizon}")
        if policy.action_count != ds.action_count:
            raise InputError("policy and dataset disagree on the number of actions")
        if method not in ("auto", "dense", "factored"):
            raise InputError(f"unknown solver {method!r}")
        self.ds = ds
        self.policy = policy
        self.hyper = hyper or BridgeHyper()
        self.method = method
        if method == "auto":
            self.method = "factored"
        self.inputs = [bridge_inputs(ds, t) for t in range(1, ds.horizon + 1)]
        self.kernels = [
            (self.hyper.kernel_b or KernelConfig(median_bandwidth(w)),
             self.hyper.kernel_f or KernelConfig(median_bandwidth(x)))
            for w, x in self.inputs
        ]
        self._stages: list | None = None
        self._next_feats: list | None = None
        self._first_feats = None
        self._dense_cache: dict = {}

    # -- factored machinery -------------------------------------------------
    def _factored(self):
        if self._stages is None:
            self._stages = [_FactoredStage(w, x, kb, kf, "auto")
                            for (w, x), (kb, kf) in zip(self.inputs, self.kernels)]
            ds = self.ds
            self._next_feats = []
            for t in range(1, ds.horizon):
                st = self._stages[t]  # stage t+1
                feats = sum(st.features(next_stage_points(ds, t, a))
                            for a in range(ds.action_count))
                self._next_feats.append(feats)
            self._first_feats = sum(self._stages[0].features(first_stage_points(ds, a))
                                    for a in range(ds.action_count)).mean(axis=0)
        return self._stages

    # -- dense machinery ----------------------------------------------------
    def _dense(self, t):
        if t not in self._dense_cache:
            (w, x), (kb, kf) = self.inputs[t - 1], self.kernels[t - 1]
            entry = {"kb": gram_matrix(w, kb), "kf": gram_matrix(x, kf)}
            if t < self.ds.horizon:
                wn, kbn = self.inputs[t][0], self.kernels[t][0]
                entry["next"] = sum(cross_gram(next_stage_points(self.ds, t, a), wn, kbn)
                                    for a in range(self.ds.action_count))
            self._dense_cache[t] = entry
        return self._dense_cache[t]

    def _first_dense(self):
        w1, kb1 = self.inputs[0][0], self.kernels[0][0]
        if "first" not in self._dense_cache:
            self._dense_cache["first"] = sum(
                cross_gram(first_stage_points(self.ds, a), w1, kb1)
                for a in range(self.ds.action_count)).mean(axis=0)
        return self._dense_cache["first"]

    def fit(self, params: PolicyParams, hyper: BridgeHyper | None = None) -> list[BridgeStage]:
        """Fitted bridges for stages 1..T (list index ``t-1``)."""
        hyper = hyper or self.hyper
        ds = self.ds
        d = params.dim
        stages: list[BridgeStage | None] = [None] * ds.horizon
        next_sum = None
        for t in range(ds.horizon, 0, -1):
            y = response_vectors(ds, t, next_sum, self.policy, params)
            off = params.offset(t)
            w = self.inputs[t - 1][0]
            kb = self.kernels[t - 1][0]
            coeffs = np.zeros((ds.n, d + 1))
            latent = None
            if self.method == "dense":
                cache = self._dense(t)
                coeffs[:, off:] = closed_form_alpha(cache["kb"], cache["kf"], y[:, off:], hyper)
                if t > 1:
                    next_sum = np.zeros((ds.n, d + 1))
                    next_sum[:, off:] = self._dense(t - 1)["next"] @ coeffs[:, off:]
            else:
                st = self._factored()[t - 1]
                latent = np.zeros((st.basis.shape[1], d + 1))
                latent[:, off:] = st.solve(y[:, off:], hyper)
                coeffs[:, off:] = st.basis @ latent[:, off:]
                if t > 1:
                    next_sum = np.zeros((ds.n, d + 1))
                    next_sum[:, off:] = self._next_feats[t - 2] @ latent[:, off:]
            if not np.all(np.isfinite(coeffs)):
                raise NumericError(f"non-finite bridge coefficients at stage {t}")
            stages[t - 1] = BridgeStage(t, w, coeffs, off, kb, latent, hyper)
        return stages

    def plug_in(self, first: BridgeStage) -> np.ndarray:
        """``mean_n sum_a b_1(a, o_1^n)``, shape (d+1,)."""
        if first.latent is not None and self.method == "factored":
            self._factored()
            return self._first_feats @ first.latent
        return self._first_dense() @ first.coeffs

    # -- hyperparameter selection ------------------------------------------
    def cross_validate(self, params: PolicyParams, grid=CV_GRID, holdout: float = 0.2,
                       seed: int = 0, smoothing: float = 1e-2) -> tuple[BridgeHyper, dict]:
        """Pick (lam, xi, mu) from ``grid``^3 by held-out projected moment violation.

        Bridges are fitted on a random ``1 - holdout`` split. On the held-out
        rows the stage residuals ``b_t(W_t) - Y_t`` are projected on the
        instruments with a kernel ridge smoother (penalty ``smoothing``) and
        the mean squared projection is summed over stages.
        """
        ds = self.ds
        rng = np.random.default_rng(seed)
        perm = rng.permutation(ds.n)
        n_val = max(1, int(round(holdout * ds.n)))
        val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        tr, va = ds.subset(tr_idx), ds.subset(val_idx)
        fixed = replace(self.hyper, kernel_b=None, kernel_f=None)
        sub = BridgeFitter(tr, self.policy, fixed, method="factored")
        sub.kernels = self.kernels
        stages = sub._factored()
        val_w = [bridge_inputs(va, t)[0] for t in range(1, ds.horizon + 1)]
        val_feats = [st.features(w) for st, w in zip(stages, val_w)]
        val_next = [sum(stages[t].features(next_stage_points(va, t, a))
                        for a in range(ds.action_count)) for t in range(1, ds.horizon)]
        smoothers = []
        for t in range(1, ds.horizon + 1):
            fx = factor_gram(bridge_inputs(va, t)[1], self.kernels[t - 1][1])
            shrink = fx.vals / (fx.vals + n_val * smoothing)
            smoothers.append((fx.vecs, shrink))
        scores = {}
        for lam, xi, mu in itertools.product(grid, grid, grid):
            hyper = replace(self.hyper, lam=lam, xi=xi, mu=mu)
            fitted = sub.fit(params, hyper)
            total = 0.0
            for t in range(ds.horizon, 0, -1):
                nxt = None if t == ds.horizon else val_next[t - 1] @ fitted[t].latent
                y = response_vectors(va, t, nxt, self.policy, params)
                resid = val_feats[t - 1] @ fitted[t - 1].latent - y
                vecs, shrink = smoothers[t - 1]
                proj = vecs @ (shrink[:, None] * (vecs.T @ resid))
                total += float(np.mean(np.sum(proj**2, axis=1)))
            scores[(lam, xi, mu)] = total
        best = min(scores, key=scores.get)
        log.info("cross-validation picked lam=%g xi=%g mu=%g", *best)
        chosen = replace(self.hyper, lam=best[0], xi=best[1], mu=best[2])
        return chosen, scores


def fit_all(ds: OfflineDataset, policy: LogLinearPolicy, params: PolicyParams,
            hyper: BridgeHyper | None = None, method: str = "auto") -> list[BridgeStage]:
    """Bridges for stages 1..T from a zero terminal bridge."""
    return BridgeFitter(ds, policy, hyper, method).fit(params)


def saddle_point_alpha(gram_b, gram_f, y, hyper: BridgeHyper) -> np.ndarray:
    """Solve the min-max game over kernel sections by joint stationarity.

    With ``b = K_B alpha``, ``f = K_F beta`` and residual ``r = K_B alpha - y``
    the game is::

        min_alpha max_beta  (1/N) r' K_F beta - (lam/N) beta' K_F^2 beta
                            - xi beta' K_F beta + (mu/N^2) alpha' K_B alpha

    Its first-order conditions form a 2N x 2N linear system, solved here
    by least squares. The bridge penalty ``mu/N^2`` is the scaling under
    which the game's solution equals :func:`closed_form_alpha`.
    """
    kb = np.asarray(gram_b, dtype=float)
    kf = np.asarray(gram_f, dtype=float)
    y = np.asarray(y, dtype=float)
    y = y[:, None] if y.ndim == 1 else y
    n = kb.shape[0]
    mu_game = hyper.mu / n**2
    top = np.hstack([kf @ kb / n, -2.0 * hyper.lam / n * kf @ kf - 2.0 * hyper.xi * kf])
    bottom = np.hstack([2.0 * mu_game * kb, kb @ kf / n])
    lhs = np.vstack([top, bottom])
    rhs = np.vstack([kf @ y / n, np.zeros_like(y)])
    sol = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    return sol[:n]
