"""Online hyperparameter adaptation by conjugate-gradient likelihood ascent.

Search directions follow Polak-Ribiere,

    beta_k = g_k^T (g_k - g_{k-1}) / ||g_{k-1}||^2,   d_k = g_k + beta_k d_{k-1}

restarting to steepest ascent whenever beta < 0 or the direction stops
being an ascent direction. Steps are chosen by Armijo backtracking with a
one-shot secant polish on the directional derivative, which makes the line
search exact on quadratics (textbook CG termination) while every accepted
step still satisfies the Armijo condition, so objective traces are
monotone by construction.

Gaussian hyperpriors, when given, correct the objective and its
derivatives in log-domain. One optimize call runs per scanned line within
the backward-scan compute budget; a wall-clock budget (when set) is
enforced at function-evaluation granularity and exhaustion falls back to
the best iterate seen, never worse than the start.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .core import Dataset
from . import gp_exact, sparse_fitc, sparse_kron, sparse_ssgpr
from . import kernels
from .kernels import SE_ARD, SE_ISO, HyperParams


class OptimizeError(RuntimeError):
    """The objective could not be evaluated at the starting point."""


@dataclass(frozen=True)
class OptimizerConfig:
    max_cg_iters: int = 20
    armijo_c: float = 1e-4
    backtrack_shrink: float = 0.5
    max_backtracks: int = 12
    grad_tol: float = 1e-6
    wall_budget_s: Optional[float] = None

    def __post_init__(self):
        if (self.max_cg_iters < 0 or not 0 < self.armijo_c < 1
                or not 0 < self.backtrack_shrink < 1 or self.max_backtracks < 1
                or self.grad_tol <= 0):
            raise ValueError("invalid optimizer configuration")
        if self.wall_budget_s is not None and self.wall_budget_s < 0:
            raise ValueError("wall-clock budget must be nonnegative")


@dataclass(frozen=True)
class HyperPrior:
    """Independent Gaussian priors on named log-domain parameters."""

    means: dict
    variances: dict

    def __post_init__(self):
        if any(v <= 0 for v in self.variances.values()):
            raise ValueError("prior variances must be positive")
        if set(self.means) != set(self.variances):
            raise ValueError("prior means and variances name different parameters")

    def log_density_and_grad(self, names, x: np.ndarray):
        logp = 0.0
        grad = np.zeros_like(x)
        for k, name in enumerate(names):
            if name in self.means:
                mu, var = self.means[name], self.variances[name]
                logp += -0.5 * (x[k] - mu) ** 2 / var \
                    - 0.5 * math.log(2.0 * math.pi * var)
                grad[k] = -(x[k] - mu) / var
        return logp, grad


class _BudgetExceeded(Exception):
    pass


def _finite(f, g) -> bool:
    return math.isfinite(f) and np.all(np.isfinite(g))


def maximize(fg: Callable, x0: np.ndarray, cfg: OptimizerConfig,
             callback: Optional[Callable] = None):
    """Polak-Ribiere CG ascent of fg(x) -> (value, gradient).

    Returns (x_best, f_best, n_iters). Failed evaluations at trial points
    just shrink the step; a failure at x0 raises OptimizeError.
    """
    deadline = None
    if cfg.wall_budget_s is not None:
        deadline = time.perf_counter() + cfg.wall_budget_s

    def eval_point(x):
        if deadline is not None and time.perf_counter() >= deadline:
            raise _BudgetExceeded
        try:
            with np.errstate(all="ignore"):
                f, g = fg(x)
        except (FloatingPointError, OverflowError, np.linalg.LinAlgError,
                gp_exact.FitError, ValueError):
            return -math.inf, None
        if not _finite(f, np.asarray(g)):
            return -math.inf, None
        return float(f), np.asarray(g, dtype=float)

    x = np.asarray(x0, dtype=float).copy()
    try:
        f, g = eval_point(x)
    except _BudgetExceeded:
        f, g = -math.inf, None
    if g is None:
        raise OptimizeError("objective evaluation failed at the initial point")
    if callback is not None:
        callback(f)

    d = g.copy()
    iters = 0
    try:
        for _ in range(cfg.max_cg_iters):
            gnorm = float(np.linalg.norm(g))
            if gnorm < cfg.grad_tol:
                break
            dg = float(g @ d)
            if dg <= 0.0:        # not an ascent direction: restart
                d = g.copy()
                dg = gnorm ** 2
            step = _line_search(eval_point, x, f, d, dg, cfg)
            if step is None:
                break
            t, x_new, f_new, g_new = step
            beta = float(g_new @ (g_new - g)) / gnorm ** 2
            d = g_new + beta * d if beta > 0.0 else g_new.copy()
            x, f, g = x_new, f_new, g_new
            iters += 1
            if callback is not None:
                callback(f)
    except _BudgetExceeded:
        pass
    return x, f, iters


def _line_search(eval_point, x, f0, d, dg0, cfg: OptimizerConfig):
    """Backtracking Armijo search along d, then one secant polish on the
    directional derivative. Returns (t, x, f, g) or None."""
    c = cfg.armijo_c
    # first trial moves at most one unit per (log-domain) coordinate
    dmax = float(np.max(np.abs(d)))
    t = min(1.0, 1.0 / dmax) if dmax > 0 else 1.0
    for _ in range(cfg.max_backtracks):
        f1, g1 = eval_point(x + t * d)
        if g1 is not None and f1 >= f0 + c * t * dg0:
            best = (t, x + t * d, f1, g1)
            dg1 = float(g1 @ d)
            denom = dg0 - dg1
            if denom > 0.0:
                t2 = t * dg0 / denom     # exact 1-d maximizer on a quadratic
                if 0.0 < t2 <= 1e3 * t and abs(t2 - t) > 1e-12 * max(t, t2):
                    f2, g2 = eval_point(x + t2 * d)
                    if (g2 is not None and f2 >= f1
                            and f2 >= f0 + c * t2 * dg0):
                        best = (t2, x + t2 * d, f2, g2)
            return best
        t *= cfg.backtrack_shrink
    return None


# ---------------------------------------------------------------------------
# Model adapters: pack/unpack HyperParams to flat vectors and build the
# objective for each approximation.
# ---------------------------------------------------------------------------

def _exact_kind(h: HyperParams) -> str:
    return SE_ARD if h.log_lengths.shape[0] == 2 else SE_ISO


def _pack_exact(h: HyperParams):
    names = gp_exact.param_names(_exact_kind(h))
    x = np.concatenate([[h.mean_c, h.log_sigma_f], h.log_lengths,
                        [h.log_sigma_n]])
    return x, names


def _unpack_exact(x, h: HyperParams) -> HyperParams:
    nell = h.log_lengths.shape[0]
    return h.replace(mean_c=float(x[0]), log_sigma_f=float(x[1]),
                     log_lengths=x[2:2 + nell].copy(),
                     log_sigma_n=float(x[2 + nell]))


def _fg_exact(h: HyperParams, data: Dataset):
    kind = _exact_kind(h)

    def fg(x):
        state = gp_exact.fit(kind, _unpack_exact(x, h), data)
        return gp_exact.log_likelihood(state), gp_exact.grad_log_likelihood(state)
    return fg


def _pack_fitc(h: HyperParams):
    m = np.atleast_2d(h.extras).shape[0]
    x = np.concatenate([[h.mean_c, h.log_sigma_f, h.log_lengths[0],
                         h.log_sigma_n], np.asarray(h.extras).ravel()])
    return x, sparse_fitc.param_names_fitc(m)


def _unpack_fitc(x, h: HyperParams) -> HyperParams:
    return h.replace(mean_c=float(x[0]), log_sigma_f=float(x[1]),
                     log_lengths=np.array([x[2]]), log_sigma_n=float(x[3]),
                     extras=x[4:].reshape(-1, 2).copy())


def _fg_fitc(h: HyperParams, data: Dataset):
    def fg(x):
        state = sparse_fitc.fitc_fit(_unpack_fitc(x, h), data)
        return (sparse_fitc.fitc_log_likelihood(state),
                sparse_fitc.fitc_grad_log_likelihood(state))
    return fg


def _pack_ssgpr(h: HyperParams):
    m = np.atleast_2d(h.extras).shape[0]
    x = np.concatenate([[h.mean_c, h.log_sigma_f, h.log_sigma_n],
                        np.asarray(h.extras).ravel()])
    return x, sparse_ssgpr.param_names_ssgpr(m)


def _unpack_ssgpr(x, h: HyperParams) -> HyperParams:
    return h.replace(mean_c=float(x[0]), log_sigma_f=float(x[1]),
                     log_sigma_n=float(x[2]), extras=x[3:].reshape(-1, 2).copy())


def _fg_ssgpr(h: HyperParams, data: Dataset):
    def fg(x):
        state = sparse_ssgpr.ssgpr_fit(_unpack_ssgpr(x, h), data)
        return (sparse_ssgpr.ssgpr_log_likelihood(state),
                sparse_ssgpr.ssgpr_grad_log_likelihood(state))
    return fg


def _pack_kron(h: HyperParams):
    log_sf, log_len = sparse_kron.split_params(h)
    x = np.concatenate([[h.mean_c], log_sf, log_len, [h.log_sigma_n]])
    return x, sparse_kron.PARAM_NAMES_KRON


def _unpack_kron(x, h: HyperParams) -> HyperParams:
    h2 = sparse_kron.merge_params(h, x[1:3], x[3:5])
    return h2.replace(mean_c=float(x[0]), log_sigma_n=float(x[5]))


def _fg_kron(h: HyperParams, data: Dataset):
    def fg(x):
        factors = sparse_kron.kron_fit(_unpack_kron(x, h), data)
        return (sparse_kron.kron_log_likelihood(factors),
                sparse_kron.kron_grad_log_likelihood(factors))
    return fg


_ADAPTERS = {
    "exact": (_pack_exact, _unpack_exact, _fg_exact),
    "fitc": (_pack_fitc, _unpack_fitc, _fg_fitc),
    "ssgpr": (_pack_ssgpr, _unpack_ssgpr, _fg_ssgpr),
    "kron": (_pack_kron, _unpack_kron, _fg_kron),
}


def optimize(model_kind: str, h0: HyperParams, data: Dataset,
             cfg: OptimizerConfig, priors: Optional[HyperPrior] = None,
             callback: Optional[Callable] = None) -> HyperParams:
    """Maximize the model's log likelihood (plus log prior densities when
    given) starting from h0. The returned parameters never score worse
    than h0; positivity is guaranteed by log-domain storage."""
    if len(data) == 0:
        raise ValueError("cannot optimize hyperparameters on empty data")
    pack, unpack, fg_factory = _ADAPTERS[model_kind]
    x0, names = pack(h0)
    fg = fg_factory(h0, data)
    if priors is not None:
        base = fg

        def fg(x):  # noqa: F811  (objective with prior correction)
            f, g = base(x)
            lp, gp = priors.log_density_and_grad(names, x)
            return f + lp, g + gp
    x_best, _, _ = maximize(fg, x0, cfg, callback=callback)
    return unpack(x_best, h0)


def per_line_adapt(model_kind: str, h: HyperParams, window: Dataset,
                   cfg: OptimizerConfig, budget_s: Optional[float] = None,
                   priors: Optional[HyperPrior] = None,
                   callback: Optional[Callable] = None) -> HyperParams:
    """One optimize call on the active window, run inside the backward-scan
    slot. Always returns a usable theta: a zero budget or a failing start
    falls back to the previous estimate."""
    if budget_s is not None:
        if budget_s <= 0.0:
            return h
        wall = cfg.wall_budget_s
        wall = budget_s if wall is None else min(wall, budget_s)
        cfg = replace(cfg, wall_budget_s=wall)
    try:
        return optimize(model_kind, h, window, cfg, priors=priors,
                        callback=callback)
    except OptimizeError:
        return h


def initial_hyperparams(first_line_targets, pitches, kind: str = SE_ARD,
                        ) -> HyperParams:
    """Data-driven starting point for a fresh scan: mean and signal scale
    from the first tracked line, length scales at five pixel pitches,
    noise at 1% of the signal scale."""
    t = np.asarray(first_line_targets, dtype=float)
    pitches = np.atleast_1d(np.asarray(pitches, dtype=float))
    c = float(np.mean(t))
    sigma_f = max(float(np.std(t)), 1e-3)
    if kind == SE_ARD:
        if pitches.shape[0] == 1:
            pitches = np.full(2, pitches[0])
        log_lengths = np.log(5.0 * pitches)
    else:
        log_lengths = np.array([np.log(5.0 * pitches[0])])
    return HyperParams(mean_c=c, log_sigma_f=math.log(sigma_f),
                       log_lengths=log_lengths,
                       log_sigma_n=math.log(0.01 * sigma_f))
