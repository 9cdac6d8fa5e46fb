"""Dense Gaussian process inference.

Posterior mean/covariance by conditioning on training data,

    mean = m(X*) + K(X*, X) Ky^-1 (y - m(X)),   Ky = K(X, X) + sigma_n^2 I
    cov  = K(X*, X*) - K(X*, X) Ky^-1 K(X, X*)

plus the log marginal likelihood

    log p(y | X, theta) = -1/2 y0^T Ky^-1 y0 - 1/2 ln|Ky| - n/2 ln(2 pi)

and its analytic gradient. Ky is Cholesky-factorized once per fit; the
explicit inverse is never formed. Used directly by the subset-of-data
approximation and as the correctness oracle for every sparse method.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .core import Dataset, _frozen_array
from . import kernels
from .kernels import HyperParams, kernel_grad, kernel_matrix, mean_eval

LOG_2PI = float(np.log(2.0 * np.pi))

# Canonical parameter ordering used by the optimizer, per kernel kind.
PARAM_NAMES = {
    kernels.SE_ISO: ("mean_c", "log_sigma_f", "log_len", "log_sigma_n"),
    kernels.SE_ARD: ("mean_c", "log_sigma_f", "log_len_x", "log_len_y",
                     "log_sigma_n"),
    kernels.SPARSE_SPECTRUM: ("mean_c", "log_sigma_f", "log_sigma_n"),
}


class FitError(RuntimeError):
    """Kernel matrix factorization failed."""


@dataclass(frozen=True)
class GpPosterior:
    """Posterior mean vector and full covariance at the test inputs."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _frozen_array(self.mean, ndim=1)
        cov = _frozen_array(self.cov, ndim=2)
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError("covariance shape does not match mean length")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def variance(self) -> np.ndarray:
        """Diagonal of cov with tiny negative round-off clamped to zero."""
        var = np.diag(self.cov).copy()
        var[(var < 0.0) & (var > -1e-8)] = 0.0
        return var


def _clamp_small_negatives(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    d = np.einsum("ii->i", cov)
    tiny = (d < 0.0) & (d > -1e-8)
    if tiny.any():
        d[tiny] = 0.0
    return cov


@dataclass(frozen=True)
class FitState:
    """Cached factorization of Ky plus alpha = Ky^-1 (y - m)."""

    kind: str
    hyper: HyperParams
    inputs: np.ndarray
    targets: np.ndarray
    y0: np.ndarray
    chol: object              # (c, lower) from cho_factor; None when n = 0
    alpha: np.ndarray

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def _factorize(Ky: np.ndarray):
    try:
        return cho_factor(Ky, lower=True)
    except LinAlgError as exc:
        emin = float(np.linalg.eigvalsh(Ky).min())
        raise FitError(
            f"kernel matrix not positive definite "
            f"(smallest eigenvalue estimate {emin:.3e})") from exc


def fit(kind: str, h: HyperParams, data: Dataset) -> FitState:
    """Condition the prior on ``data``. O(n^3); duplicates are fine because
    noise plus jitter keeps Ky positive definite."""
    X = data.inputs
    y = data.targets
    n = X.shape[0]
    if n == 0:
        return FitState(kind, h, X, y, y.copy(), None, np.empty(0))
    y0 = y - mean_eval(h, X)
    Ky = kernel_matrix(kind, h, X, X)
    idx = np.arange(n)
    Ky[idx, idx] += h.sigma_n ** 2 + h.jitter
    chol = _factorize(Ky)
    alpha = cho_solve(chol, y0)
    return FitState(kind, h, X, y, y0, chol, alpha)


def predict(state: FitState, test) -> GpPosterior:
    """Posterior mean and covariance at the test inputs; the prior when n = 0."""
    Xs = kernels._as_inputs(test)
    h = state.hyper
    Kss = kernel_matrix(state.kind, h, Xs, Xs)
    ms = mean_eval(h, Xs)
    if state.n == 0:
        return GpPosterior(ms, _clamp_small_negatives(Kss))
    Ks = kernel_matrix(state.kind, h, Xs, state.inputs)
    mean = ms + Ks @ state.alpha
    v = cho_solve(state.chol, Ks.T)
    cov = Kss - Ks @ v
    return GpPosterior(mean, _clamp_small_negatives(cov))


def log_likelihood(state: FitState) -> float:
    if state.n == 0:
        return 0.0
    c, _ = state.chol
    halflogdet = float(np.sum(np.log(np.diag(c))))
    return float(-0.5 * state.y0 @ state.alpha - halflogdet
                 - 0.5 * state.n * LOG_2PI)


def grad_log_likelihood(state: FitState) -> np.ndarray:
    """Gradient w.r.t. (mean_c, kernel log-parameters, log_sigma_n).

    Uses the trace identity
        dL/dtheta = 1/2 tr((alpha alpha^T - Ky^-1) dK/dtheta)
    and dL/dc = 1^T alpha. Order follows PARAM_NAMES[state.kind].
    """
    names = PARAM_NAMES[state.kind]
    if state.n == 0:
        return np.zeros(len(names))
    n = state.n
    Kinv = cho_solve(state.chol, np.eye(n))
    A = np.outer(state.alpha, state.alpha) - Kinv
    grads = {"mean_c": float(np.sum(state.alpha))}
    for name, dK in kernel_grad(state.kind, state.hyper,
                                state.inputs, state.inputs).items():
        grads[name] = 0.5 * float(np.sum(A * dK))
    sn2 = state.hyper.sigma_n ** 2
    grads["log_sigma_n"] = sn2 * float(np.trace(A))
    return np.array([grads[name] for name in names])


def param_names(kind: str) -> tuple[str, ...]:
    return PARAM_NAMES[kind]
