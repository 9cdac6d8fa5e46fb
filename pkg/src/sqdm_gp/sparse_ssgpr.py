"""Sparse Spectrum GP Regression: trigonometric Bayesian linear regression.

The latent function is modeled as

    f(x) = sum_r a_r cos(2 pi s_r^T x) + b_r sin(2 pi s_r^T x),
    a_r, b_r ~ N(0, sigma_f^2 / m)

which is a GP with the stationary kernel
(sigma_f^2 / m) sum_r cos(2 pi s_r^T (x - x')). Inference runs in the
2m-dimensional feature space at O(n m^2): with design matrix Phi (n x 2m),
prior weight variance p = sigma_f^2 / m and

    A = Phi^T Phi + (sigma_n^2 / p) I

the weight posterior is N(A^-1 Phi^T y0, sigma_n^2 A^-1). Spectral
frequencies are covariance hyperparameters, optimized by likelihood ascent
like everything else. Frequencies initialize as seeded quasi-random draws
from the SE kernel's spectral density N(0, (2 pi l)^-2 I).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.stats import norm, qmc

from .core import Dataset
from .gp_exact import GpPosterior, LOG_2PI, _clamp_small_negatives
from .kernels import HyperParams, mean_eval, se_spectral_frequency_std


def param_names_ssgpr(m: int) -> tuple[str, ...]:
    names = ["mean_c", "log_sigma_f", "log_sigma_n"]
    for r in range(m):
        names += [f"freq_{r}_x", f"freq_{r}_y"]
    return tuple(names)


def init_frequencies(m: int, lengths, seed: int = 0) -> np.ndarray:
    """Seeded scrambled-Halton draws from N(0, diag(1/(2 pi l))^2), (m, 2)."""
    lengths = np.atleast_1d(np.asarray(lengths, dtype=float))
    if lengths.shape[0] == 1:
        lengths = np.full(2, lengths[0])
    std = se_spectral_frequency_std(lengths)
    sampler = qmc.Halton(d=2, scramble=True, seed=seed)
    u = sampler.random(m)
    return norm.ppf(u) * std[None, :]


@dataclass(frozen=True)
class SsgprState:
    hyper: HyperParams       # extras holds the spectral frequencies (m, 2)
    inputs: np.ndarray
    targets: np.ndarray
    y0: np.ndarray
    freqs: np.ndarray        # (m, 2), units 1/nm
    phi: np.ndarray          # (n, 2m) design matrix [cos block | sin block]
    R: np.ndarray            # upper Cholesky of A = Phi^T Phi + (sn^2/p) I
    mu: np.ndarray           # (2m,) posterior weight mean

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def m(self) -> int:
        return self.freqs.shape[0]

    @property
    def prior_weight_var(self) -> float:
        return self.hyper.sigma_f ** 2 / self.m

    @property
    def noise_var(self) -> float:
        """Effective noise: sigma_n^2 plus the shared self-matrix jitter, so
        the weight-space model matches the function-space kernel + jitter."""
        return self.hyper.sigma_n ** 2 + self.hyper.jitter


def _design(freqs: np.ndarray, X: np.ndarray) -> np.ndarray:
    phase = 2.0 * np.pi * (X @ freqs.T)          # (n, m)
    return np.hstack([np.cos(phase), np.sin(phase)])


def ssgpr_fit(h: HyperParams, data: Dataset) -> SsgprState:
    """Bayesian linear regression on the trigonometric features; always
    well posed because the regularized Gram matrix is positive definite."""
    if h.extras is None:
        raise ValueError("SSGPR needs spectral frequencies in HyperParams.extras")
    S = np.atleast_2d(np.asarray(h.extras, dtype=float))
    m = S.shape[0]
    X = data.inputs
    y0 = data.targets - mean_eval(h, X)
    phi = _design(S, X)
    p = h.sigma_f ** 2 / m
    sn2 = h.sigma_n ** 2 + h.jitter
    A = phi.T @ phi + (sn2 / p) * np.eye(2 * m)
    R = cholesky(A, lower=False)
    b = phi.T @ y0
    mu = solve_triangular(R, solve_triangular(R.T, b, lower=True), lower=False)
    return SsgprState(h, X, data.targets, y0, S, phi, R, mu)


def ssgpr_predict(state: SsgprState, test) -> GpPosterior:
    """Latent (noise-free) posterior: mean c + phi* mu, covariance
    phi* S phi*^T with weight posterior covariance S = noise_var A^-1."""
    Xs = np.atleast_2d(np.asarray(test, dtype=float))
    phis = _design(state.freqs, Xs)
    mean = mean_eval(state.hyper, Xs) + phis @ state.mu
    half = solve_triangular(state.R.T, phis.T, lower=True)   # (2m, t)
    cov = state.noise_var * (half.T @ half)
    return GpPosterior(mean, _clamp_small_negatives(cov))


def ssgpr_log_likelihood(state: SsgprState) -> float:
    """Marginal log density of y under sigma_f^2/m Phi Phi^T + noise_var I,
    evaluated in weight space via the determinant lemma."""
    n, m = state.n, state.m
    sn2 = state.noise_var
    p = state.prior_weight_var
    quad = (state.y0 @ state.y0 - state.mu @ (state.phi.T @ state.y0)) / sn2
    logdet = ((n - 2 * m) * np.log(sn2) + 2 * m * np.log(p)
              + 2.0 * float(np.sum(np.log(np.diag(state.R)))))
    return float(-0.5 * quad - 0.5 * logdet - 0.5 * n * LOG_2PI)


def ssgpr_grad_log_likelihood(state: SsgprState) -> np.ndarray:
    """Gradient over (mean_c, log sigma_f, log sigma_n, all 2m frequency
    coordinates), order param_names_ssgpr(m).

    Weight-space identities: with A = Phi^T Phi + (s/p) I, mu = A^-1 b,
    s the effective noise and residual e = (y0 - Phi mu)/s, a parameter
    touching Phi contributes

        dL = e^T dPhi mu - tr(A^-1 Phi^T dPhi)

    and dPhi/ds_rd only involves the cos/sin columns of frequency r.
    sigma_f moves both the weight prior p and (through the jitter) s, so
    both partials are chained.
    """
    h = state.hyper
    n, m = state.n, state.m
    s = state.noise_var
    p = state.prior_weight_var
    phi, mu, R = state.phi, state.mu, state.R
    y0 = state.y0

    e = (y0 - phi @ mu) / s
    quad = float((y0 @ y0 - mu @ (phi.T @ y0)) / s)   # y0^T G^-1 y0
    mumu = float(mu @ mu)

    ident = np.eye(2 * m)
    Ainv = solve_triangular(R, solve_triangular(R.T, ident, lower=True),
                            lower=False)
    trAinv = float(np.trace(Ainv))

    dLds = (0.5 * quad / s - 0.5 * mumu / (s * p)
            - 0.5 * (n - 2 * m) / s - 0.5 * trAinv / p)
    dLdp = 0.5 * mumu / p ** 2 - m / p + 0.5 * s * trAinv / p ** 2
    grads = {
        "mean_c": float(np.sum(e)),
        "log_sigma_f": 2.0 * p * dLdp + 2.0 * h.jitter * dLds,
        "log_sigma_n": 2.0 * h.sigma_n ** 2 * dLds,
    }

    # frequency coordinates: dPhi[:, r] = -2 pi x_d o sin_r,
    # dPhi[:, m+r] = +2 pi x_d o cos_r
    cosb, sinb = phi[:, :m], phi[:, m:]
    mu_c, mu_s = mu[:m], mu[m:]
    AiPhiT = Ainv @ phi.T                                     # (2m, n)
    grad_S = np.empty((m, 2))
    for d in range(2):
        xd = state.inputs[:, d]
        xe = xd * e
        quad_term = 2.0 * np.pi * (-mu_c * (sinb.T @ xe) + mu_s * (cosb.T @ xe))
        S1 = AiPhiT @ (xd[:, None] * sinb)                    # (2m, m)
        S2 = AiPhiT @ (xd[:, None] * cosb)
        idx = np.arange(m)
        trace_term = 2.0 * np.pi * (S1[idx, idx] - S2[m + idx, idx])
        grad_S[:, d] = quad_term + trace_term
    head = [grads[name] for name in ("mean_c", "log_sigma_f", "log_sigma_n")]
    return np.concatenate([np.array(head), grad_S.ravel()])
