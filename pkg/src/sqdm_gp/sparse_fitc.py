"""Fully Independent Training Conditional approximation.

A pseudo data set of m inducing inputs I explains the n training points.
With B = K(X, I), K_I = K(I, I) and Q = B K_I^-1 B^T,

    Lambda = diag[Ky - Q] = k_diag - diag(Q) + sigma_n^2
    Sigma  = [K_I + B^T Lambda^-1 B]^-1

    mean(X*) = m(X*) + K(X*, I) Sigma B^T Lambda^-1 y0
    cov(X*)  = K* - Q* + K(X*, I) Sigma K(I, X*)

The training marginal is y ~ N(m(X), Q + Lambda), whose log density and
analytic gradient (kernel parameters, noise, mean, and all 2m inducing
coordinates) are computed in O(n m^2) via the Woodbury identity; no n x n
matrix is ever formed. Inducing inputs count as covariance hyperparameters
and are optimized jointly with theta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from .core import Dataset
from .gp_exact import FitError, GpPosterior, LOG_2PI, _clamp_small_negatives
from . import kernels
from .kernels import SE_ISO, HyperParams, kernel_diag, kernel_matrix, mean_eval

LAMBDA_FLOOR_REL = 1e-10  # Lambda entries floored at this times sigma_f^2


def param_names_fitc(m: int) -> tuple[str, ...]:
    names = ["mean_c", "log_sigma_f", "log_len", "log_sigma_n"]
    for b in range(m):
        names += [f"inducing_{b}_x", f"inducing_{b}_y"]
    return tuple(names)


def inducing_subgrid(inputs: np.ndarray, fraction: float = 1.0 / 3.0) -> np.ndarray:
    """Deterministic inducing initialization: every third point of the
    active window in raster order (ceil(n * fraction) points)."""
    n = inputs.shape[0]
    stride = max(1, int(round(1.0 / fraction)))
    return inputs[::stride].copy()


@dataclass(frozen=True)
class FitcState:
    hyper: HyperParams           # extras holds the inducing inputs (m, 2)
    inputs: np.ndarray
    targets: np.ndarray
    y0: np.ndarray
    inducing: np.ndarray
    L_KI: np.ndarray             # lower Cholesky factor of K_I + jitter
    V: np.ndarray                # L_KI^-1 K(I, X), (m, n)
    lam: np.ndarray              # Lambda diagonal, (n,)
    L_A: np.ndarray              # lower Cholesky of A = I_m + V Lam^-1 V^T
    gamma: np.ndarray            # Sigma K(I,X) Lam^-1 y0, (m,) mean weights
    r: np.ndarray                # (Q + Lambda)^-1 y0, (n,)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def m(self) -> int:
        return self.inducing.shape[0]


def _chol_lower(M: np.ndarray, what: str) -> np.ndarray:
    try:
        return cholesky(M, lower=True)
    except LinAlgError as exc:
        emin = float(np.linalg.eigvalsh(M).min())
        raise FitError(f"{what} factorization failed "
                       f"(smallest eigenvalue estimate {emin:.3e})") from exc


def fitc_fit(h: HyperParams, data: Dataset) -> FitcState:
    """Factorize the FITC model; O(n m^2)."""
    if h.extras is None:
        raise ValueError("FITC needs inducing inputs in HyperParams.extras")
    I = np.atleast_2d(np.asarray(h.extras, dtype=float))
    X = data.inputs
    y = data.targets
    n, m = X.shape[0], I.shape[0]
    if n < 1 or m < 1:
        raise ValueError("FITC needs at least one training and inducing point")
    sf2 = h.sigma_f ** 2
    KI = kernel_matrix(SE_ISO, h, I, I)
    KI[np.arange(m), np.arange(m)] += h.jitter
    L_KI = _chol_lower(KI, "inducing matrix K_I")
    B = kernel_matrix(SE_ISO, h, X, I)
    V = solve_triangular(L_KI, B.T, lower=True)          # (m, n)
    qdiag = np.sum(V ** 2, axis=0)
    lam = kernel_diag(SE_ISO, h, X) - qdiag + h.sigma_n ** 2
    lam = np.maximum(lam, LAMBDA_FLOOR_REL * sf2)
    Vl = V / lam[None, :]
    A = np.eye(m) + Vl @ V.T
    L_A = _chol_lower(A, "FITC system matrix")
    y0 = y - mean_eval(h, X)
    u = Vl @ y0
    w = solve_triangular(L_A, u, lower=True)
    w = solve_triangular(L_A.T, w, lower=False)          # A^-1 u
    r = y0 / lam - (V.T @ w) / lam
    gamma = solve_triangular(L_KI.T, w, lower=False)     # Sigma K(I,X) Lam^-1 y0
    return FitcState(h, X, y, y0, I, L_KI, V, lam, L_A, gamma, r)


def fitc_predict(state: FitcState, test) -> GpPosterior:
    Xs = np.atleast_2d(np.asarray(test, dtype=float))
    h = state.hyper
    Ks = kernel_matrix(SE_ISO, h, Xs, state.inducing)    # (t, m)
    mean = mean_eval(h, Xs) + Ks @ state.gamma
    Vs = solve_triangular(state.L_KI, Ks.T, lower=True)  # (m, t)
    Ws = solve_triangular(state.L_A, Vs, lower=True)
    Kss = kernel_matrix(SE_ISO, h, Xs, Xs)
    cov = Kss - Vs.T @ Vs + Ws.T @ Ws
    return GpPosterior(mean, _clamp_small_negatives(cov))


def fitc_log_likelihood(state: FitcState) -> float:
    """log N(y | m(X), Q + Lambda)."""
    logdet = (float(np.sum(np.log(state.lam)))
              + 2.0 * float(np.sum(np.log(np.diag(state.L_A)))))
    return float(-0.5 * state.y0 @ state.r - 0.5 * logdet
                 - 0.5 * state.n * LOG_2PI)


def fitc_grad_log_likelihood(state: FitcState) -> np.ndarray:
    """Gradient of the FITC log likelihood, order param_names_fitc(m).

    With G = Q + Lambda, r = G^-1 y0 and W = G^-1 - r r^T,

        dL/dtheta = -1/2 [ 2 sum(Bdot o W Pt) - sum(M1 o KIdot)
                           + Wdiag . dLambda ]

    where Pt = B K_I^-1 and M1 = Pt^T W Pt. For an inducing coordinate the
    kernel derivatives touch a single column of B and a single row/column
    of K_I, which vectorizes over all m coordinates per input dimension.
    """
    h = state.hyper
    X, I = state.inputs, state.inducing
    n, m = state.n, state.m
    lam, V, L_A, r = state.lam, state.V, state.L_A, state.r
    ell = h.lengths[0]
    sf2 = h.sigma_f ** 2
    sn2 = h.sigma_n ** 2

    B = kernel_matrix(SE_ISO, h, X, I)
    Pt = solve_triangular(state.L_KI.T, V, lower=False).T          # (n, m)
    KI = kernel_matrix(SE_ISO, h, I, I)

    # diag(G^-1) and G^-1 Pt via Woodbury
    T = solve_triangular(L_A, V / lam[None, :], lower=True)        # (m, n)
    ginv_diag = 1.0 / lam - np.sum(T ** 2, axis=0)
    Wdiag = ginv_diag - r ** 2
    GiPt = Pt / lam[:, None] - T.T @ (T @ Pt)                      # (n, m)
    WPt = GiPt - np.outer(r, r @ Pt)
    M1 = Pt.T @ WPt                                                # (m, m)

    def scalar_term(Bdot, KIdot, dknn):
        t1 = 2.0 * float(np.sum(Bdot * WPt))
        t2 = -float(np.sum(M1 * KIdot))
        dqnn = (2.0 * np.sum(Bdot * Pt, axis=1)
                - np.sum((Pt @ KIdot) * Pt, axis=1))
        return -0.5 * (t1 + t2 + float(Wdiag @ (dknn - dqnn)))

    grads = {"mean_c": float(np.sum(r))}
    grads["log_sigma_f"] = scalar_term(2.0 * B, 2.0 * KI,
                                       np.full(n, 2.0 * sf2))
    D2nm = kernels.scaled_sqdist(X, I, np.ones(2))
    D2mm = kernels.scaled_sqdist(I, I, np.ones(2))
    grads["log_len"] = scalar_term(B * D2nm / ell ** 2,
                                   KI * D2mm / ell ** 2, np.zeros(n))
    grads["log_sigma_n"] = -0.5 * float(Wdiag.sum()) * 2.0 * sn2

    # inducing coordinates, vectorized over all m per input dimension
    grad_I = np.empty((m, 2))
    for d in range(2):
        Ad = (X[:, d][:, None] - I[:, d][None, :]) / ell ** 2      # (n, m)
        Amd = (I[:, d][:, None] - I[:, d][None, :]) / ell ** 2     # (m, m)
        KX = KI * Amd
        t1 = 2.0 * np.sum(B * Ad * WPt, axis=0)
        t2 = -2.0 * np.sum(M1 * KX, axis=0)
        PtKX = Pt @ KX
        dqnn_w = (2.0 * np.sum(Wdiag[:, None] * B * Ad * Pt, axis=0)
                  - 2.0 * np.sum(Wdiag[:, None] * Pt * PtKX, axis=0))
        grad_I[:, d] = -0.5 * (t1 + t2 - dqnn_w)

    head = [grads[name] for name in
            ("mean_c", "log_sigma_f", "log_len", "log_sigma_n")]
    return np.concatenate([np.array(head), grad_I.ravel()])
