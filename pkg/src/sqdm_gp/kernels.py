"""Mean and covariance functions with log-domain hyperparameters.

Squared exponential kernel, isotropic or per-dimension (ARD):

    k(p, q) = sigma_f^2 exp(-1/2 (p - q)^T M (p - q)),
    M = l^-2 I (iso) or diag(l)^-2 (ARD)

Trigonometric sparse-spectrum kernel over m frequency vectors s_r:

    k(p, q) = sigma_f^2 / m * sum_r cos(2 pi s_r^T (p - q))

Positive hyperparameters are stored as logs so gradient ascent is
unconstrained. Analytic kernel gradients are returned w.r.t. the
log-domain parameters (chain rule applied).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import _frozen_array

SE_ISO = "se-iso"
SE_ARD = "se-ard"
SPARSE_SPECTRUM = "sparse-spectrum"
KERNEL_KINDS = (SE_ISO, SE_ARD, SPARSE_SPECTRUM)

# Relative jitter added to every kernel self-matrix before factorization.
JITTER_REL = 1e-10


@dataclass(frozen=True)
class HyperParams:
    """All learnable quantities of one GP model.

    extras is a method-specific block: FITC inducing inputs (m, 2),
    SSGPR spectral frequencies (m, 2) in 1/nm, or per-axis log signal
    amplitudes (2,) for the Kronecker product kernel.
    """

    mean_c: float
    log_sigma_f: float
    log_lengths: np.ndarray  # (1,) iso, (2,) ARD
    log_sigma_n: float
    extras: Optional[np.ndarray] = None

    def __post_init__(self):
        lengths = np.atleast_1d(np.asarray(self.log_lengths, dtype=float))
        if lengths.shape[0] not in (1, 2):
            raise ValueError("log_lengths must hold 1 (iso) or 2 (ARD) entries")
        object.__setattr__(self, "log_lengths", _frozen_array(lengths, ndim=1))
        if self.extras is not None:
            object.__setattr__(self, "extras", _frozen_array(self.extras))

    @property
    def sigma_f(self) -> float:
        return float(np.exp(self.log_sigma_f))

    @property
    def sigma_n(self) -> float:
        return float(np.exp(self.log_sigma_n))

    @property
    def lengths(self) -> np.ndarray:
        return np.exp(self.log_lengths)

    @property
    def jitter(self) -> float:
        return JITTER_REL * self.sigma_f ** 2

    def replace(self, **kw) -> "HyperParams":
        return replace(self, **kw)


def lengths_for(kind: str, h: HyperParams) -> np.ndarray:
    """Per-dimension length scales as a (2,) vector."""
    ell = h.lengths
    if kind == SE_ARD:
        if ell.shape[0] != 2:
            raise ValueError("SE-ARD needs one length per input dimension")
        return ell
    return np.full(2, ell[0])


def mean_eval(h: HyperParams, inputs: np.ndarray) -> np.ndarray:
    """Constant mean function evaluated at each input."""
    n = np.atleast_2d(np.asarray(inputs, dtype=float)).shape[0]
    if np.asarray(inputs).size == 0:
        n = 0
    return np.full(n, h.mean_c)


def _as_inputs(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return A.reshape(0, 2)
    A = np.atleast_2d(A)
    if A.shape[1] != 2:
        raise ValueError(f"inputs must be 2-vectors, got shape {A.shape}")
    return A


def scaled_sqdist(A: np.ndarray, B: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Squared distances with per-dimension scaling, (p-q)^T M (p-q)."""
    As = A / lengths
    Bs = B / lengths
    d2 = (np.sum(As ** 2, axis=1)[:, None]
          + np.sum(Bs ** 2, axis=1)[None, :]
          - 2.0 * As @ Bs.T)
    return np.maximum(d2, 0.0)


def kernel_matrix(kind: str, h: HyperParams, A, B) -> np.ndarray:
    """Cross-covariance matrix of shape (|A|, |B|)."""
    A = _as_inputs(A)
    B = _as_inputs(B)
    sf2 = h.sigma_f ** 2
    if kind in (SE_ISO, SE_ARD):
        d2 = scaled_sqdist(A, B, lengths_for(kind, h))
        return sf2 * np.exp(-0.5 * d2)
    if kind == SPARSE_SPECTRUM:
        S = _spectral_frequencies(h)
        m = S.shape[0]
        pa = 2.0 * np.pi * (A @ S.T)   # (|A|, m) phases
        pb = 2.0 * np.pi * (B @ S.T)
        # cos(pa - pb) summed over frequencies without an (|A|,|B|,m) temp
        return (sf2 / m) * (np.cos(pa) @ np.cos(pb).T + np.sin(pa) @ np.sin(pb).T)
    raise ValueError(f"unknown kernel kind {kind!r}")


def kernel_diag(kind: str, h: HyperParams, A) -> np.ndarray:
    """diag K(A, A); both kernels are stationary with k(x, x) = sigma_f^2."""
    A = _as_inputs(A)
    return np.full(A.shape[0], h.sigma_f ** 2)


def _spectral_frequencies(h: HyperParams) -> np.ndarray:
    if h.extras is None:
        raise ValueError("sparse-spectrum kernel needs frequencies in extras")
    S = np.atleast_2d(np.asarray(h.extras, dtype=float))
    if S.shape[1] != 2:
        raise ValueError("spectral frequencies must be 2-vectors")
    return S


def kernel_grad(kind: str, h: HyperParams, A, B) -> dict[str, np.ndarray]:
    """Partial derivatives of K(A, B) w.r.t. the log-domain kernel parameters.

    Returns a dict keyed by parameter name. Mean and noise do not enter K
    and are handled by the likelihood code.
    """
    A = _as_inputs(A)
    B = _as_inputs(B)
    K = kernel_matrix(kind, h, A, B)
    if kind == SE_ISO:
        ell = h.lengths[0]
        d2 = scaled_sqdist(A, B, np.ones(2))  # unscaled squared distance
        return {"log_sigma_f": 2.0 * K, "log_len": K * d2 / ell ** 2}
    if kind == SE_ARD:
        ell = lengths_for(kind, h)
        out = {"log_sigma_f": 2.0 * K}
        for d, name in enumerate(("log_len_x", "log_len_y")):
            dd = (A[:, d][:, None] - B[:, d][None, :]) ** 2
            out[name] = K * dd / ell[d] ** 2
        return out
    if kind == SPARSE_SPECTRUM:
        # Frequencies are handled in weight space by the SSGPR module.
        return {"log_sigma_f": 2.0 * K}
    raise ValueError(f"unknown kernel kind {kind!r}")


def se_spectral_frequency_std(lengths: np.ndarray) -> np.ndarray:
    """Std dev (per dim) of the SE kernel's normalized spectral density, 1/(2 pi l)."""
    return 1.0 / (2.0 * np.pi * np.asarray(lengths, dtype=float))
