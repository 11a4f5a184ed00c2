"""Reduced-rank Hilbert-space features for the Gaussian filter kernels.

On ``[-L, L]`` with Dirichlet boundaries the Laplacian eigenfunctions are
``phi_j(x) = sin(pi j (x + L) / 2L) / sqrt(L)`` with eigenvalues
``(pi j / 2L)**2``.  A stationary kernel with spectral density ``S`` is
approximated by ``sum_j S(sqrt(lambda_j)) phi_j(x) phi_j(x')``.

For a cross-covariance between two filters fed by the same source the
spectral density factorises into the product of the filter Fourier
transforms, ``H_hat(w) = S sqrt(pi l) exp(-l w**2 / 4)``, so each
observation gets the feature ``H_hat_vu(sqrt(lambda_j)) phi_j(t)`` and the
cross terms come out right without any extra bookkeeping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "HSGPConfig",
    "FeatureMatrix",
    "eigenpair",
    "eigenfunctions",
    "se_spectral_density",
    "filter_spectrum",
    "structured_features",
]


@dataclass
class HSGPConfig:
    """Basis size and domain.

    ``L`` is the half-width of the domain around ``center``.  When left as
    ``None`` it is set to ``boundary_factor * max|t - center|`` by
    :meth:`resolve`; a ``None`` center resolves to the midpoint of the data.
    """

    m: int = 64
    L: float | None = None
    boundary_factor: float = 1.5
    center: float | None = None

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.boundary_factor < 1:
            raise ValueError("boundary_factor must be >= 1")

    def resolve(self, times) -> "HSGPConfig":
        t = np.asarray(times, dtype=float)
        center = self.center
        if center is None:
            center = 0.5 * (t.min() + t.max()) if t.size else 0.0
        L = self.L
        if L is None:
            half = float(np.max(np.abs(t - center))) if t.size else 1.0
            L = self.boundary_factor * max(half, 1e-6)
        return HSGPConfig(self.m, float(L), self.boundary_factor, float(center))

    def frequencies(self) -> np.ndarray:
        return np.pi * np.arange(1, self.m + 1) / (2.0 * self.L)

    def check_domain(self, x):
        x = np.asarray(x)
        bad = np.abs(x) >= self.L
        if np.any(bad):
            raise ValueError(f"{int(bad.sum())} input(s) fall outside the HSGP domain "
                             f"|t - center| < L = {self.L:g}")


@dataclass
class FeatureMatrix:
    """Feature matrix ``Phi`` with per-column source and basis indices."""

    Phi: np.ndarray
    source: np.ndarray
    basis: np.ndarray


def eigenpair(j: int, L: float):
    """Eigenvalue and eigenfunction ``(lambda_j, phi_j)`` of the Dirichlet Laplacian."""
    if j < 1 or L <= 0:
        raise ValueError("need j >= 1 and L > 0")
    lam = (math.pi * j / (2.0 * L)) ** 2

    def phi(x):
        return np.sqrt(1.0 / L) * np.sin(math.pi * j * (np.asarray(x) + L) / (2.0 * L))

    return lam, phi


def eigenfunctions(x, m: int, L: float):
    """Matrix ``[phi_j(x_n)]`` of shape ``(n, m)``; works on numpy or torch input."""
    j = np.arange(1, m + 1)
    if isinstance(x, torch.Tensor):
        jt = torch.as_tensor(j, dtype=x.dtype)
        return torch.sin(math.pi * jt * (x[..., None] + L) / (2.0 * L)) / math.sqrt(L)
    return np.sin(np.pi * j * (np.asarray(x)[..., None] + L) / (2.0 * L)) / np.sqrt(L)


def se_spectral_density(alpha, ell_se, omega):
    """Spectral density of ``alpha exp(-r**2 / (2 ell_se**2))``."""
    return alpha * np.sqrt(2.0 * np.pi) * ell_se * np.exp(-0.5 * ell_se ** 2 * np.square(omega))


def filter_spectrum(S, ell, omega):
    """Fourier transform of the Gaussian filter ``S exp(-t**2 / ell)``."""
    return S * np.sqrt(np.pi * ell) * np.exp(-ell * np.square(omega) / 4.0)


def structured_features(params, tasks, times, cfg: HSGPConfig) -> FeatureMatrix:
    """Low-rank features of the standardized StructGP kernel.

    Column ``u * m + j`` holds ``H_hat_vu(w_j) phi_j(t - center)`` for an
    observation of task ``v`` at time ``t``, so that ``Phi @ Phi.T``
    approximates the noise-free covariance.
    """
    tasks = np.asarray(tasks, dtype=np.int64)
    times = np.asarray(times, dtype=float)
    cfg = cfg if cfg.L is not None and cfg.center is not None else cfg.resolve(times)
    x = times - cfg.center
    cfg.check_domain(x)
    w = cfg.frequencies()
    S = params.amplitudes
    ell = np.exp(params.logL)
    k, m = S.shape[1], cfg.m
    sdens = filter_spectrum(S[:, :, None], ell[:, :, None], w[None, None, :])   # (k, k, m)
    phi = eigenfunctions(x, m, cfg.L)                                            # (n, m)
    Phi = (sdens[tasks] * phi[:, None, :]).reshape(times.size, k * m)
    return FeatureMatrix(Phi, np.repeat(np.arange(k), m), np.tile(np.arange(m), k))


def lp_features_t(S_tilde, logL, logits, logL_sub, tau, gamma, subj, task, time,
                  m: int, L: float, center: float):
    """Torch features of the inter-subject pathway covariance.

    Column ``(u, q, j)`` of a row ``(i, v, t)`` is
    ``sqrt(gamma) pi_iu G_hat_iu(w_j) H_hat_vq(w_j) phi_j(t - tau_iu - center)``
    with ``G_hat(w) = sqrt(pi l_sub) exp(-l_sub w**2 / 4)``.  Output shape is
    ``(..., p * k * m)`` for index tensors of shape ``(...)``.
    """
    dtype = S_tilde.dtype
    w = torch.as_tensor(np.pi * np.arange(1, m + 1) / (2.0 * L), dtype=dtype)
    ell = torch.exp(logL)
    spec_h = S_tilde[..., None] * torch.sqrt(math.pi * ell[..., None]) * torch.exp(-ell[..., None] * w ** 2 / 4.0)
    lsub = torch.exp(logL_sub)
    spec_g = torch.sqrt(math.pi * lsub[..., None]) * torch.exp(-lsub[..., None] * w ** 2 / 4.0)
    pi = torch.softmax(logits, dim=-1)
    x = time[..., None] - tau[subj] - center                          # (..., p)
    if bool((x.detach().abs() >= L).any()):
        raise ValueError(f"shifted inputs fall outside the HSGP domain |x| < L = {L:g}")
    phi = eigenfunctions(x, m, L)                                     # (..., p, m)
    g = (math.sqrt(gamma) * pi[subj][..., None] * spec_g[subj] * phi)  # (..., p, m)
    h = spec_h[task]                                                  # (..., k, m)
    feats = g[..., :, None, :] * h[..., None, :, :]                   # (..., p, k, m)
    return feats.reshape(*feats.shape[:-3], -1)
