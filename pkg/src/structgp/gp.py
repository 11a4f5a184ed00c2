"""Exact GP objective and posterior prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
import torch
from scipy.linalg import cho_solve, solve_triangular

from .kernels import GraphParams, StandardizedGraphParams, assemble_covariance, standardize

LOG_2PI = math.log(2.0 * math.pi)
Z95 = NormalDist().inv_cdf(0.975)
JITTERS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)

__all__ = [
    "NumericalError",
    "PosteriorForecast",
    "FitDiagnostics",
    "cholesky_jitter",
    "nmll",
    "posterior_predict",
    "blockwise_nmll",
]


class NumericalError(RuntimeError):
    """Cholesky failure after the full jitter schedule."""


@dataclass
class PosteriorForecast:
    mean: np.ndarray
    variance: np.ndarray
    cov: np.ndarray | None = None

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    @property
    def lo95(self) -> np.ndarray:
        return self.mean - Z95 * self.std

    @property
    def hi95(self) -> np.ndarray:
        return self.mean + Z95 * self.std


@dataclass
class FitDiagnostics:
    nmll: float
    per_subject: dict = field(default_factory=dict)
    jitter: float = 0.0
    trace: list = field(default_factory=list)


def cholesky_jitter(A: np.ndarray, label: str = ""):
    """Lower Cholesky factor of ``A``, adding diagonal jitter on failure.

    The schedule is 0, 1e-8, 1e-7, ..., 1e-4 times the mean diagonal.
    Returns ``(L, jitter)``.
    """
    scale = float(np.mean(np.diag(A))) if A.size else 1.0
    scale = scale if scale > 0 else 1.0
    for j in JITTERS:
        try:
            L = np.linalg.cholesky(A + (j * scale) * np.eye(A.shape[0]) if j else A)
            return L, j * scale
        except np.linalg.LinAlgError:
            continue
    lam = float(np.linalg.eigvalsh((A + A.T) / 2.0)[0])
    where = f" ({label})" if label else ""
    raise NumericalError(f"Cholesky failed after jitter 1e-4{where}; smallest eigenvalue ~ {lam:.3e}")


def cholesky_jitter_t(A: torch.Tensor):
    """Batched torch Cholesky with the same escalation schedule per matrix."""
    n = A.shape[-1]
    eye = torch.eye(n, dtype=A.dtype)
    scale = torch.diagonal(A, dim1=-2, dim2=-1).mean(-1).detach().clamp_min(1e-300)
    L, info = torch.linalg.cholesky_ex(A)
    if not bool((info > 0).any()):
        return L
    jit = torch.zeros_like(scale)
    for j in JITTERS[1:]:
        bad = info > 0
        jit = torch.where(bad, j * scale, jit)
        L, info = torch.linalg.cholesky_ex(A + jit[..., None, None] * eye)
        if not bool((info > 0).any()):
            return L
    bad = torch.nonzero(info > 0).flatten().tolist()
    lam = torch.linalg.eigvalsh(A.detach()[info > 0])[..., 0].min().item()
    raise NumericalError(f"Cholesky failed for block(s) {bad}; smallest eigenvalue ~ {lam:.3e}")


def _noise_diag(sigma, n):
    s = np.broadcast_to(np.asarray(sigma, dtype=float), (n,)) if np.ndim(sigma) else np.full(n, float(sigma))
    return s ** 2


def nmll(K: np.ndarray, y: np.ndarray, sigma=0.0) -> float:
    """Negative log marginal likelihood of ``y ~ N(0, K + diag(sigma**2))``."""
    y = np.asarray(y, dtype=float)
    A = np.asarray(K, dtype=float) + np.diag(_noise_diag(sigma, y.size))
    L, _ = cholesky_jitter(A)
    a = solve_triangular(L, y, lower=True)
    return float(0.5 * a @ a + np.log(np.diag(L)).sum() + 0.5 * y.size * LOG_2PI)


def posterior_predict(K, K_star, K_starstar, y, sigma=0.0, sigma_star=None,
                      full_cov: bool = False) -> PosteriorForecast:
    """Posterior predictive mean and variance at query points.

    Parameters
    ----------
    K : (n, n) prior covariance of the training rows (without noise)
    K_star : (n, m) cross-covariance training/query
    K_starstar : (m, m) matrix or (m,) diagonal of the query prior covariance
    y : (n,) training values
    sigma : training noise std (scalar or per row)
    sigma_star : query noise std; when given it is added to the predictive
        variance so intervals cover new observations rather than the latent
        function.
    """
    y = np.asarray(y, dtype=float)
    kss = np.asarray(K_starstar, dtype=float)
    m = kss.shape[0]
    K_star = np.asarray(K_star, dtype=float).reshape(y.size, m)
    if y.size == 0:
        mean = np.zeros(m)
        var = np.diag(kss).copy() if kss.ndim == 2 else kss.copy()
        cov = (kss if kss.ndim == 2 else np.diag(kss)) if full_cov else None
    else:
        A = np.asarray(K, dtype=float) + np.diag(_noise_diag(sigma, y.size))
        L, _ = cholesky_jitter(A)
        mean = K_star.T @ cho_solve((L, True), y)
        V = solve_triangular(L, K_star, lower=True)
        prior = np.diag(kss) if kss.ndim == 2 else kss
        var = prior - np.sum(V * V, axis=0)
        cov = (kss - V.T @ V) if full_cov else None
    var = np.maximum(var, 0.0)
    if sigma_star is not None:
        extra = _noise_diag(sigma_star, m)
        var = var + extra
        if cov is not None:
            cov = cov + np.diag(extra)
    return PosteriorForecast(mean, var, cov)


def blockwise_nmll(params, obs, subjects=None) -> FitDiagnostics:
    """Total NMLL as a sum of independent per-subject terms.

    ``params`` is GraphParams (standardized internally) or
    StandardizedGraphParams.  Subjects without records contribute zero.
    """
    if isinstance(params, GraphParams):
        params = standardize(params)
    subjects = range(obs.r) if subjects is None else subjects
    per = {}
    for i in subjects:
        idx = obs.subject_index(i)
        if idx.size == 0:
            per[int(i)] = 0.0
            continue
        rows = np.stack([obs.task[idx], obs.time[idx]], axis=1)
        K = assemble_covariance(params, rows)
        try:
            per[int(i)] = nmll(K, obs.value[idx])
        except NumericalError as exc:
            raise NumericalError(f"subject {obs.subject_labels[i]}: {exc}") from exc
    return FitDiagnostics(float(sum(per.values())), per)
