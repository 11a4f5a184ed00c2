"""Gaussian convolution filters and the structured inter-task covariance.

Task ``v`` is driven by every latent white-noise source ``u`` through the
filter ``H_vu(t) = S_vu * exp(-t**2 / l_vu)``; the covariance of two tasks is
the sum over sources of the filter cross-correlations, which is closed-form
for Gaussian filters.  Lengthscales ``l_vu`` are in squared time units and
are stored as ``logL = log(l)``.

The public functions take and return numpy arrays.  The ``*_t`` functions
are the differentiable torch equivalents used by the learners.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch

SQRT_PI = math.sqrt(math.pi)

__all__ = [
    "GraphParams",
    "StandardizedGraphParams",
    "filter_value",
    "pair_term",
    "cross_cov",
    "standardize",
    "assemble_covariance",
]


@dataclass
class GraphParams:
    """Filter-bank parameters: amplitudes ``S``, log-lengthscales and noise.

    ``S`` already contains the self-connections on its diagonal.  ``noise``
    holds observation noise standard deviations, one per task or a single
    shared value.
    """

    S: np.ndarray
    logL: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        self.S = np.array(self.S, dtype=float)
        self.logL = np.array(self.logL, dtype=float)
        self.noise = np.atleast_1d(np.array(self.noise, dtype=float))
        k = self.S.shape[0]
        if self.S.shape != (k, k) or self.logL.shape != (k, k):
            raise ValueError("S and logL must both be k x k")
        if self.noise.size not in (1, k):
            raise ValueError("noise must have 1 or k entries")
        if np.any(self.noise < 0):
            raise ValueError("noise standard deviations must be >= 0")

    @property
    def k(self) -> int:
        return self.S.shape[0]

    @property
    def amplitudes(self) -> np.ndarray:
        return self.S

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.logL)

    def noise_var(self) -> np.ndarray:
        return np.broadcast_to(self.noise ** 2, (self.k,)).copy()

    def to_dict(self) -> dict:
        return {"S": self.S.tolist(), "logL": self.logL.tolist(), "noise": self.noise.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "GraphParams":
        return cls(np.asarray(d["S"]), np.asarray(d["logL"]), np.asarray(d["noise"]))

    @classmethod
    def from_json(cls, text: str) -> "GraphParams":
        return cls.from_dict(json.loads(text))


@dataclass
class StandardizedGraphParams:
    """Amplitudes rescaled so every task has unit marginal prior variance."""

    S_tilde: np.ndarray
    logL: np.ndarray
    s: np.ndarray
    noise: np.ndarray

    @property
    def k(self) -> int:
        return self.S_tilde.shape[0]

    @property
    def amplitudes(self) -> np.ndarray:
        return self.S_tilde

    def noise_var(self) -> np.ndarray:
        return np.broadcast_to(np.atleast_1d(self.noise) ** 2, (self.k,)).copy()


def filter_value(S_vu, ell_vu, t):
    """Gaussian filter ``S_vu * exp(-t**2 / ell_vu)``."""
    return S_vu * np.exp(-np.square(t) / ell_vu)


def _half_log_harmonic(log_a, log_b):
    # 0.5 * log(a*b / (a+b)), stable for lengthscales of wildly different size
    return 0.5 * (log_a + log_b - np.logaddexp(log_a, log_b))


def pair_term(S_vu, ell_vu, S_wu, ell_wu, dt):
    """Cross-correlation of two Gaussian filters sharing a source, at lag ``dt``.

    Equals ``S_vu S_wu sqrt(pi l_vu l_wu / (l_vu + l_wu)) exp(-dt**2 / (l_vu + l_wu))``.
    """
    la, lb = np.log(ell_vu), np.log(ell_wu)
    amp = S_vu * S_wu * SQRT_PI * np.exp(_half_log_harmonic(la, lb))
    return amp * np.exp(-np.square(dt) * np.exp(-np.logaddexp(la, lb)))


def cross_cov(params, v: int, w: int, dt):
    """Covariance between task ``v`` at ``t`` and task ``w`` at ``t - dt``.

    Sums the pair terms over all sources; sources that do not feed both
    tasks have a zero amplitude and contribute exactly zero.
    ``params`` may be raw or standardized parameters.
    """
    S = params.amplitudes
    ell = np.exp(params.logL)
    dt = np.asarray(dt, dtype=float)
    out = np.zeros_like(dt)
    for u in range(S.shape[0]):
        if S[v, u] != 0.0 and S[w, u] != 0.0:
            out = out + pair_term(S[v, u], ell[v, u], S[w, u], ell[w, u], dt)
    return out


def marginal_variance(S, logL) -> np.ndarray:
    """Per-task prior variance ``sum_u S_vu**2 sqrt(pi l_vu / 2)``."""
    return np.sum(np.square(S) * np.sqrt(np.pi * np.exp(logL) / 2.0), axis=1)


def standardize(params: GraphParams) -> StandardizedGraphParams:
    """Rescale each row of ``S`` so that each task has unit prior variance.

    Raises
    ------
    ValueError
        If a task has no incoming filter at all (an all-zero row).
    """
    var = marginal_variance(params.S, params.logL)
    zero = np.flatnonzero(~(var > 0))
    if zero.size:
        raise ValueError(f"task(s) {zero.tolist()} have an all-zero amplitude row")
    s = np.sqrt(var)
    return StandardizedGraphParams(params.S / s[:, None], params.logL.copy(), s, params.noise.copy())


def _rows(rows):
    arr = np.asarray(rows, dtype=float).reshape(-1, 2)
    return arr[:, 0].astype(np.int64), arr[:, 1]


def assemble_covariance(params, rows_a, rows_b=None, add_noise: bool | None = None) -> np.ndarray:
    """Covariance matrix between two lists of ``(task, time)`` rows.

    With ``rows_b`` omitted the matrix of ``rows_a`` with itself is built
    and the task noise variances are added on the diagonal.
    """
    same = rows_b is None
    if add_noise is None:
        add_noise = same
    va, ta = _rows(rows_a)
    vb, tb = (va, ta) if same else _rows(rows_b)
    S = torch.as_tensor(params.amplitudes, dtype=torch.float64)
    logL = torch.as_tensor(params.logL, dtype=torch.float64)
    with torch.no_grad():
        coef, rate = pair_tables_t(S, logL)
        K = covariance_t(coef, rate, torch.as_tensor(ta), torch.as_tensor(va),
                         torch.as_tensor(tb), torch.as_tensor(vb)).numpy()
    if add_noise:
        if K.shape[0] != K.shape[1]:
            raise ValueError("noise can only be added to a square covariance")
        K = K + np.diag(params.noise_var()[va])
    return K


# ---------------------------------------------------------------------------
# torch core
# ---------------------------------------------------------------------------

def standardize_t(S, logL):
    """Differentiable standardization; returns ``(S_tilde, s)``."""
    var = (S * S * torch.sqrt(math.pi * torch.exp(logL) / 2.0)).sum(dim=1)
    s = torch.sqrt(var)
    return S / s[:, None], s


def pair_tables_t(S_tilde, logL):
    """Coefficient and rate tables indexed ``[v, w, u]``.

    The source-``u`` contribution to ``cov(Y_v(t), Y_w(t'))`` is
    ``coef[v, w, u] * exp(-rate[v, w, u] * (t - t')**2)``.
    """
    la = logL[:, None, :]
    lb = logL[None, :, :]
    lse = torch.logaddexp(la, lb)
    coef = S_tilde[:, None, :] * S_tilde[None, :, :] * SQRT_PI * torch.exp(0.5 * (la + lb - lse))
    return coef, torch.exp(-lse)


def covariance_t(coef, rate, ta, va, tb, vb):
    """Dense ``(len(ta), len(tb))`` covariance for arbitrary row lists."""
    k = coef.shape[0]
    idx = va[:, None] * k + vb[None, :]
    d2 = (ta[:, None] - tb[None, :]) ** 2
    c = coef.reshape(k * k, k)[idx]
    r = rate.reshape(k * k, k)[idx]
    return (c * torch.exp(-d2[..., None] * r)).sum(-1)


def padded_covariance_t(coef, rate, times):
    """Covariance for padded subject blocks.

    ``times`` has shape ``(B, k, T)``; the result has shape ``(B, k*T, k*T)``
    ordered task-major.  Padding entries are not masked here.
    """
    B, k, T = times.shape
    d2 = (times[:, :, :, None, None] - times[:, None, None, :, :]) ** 2
    K = None
    for u in range(k):
        term = coef[None, :, None, :, None, u] * torch.exp(-d2 * rate[None, :, None, :, None, u])
        K = term if K is None else K + term
    return K.reshape(B, k * T, k * T)
