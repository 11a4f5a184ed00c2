"""Latent pathways shared across subjects.

Each subject mixes ``p`` group-level pathway processes through shifted
Gaussian coupling filters ``G_iu(t) = pi_iu exp(-(t - tau_iu)**2 / l_iu)``
whose amplitudes ``pi_i = softmax(logits_i)`` act as a soft gate.  The
resulting covariance is a fixed convex combination (weight ``gamma``) of
the subject-specific StructGP covariance and the inter-subject pathway
covariance.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from .kernels import cross_cov, pair_tables_t, covariance_t

PI32 = math.pi ** 1.5

__all__ = [
    "PathwayParams",
    "PathwayAssignment",
    "subject_filter",
    "gating_weights",
    "lp_cross_cov",
    "lp_covariance",
    "assign_pathways",
]


@dataclass
class PathwayParams:
    """Subject-to-pathway coupling parameters, all of shape ``(r, p)``.

    ``S_sub`` are the pre-softmax logits, ``logL_sub`` the log-lengthscales
    and ``tau`` the time shifts.  ``gamma`` weighs the inter-subject part.
    """

    S_sub: np.ndarray
    logL_sub: np.ndarray
    tau: np.ndarray
    gamma: float = 0.3

    def __post_init__(self):
        self.S_sub = np.array(self.S_sub, dtype=float, ndmin=2)
        self.logL_sub = np.array(self.logL_sub, dtype=float, ndmin=2)
        self.tau = np.array(self.tau, dtype=float, ndmin=2)
        if not (self.S_sub.shape == self.logL_sub.shape == self.tau.shape):
            raise ValueError("S_sub, logL_sub and tau must share shape (r, p)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        self.gamma = float(self.gamma)

    @property
    def p(self) -> int:
        return self.S_sub.shape[1]

    @property
    def r(self) -> int:
        return self.S_sub.shape[0]

    def weights(self) -> np.ndarray:
        return gating_weights(self.S_sub)

    def subset(self, subjects) -> "PathwayParams":
        subjects = np.asarray(subjects)
        return PathwayParams(self.S_sub[subjects], self.logL_sub[subjects],
                             self.tau[subjects], self.gamma)

    def to_dict(self) -> dict:
        return {"p": self.p, "S_sub": self.S_sub.tolist(), "logL_sub": self.logL_sub.tolist(),
                "tau": self.tau.tolist(), "gamma": self.gamma}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "PathwayParams":
        obj = cls(np.asarray(d["S_sub"]), np.asarray(d["logL_sub"]), np.asarray(d["tau"]),
                  float(d["gamma"]))
        if obj.p != int(d.get("p", obj.p)):
            raise ValueError("declared p does not match parameter shapes")
        return obj

    @classmethod
    def from_json(cls, text: str) -> "PathwayParams":
        return cls.from_dict(json.loads(text))


@dataclass
class PathwayAssignment:
    """Hard pathway label and soft weights for each subject."""

    labels: np.ndarray
    weights: np.ndarray

    def to_csv(self, subject_labels=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        p = self.weights.shape[1]
        w.writerow(["subject_id", "pathway_id"] + [f"pi_{u}" for u in range(p)])
        for i, (lab, pi) in enumerate(zip(self.labels, self.weights)):
            sid = subject_labels[i] if subject_labels is not None else i
            w.writerow([sid, int(lab)] + [repr(float(x)) for x in pi])
        return buf.getvalue()


def subject_filter(amp, ell, tau, t):
    """Shifted Gaussian ``amp * exp(-(t - tau)**2 / ell)``."""
    return amp * np.exp(-np.square(np.asarray(t) - tau) / ell)


def gating_weights(logits) -> np.ndarray:
    """Row-wise softmax over pathways with max-subtraction."""
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def assign_pathways(pw: PathwayParams) -> PathwayAssignment:
    """Argmax pathway per subject; ties go to the lowest index."""
    pi = pw.weights()
    return PathwayAssignment(np.argmax(pi, axis=1), pi)


def _shared_term(Sv, lv, Sw, lw, a1, g1, s1, a2, g2, s2, dt):
    # G1*H_v cross-correlated with G2*H_w: Gaussians with widths A=g1+lv, B=g2+lw
    A = g1 + lv
    Bw = g2 + lw
    tot = A + Bw
    amp = a1 * a2 * Sv * Sw * PI32 * np.sqrt(g1 * lv * g2 * lw / tot)
    return amp * np.exp(-np.square(dt - (s1 - s2)) / tot)


def lp_cross_cov(graph, pw: PathwayParams, i: int, i2: int, v: int, w: int, t, t2):
    """Covariance between ``Y_iv(t)`` and ``Y_i2,w(t2)`` under the pathway model.

    ``graph`` is a StandardizedGraphParams (noise is not included).
    """
    dt = np.asarray(t, dtype=float) - np.asarray(t2, dtype=float)
    g = pw.gamma
    out = np.zeros_like(dt)
    if i == i2 and g < 1.0:
        out = out + (1.0 - g) * cross_cov(graph, v, w, dt)
    if g > 0.0:
        pi = pw.weights()
        S = graph.amplitudes
        ell = np.exp(graph.logL)
        lsub = np.exp(pw.logL_sub)
        for u in range(pw.p):
            for q in range(S.shape[0]):
                if S[v, q] == 0.0 or S[w, q] == 0.0:
                    continue
                out = out + g * _shared_term(S[v, q], ell[v, q], S[w, q], ell[w, q],
                                             pi[i, u], lsub[i, u], pw.tau[i, u],
                                             pi[i2, u], lsub[i2, u], pw.tau[i2, u], dt)
    return out


def lp_covariance_t(coef, rate, S_tilde, logL, logits, logL_sub, tau, gamma,
                    sa, va, ta, sb=None, vb=None, tb=None):
    """Dense torch covariance under the pathway model for ``(subject, task, time)`` rows.

    ``coef``/``rate`` are the StructGP pair tables of ``S_tilde``/``logL``.
    Noise is not included.
    """
    if sb is None:
        sb, vb, tb = sa, va, ta
    pi = torch.softmax(logits, dim=-1)
    same = (sa[:, None] == sb[None, :]).to(coef.dtype)
    K = (1.0 - gamma) * same * covariance_t(coef, rate, ta, va, tb, vb)
    if gamma == 0.0:
        return K
    ell = torch.exp(logL)
    lsub = torch.exp(logL_sub)
    # broadcast over (row_a, row_b, pathway u, source q)
    lv = ell[va][:, None, None, :]
    lw = ell[vb][None, :, None, :]
    g1 = lsub[sa][:, None, :, None]
    g2 = lsub[sb][None, :, :, None]
    tot = g1 + lv + g2 + lw
    amp = (pi[sa][:, None, :, None] * pi[sb][None, :, :, None]
           * S_tilde[va][:, None, None, :] * S_tilde[vb][None, :, None, :]
           * PI32 * torch.sqrt(g1 * lv * g2 * lw / tot))
    shift = tau[sa][:, None, :, None] - tau[sb][None, :, :, None]
    dt = (ta[:, None] - tb[None, :])[:, :, None, None]
    shared = (amp * torch.exp(-(dt - shift) ** 2 / tot)).sum((-1, -2))
    return K + gamma * shared


def lp_covariance(graph, pw: PathwayParams, rows_a, rows_b=None, add_noise=None) -> np.ndarray:
    """Numpy wrapper of the dense pathway covariance for ``(subject, task, time)`` rows."""
    same = rows_b is None
    if add_noise is None:
        add_noise = same
    ra = np.asarray(rows_a, dtype=float).reshape(-1, 3)
    rb = ra if same else np.asarray(rows_b, dtype=float).reshape(-1, 3)
    f = lambda x: torch.as_tensor(x, dtype=torch.float64)
    St, logL = f(graph.amplitudes), f(graph.logL)
    with torch.no_grad():
        coef, rate = pair_tables_t(St, logL)
        K = lp_covariance_t(coef, rate, St, logL, f(pw.S_sub), f(pw.logL_sub), f(pw.tau),
                            pw.gamma, torch.as_tensor(ra[:, 0].astype(np.int64)),
                            torch.as_tensor(ra[:, 1].astype(np.int64)), f(ra[:, 2]),
                            torch.as_tensor(rb[:, 0].astype(np.int64)),
                            torch.as_tensor(rb[:, 1].astype(np.int64)), f(rb[:, 2])).numpy()
    if add_noise:
        K = K + np.diag(graph.noise_var()[ra[:, 1].astype(np.int64)])
    return K
