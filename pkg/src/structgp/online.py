"""Streaming solves for low-rank-plus-block-diagonal covariances.

``K = Phi Phi^T + M`` with ``M`` block-diagonal (one block per subject).
Blocks arrive in mini-batches; the accumulators

    C = sum_i Phi_i^T M_i^-1 Phi_i,    D = sum_i Phi_i^T M_i^-1 y_i

summarise everything seen so far and give Woodbury inverse actions and
log-determinants without revisiting old blocks.  A decay ``beta`` turns the
accumulators into a geometric fading memory (``beta = 1`` keeps everything).

All computations run in torch so that gradients flow through the current
batch; the carried state is always detached.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .gp import NumericalError, cholesky_jitter_t

LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_FORMAT = "structgp-accumulator"
CHECKPOINT_VERSION = 1

__all__ = [
    "AccumulatorState",
    "BatchBlocks",
    "update_and_solve",
    "conditional_nmll",
]


@dataclass
class AccumulatorState:
    """Discounted sufficient statistics of the blocks processed so far.

    ``cross_term`` is written by :func:`update_and_solve` and holds the
    correction that turns the batch fit term into an exact conditional
    (it is zero for the first batch from a fresh state).
    """

    C: torch.Tensor
    D: torch.Tensor
    beta: float = 1.0
    logdet_IC: float = 0.0
    logdetM_running: float = 0.0
    epoch: int = 0
    n_seen: int = 0
    cross_term: torch.Tensor | float = 0.0

    @classmethod
    def fresh(cls, q: int, beta: float = 1.0, dtype=torch.float64) -> "AccumulatorState":
        if not (0.0 <= beta <= 1.0):
            raise ValueError("beta must lie in [0, 1]")
        return cls(torch.zeros(q, q, dtype=dtype), torch.zeros(q, dtype=dtype), float(beta))

    @property
    def q(self) -> int:
        return self.C.shape[0]

    def detached(self) -> "AccumulatorState":
        cross = self.cross_term
        cross = float(cross.detach()) if torch.is_tensor(cross) else float(cross)
        return replace(self, C=self.C.detach(), D=self.D.detach(), cross_term=cross)

    def new_epoch(self) -> "AccumulatorState":
        """Reset the running log-determinant baseline at an epoch boundary."""
        return replace(self.detached(), logdetM_running=0.0, epoch=self.epoch + 1, n_seen=0)

    def posterior(self):
        """Mean ``(I + C)^-1 D`` and covariance ``(I + C)^-1`` of the latent weights."""
        L = torch.linalg.cholesky(torch.eye(self.q, dtype=self.C.dtype) + self.C.detach())
        mean = torch.cholesky_solve(self.D.detach()[:, None], L)[:, 0]
        cov = torch.cholesky_inverse(L)
        return mean, cov

    def to_json(self) -> str:
        return json.dumps({
            "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "q": self.q, "beta": self.beta, "epoch": self.epoch, "n_seen": self.n_seen,
            "logdet_IC": self.logdet_IC, "logdetM_running": self.logdetM_running,
            "C": self.C.detach().tolist(), "D": self.D.detach().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "AccumulatorState":
        d = json.loads(text)
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not an accumulator checkpoint")
        if int(d.get("version", 0)) > CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d['version']}")
        return cls(torch.tensor(d["C"], dtype=torch.float64), torch.tensor(d["D"], dtype=torch.float64),
                   float(d["beta"]), float(d["logdet_IC"]), float(d["logdetM_running"]),
                   int(d["epoch"]), int(d["n_seen"]))


@dataclass
class BatchBlocks:
    """A mini-batch of blocks ``(v_i, Phi_i, M_i)`` stored as padded tensors.

    Shapes are ``v: (B, n)``, ``Phi: (B, n, q)``, ``M: (B, n, n)``.  Padding
    rows must have zero ``v`` and ``Phi`` and an identity row/column in
    ``M``; they then contribute nothing.  ``n_obs`` counts real rows.
    """

    v: torch.Tensor
    Phi: torch.Tensor
    M: torch.Tensor
    n_obs: int = field(default=-1)

    def __post_init__(self):
        if self.n_obs < 0:
            self.n_obs = int(self.v.shape[0] * self.v.shape[1])

    @classmethod
    def from_lists(cls, vs, Phis, Ms, dtype=torch.float64) -> "BatchBlocks":
        vs = [torch.as_tensor(np.asarray(v) if not isinstance(v, torch.Tensor) else v, dtype=dtype).reshape(-1)
              for v in vs]
        n = max(v.shape[0] for v in vs)
        q = torch.as_tensor(Phis[0]).reshape(vs[0].shape[0], -1).shape[1]
        B = len(vs)
        V = torch.zeros(B, n, dtype=dtype)
        P = torch.zeros(B, n, q, dtype=dtype)
        Mm = torch.eye(n, dtype=dtype).repeat(B, 1, 1)
        for b, (v, phi, m) in enumerate(zip(vs, Phis, Ms)):
            ni = v.shape[0]
            V[b, :ni] = v
            P[b, :ni] = torch.as_tensor(phi, dtype=dtype).reshape(ni, q)
            Mm[b, :ni, :ni] = torch.as_tensor(m, dtype=dtype).reshape(ni, ni)
        return cls(V, P, Mm, sum(v.shape[0] for v in vs))


def _logdet_chol(L):
    return 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)


def _chol_IC(C, what):
    q = C.shape[0]
    L, info = torch.linalg.cholesky_ex(torch.eye(q, dtype=C.dtype) + C)
    if int(info) > 0:
        ev = torch.linalg.eigvalsh(C.detach())
        raise NumericalError(f"{what}: I + C is not positive definite "
                             f"(eigenvalues of C in [{ev[0].item():.3e}, {ev[-1].item():.3e}])")
    return L


def update_and_solve(state: AccumulatorState, batch: BatchBlocks):
    """Fold a batch into the accumulators and solve for its inverse actions.

    Returns
    -------
    new_state : AccumulatorState
        Holds graph-connected ``C``/``D`` for the current batch; call
        ``.detached()`` before carrying it into the next batch.
    x : (B, n) tensor
        Inverse actions ``x_i = A_i - B_i E`` for the batch blocks.
    delta_logdet : tensor
        ``sum_i logdet M_i + logdet(I + C_new) - logdet(I + beta C_prev)``.
    """
    if batch.Phi.shape[-1] != state.q:
        raise ValueError(f"feature width {batch.Phi.shape[-1]} does not match state q={state.q}")
    try:
        LM = cholesky_jitter_t(batch.M)
    except NumericalError as exc:
        raise NumericalError(f"block Cholesky failed: {exc}") from exc
    A = torch.cholesky_solve(batch.v[..., None], LM)[..., 0]     # (B, n)
    Bm = torch.cholesky_solve(batch.Phi, LM)                      # (B, n, q)
    d = torch.einsum("bnq,bn->q", batch.Phi, A)
    c = torch.einsum("bnq,bnr->qr", batch.Phi, Bm)
    c = 0.5 * (c + c.T)
    logdetM = _logdet_chol(LM).sum()

    beta = state.beta
    C_bar = beta * state.C.detach()
    D_bar = beta * state.D.detach()
    C_new = C_bar + c
    D_new = D_bar + d
    L_new = _chol_IC(C_new, "update")
    E = torch.cholesky_solve(D_new[:, None], L_new)[:, 0]
    x = A - torch.einsum("bnq,q->bn", Bm, E)

    if state.n_seen == 0 and state.epoch == 0 and not bool(C_bar.any()):
        base_logdet = 0.0
        cross = torch.zeros((), dtype=E.dtype)
    else:
        L_bar = _chol_IC(C_bar, "discounted state")
        base_logdet = _logdet_chol(L_bar)
        E_bar = torch.cholesky_solve(D_bar[:, None], L_bar)[:, 0]
        cross = D_bar @ (E_bar - E)
    logdet_new = _logdet_chol(L_new)
    delta = logdetM + logdet_new - base_logdet

    new_state = AccumulatorState(
        C_new, D_new, beta, float(logdet_new.detach()),
        state.logdetM_running + float(logdetM.detach()), state.epoch,
        state.n_seen + batch.n_obs, cross)
    return new_state, x, delta


def conditional_nmll(state: AccumulatorState, batch: BatchBlocks, x, delta_logdet):
    """Conditional NMLL of a batch given the accumulated state.

    ``state`` must be the state returned by the :func:`update_and_solve`
    call that produced ``x`` and ``delta_logdet``.  With ``beta = 1`` the
    terms of a full pass sum to the exact NMLL of all blocks.
    """
    fit = (batch.v * x).sum() + state.cross_term
    return 0.5 * fit + 0.5 * delta_logdet + 0.5 * batch.n_obs * LOG_2PI
