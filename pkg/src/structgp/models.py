"""Model fitting pipelines and the serialized model bundle.

Modes
-----
``structgp``      sparse DAG over tasks learned by the augmented Lagrangian
                  method along a λ grid, pruned by hard thresholding.
``no-structure``  dense amplitudes, no sparsity or acyclicity terms.
``independent``   diagonal amplitudes only (tasks are independent GPs).
``lp-structgp``   latent pathways on top of a StructGP graph, fitted jointly.
``lp-fixed``      latent pathways with the graph frozen to a given bundle.

Subjects are independent under the StructGP covariance, so its objective
is the mean per-subject NMLL over padded subject blocks.  The pathway
covariance couples all subjects; it is handled by the low-rank feature map
for the shared part and the streaming Woodbury solver.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import ObservationSet, PaddedSubjects, TaskCatalog, TransformState, pad_by_task
from .gp import LOG_2PI, NumericalError, cholesky_jitter_t, posterior_predict, PosteriorForecast
from .hsgp import HSGPConfig, eigenfunctions, lp_features_t
from .kernels import GraphParams, StandardizedGraphParams, pair_tables_t, padded_covariance_t, \
    covariance_t, standardize, standardize_t
from .latent import PathwayParams, assign_pathways
from .online import AccumulatorState, BatchBlocks, conditional_nmll, update_and_solve
from .structure import (LagrangianState, LearnedStructure, PenaltyConfig, AdamState, acyclicity,
                        acyclicity_t, adam_step, augmented_lagrangian_fit, hard_threshold,
                        lambda_grid_search, smooth_l1_t)

log = logging.getLogger(__name__)
DT = torch.float64
MODES = ("structgp", "lp-structgp", "lp-fixed", "independent", "no-structure")

__all__ = [
    "MODES",
    "FitResult",
    "ModelBundle",
    "GraphSpec",
    "padded_nmll_t",
    "lp_batch_nmll",
    "fit_model",
    "predict",
]


# ---------------------------------------------------------------------------
# parameter handling
# ---------------------------------------------------------------------------

@dataclass
class GraphSpec:
    """Fixed parts of the graph parameterization.

    ``offmask`` zeroes structurally absent off-diagonal amplitudes,
    ``diag`` is used when the diagonal is not learned and ``noise`` when the
    noise is not learned.
    """

    k: int
    offmask: np.ndarray
    learn_diagonal: bool = False
    diag: np.ndarray | None = None
    noise_mode: str = "shared"
    noise: np.ndarray | None = None

    def build(self, t: dict):
        """Return ``(S, logL, noise_sd)`` tensors from the free parameters."""
        om = torch.as_tensor(self.offmask, dtype=DT)
        off = t["S"] * om
        if self.learn_diagonal:
            diag = t["S_diag"]
        else:
            diag = torch.as_tensor(self.diag if self.diag is not None else np.ones(self.k), dtype=DT)
        S = off + torch.diag(diag)
        if self.noise_mode == "fixed":
            sd = torch.as_tensor(np.broadcast_to(self.noise, (self.k,)).copy(), dtype=DT)
        else:
            sd = torch.exp(t["log_noise"]).expand(self.k)
        return S, t["logL"], sd


def init_graph_tensors(gspec: GraphSpec, rng, noise_init: float = 0.1) -> dict:
    k = gspec.k
    S = rng.normal(0.0, 0.1, (k, k)) * gspec.offmask
    t = {"S": torch.tensor(S, dtype=DT), "logL": torch.tensor(rng.uniform(0, 1, (k, k)), dtype=DT)}
    if gspec.learn_diagonal:
        t["S_diag"] = torch.ones(k, dtype=DT)
    if gspec.noise_mode == "shared":
        t["log_noise"] = torch.full((1,), math.log(noise_init), dtype=DT)
    elif gspec.noise_mode == "per-task":
        t["log_noise"] = torch.full((k,), math.log(noise_init), dtype=DT)
    return t


def tensors_to_graph(gspec: GraphSpec, t: dict) -> GraphParams:
    with torch.no_grad():
        S, logL, sd = gspec.build(t)
    noise = sd.numpy()
    if gspec.noise_mode == "shared" or (gspec.noise_mode == "fixed" and np.ndim(gspec.noise) == 0):
        noise = noise[:1]
    return GraphParams(S.numpy().copy(), logL.numpy().copy(), noise.copy())


def graph_to_tensors(gspec: GraphSpec, g: GraphParams) -> dict:
    S = np.array(g.S, dtype=float)
    off = S.copy()
    np.fill_diagonal(off, 0.0)
    t = {"S": torch.tensor(off, dtype=DT), "logL": torch.tensor(g.logL, dtype=DT)}
    if gspec.learn_diagonal:
        t["S_diag"] = torch.tensor(np.diag(S).copy(), dtype=DT)
    if gspec.noise_mode in ("shared", "per-task"):
        n = 1 if gspec.noise_mode == "shared" else gspec.k
        base = np.broadcast_to(g.noise, (gspec.k,))[:n] if g.noise.size in (1, gspec.k) else g.noise[:n]
        t["log_noise"] = torch.tensor(np.log(np.maximum(base, 1e-6)), dtype=DT)
    return t


# ---------------------------------------------------------------------------
# StructGP objective on padded subjects
# ---------------------------------------------------------------------------

@dataclass
class PaddedTensors:
    times: torch.Tensor     # (B, k, T)
    values: torch.Tensor
    mask: torch.Tensor      # float 0/1
    subjects: torch.Tensor  # (B,)
    n_obs: torch.Tensor     # (B,)

    @classmethod
    def from_padded(cls, p: PaddedSubjects) -> "PaddedTensors":
        m = torch.as_tensor(p.mask, dtype=DT)
        return cls(torch.as_tensor(p.times, dtype=DT), torch.as_tensor(p.values, dtype=DT) * m, m,
                   torch.as_tensor(p.subjects, dtype=torch.int64), m.sum((1, 2)))

    def take(self, rows) -> "PaddedTensors":
        rows = torch.as_tensor(rows, dtype=torch.int64)
        return PaddedTensors(self.times[rows], self.values[rows], self.mask[rows],
                             self.subjects[rows], self.n_obs[rows])

    @property
    def B(self) -> int:
        return self.times.shape[0]


def _masked_block(K, mask_flat, diag_add):
    mm = mask_flat[:, :, None] * mask_flat[:, None, :]
    n = K.shape[-1]
    eye = torch.eye(n, dtype=K.dtype)
    return K * mm + torch.diag_embed(diag_add * mask_flat + (1.0 - mask_flat))


def structgp_blocks(S, logL, sd, pt: PaddedTensors, scale: float = 1.0):
    """Noisy padded covariance blocks ``(B, kT, kT)`` (padding rows are identity)."""
    St, _ = standardize_t(S, logL)
    coef, rate = pair_tables_t(St, logL)
    K = padded_covariance_t(coef, rate, pt.times) * scale
    B, k, T = pt.times.shape
    noise = (sd ** 2)[None, :, None].expand(B, k, T).reshape(B, k * T)
    return _masked_block(K, pt.mask.reshape(B, k * T), noise)


def padded_nmll_t(S, logL, sd, pt: PaddedTensors):
    """Per-subject NMLL ``(B,)`` of the standardized StructGP."""
    B, k, T = pt.times.shape
    K = structgp_blocks(S, logL, sd, pt)
    L = cholesky_jitter_t(K)
    y = pt.values.reshape(B, k * T)
    a = torch.linalg.solve_triangular(L, y[..., None], upper=False)[..., 0]
    return 0.5 * (a * a).sum(-1) + torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1) \
        + 0.5 * pt.n_obs * LOG_2PI


def total_nmll(S, logL, sd, pt: PaddedTensors, chunk: int = 64) -> float:
    out = 0.0
    with torch.no_grad():
        for s in range(0, pt.B, chunk):
            out += float(padded_nmll_t(S, logL, sd, pt.take(range(s, min(s + chunk, pt.B)))).sum())
    return out


# ---------------------------------------------------------------------------
# pathway objective
# ---------------------------------------------------------------------------

@dataclass
class LPGeometry:
    """Fixed HSGP domain and shift bound of the pathway model."""

    m: int
    L: float
    center: float
    tau_max: float

    def to_dict(self) -> dict:
        return {"m": self.m, "L": self.L, "center": self.center, "tau_max": self.tau_max}

    @classmethod
    def from_dict(cls, d) -> "LPGeometry":
        return cls(int(d["m"]), float(d["L"]), float(d["center"]), float(d["tau_max"]))

    @classmethod
    def for_times(cls, times, m: int, boundary_factor: float, tau_max: float | None = None):
        t = np.asarray(times, dtype=float)
        lo, hi = float(t.min()), float(t.max())
        tau_max = 0.1 * (hi - lo) if tau_max is None else tau_max
        center = 0.5 * (lo + hi)
        L = boundary_factor * (0.5 * (hi - lo) + tau_max) + 1e-9
        return cls(m, L, center, tau_max)


def tau_from_raw(raw, tau_max):
    return tau_max * torch.tanh(raw)


def tau_to_raw(tau, tau_max):
    return np.arctanh(np.clip(np.asarray(tau) / tau_max, -0.999999, 0.999999))


def lp_batch_blocks(S, logL, sd, pw: dict, gamma: float, geo: LPGeometry, pt: PaddedTensors):
    """Blocks ``(v, Phi, M)`` of a padded subject batch under the pathway model."""
    B, k, T = pt.times.shape
    St, _ = standardize_t(S, logL)
    M = structgp_blocks(S, logL, sd, pt, scale=1.0 - gamma)
    subj = pt.subjects[:, None, None].expand(B, k, T)
    task = torch.arange(k)[None, :, None].expand(B, k, T)
    tau = tau_from_raw(pw["tau_raw"], geo.tau_max)
    feats = lp_features_t(St, logL, pw["S_sub"], pw["logL_sub"], tau, gamma, subj, task,
                          pt.times, geo.m, geo.L, geo.center)
    feats = feats * pt.mask[..., None]
    return BatchBlocks(pt.values.reshape(B, k * T), feats.reshape(B, k * T, -1), M,
                       int(pt.n_obs.sum()))


def lp_batch_nmll(state, S, logL, sd, pw, gamma, geo, pt):
    """Conditional NMLL of one batch; returns ``(value, new_state)``."""
    blocks = lp_batch_blocks(S, logL, sd, pw, gamma, geo, pt)
    new, x, dl = update_and_solve(state, blocks)
    return conditional_nmll(new, blocks, x, dl), new


def lp_full_pass(S, logL, sd, pw, gamma, geo, pt, chunk: int = 50, grad: bool = False):
    """Single undiscounted pass over all subjects: exact NMLL and final state."""
    q = pw["S_sub"].shape[1] * S.shape[0] * geo.m
    state = AccumulatorState.fresh(q, beta=1.0)
    total = 0.0
    ctx = torch.enable_grad() if grad else torch.no_grad()
    with ctx:
        for s in range(0, pt.B, chunk):
            val, state = lp_batch_nmll(state, S, logL, sd, pw, gamma, geo,
                                       pt.take(range(s, min(s + chunk, pt.B))))
            total = total + val
            if not grad:
                state = state.detached()
    return total, state.detached()


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    tensors: dict
    S: np.ndarray
    nmll: float
    graph: GraphParams
    val_nmll: float = math.nan
    h_smooth: float = math.nan
    converged: bool = True
    al_state: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)


class _BatchCycler:
    """Deterministic reshuffled mini-batch schedule over subject rows."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.bs = n, max(1, min(batch_size, n))
        self.rng = np.random.default_rng(seed)
        self.queue: list = []

    def next(self):
        if not self.queue:
            perm = self.rng.permutation(self.n)
            self.queue = [perm[s:s + self.bs] for s in range(0, self.n, self.bs)]
        return self.queue.pop(0)


def _offdiag_np(S):
    W = np.array(S, dtype=float)
    np.fill_diagonal(W, 0.0)
    return W


def _prune(graph: GraphParams, adj) -> GraphParams:
    S = graph.S * (np.asarray(adj, dtype=bool) | np.eye(graph.k, dtype=bool))
    return GraphParams(S, graph.logL, graph.noise)


def fit_structgp_lambda(cfg, gspec: GraphSpec, pt: PaddedTensors, lam: float, init: dict,
                        seed: int, pt_val: PaddedTensors | None = None, constrained: bool = True):
    """One augmented-Lagrangian fit at a fixed λ."""
    pen = PenaltyConfig(lam, cfg.beta_L1)
    cyc = _BatchCycler(pt.B, cfg.batch_size, seed)

    def loss_fn(t, it):
        S, logL, sd = gspec.build(t)
        batch = pt.take(cyc.next())
        f = padded_nmll_t(S, logL, sd, batch).mean()
        return f + smooth_l1_t(S, pen) if lam > 0 else f

    def constraint_fn(t):
        return acyclicity_t(t["S"] * torch.as_tensor(gspec.offmask, dtype=DT))

    if constrained:
        res = augmented_lagrangian_fit(loss_fn, constraint_fn, init,
                                       LagrangianState(epsilon=cfg.epsilon, rho_max=cfg.rho_max),
                                       steps=cfg.inner_steps, lr=cfg.lr, max_outer=cfg.max_outer)
        tensors, al, trace, conv = res.params, res.state.to_dict(), res.trace, res.converged
    else:
        tensors, trace = _adam_fit(lambda t, it: loss_fn(t, it), init, cfg.max_steps, cfg.lr)
        al, conv = {}, True
    graph = tensors_to_graph(gspec, tensors)
    W = _offdiag_np(graph.S)
    h = acyclicity(W)
    if constrained:
        ls = hard_threshold(W, min_weight=cfg.edge_threshold)
        graph_eval = _prune(graph, ls.adjacency)
    else:
        graph_eval = graph
    nm = _graph_nmll(graph_eval, pt)
    val = _graph_nmll(graph_eval, pt_val) if pt_val is not None else math.nan
    return FitResult(tensors, W, nm, graph_eval, val, h, conv, al, trace)


def _graph_nmll(graph: GraphParams, pt: PaddedTensors) -> float:
    S = torch.as_tensor(graph.S, dtype=DT)
    logL = torch.as_tensor(graph.logL, dtype=DT)
    sd = torch.as_tensor(np.broadcast_to(graph.noise, (graph.k,)).copy(), dtype=DT)
    return total_nmll(S, logL, sd, pt)


def _adam_fit(loss_fn, init: dict, steps: int, lr: float, lr_scale=None):
    adam = AdamState(lr=lr, lr_scale=dict(lr_scale or {}))
    cur = {n: p.detach().clone().requires_grad_(True) for n, p in init.items()}
    trace = []
    for it in range(steps):
        L = loss_fn(cur, it)
        if not bool(torch.isfinite(L)):
            raise NumericalError(f"non-finite loss at step {it}")
        grads = torch.autograd.grad(L, list(cur.values()), allow_unused=True)
        gd = {n: (g if g is not None else torch.zeros_like(cur[n])) for n, g in zip(cur, grads)}
        with torch.no_grad():
            new = adam_step(adam, {n: p.detach() for n, p in cur.items()}, gd)
        cur = {n: p.requires_grad_(True) for n, p in new.items()}
        if it % 50 == 0 or it == steps - 1:
            trace.append({"step": it, "loss": float(L.detach())})
    return {n: p.detach() for n, p in cur.items()}, trace


def _graph_spec(cfg, k: int, mode: str) -> GraphSpec:
    offmask = np.ones((k, k)) - np.eye(k)
    if mode == "independent":
        offmask = np.zeros((k, k))
    noise = None
    if cfg.noise_mode == "fixed":
        noise = np.asarray(cfg.noise_init, dtype=float)
    return GraphSpec(k, offmask, cfg.learn_diagonal, None, cfg.noise_mode, noise)


def _split_validation(obs: ObservationSet, frac: float, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(obs.r)
    n_val = int(round(frac * obs.r))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_structgp(obs: ObservationSet, cfg, mode: str = "structgp"):
    """Fit the StructGP family; returns ``(graph, structure, diagnostics)``."""
    rng = np.random.default_rng(cfg.seed)
    gspec = _graph_spec(cfg, obs.k, mode)
    init = init_graph_tensors(gspec, rng, cfg.noise_init)
    train_ids, val_ids = np.arange(obs.r), None
    if mode == "structgp" and cfg.criterion == "validation":
        train_ids, val_ids = _split_validation(obs, cfg.val_fraction, cfg.seed)
    pt = PaddedTensors.from_padded(pad_by_task(obs, train_ids))
    pt_val = PaddedTensors.from_padded(pad_by_task(obs, val_ids)) if val_ids is not None else None
    if mode in ("independent", "no-structure"):
        res = fit_structgp_lambda(cfg, gspec, pt, 0.0, init, cfg.seed, constrained=False)
        diag = {"nmll": res.nmll, "trace": res.trace, "h_smooth": res.h_smooth}
        return res.graph, None, diag
    grid = cfg.lambda_values()

    def fit_fn(lam, prev):
        start = prev.tensors if prev is not None else init
        return fit_structgp_lambda(cfg, gspec, pt, lam, start, cfg.seed, pt_val)

    ls, best, records = lambda_grid_search(fit_fn, grid, cfg.criterion,
                                           warm_start=cfg.warm_start, min_weight=cfg.edge_threshold)
    ls.diagnostics.update({"h_smooth": best.h_smooth, "al_state": best.al_state,
                           "converged": best.converged, "grid": records})
    diag = {"nmll": best.nmll, "h_smooth": best.h_smooth, "lambda": ls.lam,
            "aic": ls.aic, "grid": records, "trace": best.trace, "converged": best.converged}
    if not best.converged:
        warnings.warn("structure fit did not reach the acyclicity tolerance", RuntimeWarning)
    return best.graph, ls, diag


def _init_pathway(r: int, p: int, rng) -> dict:
    return {"S_sub": torch.tensor(rng.normal(0.0, 1.0, (r, p)), dtype=DT),
            "logL_sub": torch.tensor(rng.uniform(0, 1, (r, p)), dtype=DT),
            "tau_raw": torch.zeros((r, p), dtype=DT)}


def fit_pathways(obs: ObservationSet, cfg, graph: GraphParams, structure: LearnedStructure | None,
                 freeze_graph: bool):
    """Fit pathway couplings (and optionally the graph) with the online objective."""
    rng = np.random.default_rng(cfg.seed + 1)
    k = obs.k
    gspec = _graph_spec(cfg, k, "structgp")
    if structure is not None:
        gspec.offmask = gspec.offmask * structure.adjacency
    if cfg.noise_mode == "fixed":
        gspec.noise = np.asarray(cfg.noise_init, dtype=float)
    gt = graph_to_tensors(gspec, graph)
    pw = _init_pathway(obs.r, cfg.p, rng)
    geo = LPGeometry.for_times(obs.time, cfg.m, cfg.boundary_factor, cfg.tau_max)
    pt = PaddedTensors.from_padded(pad_by_task(obs))
    q = cfg.p * k * cfg.m
    cyc = _BatchCycler(pt.B, cfg.batch_size, cfg.seed + 2)
    gamma = cfg.gamma
    holder = {"state": AccumulatorState.fresh(q, beta=cfg.beta_decay)}
    n_batches = math.ceil(pt.B / max(1, min(cfg.batch_size, pt.B)))
    pw_names = ("S_sub", "logL_sub", "tau_raw")
    lr_scale = {"S_sub": cfg.lr_pathway / cfg.lr, "logL_sub": cfg.lr_pathway / cfg.lr,
                "tau_raw": cfg.lr_pathway / cfg.lr}

    def loss_fn(t, it):
        S, logL, sd = gspec.build({**gt, **t} if freeze_graph else t)
        rows = cyc.next()
        batch = pt.take(rows)
        st = holder["state"]
        if it > 0 and it % n_batches == 0:
            st = st.new_epoch()
        if cfg.lp_objective == "full":
            val, _ = lp_full_pass(S, logL, sd, {n: t[n] for n in pw_names}, gamma, geo, pt, grad=True)
            return val / pt.B
        val, new = lp_batch_nmll(st, S, logL, sd, {n: t[n] for n in pw_names}, gamma, geo, batch)
        holder["state"] = new.detached()
        return val / batch.B

    if freeze_graph:
        tensors, trace = _adam_fit(loss_fn, pw, cfg.lp_steps, cfg.lr, lr_scale)
        all_t = {**gt, **tensors}
        al, conv = {}, True
    else:
        pen = PenaltyConfig(cfg.lp_lambda, cfg.beta_L1)

        def pen_loss(t, it):
            S, _, _ = gspec.build(t)
            return loss_fn(t, it) + smooth_l1_t(S, pen)

        def constraint_fn(t):
            return acyclicity_t(t["S"] * torch.as_tensor(gspec.offmask, dtype=DT))

        res = augmented_lagrangian_fit(pen_loss, constraint_fn, {**gt, **pw},
                                       LagrangianState(epsilon=cfg.epsilon, rho_max=cfg.rho_max),
                                       steps=cfg.lp_steps, lr=cfg.lr, max_outer=cfg.max_outer,
                                       lr_scale=lr_scale)
        all_t, trace, al, conv = res.params, res.trace, res.state.to_dict(), res.converged
    new_graph = graph if freeze_graph else tensors_to_graph(gspec, all_t)
    W = _offdiag_np(new_graph.S)
    h = acyclicity(W)
    if not freeze_graph:
        structure = hard_threshold(W, min_weight=cfg.edge_threshold)
        new_graph = _prune(new_graph, structure.adjacency)
    Sg = torch.as_tensor(new_graph.S, dtype=DT)
    Lg = torch.as_tensor(new_graph.logL, dtype=DT)
    sdg = torch.as_tensor(np.broadcast_to(new_graph.noise, (k,)).copy(), dtype=DT)
    pwt = {n: all_t[n] for n in pw_names}
    total, state = lp_full_pass(Sg, Lg, sdg, pwt, gamma, geo, pt)
    tau = tau_from_raw(pwt["tau_raw"], geo.tau_max).numpy()
    pathway = PathwayParams(pwt["S_sub"].numpy(), pwt["logL_sub"].numpy(), tau, gamma)
    diag = {"nmll": float(total), "h_smooth": h, "trace": trace, "al_state": al, "converged": conv}
    return new_graph, structure, pathway, geo, state, diag


def fit_model(obs: ObservationSet, cfg, base: "ModelBundle | None" = None,
              transform: TransformState | None = None) -> "ModelBundle":
    """Run the configured pipeline and return a :class:`ModelBundle`."""
    mode = cfg.mode
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    pathway = geo = state = None
    if mode in ("structgp", "independent", "no-structure"):
        graph, structure, diag = fit_structgp(obs, cfg, mode)
    elif mode == "lp-fixed":
        if base is None:
            raise ValueError("lp-fixed needs a fitted StructGP bundle to freeze")
        if base.graph.k != obs.k:
            raise ValueError("base bundle and data disagree on the number of tasks")
        graph, structure, pathway, geo, state, diag = fit_pathways(obs, cfg, base.graph,
                                                                   base.structure, True)
    else:
        if base is not None:
            g0, s0 = base.graph, base.structure
            pre = {}
        else:
            g0, s0, pre = fit_structgp(obs, cfg, "structgp")
        graph, structure, pathway, geo, state, diag = fit_pathways(obs, cfg, g0, None, False)
        diag["structgp_init"] = {key: pre.get(key) for key in ("nmll", "lambda", "aic")}
    if structure is not None and mode != "lp-fixed":
        structure.nmll = float(diag["nmll"])
        structure.aic = 2.0 * structure.n_edges + 2.0 * float(diag["nmll"])
        if mode.startswith("lp"):
            structure.lam = cfg.lp_lambda
        structure.diagnostics["h_smooth"] = float(diag.get("h_smooth", math.nan))
    return ModelBundle(mode, graph, obs.catalog, structure, pathway, transform, geo, state,
                       list(obs.subject_labels), diag, cfg.to_dict())


# ---------------------------------------------------------------------------
# bundle and prediction
# ---------------------------------------------------------------------------

BUNDLE_FORMAT = "structgp-bundle"


@dataclass
class ModelBundle:
    mode: str
    graph: GraphParams
    catalog: TaskCatalog
    structure: LearnedStructure | None = None
    pathway: PathwayParams | None = None
    transform: TransformState | None = None
    geometry: LPGeometry | None = None
    latent_state: AccumulatorState | None = None
    subject_labels: list | None = None
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.catalog.k != self.graph.k:
            raise ValueError("catalog and graph disagree on the number of tasks")
        if self.pathway is not None and self.subject_labels is not None \
                and self.pathway.r != len(self.subject_labels):
            raise ValueError("pathway parameters and subject labels disagree")

    @property
    def standardized(self) -> StandardizedGraphParams:
        return standardize(self.graph)

    def assignments(self):
        return assign_pathways(self.pathway) if self.pathway is not None else None

    def to_dict(self) -> dict:
        sp = self.standardized
        d = {"format": BUNDLE_FORMAT, "version": 1, "mode": self.mode,
             "graph": self.graph.to_dict(),
             "standardized": {"S_tilde": sp.S_tilde.tolist(), "s": sp.s.tolist()},
             "catalog": self.catalog.to_dict(),
             "structure": self.structure.to_dict() if self.structure else None,
             "pathway": self.pathway.to_dict() if self.pathway else None,
             "transform": json.loads(self.transform.to_json()) if self.transform else None,
             "geometry": self.geometry.to_dict() if self.geometry else None,
             "latent_state": json.loads(self.latent_state.to_json()) if self.latent_state else None,
             "subject_labels": self.subject_labels,
             "diagnostics": _jsonable(self.diagnostics), "config": self.config}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ModelBundle":
        d = json.loads(text)
        if d.get("format") != BUNDLE_FORMAT:
            raise ValueError("not a model bundle")
        return cls(d["mode"], GraphParams.from_dict(d["graph"]), TaskCatalog.from_dict(d["catalog"]),
                   LearnedStructure.from_dict(d["structure"]) if d.get("structure") else None,
                   PathwayParams.from_dict(d["pathway"]) if d.get("pathway") else None,
                   TransformState.from_json(json.dumps(d["transform"])) if d.get("transform") else None,
                   LPGeometry.from_dict(d["geometry"]) if d.get("geometry") else None,
                   AccumulatorState.from_json(json.dumps(d["latent_state"])) if d.get("latent_state") else None,
                   d.get("subject_labels"), d.get("diagnostics", {}), d.get("config", {}))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _structgp_cov(sp: StandardizedGraphParams, ta, va, tb, vb) -> np.ndarray:
    S = torch.as_tensor(sp.S_tilde, dtype=DT)
    logL = torch.as_tensor(sp.logL, dtype=DT)
    with torch.no_grad():
        coef, rate = pair_tables_t(S, logL)
        return covariance_t(coef, rate, torch.as_tensor(ta, dtype=DT), torch.as_tensor(va),
                            torch.as_tensor(tb, dtype=DT), torch.as_tensor(vb)).numpy()


def _subject_features(bundle: ModelBundle, pw_row: dict, task, time) -> np.ndarray:
    sp = bundle.standardized
    geo = bundle.geometry
    f = lambda x: torch.as_tensor(np.asarray(x, dtype=float)[None], dtype=DT)
    with torch.no_grad():
        Phi = lp_features_t(torch.as_tensor(sp.S_tilde, dtype=DT), torch.as_tensor(sp.logL, dtype=DT),
                            f(pw_row["S_sub"]), f(pw_row["logL_sub"]), f(pw_row["tau"]),
                            bundle.pathway.gamma, torch.zeros(len(task), dtype=torch.int64),
                            torch.as_tensor(task, dtype=torch.int64), torch.as_tensor(time, dtype=DT),
                            geo.m, geo.L, geo.center)
    return Phi.numpy()


def adapt_subject(bundle: ModelBundle, task, time, value, steps: int = 150, lr: float = 0.05,
                  seed: int = 0) -> dict:
    """Fit pathway couplings of an unseen subject to its conditioning data.

    Maximises the marginal likelihood of the subject's records under the
    latent-weight posterior carried by the bundle, with the graph frozen.
    """
    sp = bundle.standardized
    geo = bundle.geometry
    gamma = bundle.pathway.gamma
    mu, Sig = bundle.latent_state.posterior()
    St, logL = torch.as_tensor(sp.S_tilde, dtype=DT), torch.as_tensor(sp.logL, dtype=DT)
    task_t = torch.as_tensor(task, dtype=torch.int64)
    time_t = torch.as_tensor(time, dtype=DT)
    y = torch.as_tensor(value, dtype=DT)
    M = (1 - gamma) * torch.as_tensor(_structgp_cov(sp, time, task, time, task), dtype=DT)
    M = M + torch.diag(torch.as_tensor(sp.noise_var()[np.asarray(task)], dtype=DT))
    rng = np.random.default_rng(seed)
    p = bundle.pathway.p
    init = {"S_sub": torch.tensor(rng.normal(0, 0.1, (1, p)), dtype=DT),
            "logL_sub": torch.tensor(np.full((1, p), float(bundle.pathway.logL_sub.mean())), dtype=DT),
            "tau_raw": torch.zeros((1, p), dtype=DT)}

    def loss_fn(t, it):
        tau = tau_from_raw(t["tau_raw"], geo.tau_max)
        Phi = lp_features_t(St, logL, t["S_sub"], t["logL_sub"], tau, gamma,
                            torch.zeros(len(task), dtype=torch.int64), task_t, time_t,
                            geo.m, geo.L, geo.center)
        K = Phi @ Sig @ Phi.T + M
        L = cholesky_jitter_t(K)
        r_ = y - Phi @ mu
        a = torch.linalg.solve_triangular(L, r_[:, None], upper=False)[:, 0]
        return 0.5 * (a * a).sum() + torch.log(torch.diagonal(L)).sum()

    tensors, _ = _adam_fit(loss_fn, init, steps, lr)
    return {"S_sub": tensors["S_sub"].numpy()[0], "logL_sub": tensors["logL_sub"].numpy()[0],
            "tau": tau_from_raw(tensors["tau_raw"], geo.tau_max).numpy()[0]}


def predict_subject(bundle: ModelBundle, cond_task, cond_time, cond_value, q_task, q_time,
                    subject_label=None, include_noise: bool = True,
                    adapt_steps: int = 150) -> PosteriorForecast:
    """Posterior predictive forecast for one subject in transformed space."""
    sp = bundle.standardized
    cond_task = np.asarray(cond_task, dtype=np.int64)
    q_task = np.asarray(q_task, dtype=np.int64)
    cond_time = np.asarray(cond_time, dtype=float)
    q_time = np.asarray(q_time, dtype=float)
    y = np.asarray(cond_value, dtype=float)
    nv = sp.noise_var()
    sig = np.sqrt(nv[cond_task])
    sig_star = np.sqrt(nv[q_task]) if include_noise else None
    if bundle.pathway is None:
        K = _structgp_cov(sp, cond_time, cond_task, cond_time, cond_task)
        Ks = _structgp_cov(sp, cond_time, cond_task, q_time, q_task)
        kss = np.ones(q_task.size)
        return posterior_predict(K, Ks, kss, y, sig, sig_star)
    gamma = bundle.pathway.gamma
    labels = bundle.subject_labels or []
    if subject_label is not None and str(subject_label) in labels:
        i = labels.index(str(subject_label))
        row = {"S_sub": bundle.pathway.S_sub[i], "logL_sub": bundle.pathway.logL_sub[i],
               "tau": bundle.pathway.tau[i]}
    elif y.size:
        row = adapt_subject(bundle, cond_task, cond_time, y, steps=adapt_steps)
    else:
        raise ValueError(f"subject {subject_label!r} was not seen in training and has no "
                         "conditioning data")
    mu, Sig = (x.numpy() for x in bundle.latent_state.posterior())
    Pc = _subject_features(bundle, row, cond_task, cond_time)
    Pq = _subject_features(bundle, row, q_task, q_time)
    K = Pc @ Sig @ Pc.T + (1 - gamma) * _structgp_cov(sp, cond_time, cond_task, cond_time, cond_task)
    Ks = Pc @ Sig @ Pq.T + (1 - gamma) * _structgp_cov(sp, cond_time, cond_task, q_time, q_task)
    kss = np.einsum("nq,qr,nr->n", Pq, Sig, Pq) + (1 - gamma)
    base_c, base_q = Pc @ mu, Pq @ mu
    fc = posterior_predict(K, Ks, kss, y - base_c, sig, sig_star)
    return PosteriorForecast(fc.mean + base_q, fc.variance, fc.cov)


def predict(bundle: ModelBundle, cond: ObservationSet | None, query_subject, query_task, query_time,
            include_noise: bool = True, cond_labels=None):
    """Forecasts for query rows, conditioning each subject on its own records.

    ``query_subject`` are subject labels (strings); ``cond`` holds the
    conditioning records with labels in ``cond.subject_labels``.  Returns
    ``(mean, variance, lo95, hi95)`` in the original value scale.
    """
    qs = np.asarray([str(s) for s in query_subject])
    qt = np.asarray(query_task, dtype=np.int64)
    qx = np.asarray(query_time, dtype=float)
    n = qs.size
    mean, var, lo, hi = (np.zeros(n) for _ in range(4))
    lab_to_id = {lab: i for i, lab in enumerate(cond.subject_labels)} if cond is not None else {}
    for s in dict.fromkeys(qs.tolist()):
        sel = np.flatnonzero(qs == s)
        if s in lab_to_id:
            idx = cond.subject_index(lab_to_id[s])
            ct, cx, cy = cond.task[idx], cond.time[idx], cond.value[idx]
        else:
            ct, cx, cy = np.zeros(0, np.int64), np.zeros(0), np.zeros(0)
        fc = predict_subject(bundle, ct, cx, cy, qt[sel], qx[sel], s, include_noise)
        mean[sel], var[sel], lo[sel], hi[sel] = fc.mean, fc.variance, fc.lo95, fc.hi95
    if bundle.transform is not None:
        slope = bundle.transform.scale_at(qt, mean)
        lo = bundle.transform.inverse(qt, lo)
        hi = bundle.transform.inverse(qt, hi)
        var = var * slope ** 2
        mean = bundle.transform.inverse(qt, mean)
    return mean, var, lo, hi
