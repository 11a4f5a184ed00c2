"""Ground-truth generation and recovery experiments.

Graphs are undirected Erdős–Rényi draws oriented by a random permutation,
so they are acyclic by construction.  Trajectories are exact Gaussian draws
from the standardized model covariance; in pathway mode the shared part is
obtained by convolving the composite Gaussian filters with white noise on a
fine grid, which is exact up to a trapezoid sum on a smooth integrand.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import ObservationSet, TaskCatalog, _atomic_write
from .gp import cholesky_jitter
from .kernels import GraphParams, assemble_covariance, standardize
from .latent import PathwayParams
from .metrics import ari, edge_f1, nmi, shd
from .structure import topological_order

log = logging.getLogger(__name__)

__all__ = [
    "SimConfig",
    "GroundTruth",
    "sample_dag",
    "sample_truth",
    "draw_values",
    "sample_trajectories",
    "recovery_experiment",
    "summarize",
]


@dataclass
class SimConfig:
    """Simulation settings.  Defaults follow the published protocol."""

    k: int = 10
    r: int = 100
    obs_per_task: int = 25
    mean_degree: float = 2.0
    weight_low: float = 0.5
    weight_high: float = 1.5
    logL_low: float = 0.0
    logL_high: float = 1.0
    time_low: float = 0.0
    time_high: float = 10.0
    noise_var: float = 1e-2
    lp: bool = False
    p: int = 2
    mixture: tuple = (0.3, 0.7)
    tau_low: float = 0.0
    tau_high: float = 1.0
    repetitions: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.r < 1 or self.obs_per_task < 1:
            raise ValueError("k, r and obs_per_task must be positive")
        if not 0 <= self.mean_degree < max(self.k, 2):
            raise ValueError("mean_degree must lie in [0, k)")
        if not 0 < self.weight_low <= self.weight_high:
            raise ValueError("need 0 < weight_low <= weight_high")
        if self.noise_var < 0:
            raise ValueError("noise_var must be >= 0")
        self.mixture = tuple(float(x) for x in self.mixture)
        if len(self.mixture) != 2 or min(self.mixture) < 0 or sum(self.mixture) <= 0:
            raise ValueError("mixture must be two non-negative weights")

    @property
    def gamma(self) -> float:
        """Covariance weight of the shared pathway part."""
        a, b = self.mixture
        return a / (a + b)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mixture"] = list(self.mixture)
        return d


@dataclass
class GroundTruth:
    adjacency: np.ndarray
    params: GraphParams
    pathway: PathwayParams | None = None
    labels: np.ndarray | None = None

    @property
    def order(self):
        return topological_order(self.adjacency)

    def to_dict(self) -> dict:
        d = {"adjacency": self.adjacency.astype(int).tolist(), "order": self.order,
             "graph": self.params.to_dict()}
        if self.pathway is not None:
            d["pathway"] = self.pathway.to_dict()
            d["labels"] = self.labels.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        pw = PathwayParams.from_dict(d["pathway"]) if "pathway" in d else None
        labels = np.asarray(d["labels"]) if "labels" in d else None
        return cls(np.asarray(d["adjacency"], dtype=bool), GraphParams.from_dict(d["graph"]), pw, labels)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_dag(k: int, mean_degree: float, seed=0, weight_low: float = 0.5,
               weight_high: float = 1.5):
    """Random DAG with signed weights.

    Returns ``(adjacency, W)`` where ``adjacency[v, u]`` marks ``u -> v`` and
    ``W`` holds the off-diagonal weights (zero elsewhere).
    """
    rng = _rng(seed)
    pe = mean_degree / (k - 1) if k > 1 else 0.0
    iu = np.triu_indices(k, 1)
    present = rng.random(iu[0].size) < pe
    rank = np.empty(k, dtype=np.int64)
    rank[rng.permutation(k)] = np.arange(k)
    adj = np.zeros((k, k), dtype=bool)
    for a, b in zip(iu[0][present], iu[1][present]):
        parent, child = (a, b) if rank[a] < rank[b] else (b, a)
        adj[child, parent] = True
    n = int(adj.sum())
    mag = rng.uniform(weight_low, weight_high, n)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    W = np.zeros((k, k))
    W[adj] = sign * mag
    return adj, W


def sample_truth(cfg: SimConfig, seed=None) -> GroundTruth:
    """Graph, per-source lengthscales and (in pathway mode) subject couplings."""
    rng = _rng(cfg.seed if seed is None else seed)
    adj, W = sample_dag(cfg.k, cfg.mean_degree, rng, cfg.weight_low, cfg.weight_high)
    S = np.eye(cfg.k) + W
    log_ell = rng.uniform(cfg.logL_low, cfg.logL_high, cfg.k)
    logL = np.tile(log_ell, (cfg.k, 1))        # column u carries source u's lengthscale
    params = GraphParams(S, logL, math.sqrt(cfg.noise_var))
    if not cfg.lp:
        return GroundTruth(adj, params)
    labels = rng.integers(0, cfg.p, cfg.r)
    logits = np.where(np.arange(cfg.p)[None, :] == labels[:, None], 30.0, 0.0)
    logL_sub = rng.uniform(cfg.logL_low, cfg.logL_high, (cfg.r, cfg.p))
    tau = rng.uniform(cfg.tau_low, cfg.tau_high, (cfg.r, cfg.p))
    return GroundTruth(adj, params, PathwayParams(logits, logL_sub, tau, cfg.gamma), labels)


def draw_values(params, tasks, times, rng, size=None, noise: bool = False):
    """Exact Gaussian draw(s) of the standardized StructGP at ``(task, time)`` rows.

    Repeated rows receive identical latent values.  Returns shape ``(n,)``
    or ``(size, n)``.
    """
    rng = _rng(rng)
    sp = params if hasattr(params, "S_tilde") else standardize(params)
    rows = np.stack([np.asarray(tasks, dtype=float), np.asarray(times, dtype=float)], axis=1)
    uniq, inv = np.unique(rows, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    K = assemble_covariance(sp, uniq, uniq, add_noise=False)
    L, _ = cholesky_jitter(K)
    m = 1 if size is None else size
    z = rng.standard_normal((m, uniq.shape[0]))
    f = (z @ L.T)[:, inv]
    if noise:
        sd = np.sqrt(sp.noise_var())[np.asarray(tasks, dtype=np.int64)]
        f = f + rng.standard_normal(f.shape) * sd
    return f[0] if size is None else f


def _shared_component(truth: GroundTruth, subject, task, time, rng, step: float = 0.05):
    """Pathway part: composite Gaussian filters convolved with grid white noise."""
    sp = standardize(truth.params)
    pw = truth.pathway
    St, ell = sp.S_tilde, np.exp(sp.logL)
    lsub = np.exp(pw.logL_sub)
    pi = pw.weights()
    k = St.shape[0]
    width = math.sqrt(float(ell.max() + lsub.max()))
    lo = float(time.min() - pw.tau.max()) - 8 * width
    hi = float(time.max() - pw.tau.min()) + 8 * width
    grid = np.arange(lo, hi + step, step)
    out = np.zeros(time.size)
    for u in range(pw.p):
        noise = rng.standard_normal((k, grid.size)) * math.sqrt(step)   # white noise of pathway u
        members = np.flatnonzero(pi[:, u] > 1e-12)
        for i in members:
            sel = np.flatnonzero(subject == i)
            if sel.size == 0:
                continue
            g, tau, a = lsub[i, u], pw.tau[i, u], pi[i, u]
            for q in range(k):
                tot = g + ell[task[sel], q]
                amp = a * St[task[sel], q] * math.sqrt(math.pi) * np.sqrt(g * ell[task[sel], q] / tot)
                kern = np.exp(-np.square(time[sel, None] - tau - grid[None, :]) / tot[:, None])
                out[sel] += amp * (kern @ noise[q])
    return out


def sample_trajectories(truth: GroundTruth, cfg: SimConfig, seed=None) -> ObservationSet:
    """Random observation times and exact model draws plus observation noise."""
    rng = _rng(cfg.seed if seed is None else seed)
    k, n = cfg.k, cfg.obs_per_task
    subject = np.repeat(np.arange(cfg.r), k * n)
    task = np.tile(np.repeat(np.arange(k), n), cfg.r)
    time = rng.uniform(cfg.time_low, cfg.time_high, subject.size)
    sp = standardize(truth.params)
    value = np.empty(subject.size)
    scale = math.sqrt(1.0 - truth.pathway.gamma) if truth.pathway is not None else 1.0
    for i in range(cfg.r):
        sel = slice(i * k * n, (i + 1) * k * n)
        value[sel] = scale * draw_values(sp, task[sel], time[sel], rng)
    if truth.pathway is not None and truth.pathway.gamma > 0:
        value += math.sqrt(truth.pathway.gamma) * _shared_component(truth, subject, task, time, rng)
    value += rng.standard_normal(value.size) * math.sqrt(cfg.noise_var)
    return ObservationSet(subject, task, time, value, k, cfg.r, TaskCatalog.default(k))


def summarize(values) -> dict:
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=float)
    if v.size == 0:
        return {"median": None, "q25": None, "q75": None, "iqr": None, "n": 0}
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q25": float(q25), "q75": float(q75),
            "iqr": float(q75 - q25), "n": int(v.size)}


METRIC_KEYS = ("shd", "f1", "ari", "nmi")


def score_estimate(truth: GroundTruth, est_adj, est_labels=None) -> dict:
    rec = {"shd": shd(truth.adjacency, est_adj), "f1": edge_f1(truth.adjacency, est_adj),
           "ari": None, "nmi": None}
    if truth.labels is not None and est_labels is not None:
        rec["ari"] = ari(truth.labels, est_labels)
        rec["nmi"] = nmi(truth.labels, est_labels)
    return rec


def recovery_experiment(cfg: SimConfig, subject_counts, fit_fn=None, repetitions: int | None = None,
                        out_dir=None, extra: dict | None = None) -> dict:
    """Generate, fit, threshold and score over a grid of subject counts.

    Parameters
    ----------
    fit_fn : callable ``(obs, truth, seed) -> (adjacency, labels or None)``
        The estimator.  ``None`` uses the truth itself (plumbing check).
    out_dir : optional directory receiving ``recovery.jsonl``,
        ``recovery_summary.json`` and ``recovery_plot.csv``.

    Returns the summary dictionary.
    """
    reps = cfg.repetitions if repetitions is None else repetitions
    records, failures = [], {}
    for r in subject_counts:
        c = SimConfig(**{**cfg.to_dict(), "r": int(r)})
        for rep in range(reps):
            rng = np.random.default_rng([cfg.seed, int(r), rep])
            truth = sample_truth(c, rng)
            obs = sample_trajectories(truth, c, rng)
            try:
                if fit_fn is None:
                    est_adj, est_labels = truth.adjacency, truth.labels
                else:
                    est_adj, est_labels = fit_fn(obs, truth, int(rng.integers(2 ** 31)))
            except Exception as exc:     # failures are reported, not fatal
                log.warning("repetition %d at r=%d failed: %s", rep, r, exc)
                failures[str(r)] = failures.get(str(r), 0) + 1
                continue
            rec = {"r": int(r), "rep": rep, **score_estimate(truth, est_adj, est_labels),
                   "n_true_edges": int(truth.adjacency.sum()),
                   "n_est_edges": int(np.asarray(est_adj, dtype=bool).sum())}
            records.append(rec)
    settings = {}
    for r in subject_counts:
        rs = [x for x in records if x["r"] == int(r)]
        settings[str(r)] = {key: summarize([x[key] for x in rs]) for key in METRIC_KEYS}
        settings[str(r)]["failed"] = failures.get(str(r), 0)
    summary = {"settings": settings, "repetitions": reps, "sim_config": cfg.to_dict(),
               "nmi_normalization": "arithmetic", **(extra or {})}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _atomic_write(os.path.join(out_dir, "recovery.jsonl"),
                      "".join(json.dumps(x) + "\n" for x in records))
        _atomic_write(os.path.join(out_dir, "recovery_summary.json"), json.dumps(summary, indent=2))
        lines = ["metric,x,y,ylo,yhi"]
        for r in subject_counts:
            for key in METRIC_KEYS:
                s = settings[str(r)][key]
                if s["median"] is not None:
                    lines.append(f"{key},{r},{s['median']!r},{s['q25']!r},{s['q75']!r}")
        _atomic_write(os.path.join(out_dir, "recovery_plot.csv"), "\n".join(lines) + "\n")
    summary["records"] = records
    return summary
