"""Graph, partition and forecast scores."""

from __future__ import annotations

import numpy as np
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

__all__ = ["shd", "edge_f1", "edge_prf", "ari", "nmi", "forecast_metrics"]

NMI_NORMALIZATION = "arithmetic"


def _offdiag_bool(adj):
    a = np.array(adj, dtype=bool)
    np.fill_diagonal(a, False)
    return a


def shd(true_adj, est_adj) -> int:
    """Structural Hamming distance; a reversed edge costs 1."""
    t, e = _offdiag_bool(true_adj), _offdiag_bool(est_adj)
    if t.shape != e.shape:
        raise ValueError("adjacency shapes differ")
    diff = t != e
    # a reversal shows up as a mismatch at (v,u) and at (u,v); count the pair once
    pair = diff & diff.T & (t | t.T) & (e | e.T) & (t != t.T) & (e != e.T)
    return int(diff.sum() - np.triu(pair).sum())


def edge_prf(true_adj, est_adj):
    """Directed-edge precision, recall and F1 (F1 = 1 when both graphs are empty)."""
    t, e = _offdiag_bool(true_adj), _offdiag_bool(est_adj)
    tp = int((t & e).sum())
    nt, ne = int(t.sum()), int(e.sum())
    if nt == 0 and ne == 0:
        return 1.0, 1.0, 1.0
    prec = tp / ne if ne else 0.0
    rec = tp / nt if nt else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return prec, rec, f1


def edge_f1(true_adj, est_adj) -> float:
    return edge_prf(true_adj, est_adj)[2]


def ari(labels_true, labels_est) -> float:
    """Adjusted Rand index (permutation model)."""
    a, b = np.asarray(labels_true), np.asarray(labels_est)
    if a.shape != b.shape:
        raise ValueError("label vectors differ in length")
    return float(adjusted_rand_score(a, b))


def nmi(labels_true, labels_est) -> float:
    """Mutual information over the arithmetic mean of the two entropies.

    When both partitions have a single cluster the ratio is 0/0 and is
    defined as 0.
    """
    a, b = np.asarray(labels_true), np.asarray(labels_est)
    if a.shape != b.shape:
        raise ValueError("label vectors differ in length")
    if np.unique(a).size <= 1 and np.unique(b).size <= 1:
        return 0.0
    return float(normalized_mutual_info_score(a, b, average_method=NMI_NORMALIZATION))


def _scores(err, inside):
    mse = float(np.mean(err ** 2))
    return {"rmse": float(np.sqrt(mse)), "mae": float(np.mean(np.abs(err))),
            "mse": mse, "coverage": float(np.mean(inside))}


def forecast_metrics(subject, task, truth, mean, lo, hi, n_boot: int = 1000, seed: int = 0,
                     task_names=None) -> dict:
    """Per-task and macro-averaged RMSE, MAE, MSE and interval coverage.

    Bootstrap 95% intervals resample whole subjects with replacement.
    """
    subject = np.asarray(subject)
    task = np.asarray(task)
    err = np.asarray(mean, dtype=float) - np.asarray(truth, dtype=float)
    inside = (np.asarray(truth) >= np.asarray(lo)) & (np.asarray(truth) <= np.asarray(hi))
    tasks = np.unique(task)
    names = task_names or {}

    def summarize(sel):
        per = {}
        for j in tasks:
            s = sel & (task == j)
            if s.any():
                per[names.get(int(j), str(int(j)))] = _scores(err[s], inside[s])
        macro = {key: float(np.mean([p[key] for p in per.values()])) for key in
                 ("rmse", "mae", "mse", "coverage")} if per else {}
        return per, macro

    per, macro = summarize(np.ones(err.size, dtype=bool))
    out = {"per_task": per, "macro": macro, "overall": _scores(err, inside), "n": int(err.size)}
    subjects = np.unique(subject)
    if n_boot > 0 and subjects.size > 1:
        rng = np.random.default_rng(seed)
        groups = {s: np.flatnonzero(subject == s) for s in subjects}
        draws = {key: [] for key in ("rmse", "mae", "mse", "coverage")}
        for _ in range(n_boot):
            pick = rng.choice(subjects, size=subjects.size, replace=True)
            idx = np.concatenate([groups[s] for s in pick])
            sc = _scores(err[idx], inside[idx])
            for key in draws:
                draws[key].append(sc[key])
        out["bootstrap_ci95"] = {key: [float(np.percentile(v, 2.5)), float(np.percentile(v, 97.5))]
                                 for key, v in draws.items()}
        out["bootstrap"] = {"n_boot": n_boot, "seed": seed, "unit": "subject"}
    return out
