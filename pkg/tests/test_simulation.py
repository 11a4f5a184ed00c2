import dataclasses
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structgp.kernels import GraphParams, cross_cov, standardize
from structgp.metrics import ari, edge_f1, edge_prf, forecast_metrics, nmi, shd
from structgp.latent import lp_covariance
from structgp.simulation import (_shared_component, GroundTruth, SimConfig, draw_values, recovery_experiment,
                                 sample_dag, sample_trajectories, sample_truth, summarize)
from structgp.structure import is_acyclic, topological_order


def adj_from_edges(k, edges):
    A = np.zeros((k, k), dtype=bool)
    for u, v in edges:
        A[v, u] = True
    return A


class TestSHD:
    def test_examples(self):
        A = adj_from_edges(3, [(0, 1)])
        assert shd(A, A) == 0
        assert shd(np.zeros((3, 3), bool), A) == 1
        assert shd(A, adj_from_edges(3, [(1, 0)])) == 1

    def test_metric_exhaustive_k3(self):
        # every boolean digraph on 3 nodes without self-loops (2^6 of them)
        offdiag = [(i, j) for i in range(3) for j in range(3) if i != j]
        graphs = []
        for bits in itertools.product([False, True], repeat=6):
            A = np.zeros((3, 3), dtype=bool)
            for (i, j), b in zip(offdiag, bits):
                A[i, j] = b
            graphs.append(A)
        D = np.array([[shd(a, b) for b in graphs] for a in graphs])
        assert np.all(np.diag(D) == 0)
        assert np.all(D == D.T)
        off = ~np.eye(len(graphs), dtype=bool)
        assert np.all(D[off] > 0)
        # triangle inequality over all triples
        # D[a, c] <= D[a, b] + D[b, c] for all triples (a, b, c)
        assert np.all(D[:, None, :] <= D[:, :, None] + D[None, :, :])


class TestPartitionScores:
    @staticmethod
    def brute_ari(a, b):
        n = len(a)
        same_a = [a[i] == a[j] for i, j in itertools.combinations(range(n), 2)]
        same_b = [b[i] == b[j] for i, j in itertools.combinations(range(n), 2)]
        n11 = sum(x and y for x, y in zip(same_a, same_b))
        pairs = len(same_a)
        sa, sb = sum(same_a), sum(same_b)
        expected = sa * sb / pairs
        max_index = (sa + sb) / 2
        return (n11 - expected) / (max_index - expected)

    def test_ari_examples(self):
        assert ari([0, 0, 1, 1], [0, 0, 1, 1]) == pytest.approx(1.0)
        assert ari([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)
        assert ari([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(self.brute_ari([0, 0, 1, 1], [0, 1, 0, 1]))
        assert ari([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(-0.5)

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 2)), min_size=4, max_size=25))
    @settings(max_examples=60, deadline=None)
    def test_ari_brute_force(self, pairs):
        a, b = [x for x, _ in pairs], [y for _, y in pairs]
        if len(set(a)) == 1 and len(set(b)) == 1:
            return
        ref = self.brute_ari(a, b)
        if math.isfinite(ref):
            assert ari(a, b) == pytest.approx(ref, abs=1e-12)

    @given(st.lists(st.integers(0, 3), min_size=3, max_size=30), st.permutations([0, 1, 2, 3]))
    @settings(max_examples=40, deadline=None)
    def test_permutation_invariance(self, labels, perm):
        other = [(x + 1) % 2 for x in labels]
        relabelled = [perm[x] for x in labels]
        assert ari(other, relabelled) == pytest.approx(ari(other, labels), abs=1e-12)
        assert nmi(other, relabelled) == pytest.approx(nmi(other, labels), abs=1e-12)

    def test_nmi_examples(self, rng):
        assert nmi([0, 0, 1, 1, 2], [0, 0, 1, 1, 2]) == pytest.approx(1.0)
        a, b = rng.integers(0, 3, 10_000), rng.integers(0, 3, 10_000)
        assert nmi(a, b) < 0.05
        assert nmi([0, 0, 0, 0], [0, 1, 0, 1]) == 0.0
        assert nmi([0, 0, 0], [1, 1, 1]) == 0.0

    def test_nmi_arithmetic_definition(self, rng):
        a, b = rng.integers(0, 3, 200), rng.integers(0, 4, 200)
        joint = np.zeros((3, 4))
        np.add.at(joint, (a, b), 1)
        P = joint / joint.sum()
        pa, pb = P.sum(1), P.sum(0)
        nz = P > 0
        mi = np.sum(P[nz] * np.log(P[nz] / np.outer(pa, pb)[nz]))
        ent = lambda p: -np.sum(p[p > 0] * np.log(p[p > 0]))
        assert nmi(a, b) == pytest.approx(mi / ((ent(pa) + ent(pb)) / 2), rel=1e-10)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ari([0, 1], [0])


class TestF1:
    def test_examples(self):
        A = adj_from_edges(3, [(0, 1), (1, 2)])
        assert edge_f1(A, A) == 1.0
        assert edge_f1(A, np.zeros_like(A)) == 0.0
        p, r, f = edge_prf(A, adj_from_edges(3, [(0, 1), (2, 1)]))
        assert (p, r, f) == (0.5, 0.5, 0.5)
        assert edge_f1(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


class TestForecastMetrics:
    def test_perfect(self):
        y = np.arange(6.0)
        out = forecast_metrics([0, 0, 0, 1, 1, 1], [0, 1, 0, 1, 0, 1], y, y, y - 1, y + 1, n_boot=50)
        assert out["macro"]["rmse"] == 0.0 and out["overall"]["coverage"] == 1.0
        assert out["bootstrap_ci95"]["rmse"] == [0.0, 0.0]

    def test_infinite_intervals(self, rng):
        y = rng.normal(size=40)
        out = forecast_metrics(np.repeat(np.arange(4), 10), np.zeros(40, int), y, np.zeros(40),
                               np.full(40, -np.inf), np.full(40, np.inf), n_boot=0)
        assert out["overall"]["coverage"] == 1.0

    def test_zero_forecast_on_unit_variance(self, rng):
        y = rng.normal(size=20_000)
        out = forecast_metrics(np.arange(20_000) % 100, np.zeros(20_000, int), y, np.zeros_like(y),
                               y - 1, y + 1, n_boot=0)
        assert out["overall"]["rmse"] == pytest.approx(1.0, abs=0.02)


class TestSampleDag:
    def test_empty(self):
        adj, W = sample_dag(6, 0.0, seed=3)
        assert not adj.any() and not W.any()

    def test_expected_edge_count(self):
        counts = [sample_dag(10, 2.0, seed=s)[0].sum() for s in range(1000)]
        assert 9.0 <= np.mean(counts) <= 11.0

    @given(st.integers(0, 10_000), st.integers(2, 12))
    @settings(max_examples=50, deadline=None)
    def test_acyclic_and_deterministic(self, seed, k):
        adj, W = sample_dag(k, min(2.0, k - 1.0), seed=seed)
        assert topological_order(adj) is not None
        adj2, W2 = sample_dag(k, min(2.0, k - 1.0), seed=seed)
        np.testing.assert_array_equal(adj, adj2)
        np.testing.assert_array_equal(W, W2)
        mag = np.abs(W[adj])
        assert np.all((mag >= 0.5) & (mag <= 1.5))
        assert np.all(W[~adj] == 0)

    def test_truth_roundtrip(self):
        truth = sample_truth(SimConfig(k=4, r=5, lp=True), seed=2)
        back = GroundTruth.from_dict(json.loads(json.dumps(truth.to_dict())))
        np.testing.assert_array_equal(back.adjacency, truth.adjacency)
        np.testing.assert_array_equal(back.labels, truth.labels)
        assert is_acyclic(back.adjacency)


class TestTrajectories:
    def setup_method(self):
        S = np.array([[1.0, 0.0, 0.0], [0.9, 1.0, 0.0], [0.0, -1.2, 1.0]])
        logL = np.array([[0.2, 0.7, 0.4]] * 3)
        self.params = GraphParams(S, logL, 0.1)

    def test_marginal_variance_and_covariance(self, rng):
        n = 10_000
        tasks = np.array([0, 1, 2, 1])
        times = np.array([3.0, 3.0, 3.0, 3.5])
        f = draw_values(self.params, tasks, times, rng, size=n, noise=True)
        var = f.var(axis=0)
        assert np.all((var >= 0.9 * 1.01) & (var <= 1.1 * 1.01))
        sp = standardize(self.params)
        for (a, b, dt) in [(0, 1, 0.0), (1, 2, 0.0), (1, 3, -0.5)]:
            va, vb = tasks[a], tasks[b]
            ref = float(cross_cov(sp, va, vb, times[a] - times[b]))
            prod = f[:, a] * f[:, b]
            se = prod.std() / math.sqrt(n)
            assert abs(prod.mean() - ref) <= 3 * se

    def test_duplicate_queries_identical(self, rng):
        f = draw_values(self.params, [0, 1, 0], [2.0, 2.0, 2.0], rng)
        assert f[0] == f[2]

    def test_row_count_and_determinism(self):
        cfg = SimConfig(k=3, r=4, obs_per_task=5)
        truth = sample_truth(cfg)
        a, b = sample_trajectories(truth, cfg), sample_trajectories(truth, cfg)
        assert a.value.size == 3 * 4 * 5
        np.testing.assert_array_equal(a.value, b.value)

    def test_shared_component_matches_kernel(self, rng):
        # the grid convolution of the pathway filters reproduces the closed-form shared covariance
        cfg = SimConfig(k=2, r=2, lp=True, mean_degree=1.0)
        truth = sample_truth(cfg, seed=5)
        truth.pathway = dataclasses.replace(truth.pathway, gamma=1.0)
        subject, task = np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1])
        time = np.array([5.0, 5.0, 5.3, 4.6])
        n = 4000
        f = np.stack([_shared_component(truth, subject, task, time, rng) for _ in range(n)])
        rows = np.stack([subject, task, time], axis=1)
        K = lp_covariance(standardize(truth.params), truth.pathway, rows)
        emp = f.T @ f / n
        for a in range(4):
            for b in range(a, 4):
                se = np.std(f[:, a] * f[:, b]) / math.sqrt(n)
                assert abs(emp[a, b] - K[a, b]) <= 3.5 * se + 1e-3


class TestRecoveryExperiment:
    def test_oracle(self, tmp_path):
        cfg = SimConfig(k=3, obs_per_task=3, lp=True, repetitions=3)
        out = recovery_experiment(cfg, [4, 6], out_dir=tmp_path)
        for r in ("4", "6"):
            s = out["settings"][r]
            assert s["shd"]["median"] == 0 and s["f1"]["median"] == 1 and s["ari"]["median"] == 1
        assert (tmp_path / "recovery.jsonl").read_text().count("\n") == 6
        assert (tmp_path / "recovery_plot.csv").read_text().startswith("metric,x,y,ylo,yhi")
        assert json.loads((tmp_path / "recovery_summary.json").read_text())["nmi_normalization"] == "arithmetic"

    def test_single_repetition_iqr(self):
        out = recovery_experiment(SimConfig(k=3, obs_per_task=2), [3], repetitions=1,
                                  fit_fn=lambda obs, truth, seed: (np.zeros((3, 3), bool), None))
        assert out["settings"]["3"]["shd"]["iqr"] == 0.0

    def test_failures_counted(self):
        def bad(obs, truth, seed):
            raise RuntimeError("nope")
        out = recovery_experiment(SimConfig(k=2, obs_per_task=2, mean_degree=1.0), [2], repetitions=2, fit_fn=bad)
        assert out["settings"]["2"]["failed"] == 2
        assert out["settings"]["2"]["shd"]["median"] is None

    def test_summarize(self):
        s = summarize([1, 2, 3, 4, None])
        assert s["median"] == 2.5 and s["n"] == 4
