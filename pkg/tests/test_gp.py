import math

import numpy as np
import pytest
import torch

from structgp.data import ObservationSet, pad_by_task
from structgp.gp import (NumericalError, blockwise_nmll, cholesky_jitter, nmll,
                         posterior_predict)
from structgp.kernels import GraphParams, assemble_covariance, standardize
from structgp.latent import lp_covariance_t
from structgp.kernels import pair_tables_t, standardize_t
from structgp.models import PaddedTensors, padded_nmll_t

from conftest import random_graph

LOG2PI = math.log(2 * math.pi)


def dense_nmll(A, y):
    return 0.5 * y @ np.linalg.inv(A) @ y + 0.5 * np.linalg.slogdet(A)[1] + 0.5 * y.size * LOG2PI


def spd(rng, n):
    X = rng.normal(size=(n, n))
    return X @ X.T + n * np.eye(n)


class TestNmll:
    def test_zero_observation(self):
        assert nmll(np.ones((1, 1)), np.zeros(1)) == pytest.approx(0.5 * LOG2PI, rel=1e-15)

    def test_substitution(self):
        assert nmll(np.ones((1, 1)), np.array([2.0])) == pytest.approx(2 + 0.5 * LOG2PI, rel=1e-15)

    def test_dense_oracle(self, rng):
        A = spd(rng, 5)
        y = rng.normal(size=5)
        assert nmll(A, y) == pytest.approx(dense_nmll(A, y), rel=1e-10)

    def test_noise_argument(self, rng):
        A = spd(rng, 4)
        y = rng.normal(size=4)
        assert nmll(A, y, sigma=0.3) == pytest.approx(dense_nmll(A + 0.09 * np.eye(4), y), rel=1e-10)

    def test_jitter_rescues_semidefinite(self):
        v = np.array([1.0, 1.0, 1.0])
        L, jit = cholesky_jitter(np.outer(v, v))
        assert jit > 0 and np.all(np.isfinite(L))

    def test_failure_reports_eigenvalue(self):
        A = np.diag([1.0, -1.0])
        with pytest.raises(NumericalError, match="smallest eigenvalue"):
            cholesky_jitter(A)


class TestPosterior:
    def setup_method(self):
        self.p = standardize(GraphParams([[1.0, 0.0], [0.7, 1.0]], np.log([[1.0, 1.0], [2.0, 0.5]]), 0.0))

    def test_interpolates_noiseless(self):
        rows = [(0, 0.0), (1, 0.5), (0, 1.3)]
        y = np.array([0.3, -1.0, 0.8])
        K = assemble_covariance(self.p, rows)
        f = posterior_predict(K, K, K, y)
        np.testing.assert_allclose(f.mean, y, atol=1e-8)
        np.testing.assert_allclose(f.variance, 0.0, atol=1e-8)

    def test_reverts_to_prior_far_away(self):
        rows = [(0, 0.0), (1, 0.5)]
        q = [(0, 1e4), (1, -1e4)]
        K = assemble_covariance(self.p, rows)
        Ks = assemble_covariance(self.p, rows, q)
        Kss = assemble_covariance(self.p, q, q)
        f = posterior_predict(K, Ks, Kss, np.array([1.0, 2.0]), sigma=0.1)
        np.testing.assert_allclose(f.mean, 0.0, atol=1e-12)
        np.testing.assert_allclose(f.variance, 1.0, atol=1e-12)

    def test_dense_oracle(self, rng):
        X = rng.normal(size=(9, 9))
        Kall = X @ X.T
        K, Ks, Kss = Kall[:6, :6], Kall[:6, 6:], Kall[6:, 6:]
        y = rng.normal(size=6)
        f = posterior_predict(K, Ks, Kss, y, sigma=0.5, full_cov=True)
        Ainv = np.linalg.inv(K + 0.25 * np.eye(6))
        np.testing.assert_allclose(f.mean, Ks.T @ Ainv @ y, rtol=1e-10)
        np.testing.assert_allclose(f.cov, Kss - Ks.T @ Ainv @ Ks, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(f.variance, np.diag(f.cov), rtol=1e-10)

    def test_interval_and_observation_noise(self, rng):
        K = spd(rng, 3)
        f = posterior_predict(K, K[:, :1], K[:1, :1], rng.normal(size=3), sigma=0.1, sigma_star=0.2)
        g = posterior_predict(K, K[:, :1], K[:1, :1], rng.normal(size=3), sigma=0.1)
        assert f.variance[0] == pytest.approx(g.variance[0] + 0.04, rel=1e-12)
        np.testing.assert_allclose(f.hi95 - f.mean, 1.959964 * f.std, rtol=1e-6)

    def test_variance_below_prior(self, rng):
        for _ in range(10):
            S, logL = random_graph(rng, 3)
            p = standardize(GraphParams(S, logL, 0.05))
            rows = np.stack([rng.integers(0, 3, 15), rng.uniform(0, 5, 15)], 1)
            q = np.stack([rng.integers(0, 3, 10), rng.uniform(0, 5, 10)], 1)
            f = posterior_predict(assemble_covariance(p, rows, add_noise=False),
                                  assemble_covariance(p, rows, q),
                                  assemble_covariance(p, q, q), rng.normal(size=15), sigma=0.05)
            assert np.all(f.variance <= 1.0 + 1e-8)

    def test_empty_training_set(self):
        f = posterior_predict(np.zeros((0, 0)), np.zeros((0, 2)), np.eye(2), np.zeros(0))
        np.testing.assert_array_equal(f.mean, 0.0)
        np.testing.assert_array_equal(f.variance, 1.0)


def _two_subject_obs(rng, k=3, n=10):
    subject = np.repeat([0, 1], n)
    task = rng.integers(0, k, 2 * n)
    time = rng.uniform(0, 5, 2 * n)
    return ObservationSet(subject, task, time, rng.normal(size=2 * n), k=k, r=2)


class TestBlockwise:
    def test_single_subject(self, rng):
        obs = _two_subject_obs(rng).select_subjects([0], reindex=True)
        p = standardize(GraphParams(*random_graph(rng, 3), 0.1))
        rows = np.stack([obs.task, obs.time], 1)
        assert blockwise_nmll(p, obs).nmll == pytest.approx(
            nmll(assemble_covariance(p, rows), obs.value), rel=1e-14)

    def test_sum_and_joint_oracle(self, rng):
        obs = _two_subject_obs(rng)
        p = standardize(GraphParams(*random_graph(rng, 3), 0.1))
        d = blockwise_nmll(p, obs)
        assert d.nmll == pytest.approx(d.per_subject[0] + d.per_subject[1], rel=1e-14)
        n = len(obs)
        K = np.zeros((n, n))
        for i in range(2):
            idx = obs.subject_index(i)
            K[np.ix_(idx, idx)] = assemble_covariance(p, np.stack([obs.task[idx], obs.time[idx]], 1))
        assert d.nmll == pytest.approx(dense_nmll(K, obs.value), rel=1e-10)

    def test_padded_torch_matches(self, rng):
        obs = _two_subject_obs(rng)
        S, logL = random_graph(rng, 3)
        g = GraphParams(S, logL, 0.2)
        pt = PaddedTensors.from_padded(pad_by_task(obs))
        val = padded_nmll_t(torch.tensor(S), torch.tensor(logL), torch.full((3,), 0.2,
                            dtype=torch.float64), pt).sum()
        assert float(val) == pytest.approx(blockwise_nmll(g, obs).nmll, rel=1e-10)

    def test_generating_parameters_fit_better(self):
        rng = np.random.default_rng(3)
        S = np.array([[1.0, 0, 0], [0.9, 1.0, 0], [0, -0.8, 1.0]])
        logL = np.log(np.full((3, 3), 1.5))
        g = standardize(GraphParams(S, logL, 0.1))
        subject = np.repeat(np.arange(25), 24)
        task = np.tile(np.repeat(np.arange(3), 8), 25)
        time = rng.uniform(0, 10, subject.size)
        value = np.empty(subject.size)
        for i in range(25):
            idx = np.flatnonzero(subject == i)
            K = assemble_covariance(g, np.stack([task[idx], time[idx]], 1))
            value[idx] = np.linalg.cholesky(K) @ rng.normal(size=idx.size)
        obs = ObservationSet(subject, task, time, value, k=3, r=25)
        base = blockwise_nmll(GraphParams(S, logL, 0.1), obs).nmll
        for scale in (0.5, 0.8, 1.25):
            pert = blockwise_nmll(GraphParams(S * np.where(np.eye(3) > 0, 1.0, scale), logL, 0.1), obs)
            assert pert.nmll > base - 1e-6
        assert blockwise_nmll(GraphParams(S, logL + 0.7, 0.1), obs).nmll > base


def central_fd(f, x, h_rel=1e-5):
    """Central finite-difference gradient of a scalar function of a float64 tensor."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for j in range(flat.numel()):
        h = h_rel * max(1.0, abs(float(flat[j])))
        old = float(flat[j])
        flat[j] = old + h
        fp = float(f(x))
        flat[j] = old - h
        fm = float(f(x))
        flat[j] = old
        g.view(-1)[j] = (fp - fm) / (2 * h)
    return g


def grad_check(f, params: dict):
    """Relative error of autograd versus central differences, per parameter group."""
    x = {n: v.clone().requires_grad_(True) for n, v in params.items()}
    val = f(**x)
    grads = torch.autograd.grad(val, list(x.values()))
    errs = {}
    for (name, v), g in zip(params.items(), grads):
        fd = central_fd(lambda z: f(**{**params, name: z}), v)
        errs[name] = float((g - fd).abs().max() / max(float(fd.abs().max()), 1e-8))
    return errs


def structgp_nmll_fn(pt):
    def f(S, logL, log_sd):
        return padded_nmll_t(S, logL, torch.exp(log_sd).expand(S.shape[0]), pt).sum()
    return f


def lp_nmll_fn(sa, va, ta, y, gamma=0.3):
    def f(S, logL, log_sd, S_sub, logL_sub, tau):
        St, _ = standardize_t(S, logL)
        coef, rate = pair_tables_t(St, logL)
        K = lp_covariance_t(coef, rate, St, logL, S_sub, logL_sub, tau, gamma, sa, va, ta)
        K = K + torch.diag(torch.exp(2 * log_sd)[va])
        L = torch.linalg.cholesky(K)
        a = torch.linalg.solve_triangular(L, y[:, None], upper=False)[:, 0]
        return 0.5 * a @ a + torch.log(torch.diagonal(L)).sum()
    return f


def test_structgp_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    obs = _two_subject_obs(rng)
    pt = PaddedTensors.from_padded(pad_by_task(obs))
    S, logL = random_graph(rng, 3, density=1.0)
    params = {"S": torch.tensor(S), "logL": torch.tensor(logL),
              "log_sd": torch.tensor(np.log([0.3, 0.2, 0.4]))}
    errs = grad_check(structgp_nmll_fn(pt), params)
    assert max(errs.values()) < 1e-4, errs


def test_pathway_gradients_match_finite_differences():
    rng = np.random.default_rng(12)
    obs = _two_subject_obs(rng)
    S, logL = random_graph(rng, 3, density=1.0)
    params = {"S": torch.tensor(S), "logL": torch.tensor(logL),
              "log_sd": torch.tensor(np.log([0.3, 0.2, 0.4])),
              "S_sub": torch.tensor(rng.normal(size=(2, 2))),
              "logL_sub": torch.tensor(rng.uniform(-0.5, 0.5, (2, 2))),
              "tau": torch.tensor(rng.uniform(-1, 1, (2, 2)))}
    f = lp_nmll_fn(torch.tensor(obs.subject), torch.tensor(obs.task), torch.tensor(obs.time),
                   torch.tensor(obs.value))
    errs = grad_check(f, params)
    assert max(errs.values()) < 1e-4, errs
