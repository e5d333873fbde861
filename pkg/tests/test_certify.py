import math

import numpy as np
import pytest
from scipy.optimize import nnls

from ulpm import certify
from ulpm.dynamics import FlowConfig, init_point, run_flow
from ulpm.geometry import nc_solution
from ulpm.landscape import EXAMPLE_LAMBDA, example_point
from ulpm.model import ParameterPoint, ProblemShape, gradient, margins, score_gaps


def constraint_gradients(p):
    """Dense oracle: one flattened gradient of s_{k,i,j} per constraint, ordered (k, i, j)."""
    K, n, d = p.shape.K, p.shape.n, p.shape.d
    rows, index = [], []
    for k in range(K):
        for i in range(n):
            c = k * n + i
            for j in range(K):
                if j == k:
                    continue
                gW = np.zeros((K, d))
                gH = np.zeros((d, n * K))
                gW[k] += p.H[:, c]
                gW[j] -= p.H[:, c]
                gH[:, c] = p.W[k] - p.W[j]
                rows.append(np.concatenate([gW.ravel(), gH.ravel()]))
                index.append((k, i, j))
    return np.array(rows), index


def dense_eps(p, lambdas):
    A, index = constraint_gradients(p)
    lam = np.array([lambdas[t] for t in index])
    return float(np.linalg.norm(p.theta - lam @ A))


def separated_point(seed=0):
    shape = ProblemShape(3, 2, 4)
    p0 = init_point(shape, 1.0, seed)
    p, _ = run_flow(p0, FlowConfig(step_size=0.1, max_steps=3000, reduction="sum", certify=False))
    assert margins(p).q_min > 0
    return p


class TestResiduals:
    def test_multiplier_matrix_matches_dense_oracle(self):
        rng = np.random.default_rng(3)
        p = ParameterPoint(rng.standard_normal((3, 4)), rng.standard_normal((4, 6)))
        lam = rng.uniform(0, 2, (3, 2, 3))
        eps, _, _ = certify.kkt_residuals(p, lam)
        assert eps == pytest.approx(dense_eps(p, lam), rel=1e-12)

    def test_negative_multipliers_rejected(self):
        p = example_point()
        with pytest.raises(certify.InvalidInputError):
            certify.kkt_residuals(p, -np.ones((4, 1, 4)))

    def test_wrong_shape_rejected(self):
        with pytest.raises(certify.InvalidInputError):
            certify.kkt_residuals(example_point(), np.ones((4, 2, 4)))


class TestK4Saddle:
    def test_printed_multipliers_certify_scaled_point(self):
        p = example_point().scaled(1 / math.sqrt(2))
        assert certify.separation_feasible(p)
        s = score_gaps(p)
        assert margins(p).q_min == pytest.approx(1.0, abs=1e-15)
        assert int(np.sum(np.isclose(s, 1.0, atol=1e-12))) == 8
        lam = certify.lambdas_from_matrix(EXAMPLE_LAMBDA)
        eps, delta, _ = certify.kkt_residuals(p, lam)
        assert eps <= 1e-8
        assert delta <= 1e-8
        assert eps == pytest.approx(dense_eps(p, lam), abs=1e-12)

    def test_mfcq(self):
        res = certify.mfcq_check(example_point())
        assert res.holds and res.witness is not None


class TestCertificate:
    @pytest.mark.parametrize("K,n,d", [(2, 1, 2), (3, 2, 4), (5, 3, 6)])
    def test_nc_solution_is_exact_kkt(self, K, n, d):
        p = nc_solution(ProblemShape(K, n, d), radius=6.0, seed=0)
        cert = certify.certificate(p)
        assert cert.eps <= 1e-8
        assert cert.delta <= 1e-8
        assert cert.feasible
        assert np.all(cert.lambdas >= 0)

    def test_nc_solution_lstsq_oracle(self):
        # independent multipliers from a nonnegative least-squares solve of stationarity
        p = certify.unit_margin_point(nc_solution(ProblemShape(3, 2, 4), 5.0, seed=1))
        A, _ = constraint_gradients(p)
        lam, resid = nnls(A.T, p.theta)
        assert resid <= 1e-8
        assert np.all(lam >= 0)

    def test_eps_identity(self):
        p = separated_point()
        cert = certify.certificate(p)
        q = margins(p).q_min
        expected = math.sqrt(p.rho_sq / q * 2 * (1 - cert.beta))
        assert cert.eps == pytest.approx(expected, rel=1e-6)

    def test_bounds_dominate(self):
        p = separated_point(seed=2)
        cert = certify.certificate(p)
        assert cert.eps <= cert.eps_bound + 1e-8
        assert cert.delta <= cert.delta_bound + 1e-8
        assert cert.delta_sum <= cert.delta_bound + 1e-8

    def test_normalized_point_is_homogeneous(self):
        p = separated_point(seed=4)
        for alpha in (0.5, 3.0):
            q = certify.certificate(p.scaled(alpha))
            assert margins(p.scaled(alpha)).q_min == pytest.approx(alpha**2 * margins(p).q_min, rel=1e-12)
            np.testing.assert_allclose(
                q.normalized_point.theta, certify.certificate(p).normalized_point.theta, atol=1e-10
            )

    def test_multipliers_follow_softmax(self):
        p = separated_point(seed=5)
        cert = certify.certificate(p)
        gW, gH = gradient(p)
        gnorm = math.sqrt(np.sum(gW**2) + np.sum(gH**2))
        s = score_gaps(p)
        k, i, j = 1, 0, 2
        row = np.exp(-s[k, i])
        expected = p.rho / gnorm * math.exp(-s[k, i, j]) / (1 + row[np.isfinite(s[k, i])].sum())
        assert cert.lambdas[k, i, j] == pytest.approx(expected, rel=1e-12)

    def test_not_separated(self):
        with pytest.raises(certify.NotSeparatedError):
            certify.certificate(ParameterPoint(np.zeros((2, 2)), np.zeros((2, 2))))


class TestFeasibility:
    def test_zero_point(self):
        z = ParameterPoint(np.zeros((2, 2)), np.zeros((2, 2)))
        assert not certify.separation_feasible(z)
        res = certify.mfcq_check(z)
        assert not res.holds and res.violating_index == (0, 0, 1)

    @pytest.mark.parametrize("K,n", [(2, 1), (3, 2), (4, 1), (5, 10)])
    def test_global_optimum_value(self, K, n):
        p = certify.unit_margin_point(nc_solution(ProblemShape(K, n, K + 1), 7.0, seed=3))
        assert certify.separation_feasible(p)
        # equality in q_min <= rho^2 / (2 (K-1) sqrt(n)) at q_min = 1
        assert p.rho_sq == pytest.approx(2 * (K - 1) * math.sqrt(n), abs=1e-9)
        assert certify.min_norm_objective(p) == pytest.approx((K - 1) * math.sqrt(n), abs=1e-9)

    def test_mfcq_nc(self):
        p = nc_solution(ProblemShape(3, 1, 3), 2.0)
        res = certify.mfcq_check(p)
        assert res.holds and res.witness is p
