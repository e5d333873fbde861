import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ulpm import landscape as ls
from ulpm.cli import rebalanced
from ulpm.geometry import nc_metrics, nc_solution
from ulpm.model import InvalidInputError, ParameterPoint, ProblemShape, gradient, loss, softmax_residual

E2 = math.exp(-2.0)


def tangent_and_unit(p, d):
    return abs(p.inner(d)), abs(d.rho_sq - 1.0)


class TestRadial:
    def test_k4_saddle(self):
        r = ls.radial_test(ls.example_point())
        assert r.is_radial
        # value confirmed by finite differences in the model tests
        assert r.lambda_hat == pytest.approx((2 + 2 * E2) / (2 + E2 + math.e**2), abs=1e-14)

    @pytest.mark.parametrize("K,n,d", [(2, 1, 2), (3, 2, 4), (5, 10, 20)])
    def test_nc_solution(self, K, n, d):
        assert ls.radial_test(nc_solution(ProblemShape(K, n, d), 3.0, seed=K)).is_radial

    def test_random_points_not_radial(self):
        rng = np.random.default_rng(0)
        results = [
            ls.radial_test(ParameterPoint(rng.standard_normal((3, 4)), rng.standard_normal((4, 6))))
            for _ in range(100)
        ]
        assert sum(r.is_radial for r in results) == 0

    def test_zero_point_error(self):
        with pytest.raises(InvalidInputError):
            ls.radial_test(ParameterPoint(np.zeros((2, 2)), np.zeros((2, 2))))


class TestEscape:
    def test_k4_saddle_second_order(self):
        p = ls.example_point()
        r = ls.escape_direction(p)
        assert r.status == "second_order"
        assert r.escape_found
        assert r.curvature < -1e-6
        assert r.loss_drop > 0
        t, u = tangent_and_unit(p, r.escape_dir)
        assert t <= 1e-10 and u <= 1e-12
        # unit joint norm gives ||a||^2 = 1/2: line -sigma, sphere lambda - sigma
        assert r.line_curvature == pytest.approx(-r.spectral_norm, rel=1e-5)
        assert r.curvature == pytest.approx(r.lambda_hat - r.spectral_norm, rel=1e-4)

    def test_escape_preserves_product_to_first_order(self):
        p = ls.example_point()
        d = ls.escape_direction(p).escape_dir
        first_order = d.W @ p.H + p.W @ d.H
        assert np.linalg.norm(first_order) <= 1e-12

    @pytest.mark.parametrize("K,n,d", [(3, 2, 4), (4, 1, 6)])
    def test_nc_solution_no_escape(self, K, n, d):
        r = ls.escape_direction(nc_solution(ProblemShape(K, n, d), 4.0, seed=0))
        assert r.status == "no_escape"
        assert not r.escape_found

    def test_unbalanced_nc_escapes(self):
        p = rebalanced(nc_solution(ProblemShape(3, 2, 4), 4.0, seed=0), 2.0)
        assert np.linalg.norm(p.W) == pytest.approx(2 * np.linalg.norm(p.H), rel=1e-12)
        r = ls.escape_direction(p)
        assert r.status == "first_order"
        assert r.loss_drop > 0
        t, u = tangent_and_unit(p, r.escape_dir)
        assert t <= 1e-10 and u <= 1e-12

    def test_not_applicable_without_null_vector(self):
        # same logits as the K = 4 saddle, factored through d = 2 so [W; H^T] has full column rank
        vals, vecs = np.linalg.eigh(ls.EXAMPLE_BLOCK)
        U2 = vecs[:, vals > 1]
        p = ParameterPoint(2.0 * U2, 2.0 * U2.T)
        np.testing.assert_allclose(p.W @ p.H, ls.EXAMPLE_BLOCK @ ls.EXAMPLE_BLOCK, atol=1e-12)
        r = ls.escape_direction(p)
        assert r.is_radial
        assert r.status == "not_applicable"
        assert "null vector" in r.diagnostic

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 4), st.integers(1, 3), st.integers(2, 5))
    def test_direction_invariants(self, seed, K, n, d):
        rng = np.random.default_rng(seed)
        p = ParameterPoint(rng.standard_normal((K, d)), rng.standard_normal((d, n * K)))
        r = ls.escape_direction(p)
        assert r.status == "first_order"
        t, u = tangent_and_unit(p, r.escape_dir)
        assert t <= 1e-10 * max(1.0, p.rho)
        assert u <= 1e-12


class TestIdentities:
    def radial_points(self):
        pts = [ls.example_point(), ls.example_family(0.5).scaled(3.0)]
        pts += [nc_solution(ProblemShape(K, n, K + 2), r, seed=K) for K, n, r in [(2, 1, 1), (3, 2, 5), (5, 4, 9)]]
        return pts

    def test_balance_and_spectral_bound(self):
        for p in self.radial_points():
            r = ls.radial_test(p)
            assert r.is_radial
            assert ls.balance_residual(p) <= 1e-6
            assert abs(r.lambda_hat) <= np.linalg.norm(softmax_residual(p), 2) + 1e-8

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 5), st.integers(1, 3), st.integers(1, 6))
    def test_nuclear_norm_inequality(self, seed, K, n, d):
        rng = np.random.default_rng(seed)
        p = ParameterPoint(rng.standard_normal((K, d)), rng.standard_normal((d, n * K)))
        assert ls.nuclear_norm_gap(p) >= -1e-9

    def test_nuclear_norm_equality_when_balanced(self):
        assert ls.nuclear_norm_gap(nc_solution(ProblemShape(3, 2, 4), 2.0)) == pytest.approx(0.0, abs=1e-12)


class TestK4Family:
    def test_family_starts_at_saddle(self):
        np.testing.assert_array_equal(ls.example_family(0.0).W, ls.example_point().W)

    @pytest.mark.parametrize("alpha", [-0.3, -0.1, 0.0, 0.05, 0.2, 0.5, 1.0])
    def test_norm_preserving_and_closed_form(self, alpha):
        p = ls.example_family(alpha)
        assert p.rho_sq == pytest.approx(16.0, rel=1e-14)
        assert ls.example_inner_from_loss(alpha) == pytest.approx(ls.example_inner(alpha), rel=1e-12)

    def test_second_derivative(self):
        h = 1e-3
        f = ls.example_inner_from_loss
        f2 = (f(h) - 2 * f(0) + f(-h)) / h**2
        assert f2 == pytest.approx(16 * (math.exp(-2) - 1), abs=1e-4)
        assert (f(h) - f(-h)) / (2 * h) == pytest.approx(0.0, abs=1e-10)

    def test_half_is_collapse(self):
        m = nc_metrics(ls.example_family(0.5))
        assert np.all(m.values() <= 1e-12)
        assert ls.radial_test(ls.example_family(0.5)).is_radial

    def test_sphere_projected_probe(self):
        p = ls.example_point()
        d = ls.escape_direction(p).escape_dir
        q = ls.sphere_project(p + d.scaled(0.1), p.rho)
        assert q.rho == pytest.approx(p.rho, rel=1e-14)
        assert loss(q) < loss(p)

    def test_gradient_equal_blocks(self):
        gW, gH = gradient(ls.example_point())
        np.testing.assert_array_equal(gW, gH)


@pytest.fixture(scope="module")
def report():
    return ls.example_3_1_scenario(perturbed_steps=2000)


class TestScenario:
    def test_keys(self, report):
        assert report["f_second_deriv_at_zero"] == pytest.approx(16 * (math.exp(-2) - 1), abs=1e-4)
        assert report["kkt_eps_printed_lambda"] <= 1e-8
        assert report["stuck_direction_drift"] <= 1e-6
        assert report["radial"]
        assert report["escape_status"] == "second_order"
        assert report["scaled_binding_constraints"] == 8
        assert report["gradient_coefficient"] == pytest.approx(report["gradient_coefficient_exact"], abs=1e-14)

    def test_family_minimum_is_not_at_zero(self, report):
        losses = np.array(report["family_loss"])
        zero = report["family_alpha"].index(0.0) if 0.0 in report["family_alpha"] else 20
        assert losses[zero] == max(losses)
