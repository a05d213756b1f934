import numpy as np
import pytest

from conftest import constant_observations, hidden_bm_model
from leastaction.errors import RiccatiExplosionError
from leastaction.model import HiddenPath, Prior, TimeGrid, eval_psi, STEP_SECOND
from leastaction.registry import default_prior, get_example
from leastaction.secondorder import (
    ABqPath,
    SecondOrderLaw,
    VERDICT_LOCAL_MIN,
    VERDICT_NOT_LOCAL_MIN,
    check_local_min,
    covariance_V,
    extract_ABq,
    sample_perturbation,
    second_order_law,
    solve_F,
    solve_riccati,
    theta_from_F,
    _perturbation_paths,
)
from leastaction.variational import solve_least_action


def constant_abq(grid, a, b, q):
    m = grid.count_N + 1
    return ABqPath(
        grid,
        np.full((m, 1, 1), float(a)),
        np.full((m, 1, 1), float(b)),
        np.full((m, 1, 1), float(q)),
    )


class TestExtract:
    def test_hidden_bm_is_flat(self):
        model = hidden_bm_model()
        grid = TimeGrid(1.0, 4)
        obs = constant_observations(grid, [0.0])
        path = HiddenPath(grid, np.zeros(grid.count_N + 1), np.zeros(grid.count_N + 1))
        abq = extract_ABq(path, obs, model)
        assert np.allclose(abq.A, 0.0, atol=1e-9)
        assert np.allclose(abq.B, 0.0, atol=1e-9)
        assert np.allclose(abq.q, np.eye(1))

    def test_linear_model_coefficients_constant(self, linear_instance):
        ex, sim, obs, prior, fit = linear_instance
        abq = extract_ABq(fit, obs, ex.model)
        for arr in (abq.A, abq.B, abq.q):
            assert np.max(np.abs(arr - arr[0])) <= 1e-8

    def test_matches_second_differences_of_psi(self, linear_instance):
        ex, sim, obs, prior, fit = linear_instance
        abq = extract_ABq(fit, obs, ex.model)
        grid = fit.path.grid
        j = grid.count_N // 3
        t = grid.times()[j]
        x, p = fit.path.x[j], fit.path.p[j]
        k = STEP_SECOND

        def psi(dx):
            return eval_psi(t, x + dx, p, obs, ex.model)

        fd_a = (psi(np.array([k])) - 2 * psi(np.zeros(1)) + psi(np.array([-k]))) / k ** 2
        assert abs(fd_a - abq.A[j, 0, 0]) <= 1e-5 * (1.0 + abs(fd_a))

    def test_unconverged_input_rejected(self, linear_instance):
        ex, sim, obs, prior, fit = linear_instance
        from dataclasses import replace

        bad = replace(fit, converged=False)
        with pytest.raises(ValueError):
            extract_ABq(bad, obs, ex.model)


class TestRiccati:
    def test_flat_coefficients_keep_theta_zero(self):
        grid = TimeGrid(2.0, 6)
        theta = solve_riccati(constant_abq(grid, 0.0, 0.0, 1.0), grid)
        assert np.max(np.abs(theta)) <= 1e-14

    def test_matches_analytic_hyperbolic_solution(self):
        a, T = 0.7, 2.0
        grid = TimeGrid(T, 10)
        theta = solve_riccati(constant_abq(grid, a, 0.0, 1.0), grid)
        exact = np.sqrt(a) * np.tanh(np.sqrt(a) * (T - grid.times()))
        assert np.max(np.abs(theta[:, 0, 0] - exact)) <= 1e-6

    def test_negative_curvature_explodes(self):
        a, T = 2.0, 2.0   # sqrt(a) T > pi/2
        grid = TimeGrid(T, 10)
        with pytest.raises(RiccatiExplosionError, match="theta exploded"):
            solve_riccati(constant_abq(grid, -a, 0.0, 1.0), grid)

    def test_terminal_condition_and_symmetry(self, linear_instance):
        ex, sim, obs, prior, fit = linear_instance
        abq = extract_ABq(fit, obs, ex.model)
        theta = solve_riccati(abq, fit.path.grid)
        assert np.array_equal(theta[-1], np.zeros((1, 1)))
        assert np.max(np.abs(theta - np.swapaxes(theta, 1, 2))) <= 1e-8

    def test_ode_residual_by_central_differences(self):
        a, T = 0.7, 2.0
        grid = TimeGrid(T, 10)
        abq = constant_abq(grid, a, 0.0, 1.0)
        theta = solve_riccati(abq, grid)[:, 0, 0]
        h = grid.h
        dot = (theta[2:] - theta[:-2]) / (2.0 * h)
        rhs = theta[1:-1] ** 2 - a
        assert np.max(np.abs(dot - rhs)) <= 1e-6 * (1.0 + a)


class TestCovariance:
    def test_brownian_growth(self):
        grid = TimeGrid(2.0, 6)
        abq = constant_abq(grid, 0.0, 0.0, 1.0)
        theta = np.zeros((grid.count_N + 1, 1, 1))
        v = covariance_V(theta, abq, np.array([[1.0 / 0.5]]), grid)
        assert np.allclose(v[:, 0, 0], 0.5 + grid.times(), atol=1e-10)

    def test_stationary_variance_half_over_rate(self):
        # constant feedback k: V_T -> 1/(2k) once kT is large
        k, T = 1.0, 8.0
        grid = TimeGrid(T, 8)
        abq = constant_abq(grid, 0.0, 0.0, 1.0)
        theta = np.full((grid.count_N + 1, 1, 1), k)
        v = covariance_V(theta, abq, np.array([[1.0]]), grid)
        assert abs(v[-1, 0, 0] - 0.5) <= 1e-4

    def test_matches_smoother_variance(self, linear_instance):
        ex, sim, obs, prior, fit = linear_instance
        from leastaction.oracle import kalman_rts

        law = second_order_law(fit, obs, ex.model, prior)
        sm = kalman_rts(ex.model, obs, prior, ex.grid)
        N = ex.grid.count_N
        lo, hi = int(0.05 * N), int(0.95 * N)
        rel = np.abs(law.V[lo:hi, 0, 0] - sm.cov[lo:hi, 0, 0]) / sm.cov[lo:hi, 0, 0]
        assert np.max(rel) <= 1e-2

    def test_psd_and_residual(self, linear_instance):
        ex, sim, obs, prior, fit = linear_instance
        law = second_order_law(fit, obs, ex.model, prior)
        eigs = np.linalg.eigvalsh(law.V)
        assert eigs.min() >= -1e-10
        h = ex.grid.h
        vdot = (law.V[2:] - law.V[:-2]) / (2.0 * h)
        rhs = (
            -np.einsum("mij,mjk->mik", law.K[1:-1], law.V[1:-1])
            - np.einsum("mij,mkj->mik", law.V[1:-1], law.K[1:-1])
            + np.linalg.inv(law.q[1:-1])
        )
        scale = 1.0 + np.max(np.abs(rhs))
        assert np.max(np.abs(vdot - rhs)) <= 1e-4 * scale

    def test_singular_precision_rejected(self):
        grid = TimeGrid(1.0, 4)
        abq = constant_abq(grid, 0.0, 0.0, 1.0)
        theta = np.zeros((grid.count_N + 1, 1, 1))
        from leastaction.errors import NotPositiveDefiniteError

        with pytest.raises(NotPositiveDefiniteError):
            covariance_V(theta, abq, np.array([[0.0]]), grid)


class TestConjugatePoints:
    def test_flat_coefficients_identity(self):
        grid = TimeGrid(2.0, 6)
        diag = solve_F(constant_abq(grid, 0.0, 0.0, 1.0), grid)
        assert np.allclose(diag.F, np.eye(1), atol=1e-12)
        assert np.allclose(diag.detF, 1.0)
        assert diag.verdict == VERDICT_LOCAL_MIN

    def test_oscillatory_case_matches_cosine_and_flags(self):
        a, T = 2.0, 2.0
        grid = TimeGrid(T, 10)
        diag = solve_F(constant_abq(grid, -a, 0.0, 1.0), grid)
        exact = np.cos(np.sqrt(a) * (T - grid.times()))
        assert np.max(np.abs(diag.F[:, 0, 0] - exact)) <= 1e-9
        assert diag.verdict == VERDICT_NOT_LOCAL_MIN

    def test_terminal_boundary_conditions(self, linear_instance):
        ex, sim, obs, prior, fit = linear_instance
        abq = extract_ABq(fit, obs, ex.model)
        diag = solve_F(abq, fit.path.grid)
        assert np.array_equal(diag.F[-1], np.eye(1))
        T = fit.path.grid.horizon_T
        bc = abq.B_at(T).T @ diag.F[-1] + abq.q_at(T) @ diag.Fdot[-1]
        assert np.max(np.abs(bc)) <= 1e-8

    def test_reconstruction_roundtrip(self, linear_instance):
        ex, sim, obs, prior, fit = linear_instance
        abq = extract_ABq(fit, obs, ex.model)
        grid = fit.path.grid
        theta = solve_riccati(abq, grid)
        rec = theta_from_F(abq, solve_F(abq, grid))
        assert np.max(np.abs(theta - rec)) <= 1e-5


class TestCheckLocalMin:
    def test_linear_fit_is_local_min(self, linear_instance):
        ex, sim, obs, prior, fit = linear_instance
        rep = check_local_min(fit, obs, ex.model, prior, ex.grid)
        assert rep.verdict == VERDICT_LOCAL_MIN
        assert not rep.riccati_exploded
        assert np.all(rep.init_precision_eigs > 0)

    def test_flat_problem_det_stays_one(self):
        model = hidden_bm_model()
        grid = TimeGrid(1.0, 5)
        obs = constant_observations(grid, [0.0])
        prior = Prior.gaussian([0.4], 1.0)
        fit = solve_least_action(obs, model, prior, grid, starts=[np.zeros(1)])
        rep = check_local_min(fit, obs, model, prior, grid)
        assert rep.verdict == VERDICT_LOCAL_MIN
        assert np.allclose(rep.detF, 1.0, atol=1e-10)

    def test_quadratic_form_nonnegative_at_local_min(self, linear_instance):
        # second-order expansion evaluated on random discrete perturbations
        ex, sim, obs, prior, fit = linear_instance
        abq = extract_ABq(fit, obs, ex.model)
        grid = fit.path.grid
        h = grid.h
        hess0 = prior.hessian(fit.path.x[0])
        rng = np.random.default_rng(11)
        for _ in range(50):
            xi = rng.standard_normal((grid.count_N + 1, 1))
            xid = np.gradient(xi, h, axis=0)
            dens = (
                0.5 * np.einsum("mi,mij,mj->m", xi, abq.A, xi)
                + np.einsum("mi,mij,mj->m", xi, abq.B, xid)
                + 0.5 * np.einsum("mi,mij,mj->m", xid, abq.q, xid)
            )
            q_form = 0.5 * float(xi[0] @ hess0 @ xi[0]) + float(
                np.trapezoid(dens, dx=h)
            )
            assert q_form >= -1e-8


class TestSampler:
    def law_flat(self, grid, v0):
        m = grid.count_N + 1
        eye = np.ones((m, 1, 1))
        return SecondOrderLaw(
            grid,
            A=np.zeros((m, 1, 1)),
            B=np.zeros((m, 1, 1)),
            q=eye.copy(),
            theta=np.zeros((m, 1, 1)),
            K=np.zeros((m, 1, 1)),
            V=np.zeros((m, 1, 1)),
            init_precision=np.array([[1.0 / v0]]),
        )

    def test_variance_grows_linearly(self):
        grid = TimeGrid(1.0, 4)
        law = self.law_flat(grid, v0=0.5)
        paths = _perturbation_paths(law, 4000, seed=5)
        var = paths[:, :, 0].var(axis=1, ddof=1)
        expected = 0.5 + grid.times()
        se = expected * np.sqrt(2.0 / 4000)
        assert np.all(np.abs(var - expected) <= 3.0 * se)

    def test_single_sample_reproducible(self):
        grid = TimeGrid(1.0, 4)
        law = self.law_flat(grid, v0=1.0)
        a = sample_perturbation(law, seed=3)
        b = sample_perturbation(law, seed=3)
        assert np.array_equal(a.x, b.x)

    def test_noiseless_limit_decays_at_feedback_rate(self):
        k, T = 1.0, 1.0
        grid = TimeGrid(T, 6)
        m = grid.count_N + 1
        law = SecondOrderLaw(
            grid,
            A=np.zeros((m, 1, 1)),
            B=np.zeros((m, 1, 1)),
            q=np.full((m, 1, 1), 1e30),
            theta=np.zeros((m, 1, 1)),
            K=np.full((m, 1, 1), k),
            V=np.zeros((m, 1, 1)),
            init_precision=np.array([[1.0]]),
        )
        path = sample_perturbation(law, seed=9)
        ratio = path.x[-1, 0] / path.x[0, 0]
        assert abs(ratio - np.exp(-k * T)) <= 1e-2
