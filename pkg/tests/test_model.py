import numpy as np
import pytest

from conftest import constant_observations, hidden_bm_model
from leastaction.errors import EvaluationError
from leastaction.model import (
    DiffusionModel,
    HiddenPath,
    ObservationSeries,
    PartitionedModel,
    Prior,
    TimeGrid,
    coefficient_derivatives,
    eval_psi,
    psi_derivatives,
    STEP_SECOND,
)
from leastaction.registry import get_example


class TestTimeGrid:
    def test_nodes_are_exact_multiples(self):
        grid = TimeGrid(4.0, 3)
        assert grid.h == 0.125
        assert grid.count_N == 32
        ts = grid.times()
        assert ts[0] == 0.0 and ts[-1] == 4.0
        assert np.array_equal(ts, np.arange(33) * 0.125)

    def test_rejects_incommensurate_horizon(self):
        with pytest.raises(ValueError):
            TimeGrid(0.3, 1)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            TimeGrid(-1.0, 3)
        with pytest.raises(ValueError):
            TimeGrid(1.0, -1)

    def test_with_level_keeps_horizon(self):
        grid = TimeGrid(2.0, 4).with_level(6)
        assert grid.horizon_T == 2.0
        assert grid.count_N == 128


class TestDiffusionModelValidation:
    def test_singular_sigma_rejected(self):
        model = hidden_bm_model()
        bad = DiffusionModel(2, lambda t, z: np.zeros((2, 2)), model.base.mu)
        grid = TimeGrid(1.0, 2)
        obs = constant_observations(grid, [0.0])
        with pytest.raises(EvaluationError) as err:
            eval_psi(0.0, [0.0], [0.0], obs, PartitionedModel(bad, 1, 1))
        assert err.value.z is not None

    def test_ill_conditioned_sigma_rejected(self):
        sig = np.diag([1.0, 1e-20])
        bad = DiffusionModel(2, lambda t, z: sig, lambda t, z: np.zeros(2))
        grid = TimeGrid(1.0, 2)
        obs = constant_observations(grid, [0.0])
        with pytest.raises(EvaluationError):
            eval_psi(0.0, [0.0], [0.0], obs, PartitionedModel(bad, 1, 1))

    def test_cap_exceeded_rejected(self):
        huge = DiffusionModel(
            2, lambda t, z: np.eye(2), lambda t, z: np.full(2, 1e12), coefficient_cap=1e8
        )
        with pytest.raises(EvaluationError):
            huge.mu_at(0.0, np.zeros(2))

    def test_partition_must_cover_dimension(self):
        model = hidden_bm_model()
        with pytest.raises(ValueError):
            PartitionedModel(model.base, 2, 1)


class TestPrior:
    def test_gaussian_is_coercive(self):
        prior = Prior.gaussian([1.0, -2.0], 3.0)
        assert prior.coercive
        x = np.array([0.5, 0.5])
        assert prior.phi(x) == pytest.approx(
            0.5 * ((0.5 - 1.0) ** 2 + 2.5 ** 2) / 3.0
        )
        assert np.allclose(prior.grad_phi(x), (x - np.array([1.0, -2.0])) / 3.0)

    def test_flat_prior_quietly_non_coercive(self):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("error")
            prior = Prior.flat(2)
        assert not prior.coercive

    def test_generic_non_coercive_warns(self):
        with pytest.warns(UserWarning):
            Prior(1, lambda x: 0.0, lambda x: np.zeros(1), lambda x: np.zeros((1, 1)))

    def test_asymmetric_hessian_rejected(self):
        with pytest.raises(ValueError):
            Prior(
                2,
                lambda x: 0.0,
                lambda x: np.zeros(2),
                lambda x: np.array([[1.0, 0.5], [0.0, 1.0]]),
            )


class TestObservationSeries:
    def test_interpolant_reproduces_samples(self):
        grid = TimeGrid(2.0, 4)
        rng = np.random.default_rng(0)
        samples = rng.standard_normal((grid.count_N + 1, 2))
        obs = ObservationSeries(grid, samples)
        vals = obs.value(grid.times())
        assert np.max(np.abs(vals - samples)) <= 1e-12 * (1.0 + np.max(np.abs(samples)))

    def test_natural_boundary_second_derivative(self):
        grid = TimeGrid(2.0, 4)
        rng = np.random.default_rng(1)
        obs = ObservationSeries(grid, rng.standard_normal(grid.count_N + 1))
        assert np.max(np.abs(obs.second(0.0))) < 1e-10
        assert np.max(np.abs(obs.second(2.0))) < 1e-10

    def test_samples_at_exact_on_nested_grids(self):
        grid = TimeGrid(1.0, 5)
        rng = np.random.default_rng(2)
        samples = rng.standard_normal((grid.count_N + 1, 1))
        obs = ObservationSeries(grid, samples)
        scale = 1e-12 * (1.0 + np.max(np.abs(samples)))
        coarse = obs.samples_at(grid.with_level(3))
        assert np.max(np.abs(coarse - samples[::4])) <= scale
        fine = obs.samples_at(grid.with_level(6))
        assert np.max(np.abs(fine[::2] - samples)) <= scale

    def test_shape_mismatch_rejected(self):
        grid = TimeGrid(1.0, 3)
        with pytest.raises(ValueError):
            ObservationSeries(grid, np.zeros(5))


def test_hidden_path_validates_shapes():
    grid = TimeGrid(1.0, 2)
    with pytest.raises(ValueError):
        HiddenPath(grid, np.zeros(3), np.zeros(3))
    path = HiddenPath(grid, np.zeros(5), np.ones(5))
    assert path.x.shape == (5, 1)
    assert path.dim_n == 1


class TestEvalPsi:
    def test_zero_residual(self):
        model = hidden_bm_model()
        grid = TimeGrid(1.0, 3)
        obs = constant_observations(grid, [0.7])
        assert eval_psi(0.5, [0.2], [0.0], obs, model) == 0.0

    def test_linear_example_value(self):
        # independent derivation: residual hits only the hidden channel,
        # back-substitute through the lower-triangular sigma by hand
        ex = get_example("example1")
        grid = TimeGrid(1.0, 3)
        obs = constant_observations(grid, [1.0])
        got = eval_psi(0.25, [1.0], [0.0], obs, ex.model)
        beta_x, beta_y = 0.1054, 0.0253
        r1 = 0.0 - (-beta_x * 1.0)
        r2 = 0.0 - ((-beta_x + beta_y) * 1.0 - beta_y * 1.0)
        w1 = r1 / 1.053
        w2 = (r2 - 1.053 * w1) / 1.0127
        assert got == pytest.approx(0.5 * (w1 * w1 + w2 * w2), rel=1e-14)
        assert abs(got - 5.010e-3) < 1e-5

    def test_quadratic_homogeneity(self):
        model = hidden_bm_model()
        grid = TimeGrid(1.0, 3)
        obs = constant_observations(grid, [0.0])
        base = eval_psi(0.5, [0.3], [0.8], obs, model)
        assert eval_psi(0.5, [0.3], [1.6], obs, model) == pytest.approx(4.0 * base)

    def test_mu_change_moves_psi(self):
        # wiring guard: a drift change must change the value
        model = hidden_bm_model()
        shifted = DiffusionModel(
            2, model.base.sigma, lambda t, z: np.full(2, 0.5), vectorized=False
        )
        grid = TimeGrid(1.0, 3)
        obs = constant_observations(grid, [0.0])
        a = eval_psi(0.5, [0.3], [0.8], obs, model)
        b = eval_psi(0.5, [0.3], [0.8], obs, PartitionedModel(shifted, 1, 1))
        assert a != b


class TestPsiDerivatives:
    def test_hidden_bm(self):
        model = hidden_bm_model()
        grid = TimeGrid(1.0, 3)
        obs = constant_observations(grid, [0.0])
        d = psi_derivatives(0.5, [0.4], [0.9], obs, model)
        assert np.allclose(d.A, 0.0, atol=1e-9)
        assert np.allclose(d.B, 0.0, atol=1e-9)
        assert np.allclose(d.q, np.eye(1))
        assert np.allclose(d.grad_x, 0.0, atol=1e-9)
        assert np.allclose(d.grad_p, [0.9])
        assert np.allclose(d.dt_grad_p, 0.0, atol=1e-12)

    def test_linear_example_q_is_constant_weight_block(self):
        ex = get_example("example1")
        grid = TimeGrid(1.0, 3)
        obs = constant_observations(grid, [1.0])
        S = np.array([[1.053, 0.0], [1.053, 1.0127]])
        expected_q = np.linalg.inv(S @ S.T)[:1, :1]
        pts = [([1.0], [0.0]), ([-2.0], [3.0]), ([0.3], [-1.1])]
        qs = [psi_derivatives(0.25, x, p, obs, ex.model).q for x, p in pts]
        for q in qs:
            assert np.allclose(q, expected_q, atol=1e-12)

    @pytest.mark.parametrize("name", ["example1", "example2", "example3", "example4"])
    def test_q_matches_finite_differences_of_psi(self, name):
        ex = get_example(name)
        n, s = ex.model.hidden_n, ex.model.observed_s
        grid = TimeGrid(1.0, 3)
        rng = np.random.default_rng(5)
        obs = ObservationSeries(grid, rng.standard_normal((grid.count_N + 1, s)))
        x = rng.standard_normal(n)
        p = rng.standard_normal(n)
        t = 0.375
        d = psi_derivatives(t, x, p, obs, ex.model)
        fd = np.empty((n, n))
        base = eval_psi(t, x, p, obs, ex.model)
        for i in range(n):
            ki = STEP_SECOND * max(1.0, abs(p[i]))
            ei = np.zeros(n)
            ei[i] = ki
            fd[i, i] = (
                eval_psi(t, x, p + ei, obs, ex.model)
                - 2.0 * base
                + eval_psi(t, x, p - ei, obs, ex.model)
            ) / (ki * ki)
            for j in range(i + 1, n):
                kj = STEP_SECOND * max(1.0, abs(p[j]))
                ej = np.zeros(n)
                ej[j] = kj
                val = (
                    eval_psi(t, x, p + ei + ej, obs, ex.model)
                    - eval_psi(t, x, p + ei - ej, obs, ex.model)
                    - eval_psi(t, x, p - ei + ej, obs, ex.model)
                    + eval_psi(t, x, p - ei - ej, obs, ex.model)
                ) / (4.0 * ki * kj)
                fd[i, j] = fd[j, i] = val
        assert np.max(np.abs(fd - d.q)) <= 1e-5 * (1.0 + np.max(np.abs(d.q)))

    def test_symmetry_exact(self):
        ex = get_example("example4")
        grid = TimeGrid(1.0, 3)
        rng = np.random.default_rng(8)
        obs = ObservationSeries(grid, rng.standard_normal((grid.count_N + 1, 1)))
        d = psi_derivatives(0.5, [0.2, -0.4], [1.0, 0.5], obs, ex.model)
        assert np.array_equal(d.A, d.A.T)
        assert np.array_equal(d.q, d.q.T)

    def test_analytic_matches_fd_route(self):
        # strip the analytic hooks off the multiwell model and compare routes
        ex = get_example("example3")
        base = ex.model.base
        plain = PartitionedModel(
            DiffusionModel(2, base.sigma, base.mu, base.coefficient_cap), 1, 1
        )
        grid = TimeGrid(1.0, 3)
        rng = np.random.default_rng(9)
        obs = ObservationSeries(grid, rng.standard_normal((grid.count_N + 1, 1)))
        a = psi_derivatives(0.5, [0.3], [1.2], obs, ex.model)
        b = psi_derivatives(0.5, [0.3], [1.2], obs, plain)
        assert np.allclose(a.grad_x, b.grad_x, atol=1e-7)
        assert np.allclose(a.B, b.B, atol=1e-7)
        assert np.allclose(a.A, b.A, atol=2e-4 * (1.0 + np.max(np.abs(a.A))))
        assert np.allclose(a.dt_grad_p, b.dt_grad_p, atol=1e-7)


def test_coefficient_derivatives_fd_fallback():
    ex = get_example("example3")
    base = ex.model.base
    plain = DiffusionModel(2, base.sigma, base.mu)
    z = np.array([0.4, -0.2])
    ds_a, dm_a = coefficient_derivatives(base, 0.0, z)
    ds_f, dm_f = coefficient_derivatives(plain, 0.0, z)
    assert np.allclose(ds_a, ds_f, atol=1e-8)
    assert np.allclose(dm_a, dm_f, atol=1e-6)
