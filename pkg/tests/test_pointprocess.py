import numpy as np
import pytest

from leastaction.errors import EvaluationError
from leastaction.model import DiffusionModel, Prior, TimeGrid, STEP_FIRST
from leastaction.pointprocess import (
    EventRecord,
    PiecewisePath,
    SegmentPath,
    lognormal_prior,
    pp_action,
    pp_discrete_objective,
    pp_el_rhs,
    pp_jump,
    pp_minimize_discrete,
    pp_nodes,
    pp_solve,
    simulate_cox,
)
from leastaction.registry import get_example, gbm_intensity_model


def unit_noise_model(mu=0.0):
    return DiffusionModel(
        1,
        lambda t, z: np.ones(np.asarray(z).shape[:-1] + (1, 1)),
        lambda t, z: np.full(np.asarray(z).shape[:-1] + (1,), mu),
        vectorized=True,
    )


class TestEventRecord:
    def test_valid(self):
        rec = EventRecord(10.0, np.array([1.0, 2.5, 7.0]))
        assert rec.count == 3

    def test_rejects_unsorted_or_duplicate(self):
        with pytest.raises(ValueError):
            EventRecord(10.0, np.array([2.0, 1.0]))
        with pytest.raises(ValueError):
            EventRecord(10.0, np.array([2.0, 2.0]))

    def test_rejects_boundary_times(self):
        with pytest.raises(ValueError):
            EventRecord(10.0, np.array([0.0, 1.0]))
        with pytest.raises(ValueError):
            EventRecord(10.0, np.array([1.0, 10.0]))


def flat_path(grid_T, c, events):
    bounds = np.concatenate([[0.0], events, [grid_T]])
    segs = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        ts = np.linspace(a, b, 9)
        segs.append(SegmentPath(ts, np.full(9, c), np.zeros(9)))
    return PiecewisePath(grid_T, np.asarray(events), segs, np.zeros(len(events)))


class TestAction:
    def test_constant_path_no_events(self):
        model = unit_noise_model()
        prior = Prior.flat(1)
        path = flat_path(3.0, 1.7, [])
        events = EventRecord(3.0, np.array([]))
        assert pp_action(path, events, model, prior) == pytest.approx(1.7 * 3.0)

    def test_constant_path_one_event(self):
        model = unit_noise_model()
        prior = Prior.flat(1)
        path = flat_path(3.0, 1.7, [1.2])
        events = EventRecord(3.0, np.array([1.2]))
        expected = 1.7 * 3.0 - np.log(1.7)
        assert pp_action(path, events, model, prior) == pytest.approx(expected)

    def test_positive_intensity_enforced(self):
        with pytest.raises(ValueError):
            flat_path(3.0, -0.5, [])


class TestStationarityPieces:
    def test_gbm_unit_point(self):
        model = gbm_intensity_model(1.0, 0.0)
        dx, dp = pp_el_rhs(0.0, 1.0, 0.0, model)
        assert dx == 0.0
        assert dp == pytest.approx(1.0)

    def test_gbm_matches_closed_form_on_grid(self):
        # closed form dp = (p^2 + sigma^2 x^3)/x, independent of the drift
        rng = np.random.default_rng(2)
        for sigma, mu in ((1.0, 0.0), (0.5, 0.3), (0.8, -0.2)):
            model = gbm_intensity_model(sigma, mu)
            for _ in range(20):
                x = float(rng.uniform(0.2, 5.0))
                p = float(rng.uniform(-3.0, 3.0))
                _, dp = pp_el_rhs(0.7, x, p, model)
                exact = (p * p + sigma ** 2 * x ** 3) / x
                assert abs(dp - exact) <= 1e-8 * (1.0 + abs(exact))

    def test_positive_paths_are_convex_between_events(self):
        model = gbm_intensity_model(0.6, 0.0)
        rng = np.random.default_rng(3)
        for _ in range(30):
            x = float(rng.uniform(0.1, 4.0))
            p = float(rng.uniform(-2.0, 2.0))
            assert pp_el_rhs(0.0, x, p, model)[1] > 0.0

    def test_nonpositive_state_rejected(self):
        model = gbm_intensity_model(1.0, 0.0)
        with pytest.raises(EvaluationError):
            pp_el_rhs(0.0, -1.0, 0.0, model)

    def test_jump_examples(self):
        assert pp_jump(2.0, 0.0, gbm_intensity_model(1.0, 0.0)) == pytest.approx(-2.0)
        assert pp_jump(4.0, 1.0, gbm_intensity_model(0.5, 0.0)) == pytest.approx(0.0)

    def test_jump_matches_closed_form_on_grid(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            sigma = float(rng.uniform(0.2, 2.0))
            x = float(rng.uniform(0.1, 5.0))
            p = float(rng.uniform(-3.0, 3.0))
            model = gbm_intensity_model(sigma, 0.1)
            got = pp_jump(x, p, model)
            assert abs(got - (p - sigma ** 2 * x)) <= 1e-10 * (1.0 + abs(p))


@pytest.fixture(scope="module")
def cox_fit():
    ex = get_example("example5", horizon=10.0, level=6)
    path, events = simulate_cox(ex.model, ex.grid, seed=5, x0=2.0)
    prior = lognormal_prior(max(events.count, 1) / ex.grid.horizon_T)
    fit = pp_solve(events, ex.model, prior, ex.grid)
    return ex, path, events, prior, fit


class TestSolve:
    def test_no_events_meets_all_conditions(self):
        ex = get_example("example5", horizon=2.0, level=6)
        events = EventRecord(2.0, np.array([]))
        prior = lognormal_prior(1.0)
        fit = pp_solve(events, ex.model, prior, ex.grid)
        assert fit.converged
        assert abs(fit.residual_terminal) <= 1e-6
        assert abs(fit.residual_initial) <= 1e-10
        assert fit.residual_interior_sup <= 1e-6
        # terminal gradient condition pins p_T to mu x_T (= 0 here)
        assert abs(fit.path.segments[-1].p[-1]) <= 1e-6

    def test_simulated_instance_converges(self, cox_fit):
        ex, true_path, events, prior, fit = cox_fit
        assert fit.converged
        assert abs(fit.residual_terminal) <= 1e-6
        assert fit.residual_interior_sup <= 1e-6
        assert fit.max_jump_defect <= 1e-10

    def test_jump_identity_machine_precision(self, cox_fit):
        ex, true_path, events, prior, fit = cox_fit
        sigma = ex.params["sigma"]
        for k in range(events.count):
            x = fit.path.segments[k].x[-1]
            assert abs(fit.path.jump_p[k] + sigma ** 2 * x) <= 1e-12 * (1.0 + x)

    def test_segments_convex(self, cox_fit):
        ex, true_path, events, prior, fit = cox_fit
        for seg in fit.path.segments:
            assert np.all(np.diff(seg.p) >= -1e-10)

    def test_recovers_intensity_shape(self, cox_fit):
        ex, true_path, events, prior, fit = cox_fit
        xs, _ = fit.path.node_values()
        times = fit.path.node_times()
        truth = np.interp(times, true_path.grid.times(), true_path.z[:, 0])
        ratio = xs / truth
        assert np.mean((ratio > 0.5) & (ratio < 2.0)) >= 0.8

    def test_first_variation_nonnegative(self, cox_fit):
        ex, true_path, events, prior, fit = cox_fit
        base = pp_action(fit.path, events, ex.model, prior)
        T = ex.grid.horizon_T
        rng = np.random.default_rng(6)
        for _ in range(20):
            coeffs = rng.standard_normal(3)
            freqs = rng.integers(1, 5, size=3)

            def bump(ts):
                return sum(
                    c * np.sin(np.pi * k * ts / T) for c, k in zip(coeffs, freqs)
                )

            def dbump(ts):
                return sum(
                    c * (np.pi * k / T) * np.cos(np.pi * k * ts / T)
                    for c, k in zip(coeffs, freqs)
                )

            norm = max(
                max(np.max(np.abs(bump(seg.t))) for seg in fit.path.segments),
                max(np.max(np.abs(dbump(seg.t))) for seg in fit.path.segments),
            )
            eps = 1e-3 / norm
            for sign in (1.0, -1.0):
                segs = [
                    SegmentPath(
                        seg.t,
                        seg.x + sign * eps * bump(seg.t),
                        seg.p + sign * eps * dbump(seg.t),
                    )
                    for seg in fit.path.segments
                ]
                pert = PiecewisePath(T, events.times, segs, fit.path.jump_p)
                assert pp_action(pert, events, ex.model, prior) >= base - 1e-10

    def test_discrete_minimizer_agrees_with_shooting(self):
        ex = get_example("example5", horizon=5.0, level=4)
        path, events = simulate_cox(ex.model, ex.grid, seed=3, x0=2.0)
        prior = lognormal_prior(max(events.count, 1) / ex.grid.horizon_T)
        fit = pp_solve(events, ex.model, prior, ex.grid)
        assert fit.converged
        times, xs_dense, _, grad_sup = pp_minimize_discrete(
            events, ex.model, prior, ex.grid
        )
        xs_shoot, _ = fit.path.node_values()
        scale = np.max(np.abs(xs_shoot))
        assert np.max(np.abs(xs_dense - xs_shoot)) <= 5e-2 * scale


class TestDiscreteObjective:
    def test_gradient_matches_finite_differences(self):
        ex = get_example("example5")
        events = EventRecord(20.0, np.array([3.0, 7.5, 12.0]))
        prior = lognormal_prior(0.15)
        times, idx = pp_nodes(events, ex.grid.with_level(2))
        rng = np.random.default_rng(8)
        x = np.exp(rng.normal(0.0, 0.3, size=len(times)))
        _, grad = pp_discrete_objective(x, times, idx, ex.model, prior)
        fd = np.empty_like(grad)
        for j in range(len(x)):
            step = STEP_FIRST * (1.0 + x[j])
            xp = x.copy()
            xp[j] += step
            xm = x.copy()
            xm[j] -= step
            fd[j] = (
                pp_discrete_objective(xp, times, idx, ex.model, prior)[0]
                - pp_discrete_objective(xm, times, idx, ex.model, prior)[0]
            ) / (2.0 * step)
        assert np.max(np.abs(grad - fd)) <= 1e-5 * (1.0 + np.max(np.abs(grad)))

    def test_event_times_are_nodes(self):
        ex = get_example("example5")
        events = EventRecord(20.0, np.array([3.3, 11.1]))
        times, idx = pp_nodes(events, ex.grid.with_level(3))
        assert np.allclose(times[idx], events.times)


class TestSimulateCox:
    def test_constant_intensity_is_poisson(self):
        model = unit_noise_model()
        const = DiffusionModel(
            1,
            lambda t, z: np.zeros(np.asarray(z).shape[:-1] + (1, 1)),
            lambda t, z: np.zeros(np.asarray(z).shape[:-1] + (1,)),
            vectorized=True,
        )
        grid = TimeGrid(5.0, 3)
        c = 2.0
        counts = np.array(
            [simulate_cox(const, grid, seed=s, x0=c)[1].count for s in range(10_000)]
        )
        lam = c * grid.horizon_T
        se = np.sqrt(lam / counts.size)
        assert abs(counts.mean() - lam) <= 3.0 * se
        # doubling the intensity doubles the expected count
        counts2 = np.array(
            [simulate_cox(const, grid, seed=s, x0=2 * c)[1].count for s in range(2000)]
        )
        assert abs(counts2.mean() - 2.0 * lam) <= 3.0 * np.sqrt(2 * lam / counts2.size)

    def test_deterministic_exponential_intensity(self):
        mu = 0.2
        model = gbm_intensity_model(0.0, mu)
        grid = TimeGrid(5.0, 6)
        c = 1.3
        lam_exact = c * (np.exp(mu * grid.horizon_T) - 1.0) / mu
        counts = np.array(
            [simulate_cox(model, grid, seed=s, x0=c)[1].count for s in range(4000)]
        )
        se = np.sqrt(lam_exact / counts.size)
        assert abs(counts.mean() - lam_exact) <= 3.0 * se

    def test_reproducible(self):
        ex = get_example("example5", horizon=5.0, level=5)
        a = simulate_cox(ex.model, ex.grid, seed=4, x0=2.0)
        b = simulate_cox(ex.model, ex.grid, seed=4, x0=2.0)
        assert np.array_equal(a[0].z, b[0].z)
        assert np.array_equal(a[1].times, b[1].times)


def test_lognormal_prior_properties():
    prior = lognormal_prior(2.0)
    assert prior.coercive
    assert prior.phi(np.array([-1.0])) == np.inf
    x = np.array([1.5])
    step = 1e-6
    fd = (prior.phi(x + step) - prior.phi(x - step)) / (2 * step)
    assert abs(fd - prior.grad_phi(x)[0]) <= 1e-6
    fd2 = (prior.grad_phi(x + step)[0] - prior.grad_phi(x - step)[0]) / (2 * step)
    assert abs(fd2 - prior.hess_phi(x)[0, 0]) <= 1e-5
