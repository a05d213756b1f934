import numpy as np
import pytest

from leastaction.model import ObservationSeries, DiffusionModel, PartitionedModel, Prior
from leastaction.registry import get_example, default_prior
from leastaction.simulate import euler_maruyama
from leastaction.variational import solve_least_action


def hidden_bm_model(dim_hidden=1, dim_obs=1):
    """Decoupled Brownian motion: identity diffusion, zero drift."""
    d = dim_hidden + dim_obs
    eye = np.eye(d)

    def sigma(t, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return eye
        return np.broadcast_to(eye, (z.shape[0], d, d))

    def mu(t, z):
        return np.zeros_like(np.asarray(z, dtype=float))

    def dsigma(t, z):
        z = np.asarray(z, dtype=float)
        return np.zeros(z.shape[:-1] + (d, d, d))

    def dmu(t, z):
        z = np.asarray(z, dtype=float)
        return np.zeros(z.shape[:-1] + (d, d))

    base = DiffusionModel(d, sigma, mu, 1e8, dsigma, dmu, vectorized=True)
    return PartitionedModel(base, dim_hidden, dim_obs)


def constant_observations(grid, values):
    values = np.atleast_1d(np.asarray(values, dtype=float))
    return ObservationSeries(grid, np.tile(values, (grid.count_N + 1, 1)))


@pytest.fixture(scope="session")
def linear_instance():
    """Shared small linear instance with a converged fit and observations."""
    ex = get_example("example1", horizon=10.0, level=6)
    sim = euler_maruyama(ex.model.base, ex.grid, seed=7, z0=ex.z0)
    obs = ObservationSeries(ex.grid, sim.z[:, 1:])
    prior = default_prior(1)
    fit = solve_least_action(obs, ex.model, prior, ex.grid, starts=[np.zeros(1)])
    assert fit.converged
    return ex, sim, obs, prior, fit
