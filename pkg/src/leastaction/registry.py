"""Built-in model registry.

Keys "example1" .. "example5" return ready-to-use model setups with the
published parameters.  Numeric parameters can be overridden by keyword,
e.g. ``get_example("example3", sigma_x=2.0, horizon=50.0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .model import DiffusionModel, PartitionedModel, Prior, TimeGrid


def linear_model(S, A, cap=1e8) -> DiffusionModel:
    """Constant diffusion matrix S, linear drift A @ z, vectorized with
    analytic derivatives."""
    S = np.asarray(S, dtype=float)
    A = np.asarray(A, dtype=float)
    d = S.shape[0]
    At = np.ascontiguousarray(A.T)
    dS = np.zeros((d, d, d))

    def sigma(t, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return S
        return np.broadcast_to(S, (z.shape[0], d, d))

    def mu(t, z):
        return np.asarray(z, dtype=float) @ At

    def dsigma(t, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return dS
        return np.broadcast_to(dS, (z.shape[0], d, d, d))

    def dmu(t, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return At
        return np.broadcast_to(At, (z.shape[0], d, d))

    return DiffusionModel(d, sigma, mu, cap, dsigma, dmu, vectorized=True)


def default_prior(n, center=0.0, variance=10.0) -> Prior:
    """Isotropic Gaussian fallback prior used when a config omits one."""
    return Prior.gaussian(np.full(n, float(center)), variance)


@dataclass(frozen=True)
class ExampleSetup:
    name: str
    kind: str                      # "diffusion" or "pointprocess"
    model: object                  # PartitionedModel, or DiffusionModel for point processes
    grid: TimeGrid
    z0: np.ndarray
    params: dict = field(default_factory=dict)
    description: str = ""

    def prior(self) -> Prior:
        if self.kind == "pointprocess":
            from .pointprocess import lognormal_prior

            return lognormal_prior(float(self.z0[0]))
        n = self.model.hidden_n
        return default_prior(n)


def _example1(p):
    sx, sy = p["sigma_x"], p["sigma_y"]
    bx, by = p["beta_x"], p["beta_y"]
    S = np.array([[sx, 0.0], [sx, sy]])
    A = np.array([[-bx, 0.0], [-bx + by, -by]])
    model = PartitionedModel(linear_model(S, A), hidden_n=1, observed_s=1)
    return model, "scalar OU hidden in an OU-noised sum observation (linear)"


def _example2(p):
    lam, so = p["lam"], p["sigma_obs"]
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    eye = np.eye(2)
    S = np.block([[eye, np.zeros((2, 2))], [eye, so * eye]])
    A = np.block([[rot, np.zeros((2, 2))], [rot + lam * eye, -lam * eye]])
    model = PartitionedModel(linear_model(S, A), hidden_n=2, observed_s=2)
    return model, "planar rotation hidden in a heavily OU-noised observation (linear)"


def _example3(p):
    sx, b, a, lam, sy = p["sigma_x"], p["b"], p["a"], p["lam"], p["sigma_obs"]
    S = np.array([[sx, 0.0], [sx, sy]])

    def mu(t, z):
        z = np.asarray(z, dtype=float)
        x, y = z[..., 0], z[..., 1]
        drift = -b * np.sin(a * x)
        return np.stack([drift, drift - lam * (y - x)], axis=-1)

    def dsigma(t, z):
        z = np.asarray(z, dtype=float)
        shape = z.shape[:-1] + (2, 2, 2)
        return np.zeros(shape)

    def dmu(t, z):
        z = np.asarray(z, dtype=float)
        x = z[..., 0]
        c = -a * b * np.cos(a * x)
        zero = np.zeros_like(x)
        row_x = np.stack([c, c + lam], axis=-1)
        row_y = np.stack([zero, np.full_like(x, -lam)], axis=-1)
        return np.stack([row_x, row_y], axis=-2)

    def sigma(t, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return S
        return np.broadcast_to(S, (z.shape[0], 2, 2))

    base = DiffusionModel(2, sigma, mu, 1e8, dsigma, dmu, vectorized=True)
    model = PartitionedModel(base, hidden_n=1, observed_s=1)
    return model, "multiwell drift pinned near multiples of 5 (nonlinear, multimodal)"


def _example4(p):
    b, a, lam, so = p["b"], p["a"], p["lam"], p["sigma_obs"]
    v = np.asarray(p["v"], dtype=float)
    cov = np.asarray(p["Sigma_sq"], dtype=float)
    evals, evecs = np.linalg.eigh(cov)
    Sx = evecs @ np.diag(np.sqrt(evals)) @ evecs.T
    S = np.zeros((3, 3))
    S[:2, :2] = Sx
    S[2, :2] = v @ Sx
    S[2, 2] = so

    def mu(t, z):
        z = np.asarray(z, dtype=float)
        x1, x2, y = z[..., 0], z[..., 1], z[..., 2]
        d1 = -b * np.sin(a * x1)
        d2 = -b * np.sin(a * x2)
        dy = v[0] * d1 + v[1] * d2 - lam * (y - v[0] * x1 - v[1] * x2)
        return np.stack([d1, d2, dy], axis=-1)

    def dsigma(t, z):
        z = np.asarray(z, dtype=float)
        return np.zeros(z.shape[:-1] + (3, 3, 3))

    def dmu(t, z):
        z = np.asarray(z, dtype=float)
        x1, x2 = z[..., 0], z[..., 1]
        c1 = -a * b * np.cos(a * x1)
        c2 = -a * b * np.cos(a * x2)
        zero = np.zeros_like(x1)
        row1 = np.stack([c1, zero, v[0] * c1 + lam * v[0]], axis=-1)
        row2 = np.stack([zero, c2, v[1] * c2 + lam * v[1]], axis=-1)
        row3 = np.stack([zero, zero, np.full_like(x1, -lam)], axis=-1)
        return np.stack([row1, row2, row3], axis=-2)

    def sigma(t, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return S
        return np.broadcast_to(S, (z.shape[0], 3, 3))

    base = DiffusionModel(3, sigma, mu, 1e8, dsigma, dmu, vectorized=True)
    model = PartitionedModel(base, hidden_n=2, observed_s=1)
    return model, "planar multiwell diffusion seen through one scalar channel"


def gbm_intensity_model(sigma_coef, mu_coef, cap=1e8) -> DiffusionModel:
    """Scalar geometric Brownian motion dx = x (sigma dW + mu dt)."""

    def sigma(t, z):
        z = np.asarray(z, dtype=float)
        return (sigma_coef * z[..., 0])[..., None, None]

    def mu(t, z):
        z = np.asarray(z, dtype=float)
        return (mu_coef * z[..., 0])[..., None]

    def dsigma(t, z):
        z = np.asarray(z, dtype=float)
        return np.full(z.shape[:-1] + (1, 1, 1), sigma_coef)

    def dmu(t, z):
        z = np.asarray(z, dtype=float)
        return np.full(z.shape[:-1] + (1, 1), mu_coef)

    return DiffusionModel(1, sigma, mu, cap, dsigma, dmu, vectorized=True)


def _example5(p):
    model = gbm_intensity_model(p["sigma"], p["mu"])
    return model, "positive GBM intensity of an observed point process"


_DEFAULTS = {
    "example1": dict(
        build=_example1,
        kind="diffusion",
        params=dict(sigma_x=1.053, sigma_y=1.0127, beta_x=0.1054, beta_y=0.0253),
        horizon=100.0,
        level=8,
        z0=[0.0, 0.0],
    ),
    "example2": dict(
        build=_example2,
        kind="diffusion",
        params=dict(lam=0.005, sigma_obs=20.0),
        horizon=100.0,
        level=8,
        z0=[0.0, 0.0, 0.0, 0.0],
    ),
    "example3": dict(
        build=_example3,
        kind="diffusion",
        params=dict(sigma_x=3.0, b=12.0, a=2.0 * np.pi / 5.0, lam=0.05, sigma_obs=1.0),
        horizon=100.0,
        level=8,
        z0=[0.0, 0.0],
    ),
    "example4": dict(
        build=_example4,
        kind="diffusion",
        params=dict(
            Sigma_sq=[[0.9, 0.27], [0.27, 0.9]],
            v=[1.0, 2.0],
            lam=0.05,
            sigma_obs=1.0,
            b=12.0,
            a=2.0 * np.pi / 5.0,
        ),
        horizon=100.0,
        level=8,
        z0=[0.0, 0.0, 0.0],
    ),
    "example5": dict(
        build=_example5,
        kind="pointprocess",
        params=dict(sigma=0.3, mu=0.0),
        horizon=20.0,
        level=8,
        z0=[2.45],
    ),
}


def example_names():
    return sorted(_DEFAULTS)


def get_example(name: str, horizon: Optional[float] = None, level: Optional[int] = None,
                z0=None, **param_overrides) -> ExampleSetup:
    spec = _DEFAULTS.get(name)
    if spec is None:
        raise ConfigError(f"unknown model key {name!r}; known: {', '.join(example_names())}")
    params = dict(spec["params"])
    for key, val in param_overrides.items():
        if key not in params:
            raise ConfigError(f"unknown parameter {key!r} for {name}")
        params[key] = val
    model, description = spec["build"](params)
    grid = TimeGrid(
        float(horizon) if horizon is not None else spec["horizon"],
        int(level) if level is not None else spec["level"],
    )
    z0_arr = np.asarray(z0 if z0 is not None else spec["z0"], dtype=float)
    return ExampleSetup(
        name=name,
        kind=spec["kind"],
        model=model,
        grid=grid,
        z0=z0_arr,
        params=params,
        description=description,
    )
