"""Synthetic joint paths by the first-order Euler-Maruyama scheme.

Randomness comes from a counter-based Philox stream keyed on (seed, level,
stream), with Gaussians produced by inverse-CDF transform of uniforms so
that refinement coupling is reproducible across platforms (no rejection
sampling).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import BlowUpError, EvaluationError
from .model import DiffusionModel, TimeGrid

_STREAM_PATH = 0
_STREAM_BRIDGE = 1


def _rng(seed: int, level: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), int(level), int(stream)))))


def gaussians(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normals via inverse CDF of open-interval uniforms."""
    u = (rng.integers(0, 2**53, size=shape).astype(float) + 0.5) * 2.0**-53
    return ndtri(u)


@dataclass(frozen=True)
class SimulatedPath:
    grid: TimeGrid
    z: np.ndarray                   # (N+1, d)
    seed: int
    wiener_increments: np.ndarray   # (N, d), retained for refinement coupling

    @property
    def dim_d(self) -> int:
        return self.z.shape[1]


def euler_maruyama(model: DiffusionModel, grid: TimeGrid, seed: int, z0) -> SimulatedPath:
    """z[j+1] = z[j] + sigma(t_j, z_j) dW_j + mu(t_j, z_j) h, deterministic
    given the seed.  Raises BlowUpError with the blow-up time if the state
    norm exceeds the model's coefficient cap."""
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    if z0.shape != (model.dim_d,):
        raise ValueError(f"z0 must have shape ({model.dim_d},)")
    h = grid.h
    n_steps = grid.count_N
    dw = gaussians(_rng(seed, grid.level_n, _STREAM_PATH), (n_steps, model.dim_d)) * np.sqrt(h)
    return _run_scheme(model, grid, seed, z0, dw)


def _run_scheme(model, grid, seed, z0, dw) -> SimulatedPath:
    h = grid.h
    z = np.empty((grid.count_N + 1, model.dim_d))
    z[0] = z0
    cap = model.coefficient_cap
    for j in range(grid.count_N):
        t = j * h
        zj = z[j]
        try:
            z[j + 1] = zj + model.sigma_at(t, zj) @ dw[j] + model.mu_at(t, zj) * h
        except EvaluationError as exc:
            raise BlowUpError(f"coefficients blew up at t={t:.6g}: {exc}", time=t) from exc
        if np.max(np.abs(z[j + 1])) > cap:
            raise BlowUpError(f"state blew up at t={t + h:.6g}", time=t + h)
    return SimulatedPath(grid=grid, z=z, seed=seed, wiener_increments=dw)


def refine(path: SimulatedPath, model: DiffusionModel) -> SimulatedPath:
    """Level-(n+1) path driven by the same Brownian motion.

    Each coarse increment is split in two by Brownian-bridge conditioning:
    the first half-step increment is dW/2 + xi with xi ~ N(0, h/4), the
    second is the exact remainder, so the pair sums to the coarse increment
    bit-for-bit.
    """
    grid = path.grid
    fine_grid = grid.with_level(grid.level_n + 1)
    coarse = path.wiener_increments
    n_steps, d = coarse.shape
    xi = gaussians(_rng(path.seed, fine_grid.level_n, _STREAM_BRIDGE), (n_steps, d)) * (
        0.5 * np.sqrt(grid.h)
    )
    fine = np.empty((2 * n_steps, d))
    fine[0::2] = 0.5 * coarse + xi
    fine[1::2] = coarse - fine[0::2]
    # absorb the last rounding ulp so the halves sum back bit-for-bit
    first, second = fine[0::2], fine[1::2]
    for _ in range(4):
        bad = (first + second) != coarse
        if not bad.any():
            break
        first[bad] = coarse[bad] - second[bad]
        second[bad] = coarse[bad] - first[bad]
    bad = (first + second) != coarse
    if bad.any():
        # double-rounding corner: fall back to the exact halving there
        first[bad] = 0.5 * coarse[bad]
        second[bad] = 0.5 * coarse[bad]
    return _run_scheme(model, fine_grid, path.seed, path.z[0], fine)
