"""Independent ground-truth engines.

The Kalman/RTS smoother computes the exact discrete posterior of the hidden
block for certified-linear models on the same one-step Gaussian scheme the
likelihood uses, so comparisons against it isolate solver error rather than
model error.  The dense Hessian check and the ball-volume expected-trials
formula back the local-minimum diagnostics and the dimension-scaling
discussion respectively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .action import discrete_loglik_grad
from .model import ObservationSeries, PartitionedModel, Prior, TimeGrid, STEP_FIRST

HESSIAN_GUARD = 2000

_PROBE_TOL = 1e-8


def _certify_linear(model: PartitionedModel, grid: TimeGrid):
    """Extract (S, A, b) from a linear model dz = S dW + (A z + b) dt,
    refusing on any detected nonlinearity or time dependence."""
    base = model.base
    d = base.dim_d
    t_probes = (0.0, 0.37 * grid.horizon_T, 0.81 * grid.horizon_T)
    S = base.sigma_at(0.0, np.zeros(d))
    b = base.mu_at(0.0, np.zeros(d))
    A = np.empty((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        A[:, k] = base.mu_at(0.0, e) - b
    z_probes = [
        np.linspace(-1.7, 2.3, d),
        np.linspace(4.0, -3.0, d),
        np.full(d, 0.625),
    ]
    for t in t_probes:
        for z in z_probes:
            mu = base.mu_at(t, z)
            ref = A @ z + b
            if np.max(np.abs(mu - ref)) > _PROBE_TOL * (1.0 + np.max(np.abs(ref))):
                raise ValueError("nonlinearity detected: mu is not affine in z")
            sig = base.sigma_at(t, z)
            if np.max(np.abs(sig - S)) > _PROBE_TOL * (1.0 + np.max(np.abs(S))):
                raise ValueError("nonlinearity detected: sigma is not constant")
    return S, A, b


def _certify_gaussian(prior: Prior, n: int):
    """Extract (mean, covariance) from a Gaussian prior, refusing otherwise."""
    h0 = np.asarray(prior.hess_phi(np.zeros(n)), dtype=float)
    h1 = np.asarray(prior.hess_phi(np.full(n, 1.3)), dtype=float)
    if np.max(np.abs(h0 - h1)) > _PROBE_TOL * (1.0 + np.max(np.abs(h0))):
        raise ValueError("prior is not Gaussian: Hessian not constant")
    g0 = np.asarray(prior.grad_phi(np.zeros(n)), dtype=float)
    probe = np.full(n, 0.7)
    g1 = np.asarray(prior.grad_phi(probe), dtype=float)
    if np.max(np.abs(g1 - (g0 + h0 @ probe))) > _PROBE_TOL * (1.0 + np.max(np.abs(g1))):
        raise ValueError("prior is not Gaussian: gradient not affine")
    try:
        m0 = np.linalg.solve(h0, -g0)
        p0 = np.linalg.inv(h0)
    except np.linalg.LinAlgError:
        raise ValueError("prior Hessian singular; a proper Gaussian prior is required") from None
    return m0, 0.5 * (p0 + p0.T)


@dataclass(frozen=True)
class SmootherResult:
    grid: TimeGrid
    mean: np.ndarray   # (N+1, n) posterior mean of the hidden block
    cov: np.ndarray    # (N+1, n, n) posterior marginal covariance


def kalman_rts(model: PartitionedModel, obs: ObservationSeries, prior: Prior,
               grid: TimeGrid) -> SmootherResult:
    """Exact posterior mean/covariance of the hidden path given the observed
    samples, for a certified linear model and Gaussian prior.

    The joint one-step transition is Gaussian with mean (I + hA) z + hb and
    covariance h S S^T; observing the y-block of each step yields a linear
    filtering problem with correlated process/measurement noise, handled by
    conditioning the hidden transition on the observed innovation.  Forward
    Kalman filtering is followed by Rauch-Tung-Striebel smoothing.
    """
    n, s = model.hidden_n, model.observed_s
    S, A, b = _certify_linear(model, grid)
    m, P = _certify_gaussian(prior, n)
    h = grid.h
    y = obs.samples_at(grid)
    N = grid.count_N

    F = np.eye(model.d) + h * A
    c = h * b
    Q = h * (S @ S.T)
    Fxx, Fxy = F[:n, :n], F[:n, n:]
    Fyx, Fyy = F[n:, :n], F[n:, n:]
    cx, cy = c[:n], c[n:]
    Qxx, Qxy, Qyy = Q[:n, :n], Q[:n, n:], Q[n:, n:]
    gain_xy = Qxy @ np.linalg.inv(Qyy)
    Ft = Fxx - gain_xy @ Fyx                      # hidden transition given the observed step
    Qt = Qxx - gain_xy @ Qxy.T
    Qt = 0.5 * (Qt + Qt.T)

    m_up = np.empty((N + 1, n))
    P_up = np.empty((N + 1, n, n))
    known = np.empty((N, n))
    for j in range(N):
        # measurement update of x_j with the observed increment to y_{j+1}
        innov_mean = Fyx @ m + Fyy @ y[j] + cy
        resid = y[j + 1] - innov_mean
        S_cov = Fyx @ P @ Fyx.T + Qyy
        K = P @ Fyx.T @ np.linalg.inv(S_cov)
        m = m + K @ resid
        P = P - K @ Fyx @ P
        P = 0.5 * (P + P.T)
        m_up[j] = m
        P_up[j] = P
        # exact conditional transition to x_{j+1}
        known[j] = Fxy @ y[j] + cx + gain_xy @ (y[j + 1] - Fyy @ y[j] - cy)
        m = Ft @ m + known[j]
        P = Ft @ P @ Ft.T + Qt
        P = 0.5 * (P + P.T)
    m_up[N] = m
    P_up[N] = P

    mean = np.empty_like(m_up)
    cov = np.empty_like(P_up)
    mean[N] = m_up[N]
    cov[N] = P_up[N]
    for j in range(N - 1, -1, -1):
        pred_mean = Ft @ m_up[j] + known[j]
        pred_cov = Ft @ P_up[j] @ Ft.T + Qt
        gain = P_up[j] @ Ft.T @ np.linalg.inv(pred_cov)
        mean[j] = m_up[j] + gain @ (mean[j + 1] - pred_mean)
        cov[j] = P_up[j] + gain @ (cov[j + 1] - pred_cov) @ gain.T
        cov[j] = 0.5 * (cov[j] + cov[j].T)
    return SmootherResult(grid, mean, cov)


def dense_hessian_eigmin(xpath, obs, model: PartitionedModel, prior: Prior,
                         grid: TimeGrid) -> float:
    """Smallest eigenvalue of the finite-difference Hessian of -loglik at
    xpath (central differences of the exact gradient)."""
    xpath = np.asarray(xpath, dtype=float)
    if xpath.ndim == 1:
        xpath = xpath[:, None]
    n = model.hidden_n
    size = xpath.size
    if size > HESSIAN_GUARD:
        raise ValueError(f"problem size {size} exceeds Hessian guard {HESSIAN_GUARD}")

    def grad(x_flat):
        x = x_flat.reshape(-1, n)
        return -discrete_loglik_grad(x, obs, model, prior, grid).ravel()

    flat = xpath.ravel()
    hess = np.empty((size, size))
    for k in range(size):
        step = STEP_FIRST * (1.0 + abs(flat[k]))
        plus = flat.copy()
        plus[k] += step
        minus = flat.copy()
        minus[k] -= step
        hess[:, k] = (grad(plus) - grad(minus)) / (2.0 * step)
    hess = 0.5 * (hess + hess.T)
    return float(np.linalg.eigvalsh(hess)[0])


def balls_mean_trials(b: float, d: int) -> float:
    """Expected number of uniform trials in the unit cube before one lands
    in a ball of radius b: b**-d over the unit-ball volume."""
    if not 0.0 < b <= 1.0:
        raise ValueError("radius b must lie in (0, 1]")
    if d < 1 or d != int(d):
        raise ValueError("dimension d must be an integer >= 1")
    volume = math.pi ** (d / 2.0) / math.gamma(1.0 + d / 2.0)
    return b ** (-d) / volume
