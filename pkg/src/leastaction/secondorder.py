"""Gaussian fluctuation law around a converged least-action path and the
local-minimum diagnostic.

Around a converged path the action is locally quadratic in the perturbation,
with coefficient matrices A, B, q (second derivatives of the action density
along the path).  A backward matrix Riccati equation for theta completes the
square; its solution yields the feedback matrix K, the initial precision
D^2 phi(x*_0) + theta_0, and a forward Lyapunov ODE for the covariance V of
the perturbation.  The same coefficients feed a second-order linear ODE for
a matrix F whose determinant signals conjugate points: a sign change
certifies the path is not a local minimizer.

Node values of A, B, q are interpolated by natural cubic splines so that the
Riccati route and the F-ODE route integrate the same coefficient functions
(with exact interpolant derivatives where the F equation needs them); this
keeps the two routes mutually consistent to integrator accuracy.  All
integrators evaluate the interpolants once on the half-step stage lattice
and run index-based RK4 over the tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import NotPositiveDefiniteError, RiccatiExplosionError
from .model import (
    HiddenPath,
    ObservationSeries,
    PartitionedModel,
    Prior,
    TimeGrid,
    psi_derivatives,
)
from .simulate import _rng, gaussians

THETA_CAP = 1e10
DET_TOL_FACTOR = 1e-8   # min |det F| relative to its max for a local_min verdict

VERDICT_LOCAL_MIN = "local_min"
VERDICT_NOT_LOCAL_MIN = "not_local_min"
VERDICT_INCONCLUSIVE = "inconclusive"


def _stage_times(grid: TimeGrid) -> np.ndarray:
    """Nodes interleaved with midpoints: stage k corresponds to time k*h/2."""
    out = np.empty(2 * grid.count_N + 1)
    out[0::2] = grid.times()
    out[1::2] = grid.midpoints()
    return out


class ABqPath:
    """Second-derivative coefficients of the action density along a path,
    with spline evaluators for stage times between nodes."""

    def __init__(self, grid: TimeGrid, A, B, q):
        self.grid = grid
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.q = np.asarray(q, dtype=float)
        m = grid.count_N + 1
        n = self.A.shape[-1]
        for name, arr in (("A", self.A), ("B", self.B), ("q", self.q)):
            if arr.shape != (m, n, n):
                raise ValueError(f"{name} must have shape ({m}, {n}, {n})")
        ts = grid.times()
        self._sA = CubicSpline(ts, self.A, axis=0, bc_type="natural")
        self._sB = CubicSpline(ts, self.B, axis=0, bc_type="natural")
        self._sq = CubicSpline(ts, self.q, axis=0, bc_type="natural")
        self._sBd = self._sB.derivative(1)
        self._sqd = self._sq.derivative(1)

    @property
    def dim_n(self) -> int:
        return self.A.shape[-1]

    def A_at(self, t):
        return self._sA(t)

    def B_at(self, t):
        return self._sB(t)

    def q_at(self, t):
        return self._sq(t)

    def dB_at(self, t):
        return self._sBd(t)

    def dq_at(self, t):
        return self._sqd(t)

    def stage_tables(self):
        ts = _stage_times(self.grid)
        return self._sA(ts), self._sB(ts), self._sq(ts), self._sBd(ts), self._sqd(ts)


def _as_hidden_path(xstar) -> HiddenPath:
    if isinstance(xstar, HiddenPath):
        return xstar
    path = getattr(xstar, "path", None)
    if path is None:
        raise TypeError("xstar must be a HiddenPath or carry one in .path")
    if not getattr(xstar, "converged", True):
        raise ValueError("xstar did not converge; second-order analysis needs a stationary path")
    return path


def extract_ABq(xstar, obs: ObservationSeries, model: PartitionedModel) -> ABqPath:
    """Per-node second derivatives of the action density along the path,
    A and q symmetrized.

    Constant-coefficient linear models have state-independent second
    derivatives; they are evaluated at three spread nodes (as a guard) and
    tiled instead of looped.
    """
    path = _as_hidden_path(xstar)
    n = model.hidden_n
    ts = path.grid.times()
    m = len(ts)
    from .variational import _probe_linear

    if _probe_linear(model) is not None and not model.base.time_dependent:
        probes = [0, m // 2, m - 1]
        vals = [
            psi_derivatives(ts[j], path.x[j], path.p[j], obs, model) for j in probes
        ]
        close = all(
            np.allclose(vals[0][field], v[field], atol=1e-10)
            for v in vals[1:]
            for field in (2, 3, 4)
        )
        if close:
            return ABqPath(
                path.grid,
                np.tile(vals[0].A, (m, 1, 1)),
                np.tile(vals[0].B, (m, 1, 1)),
                np.tile(vals[0].q, (m, 1, 1)),
            )
    A = np.empty((m, n, n))
    B = np.empty((m, n, n))
    q = np.empty((m, n, n))
    for j, t in enumerate(ts):
        try:
            derivs = psi_derivatives(t, path.x[j], path.p[j], obs, model)
        except NotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(
                f"q not positive definite at node {j} (t={t:.6g})", t=t
            ) from exc
        A[j], B[j], q[j] = derivs.A, derivs.B, derivs.q
    return ABqPath(path.grid, A, B, q)


def _rk4_stages(rhs, y0, grid: TimeGrid, forward: bool, sym=False, cap=None, what="ODE"):
    """Index-based RK4 over the stage lattice; rhs(stage_index, y)."""
    h = grid.h
    N = grid.count_N
    out = np.empty((N + 1,) + np.shape(y0))
    y = np.asarray(y0, dtype=float)
    if forward:
        out[0] = y
        nodes = range(N)
    else:
        out[N] = y
        nodes = range(N, 0, -1)
    sgn = 1.0 if forward else -1.0
    for j in nodes:
        k0 = 2 * j
        km = k0 + (1 if forward else -1)
        ke = k0 + (2 if forward else -2)
        k1 = rhs(k0, y)
        k2 = rhs(km, y + 0.5 * sgn * h * k1)
        k3 = rhs(km, y + 0.5 * sgn * h * k2)
        k4 = rhs(ke, y + sgn * h * k3)
        y = y + (sgn * h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if sym:
            y = 0.5 * (y + np.swapaxes(y, -1, -2))
        big = np.max(np.abs(y))
        if not np.isfinite(big) or (cap is not None and big > cap):
            t_fail = (j + (1 if forward else -1)) * h
            raise RiccatiExplosionError(f"{what} exploded at t={t_fail:.6g}", time=t_fail)
        out[j + (1 if forward else -1)] = y
    return out


def solve_riccati(abq: ABqPath, grid: TimeGrid) -> np.ndarray:
    """Backward solution of thetadot = (B + theta) q^-1 (B^T + theta) - A
    from theta_T = 0, symmetrized every step.

    Explosion (norm beyond 1e10) raises "theta exploded": the expansion
    point is not a minimizer (cross-check with the determinant diagnostic).
    """
    n = abq.dim_n
    A_tab, B_tab, q_tab, _, _ = abq.stage_tables()
    Bt_tab = np.swapaxes(B_tab, 1, 2)

    def rhs(k, theta):
        return (B_tab[k] + theta) @ np.linalg.solve(q_tab[k], Bt_tab[k] + theta) - A_tab[k]

    return _rk4_stages(
        rhs, np.zeros((n, n)), grid, forward=False, sym=True, cap=THETA_CAP, what="theta"
    )


def covariance_V(theta, abq: ABqPath, init_precision, grid: TimeGrid) -> np.ndarray:
    """Forward covariance ODE Vdot = -K V - V K^T + q^-1 from
    V_0 = (init_precision)^-1, with K = q^-1 (B^T + theta)."""
    theta = np.asarray(theta, dtype=float)
    s_theta = CubicSpline(grid.times(), theta, axis=0, bc_type="natural")
    init_precision = np.asarray(init_precision, dtype=float)
    try:
        v0 = np.linalg.inv(init_precision)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("init_precision singular") from None
    v0 = 0.5 * (v0 + v0.T)
    ts = _stage_times(grid)
    _, B_tab, q_tab, _, _ = abq.stage_tables()
    K_tab = np.linalg.solve(q_tab, np.swapaxes(B_tab, 1, 2) + s_theta(ts))
    qinv_tab = np.linalg.inv(q_tab)

    def rhs(k, v):
        return -K_tab[k] @ v - v @ K_tab[k].T + qinv_tab[k]

    return _rk4_stages(rhs, v0, grid, forward=True, sym=True, what="covariance")


@dataclass(frozen=True)
class FDiagnostic:
    """Solution of the conjugate-point ODE with its determinant record."""

    F: np.ndarray          # (N+1, n, n)
    Fdot: np.ndarray       # (N+1, n, n)
    detF: np.ndarray       # (N+1,)
    min_abs_det: float
    verdict: str


def solve_F(abq: ABqPath, grid: TimeGrid) -> FDiagnostic:
    """Backward integration of the linear second-order ODE

        q Fddot = (A - Bdot^T) F + (B - B^T - qdot) Fdot

    from F_T = I, Fdot_T = -q_T^-1 B_T^T, recording det F per node.  A sign
    change certifies the path is not a local minimizer; a determinant
    bounded away from zero yields local_min; otherwise inconclusive.
    """
    n = abq.dim_n
    A_tab, B_tab, q_tab, dB_tab, dq_tab = abq.stage_tables()
    lead = A_tab - np.swapaxes(dB_tab, 1, 2)
    damp = B_tab - np.swapaxes(B_tab, 1, 2) - dq_tab
    f_term = np.eye(n)
    fdot_term = -np.linalg.solve(q_tab[-1], B_tab[-1].T @ f_term)

    def rhs(k, state):
        F, Fd = state
        return np.stack([Fd, np.linalg.solve(q_tab[k], lead[k] @ F + damp[k] @ Fd)])

    states = _rk4_stages(
        rhs, np.stack([f_term, fdot_term]), grid, forward=False, what="conjugate-point"
    )
    F = states[:, 0]
    Fdot = states[:, 1]
    detF = np.linalg.det(F)
    min_abs = float(np.min(np.abs(detF)))
    if np.any(detF[:-1] * detF[1:] < 0.0) or np.any(detF == 0.0):
        verdict = VERDICT_NOT_LOCAL_MIN
    elif min_abs > DET_TOL_FACTOR * float(np.max(np.abs(detF))):
        verdict = VERDICT_LOCAL_MIN
    else:
        verdict = VERDICT_INCONCLUSIVE
    return FDiagnostic(F, Fdot, detF, min_abs, verdict)


def theta_from_F(abq: ABqPath, diag: FDiagnostic) -> np.ndarray:
    """Reconstruct theta from the conjugate-point solution:
    theta = -q Fdot F^-1 - B^T (valid while F is invertible)."""
    Finv = np.linalg.inv(diag.F)
    return -np.einsum("mij,mjk,mkl->mil", abq.q, diag.Fdot, Finv) - np.swapaxes(
        abq.B, 1, 2
    )


@dataclass(frozen=True)
class LocalMinReport:
    verdict: str
    min_abs_det: float
    detF: np.ndarray
    theta0: Optional[np.ndarray]
    init_precision_eigs: Optional[np.ndarray]
    riccati_exploded: bool


def check_local_min(xstar, obs, model: PartitionedModel, prior: Prior,
                    grid: TimeGrid) -> LocalMinReport:
    """Determinant-based classification of a stationary path, with the
    Riccati initial curvature attached when it exists."""
    path = _as_hidden_path(xstar)
    abq = extract_ABq(path, obs, model)
    diag = solve_F(abq, grid)
    theta0 = None
    eigs = None
    exploded = False
    try:
        theta = solve_riccati(abq, grid)
        theta0 = theta[0]
        precision = prior.hessian(path.x[0]) + theta0
        eigs = np.linalg.eigvalsh(precision)
    except RiccatiExplosionError:
        exploded = True
    return LocalMinReport(diag.verdict, diag.min_abs_det, diag.detF, theta0, eigs, exploded)


@dataclass(frozen=True)
class SecondOrderLaw:
    """Everything needed to describe and sample the Gaussian perturbation
    law around a converged path."""

    grid: TimeGrid
    A: np.ndarray
    B: np.ndarray
    q: np.ndarray
    theta: np.ndarray
    K: np.ndarray
    V: np.ndarray
    init_precision: np.ndarray

    @property
    def dim_n(self) -> int:
        return self.A.shape[-1]


def second_order_law(xstar, obs, model: PartitionedModel, prior: Prior) -> SecondOrderLaw:
    """Assemble the full second-order law along a converged path."""
    path = _as_hidden_path(xstar)
    grid = path.grid
    abq = extract_ABq(path, obs, model)
    theta = solve_riccati(abq, grid)
    K = np.linalg.solve(abq.q, np.swapaxes(abq.B, 1, 2) + theta)
    init_precision = prior.hessian(path.x[0]) + theta[0]
    V = covariance_V(theta, abq, init_precision, grid)
    return SecondOrderLaw(grid, abq.A, abq.B, abq.q, theta, K, V, init_precision)


def _sqrt_qinv(q: np.ndarray, floor=1e-12) -> np.ndarray:
    """Symmetric PSD square root of q^-1 per node, eigenvalues floored."""
    evals, evecs = np.linalg.eigh(q)
    evals = np.maximum(evals, floor)
    return np.einsum("mik,mk,mjk->mij", evecs, evals ** -0.5, evecs)


def sample_perturbation(law: SecondOrderLaw, seed: int) -> HiddenPath:
    """One Euler-Maruyama sample of the perturbation SDE
    dxi = -K xi dt + q^(-1/2) dW, started from N(0, init_precision^-1)."""
    xi = _perturbation_paths(law, 1, seed)
    p = np.gradient(xi[:, 0, :], law.grid.h, axis=0)
    return HiddenPath(law.grid, xi[:, 0, :], p)


def perturbation_ensemble(law: SecondOrderLaw, n_samples: int, seed: int) -> np.ndarray:
    """Terminal states of n_samples perturbation draws, shape (n_samples, n)."""
    return _perturbation_paths(law, n_samples, seed, keep_path=False)


def _perturbation_paths(law, n_samples, seed, keep_path=True):
    n = law.dim_n
    grid = law.grid
    h = grid.h
    N = grid.count_N
    rng = _rng(seed, grid.level_n, 2)
    v0 = np.linalg.inv(law.init_precision)
    v0 = 0.5 * (v0 + v0.T)
    evals, evecs = np.linalg.eigh(v0)
    root0 = evecs @ np.diag(np.sqrt(np.maximum(evals, 0.0))) @ evecs.T
    xi = gaussians(rng, (n_samples, n)) @ root0.T
    roots = _sqrt_qinv(law.q)
    sqrt_h = np.sqrt(h)
    if keep_path:
        out = np.empty((N + 1, n_samples, n))
        out[0] = xi
    for j in range(N):
        dw = gaussians(rng, (n_samples, n)) * sqrt_h
        xi = xi - (xi @ law.K[j].T) * h + dw @ roots[j].T
        if keep_path:
            out[j + 1] = xi
    return out if keep_path else xi
