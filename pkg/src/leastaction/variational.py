"""Shooting solution of the least-action boundary-value problem.

Stationarity of the action functional gives a first-order ODE system for
(x, p) with a boundary condition at each end: at t = 0 the p-gradient of
the action density must match the prior gradient, at t = T it must vanish.
The system is integrated with classic fourth-order Runge-Kutta on the
observation grid and the unknown initial point is found by damped Newton
iteration on the terminal residual; long or strongly unstable horizons
switch to multiple shooting with matching conditions at interior knots.

All integrations run on the half-step stage lattice of the grid with the
observation spline tabulated once, and step whole batches of states at
independent stage offsets at a time: in multiple shooting every segment
(and every Jacobian perturbation) advances in the same vectorized RK4
sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BlowUpError, EvaluationError, NotPositiveDefiniteError
from .model import (
    HiddenPath,
    ObservationSeries,
    PartitionedModel,
    Prior,
    TimeGrid,
    _context,
    _context_batch,
    _derivative_pieces,
)

BCT_TOL = 1e-6
FULL_TOL = 1e-7            # multiple-shooting residual target (matching + terminal)
NEWTON_MAX_ITER = 150
DAMPING_MAX_HALVINGS = 30
JAC_STEP = 1e-6            # forward-difference scale for shooting Jacobians
MS_TIME_PRODUCT = 20.0     # horizon times local Lipschitz beyond which multiple shooting engages
MS_SEGMENT_PRODUCT = 10.0  # target segment length times local Lipschitz


@dataclass(frozen=True)
class LeastActionPath:
    """Converged least-action path with its attained action value."""

    path: HiddenPath
    action: float
    residual_bcT: np.ndarray
    converged: bool
    starts_tried: int


def el_rhs(t, x, p, obs: ObservationSeries, model: PartitionedModel):
    """(dx, dp) of the stationarity ODE: dx = p and
    dp = q^-1 (grad_x - dt_grad_p - B^T p)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    gx, _, _, B, q, dtgp = _derivative_pieces(t, x, p, obs, model, need_A=False)
    dp = np.linalg.solve(q, gx - dtgp - B.T @ p)
    return p.copy(), dp


def _probe_linear(model: PartitionedModel):
    """Detect a constant-coefficient linear drift model; returns the affine
    pieces (A transpose, offset) or None."""
    base = model.base
    if not base.has_analytic_derivatives or base.time_dependent:
        return None
    d = base.dim_d
    z1 = np.zeros(d)
    z2 = np.linspace(0.7, 1.3, d)
    try:
        ds1 = np.asarray(base.dsigma(0.0, z1), dtype=float)
        ds2 = np.asarray(base.dsigma(0.0, z2), dtype=float)
        dm1 = np.asarray(base.dmu(0.0, z1), dtype=float)
        dm2 = np.asarray(base.dmu(0.0, z2), dtype=float)
        s1 = base.sigma_at(0.0, z1)
        s2 = base.sigma_at(0.0, z2)
    except Exception:
        return None
    if np.any(ds1 != 0.0) or np.any(ds2 != 0.0):
        return None
    if not (np.array_equal(dm1, dm2) and np.array_equal(s1, s2)):
        return None
    offset = base.mu_at(0.0, z1)
    return dm1, offset


def _probe_constant_sigma(model: PartitionedModel):
    """Detect dsigma identically zero (constant diffusion matrix)."""
    base = model.base
    if not (base.has_analytic_derivatives and base.vectorized) or base.time_dependent:
        return None
    d = base.dim_d
    probes = np.stack([np.zeros(d), np.linspace(0.7, 1.3, d), np.linspace(-2.0, 1.0, d)])
    try:
        ds = np.asarray(base.dsigma(0.0, probes), dtype=float)
        s = np.asarray(base.sigma(0.0, probes), dtype=float)
    except Exception:
        return None
    if np.any(ds != 0.0):
        return None
    if np.any(s != s[0]):
        return None
    return np.array(s[0], dtype=float)


class StageEvaluator:
    """Batched right-hand side of the stationarity ODE on the stage lattice.

    ``rhs(stage_idx, X, P)`` evaluates the field for a batch of hidden
    states at (possibly distinct) stage indices; stage k is time k*h/2.
    Observation values are tabulated once per grid.
    """

    def __init__(self, obs: ObservationSeries, model: PartitionedModel, grid: TimeGrid):
        self.obs = obs
        self.model = model
        self.grid = grid
        self.n = model.hidden_n
        self.s = model.observed_s
        ts = np.empty(2 * grid.count_N + 1)
        ts[0::2] = grid.times()
        ts[1::2] = grid.midpoints()
        self.stage_t = ts
        self.Y = np.atleast_2d(np.asarray(obs.value(ts), dtype=float))
        self.Yd = np.atleast_2d(np.asarray(obs.deriv(ts), dtype=float))
        self.Ydd = np.atleast_2d(np.asarray(obs.second(ts), dtype=float))
        if self.Y.shape[0] != len(ts):
            self.Y, self.Yd, self.Ydd = self.Y.T, self.Yd.T, self.Ydd.T
        self._setup()

    def _setup(self):
        n, s = self.n, self.s
        model = self.model
        base = model.base
        linear = _probe_linear(model)
        if linear is not None:
            At, offset = linear
            A_mat = At.T
            ctx = _context(base, 0.0, np.zeros(model.d))
            G = ctx.G
            q = 0.5 * (G[:n, :n] + G[:n, :n].T)
            if np.linalg.eigvalsh(q).min() <= 0.0:
                raise NotPositiveDefiniteError("q not positive definite", t=0.0)
            qinv = np.linalg.inv(q)
            Gn = G[:n, :]
            AG = At[:n, :] @ G
            An = A_mat[:, :n]
            GA = G @ A_mat
            self._Dx = AG @ An @ qinv
            self._Dp = -(Gn @ An - AG[:, :n]) @ qinv
            # forcing table over all stages
            r0 = -(self.Y @ At[n:, :]) - offset
            r0[:, n:] += self.Yd
            dtgp = self.Ydd @ G[:n, n:].T - self.Yd @ GA[:n, n:].T
            self._d0 = (-(r0 @ G) @ An - dtgp) @ qinv
            self.kind = "linear"
            return
        const_sigma = _probe_constant_sigma(model)
        if const_sigma is not None:
            sinv = np.linalg.inv(const_sigma)
            G = sinv.T @ sinv
            q = 0.5 * (G[:n, :n] + G[:n, :n].T)
            if np.linalg.eigvalsh(q).min() <= 0.0:
                raise NotPositiveDefiniteError("q not positive definite", t=0.0)
            self._G = G
            self._qinv = np.linalg.inv(q)
            self._ydd_term = self.Ydd @ G[:n, n:].T
            self.kind = "constant_sigma"
            return
        self.kind = "generic"

    def rhs(self, idx, X, P):
        n, s = self.n, self.s
        if self.kind == "linear":
            return P, X @ self._Dx + P @ self._Dp + self._d0[idx]
        t = self.stage_t[idx]
        y, yd, ydd = self.Y[idx], self.Yd[idx], self.Ydd[idx]
        m = X.shape[0]
        if np.ndim(t) == 0:
            y = np.broadcast_to(y, (m, s))
            yd = np.broadcast_to(yd, (m, s))
        Z = np.concatenate([X, y], axis=1)
        base = self.model.base
        if self.kind == "constant_sigma":
            G = self._G
            mu = np.asarray(base.mu(t, Z), dtype=float)
            dmu = np.asarray(base.dmu(t, Z), dtype=float)
            if not np.all(np.isfinite(mu)):
                raise EvaluationError("non-finite drift", t=t)
            R = np.concatenate([P, yd], axis=1) - mu
            U = R @ G
            W = dmu @ G
            grad_x = -np.einsum("mki,mi->mk", dmu[:, :n, :], U)
            Cn = -W[:, :n, :n]                # rows: d grad_p / d x_k
            Cy = -W[:, n:, :n]
            dtgp = self._ydd_term[idx] + np.einsum("mk,mki->mi", yd, Cy)
            vec = grad_x - dtgp - np.einsum("mki,mk->mi", Cn, P)
            return P, vec @ self._qinv
        # generic analytic/finite-difference route
        from .model import el_pieces_batch

        tt = float(t) if np.ndim(t) == 0 else None
        if tt is not None:
            gx, M, q, dtgp = el_pieces_batch(tt, X, P, self.obs, self.model)
            vec = gx - dtgp - np.einsum("mij,mj->mi", M, P)
            return P, np.linalg.solve(q, vec[..., None])[..., 0]
        out = np.empty_like(P)
        for i in range(m):
            gx, _, _, B, q, dtgp = _derivative_pieces(
                float(t[i]), X[i], P[i], self.obs, self.model, need_A=False
            )
            out[i] = np.linalg.solve(q, gx - dtgp - B.T @ P[i])
        return P, out


def _rk4_stage(ev: StageEvaluator, X0, P0, base_stage, n_steps, cap, record=False):
    """RK4 stepping a batch of states for n_steps grid steps; row i starts
    at stage base_stage[i] (scalar base applies to all rows)."""
    h = ev.grid.h
    X = np.array(X0, dtype=float)
    P = np.array(P0, dtype=float)
    scalar_base = np.ndim(base_stage) == 0
    if record:
        XS = np.empty((n_steps + 1,) + X.shape)
        PS = np.empty_like(XS)
        XS[0], PS[0] = X, P
    for o in range(n_steps):
        i0 = base_stage + 2 * o
        i1 = i0 + 1
        i2 = i0 + 2
        k1x, k1p = ev.rhs(i0, X, P)
        k2x, k2p = ev.rhs(i1, X + 0.5 * h * k1x, P + 0.5 * h * k1p)
        k3x, k3p = ev.rhs(i1, X + 0.5 * h * k2x, P + 0.5 * h * k2p)
        k4x, k4p = ev.rhs(i2, X + h * k3x, P + h * k3p)
        X = X + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        P = P + (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        big = max(np.max(np.abs(X)), np.max(np.abs(P)))
        if not np.isfinite(big) or big > cap:
            t_fail = (np.min(i0) / 2.0 + 1.0) * h if not scalar_base else (o + 1) * h
            raise BlowUpError(f"shooting trajectory blew up at t={t_fail:.6g}", time=t_fail)
        if record:
            XS[o + 1], PS[o + 1] = X, P
    if record:
        return X, P, XS, PS
    return X, P


# ---------------------------------------------------------------------------
# boundary conditions
# ---------------------------------------------------------------------------


def initial_p_from_bc0(x0, obs: ObservationSeries, model: PartitionedModel, prior: Prior):
    """Unique p0 with D_p psi(0, x0, p0) = grad phi(x0).

    D_p psi is affine in p (psi is quadratic in p), so this is an n x n
    linear solve q p0 = grad phi(x0) - c with c the p-gradient at p = 0.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = model.hidden_n
    y0, yd0, _ = obs.lookup(0.0)
    ctx = _context(model.base, 0.0, np.concatenate([x0, np.atleast_1d(y0)]))
    q = 0.5 * (ctx.G[:n, :n] + ctx.G[:n, :n].T)
    c = (ctx.G @ (np.concatenate([np.zeros(n), np.atleast_1d(yd0)]) - ctx.mu))[:n]
    try:
        return np.linalg.solve(q, np.asarray(prior.grad_phi(x0), dtype=float) - c)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("q singular in initial condition", t=0.0) from None


def _grad_p_batch(t, X, P, obs, model: PartitionedModel):
    n, s = model.hidden_n, model.observed_s
    m = X.shape[0]
    y, yd, _ = obs.lookup(float(t))
    Z = np.concatenate([X, np.broadcast_to(np.atleast_1d(y), (m, s))], axis=1)
    V = np.concatenate([P, np.broadcast_to(np.atleast_1d(yd), (m, s))], axis=1)
    ctx = _context_batch(model.base, t, Z)
    return np.einsum("mij,mj->mi", ctx.G, V - ctx.mu)[:, :n]


def shoot(x0, obs: ObservationSeries, model: PartitionedModel, prior: Prior, grid: TimeGrid):
    """Integrate the stationarity ODE from the bc0-consistent start and
    report (terminal residual D_p psi(T, x_T, p_T), full path)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    ev = StageEvaluator(obs, model, grid)
    p0 = initial_p_from_bc0(x0, obs, model, prior)
    cap = model.base.coefficient_cap
    X, P, XS, PS = _rk4_stage(ev, x0[None], p0[None], 0, grid.count_N, cap, record=True)
    residual = _grad_p_batch(grid.horizon_T, X, P, obs, model)[0]
    return residual, HiddenPath(grid, XS[:, 0, :], PS[:, 0, :])


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


def solve_least_action(obs: ObservationSeries, model: PartitionedModel, prior: Prior,
                       grid: TimeGrid, starts="auto", init_path=None) -> LeastActionPath:
    """Least-action path by damped-Newton shooting over one or many starts.

    Among converged solutions the one with the smallest action wins, ties
    broken by smaller |x0| then lexicographically; if nothing converges the
    best non-converged candidate is returned flagged.

    ``init_path`` optionally seeds the multiple-shooting knots from an
    approximate path on the same grid (useful for refining externally
    constructed stationary-path candidates).
    """
    from .action import continuous_action

    if isinstance(starts, str):
        if starts != "auto":
            raise ValueError(f"unknown starts mode {starts!r}")
        start_list = _auto_starts(obs, model)
    else:
        start_list = [np.atleast_1d(np.asarray(s, dtype=float)) for s in starts]
    if not start_list:
        raise ValueError("at least one start is required")

    ev = StageEvaluator(obs, model, grid)
    cap = model.base.coefficient_cap
    lip = _lipschitz_estimate(ev, start_list[0], obs, model, prior)
    prefer_multiple = grid.horizon_T * lip > MS_TIME_PRODUCT or init_path is not None

    converged = []
    fallback = None
    tried = 0
    for x0 in start_list:
        tried += 1
        outcome = None
        if not prefer_multiple:
            outcome = _newton_single(x0, ev, obs, model, prior, grid, cap)
        if outcome is None or not outcome[2]:
            ms = _newton_multiple(x0, ev, obs, model, prior, grid, cap, lip,
                                  init_path=init_path)
            if ms is not None and (outcome is None or ms[2] or not outcome[2]):
                outcome = ms
        if outcome is None:
            continue
        path, residual, ok = outcome
        act = continuous_action(path, obs, model, prior)
        candidate = (act, path, residual, ok)
        if ok:
            converged.append(candidate)
        elif fallback is None or np.max(np.abs(residual)) < np.max(np.abs(fallback[2])):
            fallback = candidate
    if converged:
        best = converged[0]
        for cand in converged[1:]:
            best = _prefer(best, cand)
        act, path, residual, _ = best
        return LeastActionPath(path, act, residual, True, tried)
    if fallback is not None:
        act, path, residual, _ = fallback
        return LeastActionPath(path, act, residual, False, tried)
    raise BlowUpError("no start produced an integrable trajectory")


def _prefer(a, b):
    tol = 1e-9 * (1.0 + min(abs(a[0]), abs(b[0])))
    if a[0] < b[0] - tol:
        return a
    if b[0] < a[0] - tol:
        return b
    na, nb = np.linalg.norm(a[1].x[0]), np.linalg.norm(b[1].x[0])
    if abs(na - nb) > 1e-12 * (1.0 + na + nb):
        return a if na < nb else b
    return a if tuple(a[1].x[0]) <= tuple(b[1].x[0]) else b


def _auto_starts(obs, model: PartitionedModel):
    from scipy.stats import qmc

    n = model.hidden_n
    starts = [np.zeros(n)]
    y0, yd0, _ = obs.lookup(0.0)
    y0 = np.atleast_1d(y0)
    yd0 = np.atleast_1d(yd0)

    def mu_obs(xv):
        return model.base.mu_at(0.0, np.concatenate([xv, y0]))[n:]

    try:
        base_val = mu_obs(np.zeros(n))
        cols = []
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1e-5
            cols.append((mu_obs(e) - mu_obs(-e)) / 2e-5)
        jac = np.stack(cols, axis=1)
        fit, *_ = np.linalg.lstsq(jac, yd0 - base_val, rcond=None)
        if np.all(np.isfinite(fit)) and np.linalg.norm(fit) < 1e6:
            starts.append(fit)
    except Exception:
        pass

    width = 3.0 * float(np.mean(np.std(obs.samples, axis=0)))
    if not width > 0.0:
        width = 1.0
    sampler = qmc.Halton(d=n, scramble=False)
    sampler.fast_forward(1)
    pts = (sampler.random(8) - 0.5) * 2.0 * width
    starts.extend(pts)

    unique = []
    for s in starts:
        if not any(np.linalg.norm(s - u) < 1e-9 for u in unique):
            unique.append(s)
    return unique


def _lipschitz_estimate(ev: StageEvaluator, x0, obs, model: PartitionedModel, prior: Prior):
    n = model.hidden_n
    try:
        p0 = initial_p_from_bc0(x0, obs, model, prior)
        state = np.concatenate([x0, p0])
        base_x, base_p = ev.rhs(0, x0[None], p0[None])
        base = np.concatenate([base_x[0], base_p[0]])
        jac = np.empty((2 * n, 2 * n))
        for k in range(2 * n):
            step = 1e-5 * (1.0 + abs(state[k]))
            pert = state.copy()
            pert[k] += step
            fx, fp = ev.rhs(0, pert[None, :n], pert[None, n:])
            jac[:, k] = (np.concatenate([fx[0], fp[0]]) - base) / step
        return float(np.linalg.norm(jac, 2))
    except Exception:
        return float("inf")


def _newton_single(x0, ev, obs, model, prior, grid, cap):
    """Damped Newton on the terminal residual; returns (path, residual,
    converged) or None when nothing was integrable."""
    n = model.hidden_n
    N = grid.count_N
    T = grid.horizon_T

    def residual_batch(X0s):
        P0s = np.stack([initial_p_from_bc0(v, obs, model, prior) for v in X0s])
        X, P = _rk4_stage(ev, X0s, P0s, 0, N, cap)
        return _grad_p_batch(T, X, P, obs, model)

    x = np.array(x0, dtype=float)
    try:
        r = residual_batch(x[None])[0]
    except (BlowUpError, EvaluationError, NotPositiveDefiniteError, np.linalg.LinAlgError):
        return None
    best = (x.copy(), r.copy())
    for _ in range(NEWTON_MAX_ITER):
        rnorm = float(np.max(np.abs(r)))
        if rnorm <= BCT_TOL:
            return _finish_single(x, ev, obs, model, prior, grid, cap, True)
        steps = JAC_STEP * (1.0 + np.abs(x))
        batch = np.concatenate([x[None], x[None] + np.diag(steps)], axis=0)
        try:
            rs = residual_batch(batch)
        except (BlowUpError, EvaluationError, NotPositiveDefiniteError, np.linalg.LinAlgError):
            break
        jac = (rs[1:] - rs[0]).T / steps
        try:
            delta = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            break
        accepted = False
        for k in range(DAMPING_MAX_HALVINGS + 1):
            trial = x + delta * (0.5 ** k)
            try:
                rt = residual_batch(trial[None])[0]
            except (BlowUpError, EvaluationError, NotPositiveDefiniteError, np.linalg.LinAlgError):
                continue
            if np.max(np.abs(rt)) < rnorm:
                x, r = trial, rt
                accepted = True
                break
        if not accepted:
            break
        if np.max(np.abs(r)) < np.max(np.abs(best[1])):
            best = (x.copy(), r.copy())
    x, r = best
    try:
        return _finish_single(x, ev, obs, model, prior, grid, cap,
                              float(np.max(np.abs(r))) <= BCT_TOL)
    except (BlowUpError, EvaluationError, NotPositiveDefiniteError, np.linalg.LinAlgError):
        return None


def _finish_single(x0, ev, obs, model, prior, grid, cap, ok):
    p0 = initial_p_from_bc0(x0, obs, model, prior)
    X, P, XS, PS = _rk4_stage(ev, x0[None], p0[None], 0, grid.count_N, cap, record=True)
    residual = _grad_p_batch(grid.horizon_T, X, P, obs, model)[0]
    path = HiddenPath(grid, XS[:, 0, :], PS[:, 0, :])
    return path, residual, ok and float(np.max(np.abs(residual))) <= BCT_TOL


def _pick_segments(N: int, target: int) -> int:
    """Segment count dividing N, at least the target (falls back to the
    largest divisor below it)."""
    target = max(1, min(target, N))
    for m in range(target, N + 1):
        if N % m == 0:
            return m
    for m in range(target, 0, -1):
        if N % m == 0:
            return m
    return 1


def _newton_multiple(x0, ev, obs, model, prior, grid, cap, lip, init_path=None):
    """Multiple shooting: unknown states at interior knots, matching
    conditions plus the two boundary conditions, solved by damped Newton.
    All segments (and all finite-difference perturbations) integrate in a
    single batched RK4 sweep per residual or Jacobian evaluation."""
    n = model.hidden_n
    N = grid.count_N
    T = grid.horizon_T
    lip_eff = lip if np.isfinite(lip) else 10.0
    target = max(
        math.ceil(T / 5.0),
        math.ceil(T * lip_eff / MS_SEGMENT_PRODUCT),
        1,
    )
    segs = _pick_segments(N, min(target, max(1, N // 2)))
    steps = N // segs
    base_stage = np.arange(segs) * 2 * steps

    x0 = np.array(x0, dtype=float)
    inits = []
    try:
        if init_path is not None:
            idx = np.arange(segs) * steps
            knot_x = np.asarray(init_path.x, dtype=float)[idx].copy()
            knot_p = np.asarray(init_path.p, dtype=float)[idx].copy()
            knot_x[0] = x0
            inits.append((knot_x, knot_p))
        else:
            p0 = initial_p_from_bc0(x0, obs, model, prior)
            flat = (np.tile(x0, (segs, 1)), np.tile(p0, (segs, 1)))
            cascade = _cascade_init(x0, ev, obs, model, prior, grid, cap, segs, steps)
            inits.append(cascade)
            if not (np.allclose(cascade[0], flat[0]) and np.allclose(cascade[1], flat[1])):
                inits.append(flat)
    except (EvaluationError, NotPositiveDefiniteError, np.linalg.LinAlgError):
        return None

    def unpack(u):
        xs = np.empty((segs, n))
        ps = np.empty((segs, n))
        xs[0] = u[:n]
        ps[0] = initial_p_from_bc0(xs[0], obs, model, prior)
        if segs > 1:
            rest = u[n:].reshape(segs - 1, 2 * n)
            xs[1:] = rest[:, :n]
            ps[1:] = rest[:, n:]
        return xs, ps

    def residual(u):
        xs, ps = unpack(u)
        Xe, Pe = _rk4_stage(ev, xs, ps, base_stage, steps, cap)
        out = np.empty(n + 2 * n * (segs - 1))
        pos = 0
        for k in range(segs - 1):
            out[pos:pos + n] = Xe[k] - xs[k + 1]
            out[pos + n:pos + 2 * n] = Pe[k] - ps[k + 1]
            pos += 2 * n
        out[pos:pos + n] = _grad_p_batch(T, Xe[-1:], Pe[-1:], obs, model)[0]
        return out

    def residual_and_jacobian(u):
        xs, ps = unpack(u)
        dim = n + 2 * n * (segs - 1)
        cols_per = 2 * n
        width = cols_per + 1  # base + perturbations per segment (x0 block padded)
        X0s = np.empty((segs * width, n))
        P0s = np.empty((segs * width, n))
        stages = np.empty(segs * width, dtype=int)
        steps_used = np.empty((segs, cols_per))
        for k in range(segs):
            row = k * width
            stages[row:row + width] = base_stage[k]
            X0s[row] = xs[k]
            P0s[row] = ps[k]
            if k == 0:
                hx = JAC_STEP * (1.0 + np.abs(xs[0]))
                for i in range(n):
                    xp = xs[0].copy()
                    xp[i] += hx[i]
                    X0s[row + 1 + i] = xp
                    P0s[row + 1 + i] = initial_p_from_bc0(xp, obs, model, prior)
                steps_used[0, :n] = hx
                # pad unused perturbation slots with the base state
                for i in range(n, cols_per):
                    X0s[row + 1 + i] = xs[0]
                    P0s[row + 1 + i] = ps[0]
                steps_used[0, n:] = 1.0
            else:
                state = np.concatenate([xs[k], ps[k]])
                hs = JAC_STEP * (1.0 + np.abs(state))
                for i in range(cols_per):
                    st = state.copy()
                    st[i] += hs[i]
                    X0s[row + 1 + i] = st[:n]
                    P0s[row + 1 + i] = st[n:]
                steps_used[k] = hs
        Xe, Pe = _rk4_stage(ev, X0s, P0s, stages, steps, cap)
        res = np.empty(dim)
        jac = np.zeros((dim, dim))
        gp_last = _grad_p_batch(T, Xe[(segs - 1) * width:], Pe[(segs - 1) * width:], obs, model)
        for k in range(segs):
            row0 = k * width
            ends = np.concatenate([Xe[row0:row0 + width], Pe[row0:row0 + width]], axis=1)
            ncols = n if k == 0 else cols_per
            col0 = 0 if k == 0 else n + cols_per * (k - 1)
            if k < segs - 1:
                rrow = 2 * n * k
                res[rrow:rrow + 2 * n] = np.concatenate(
                    [Xe[row0] - xs[k + 1], Pe[row0] - ps[k + 1]]
                )
                sens = (ends[1:1 + ncols] - ends[0]) / steps_used[k, :ncols, None]
                jac[rrow:rrow + 2 * n, col0:col0 + ncols] = sens.T
                ccol = n + cols_per * k
                jac[rrow:rrow + 2 * n, ccol:ccol + 2 * n] -= np.eye(2 * n)
            else:
                rrow = 2 * n * (segs - 1)
                res[rrow:rrow + n] = gp_last[0]
                sens = (gp_last[1:1 + ncols] - gp_last[0]) / steps_used[k, :ncols, None]
                jac[rrow:rrow + n, col0:col0 + ncols] = sens.T
        return res, jac

    def newton_from(knot_x, knot_p):
        u = np.concatenate([knot_x[0]] + [
            np.concatenate([knot_x[k], knot_p[k]]) for k in range(1, segs)
        ]) if segs > 1 else knot_x[0].copy()
        try:
            r = residual(u)
        except (BlowUpError, EvaluationError, NotPositiveDefiniteError, np.linalg.LinAlgError):
            return None
        best = (u.copy(), r.copy())
        lm_lambda = 0.0
        for _ in range(NEWTON_MAX_ITER):
            if float(np.max(np.abs(r))) <= FULL_TOL:
                break
            merit = float(np.linalg.norm(r))
            try:
                _, jac = residual_and_jacobian(u)
            except (BlowUpError, EvaluationError, NotPositiveDefiniteError,
                    np.linalg.LinAlgError):
                break
            accepted = False
            for _attempt in range(6):
                # plain Newton first; on failure retry with growing
                # Levenberg-Marquardt regularization (handles folds and
                # near-singular Jacobians next to conjugate points)
                try:
                    if lm_lambda == 0.0:
                        delta = np.linalg.solve(jac, -r)
                    else:
                        jtj = jac.T @ jac
                        delta = np.linalg.solve(
                            jtj + lm_lambda * np.diag(np.maximum(np.diag(jtj), 1e-12)),
                            -(jac.T @ r),
                        )
                except np.linalg.LinAlgError:
                    lm_lambda = max(10.0 * lm_lambda, 1e-8)
                    continue
                for k in range(DAMPING_MAX_HALVINGS + 1):
                    trial = u + delta * (0.5 ** k)
                    try:
                        rt = residual(trial)
                    except (BlowUpError, EvaluationError, NotPositiveDefiniteError,
                            np.linalg.LinAlgError):
                        continue
                    if float(np.linalg.norm(rt)) < merit:
                        u, r = trial, rt
                        accepted = True
                        break
                if accepted:
                    if k <= 1:
                        lm_lambda = 0.0 if lm_lambda < 1e-7 else lm_lambda * 0.1
                    break
                lm_lambda = max(10.0 * lm_lambda, 1e-8)
            if not accepted:
                break
            if np.linalg.norm(r) < np.linalg.norm(best[1]):
                best = (u.copy(), r.copy())
        return best

    def initial_merit(init):
        knot_x, knot_p = init
        u = np.concatenate([knot_x[0]] + [
            np.concatenate([knot_x[k], knot_p[k]]) for k in range(1, segs)
        ]) if segs > 1 else knot_x[0].copy()
        try:
            return float(np.linalg.norm(residual(u)))
        except (BlowUpError, EvaluationError, NotPositiveDefiniteError, np.linalg.LinAlgError):
            return float("inf")

    if len(inits) > 1:
        inits.sort(key=initial_merit)
    overall = None
    for knot_x, knot_p in inits:
        result = newton_from(knot_x, knot_p)
        if result is None:
            continue
        if overall is None or np.linalg.norm(result[1]) < np.linalg.norm(overall[1]):
            overall = result
        if float(np.max(np.abs(overall[1]))) <= FULL_TOL:
            break
    if overall is None:
        return None
    u, r = overall
    ok = float(np.max(np.abs(r))) <= BCT_TOL
    try:
        return _assemble_multiple(u, unpack, ev, obs, model, grid, cap, segs, steps,
                                  base_stage, ok)
    except (BlowUpError, EvaluationError, NotPositiveDefiniteError, np.linalg.LinAlgError):
        return None


def _cascade_init(x0, ev, obs, model, prior, grid, cap, segs, steps):
    """Knot initialization by integrating forward while it lasts, constant
    tail afterwards."""
    p0 = initial_p_from_bc0(x0, obs, model, prior)
    knot_x = np.tile(x0, (segs, 1))
    knot_p = np.tile(p0, (segs, 1))
    X, P = x0[None].copy(), p0[None].copy()
    for k in range(segs - 1):
        try:
            X, P = _rk4_stage(ev, X, P, 2 * k * steps, steps, cap)
        except (BlowUpError, EvaluationError, NotPositiveDefiniteError):
            break
        knot_x[k + 1] = X[0]
        knot_p[k + 1] = P[0]
    return knot_x, knot_p


def _assemble_multiple(u, unpack, ev, obs, model, grid, cap, segs, steps, base_stage, ok):
    n = model.hidden_n
    xs, ps = unpack(u)
    Xe, Pe, XS, PS = _rk4_stage(ev, xs, ps, base_stage, steps, cap, record=True)
    N = grid.count_N
    full_x = np.empty((N + 1, n))
    full_p = np.empty((N + 1, n))
    for k in range(segs):
        sl = slice(k * steps, (k + 1) * steps + 1)
        full_x[sl] = XS[:, k, :]
        full_p[sl] = PS[:, k, :]
    residual = _grad_p_batch(grid.horizon_T, Xe[-1:], Pe[-1:], obs, model)[0]
    path = HiddenPath(grid, full_x, full_p)
    return path, residual, ok and float(np.max(np.abs(residual))) <= BCT_TOL