"""Least-action estimation of a hidden positive diffusion intensity from
observed event times.

The intensity x follows a scalar positive diffusion; events of a counting
process are observed at times 0 < tau_1 < ... < tau_K < T.  The objective
adds the integrated intensity and -log x at each event to the usual action,
so the stationary path solves the free ODE between events, picks up a
prescribed downward jump in p = xdot at each event, and meets gradient
boundary conditions at both ends.  The path is found by shooting in x_0
with a Newton/bisection hybrid; coefficients are truncated during the
search to prevent explosions and the final answer is re-verified with the
truncation off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import BlowUpError, EvaluationError
from .model import DiffusionModel, Prior, TimeGrid, coefficient_derivatives
from .simulate import SimulatedPath, _rng, gaussians

TRUNC_X_LO = 1e-6
TRUNC_X_HI = 1e6
TRUNC_DP = 1e8
RESIDUAL_TOL = 1e-8       # shooting target on the terminal gradient condition
INTENSITY_FLOOR = 1e-8    # reflection floor for simulated intensities


class _StartRejected(RuntimeError):
    """The intensity left the positive domain for this shooting start."""


# ---------------------------------------------------------------------------
# scalar coefficient helpers
# ---------------------------------------------------------------------------


def _coefs(model: DiffusionModel, t, x):
    """(sigma, mu) at a scalar state, with positivity checks on sigma."""
    z = np.array([x])
    sig = float(np.asarray(model.sigma(t, z)).reshape(-1)[0])
    mu = float(np.asarray(model.mu(t, z)).reshape(-1)[0])
    if not (np.isfinite(sig) and np.isfinite(mu)):
        raise EvaluationError(f"non-finite coefficients at x={x}", t=t, z=z)
    if abs(sig) < 1e-300:
        raise EvaluationError(f"sigma vanished at x={x}", t=t, z=z)
    return sig, mu


def _coef_derivs(model: DiffusionModel, t, x):
    dsig, dmu = coefficient_derivatives(model, t, np.array([x]))
    return float(dsig.reshape(-1)[0]), float(dmu.reshape(-1)[0])


def psi_value(t, x, p, model: DiffusionModel) -> float:
    """Scalar action density (p - mu)^2 / (2 sigma^2)."""
    sig, mu = _coefs(model, t, x)
    return (p - mu) ** 2 / (2.0 * sig * sig)


def psi_p(t, x, p, model: DiffusionModel) -> float:
    sig, mu = _coefs(model, t, x)
    return (p - mu) / (sig * sig)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventRecord:
    """Ordered distinct event times strictly inside (0, T)."""

    horizon_T: float
    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", times)
        if times.ndim != 1:
            raise ValueError("event times must be a 1-d array")
        if times.size:
            if np.any(np.diff(times) <= 0.0):
                raise ValueError("event times must be strictly increasing and distinct")
            if times[0] <= 0.0 or times[-1] >= self.horizon_T:
                raise ValueError("event times must lie strictly inside (0, T)")

    @property
    def count(self) -> int:
        return int(self.times.size)


@dataclass(frozen=True)
class SegmentPath:
    t: np.ndarray
    x: np.ndarray
    p: np.ndarray


@dataclass(frozen=True)
class PiecewisePath:
    """Per-interval (x, p) arrays between consecutive event times; x is
    continuous across events, only p jumps."""

    horizon_T: float
    event_times: np.ndarray
    segments: List[SegmentPath]
    jump_p: np.ndarray

    def __post_init__(self):
        for k, seg in enumerate(self.segments):
            if np.any(seg.x <= 0.0):
                raise ValueError(f"intensity not positive on segment {k}")
        for k in range(len(self.segments) - 1):
            a = self.segments[k].x[-1]
            b = self.segments[k + 1].x[0]
            if abs(a - b) > 1e-8 * (1.0 + abs(a)):
                raise ValueError(f"intensity discontinuous at event {k}")

    def node_times(self) -> np.ndarray:
        parts = [self.segments[0].t] + [seg.t[1:] for seg in self.segments[1:]]
        return np.concatenate(parts)

    def node_values(self):
        xs = [self.segments[0].x] + [seg.x[1:] for seg in self.segments[1:]]
        ps = [self.segments[0].p] + [seg.p[1:] for seg in self.segments[1:]]
        return np.concatenate(xs), np.concatenate(ps)

    def value_at_events(self) -> np.ndarray:
        return np.array([seg.x[-1] for seg in self.segments[:-1]])


# ---------------------------------------------------------------------------
# action and stationarity pieces
# ---------------------------------------------------------------------------


def pp_action(path: PiecewisePath, events: EventRecord, model: DiffusionModel,
              prior: Prior) -> float:
    """phi(x_0) + integral of (psi + x) - sum of log x at events, trapezoid
    quadrature per segment."""
    total = float(prior.phi(np.array([path.segments[0].x[0]])))
    for seg in path.segments:
        vals = np.array([psi_value(t, x, p, model) for t, x, p in zip(seg.t, seg.x, seg.p)])
        total += float(np.trapezoid(vals + seg.x, seg.t))
    at_events = path.value_at_events()
    if at_events.size != events.count:
        raise ValueError("path segments do not match the event record")
    if np.any(at_events <= 0.0):
        raise ValueError("intensity not positive at an event time")
    total -= float(np.sum(np.log(at_events)))
    return total


def pp_el_rhs(t, x, p, model: DiffusionModel):
    """Stationarity ODE between events: dx = p and dp from
    psi_x - psi_px p - psi_pp dp + 1 = 0, assembled from the scalar
    coefficients and their derivatives."""
    if x <= 0.0:
        raise EvaluationError(f"intensity must stay positive, got x={x}", t=t)
    return _el_rhs_raw(t, x, p, model)


def _el_rhs_raw(t, x, p, model):
    sig, mu = _coefs(model, t, x)
    dsig, dmu = _coef_derivs(model, t, x)
    s2 = sig * sig
    r = p - mu
    psi_x = -dmu * r / s2 - dsig * r * r / (s2 * sig)
    psi_px = -dmu / s2 - 2.0 * dsig * r / (s2 * sig)
    dp = (psi_x - psi_px * p + 1.0) * s2
    return p, dp


def _el_rhs_truncated(t, x, p, model):
    """Search-time dynamics: coefficients evaluated at the clamped state
    and dp capped, so divergent trial trajectories stay finite all the way
    to T and the terminal residual keeps a usable sign."""
    xe = min(max(x, TRUNC_X_LO), TRUNC_X_HI)
    pe = min(max(p, -TRUNC_DP), TRUNC_DP)
    _, dp = _el_rhs_raw(t, xe, pe, model)
    return pe, min(max(dp, -TRUNC_DP), TRUNC_DP)


def pp_jump(x, p_minus, model: DiffusionModel, t=0.0):
    """p just after an event: the p-gradient of the action density drops by
    1/x across the event.  The gradient is affine in p with slope
    1/sigma^2, so p_plus = p_minus - sigma(x)^2 / x."""
    if x <= 0.0:
        raise EvaluationError(f"intensity must be positive at events, got x={x}", t=t)
    sig, mu = _coefs(model, t, x)
    target = psi_p(t, x, p_minus, model) - 1.0 / x
    return mu + sig * sig * target


# ---------------------------------------------------------------------------
# shooting solver
# ---------------------------------------------------------------------------


def _segment_times(a, b, h):
    steps = max(1, math.ceil((b - a) / h - 1e-9))
    return np.linspace(a, b, steps + 1)


def pp_nodes(events: EventRecord, grid: TimeGrid):
    """Common node set: per-segment uniform sub-grids no coarser than the
    grid step, with event times as segment boundaries.  Returns (times,
    indices of the event nodes)."""
    bounds = np.concatenate([[0.0], events.times, [grid.horizon_T]])
    times = [np.array([0.0])]
    event_idx = []
    total = 1
    for k in range(len(bounds) - 1):
        seg = _segment_times(bounds[k], bounds[k + 1], grid.h)
        times.append(seg[1:])
        total += len(seg) - 1
        if k < len(bounds) - 2:
            event_idx.append(total - 1)
    return np.concatenate(times), np.array(event_idx, dtype=int)


def _integrate_segment(x, p, ts, model, rhs, truncated, record=False):
    xs = [x]
    ps = [p]
    for j in range(len(ts) - 1):
        hseg = ts[j + 1] - ts[j]
        t = ts[j]
        k1x, k1p = rhs(t, x, p, model)
        k2x, k2p = rhs(t + 0.5 * hseg, x + 0.5 * hseg * k1x, p + 0.5 * hseg * k1p, model)
        k3x, k3p = rhs(t + 0.5 * hseg, x + 0.5 * hseg * k2x, p + 0.5 * hseg * k2p, model)
        k4x, k4p = rhs(t + hseg, x + hseg * k3x, p + hseg * k3p, model)
        x = x + (hseg / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        p = p + (hseg / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        if not (np.isfinite(x) and np.isfinite(p)):
            raise BlowUpError(f"intensity path blew up at t={ts[j + 1]:.6g}", time=ts[j + 1])
        if not truncated:
            if x <= 0.0:
                raise _StartRejected(f"intensity hit zero at t={ts[j + 1]:.6g}")
            if abs(x) > model.coefficient_cap or abs(p) > model.coefficient_cap:
                raise BlowUpError(
                    f"intensity path blew up at t={ts[j + 1]:.6g}", time=ts[j + 1]
                )
        if record:
            xs.append(x)
            ps.append(p)
    if record:
        return x, p, np.array(xs), np.array(ps)
    return x, p


def _initial_p(x0, model, prior):
    sig, mu = _coefs(model, 0.0, x0)
    dphi = float(np.asarray(prior.grad_phi(np.array([x0]))).reshape(-1)[0])
    return mu + sig * sig * dphi


def _shoot_pp(x0, events, model, prior, grid, truncated, record=False):
    rhs = _el_rhs_truncated if truncated else pp_el_rhs
    bounds = np.concatenate([[0.0], events.times, [grid.horizon_T]])
    x = x0
    p = _initial_p(min(max(x0, TRUNC_X_LO), TRUNC_X_HI) if truncated else x0, model, prior)
    segments = []
    jumps = []
    for k in range(len(bounds) - 1):
        ts = _segment_times(bounds[k], bounds[k + 1], grid.h)
        if record:
            x, p, xs, ps = _integrate_segment(x, p, ts, model, rhs, truncated, record=True)
            segments.append(SegmentPath(ts, xs, ps))
        else:
            x, p = _integrate_segment(x, p, ts, model, rhs, truncated)
        if k < len(bounds) - 2:
            if truncated:
                x_jump = min(max(x, TRUNC_X_LO), TRUNC_X_HI)
            else:
                if x <= 0.0:
                    raise _StartRejected("intensity not positive at an event")
                x_jump = x
            p_new = pp_jump(x_jump, p, model, t=bounds[k + 1])
            jumps.append(p_new - p)
            p = p_new
    x_end = min(max(x, TRUNC_X_LO), TRUNC_X_HI) if truncated else x
    residual = psi_p(grid.horizon_T, x_end, p, model)
    if record:
        return residual, PiecewisePath(grid.horizon_T, events.times, segments, np.array(jumps))
    return residual


@dataclass(frozen=True)
class PointProcessFit:
    path: PiecewisePath
    converged: bool
    starts_tried: int
    residual_terminal: float
    residual_initial: float
    residual_interior_sup: float
    max_jump_defect: float


def pp_solve(events: EventRecord, model: DiffusionModel, prior: Prior,
             grid: TimeGrid) -> PointProcessFit:
    """Shooting in x_0 for the piecewise stationary intensity path.

    Candidate starts scale the mean observed rate; Newton on the terminal
    gradient condition with a bracketing-bisection fallback once a sign
    change is seen.  Search integrations run with truncated coefficients;
    the accepted solution is re-integrated untruncated and all four
    stationarity conditions are evaluated on it.
    """
    if abs(events.horizon_T - grid.horizon_T) > 1e-12:
        raise ValueError("event record and grid cover different horizons")
    rate = max(events.count, 0.5) / grid.horizon_T

    def residual(x0):
        return _shoot_pp(x0, events, model, prior, grid, truncated=True)

    # scan outward from the mean rate until the terminal residual changes sign
    evaluated = []
    tried = 0
    for k in range(0, 9):
        for f in {2.0 ** k, 2.0 ** -k}:
            x0 = rate * f
            tried += 1
            try:
                evaluated.append((x0, residual(x0)))
            except (BlowUpError, EvaluationError):
                continue
        by_x = sorted(evaluated)
        bracket = None
        for (xa, ra), (xb, rb) in zip(by_x[:-1], by_x[1:]):
            if ra * rb < 0.0:
                bracket = [xa, xb, ra, rb]
                break
        if bracket is not None:
            break
    if not evaluated:
        raise BlowUpError("all shooting starts failed for the point-process fit")
    x0, r = min(evaluated, key=lambda pair: abs(pair[1]))

    # bisection to the separatrix, then Newton polish
    if bracket is not None:
        for _ in range(200):
            lo, hi, rlo, rhi = bracket
            if hi - lo <= 4.0 * np.finfo(float).eps * (1.0 + abs(lo)):
                break
            mid = 0.5 * (lo + hi)
            try:
                rm = residual(mid)
            except (BlowUpError, EvaluationError):
                break
            if abs(rm) < abs(r):
                x0, r = mid, rm
            if rm == 0.0:
                break
            if rm * rlo < 0.0:
                bracket = [lo, mid, rlo, rm]
            else:
                bracket = [mid, hi, rm, rhi]
            if abs(r) <= RESIDUAL_TOL:
                break
    converged = abs(r) <= RESIDUAL_TOL
    for _ in range(12):
        if converged:
            break
        step = 1e-9 * (1.0 + abs(x0))
        try:
            slope = (residual(x0 + step) - r) / step
            if slope == 0.0 or not np.isfinite(slope):
                break
            xn = x0 - r / slope
            if xn <= 0.0:
                break
            rn = residual(xn)
        except (BlowUpError, EvaluationError):
            break
        if abs(rn) >= abs(r):
            break
        x0, r = xn, rn
        converged = abs(r) <= RESIDUAL_TOL

    # re-verify with truncation off
    try:
        res_final, path = _shoot_pp(x0, events, model, prior, grid, truncated=False,
                                    record=True)
    except (_StartRejected, BlowUpError, EvaluationError):
        res_final, path = _shoot_pp(x0, events, model, prior, grid, truncated=True,
                                    record=True)
        converged = False
    resid_c2 = _bc0_defect(path.segments[0].x[0], path.segments[0].p[0], model, prior)
    resid_c1 = _interior_defect(path, model)
    jump_defect = _jump_defect(path, model)
    converged = converged and abs(res_final) <= max(RESIDUAL_TOL, 1e-6)
    return PointProcessFit(
        path=path,
        converged=bool(converged),
        starts_tried=tried,
        residual_terminal=float(res_final),
        residual_initial=float(resid_c2),
        residual_interior_sup=float(resid_c1),
        max_jump_defect=float(jump_defect),
    )


def _bc0_defect(x0, p0, model, prior):
    dphi = float(np.asarray(prior.grad_phi(np.array([x0]))).reshape(-1)[0])
    return dphi - psi_p(0.0, x0, p0, model)


def _interior_defect(path: PiecewisePath, model):
    """Sup of the interior stationarity residual, with pdot estimated by
    fourth-order central differences inside each segment."""
    worst = 0.0
    for seg in path.segments:
        m = len(seg.t)
        if m < 5:
            continue
        hseg = seg.t[1] - seg.t[0]
        pdot = (seg.p[:-4] - 8.0 * seg.p[1:-3] + 8.0 * seg.p[3:-1] - seg.p[4:]) / (12.0 * hseg)
        for offset, pd in enumerate(pdot):
            j = offset + 2
            t, x, p = seg.t[j], seg.x[j], seg.p[j]
            sig, mu = _coefs(model, t, x)
            dsig, dmu = _coef_derivs(model, t, x)
            s2 = sig * sig
            r = p - mu
            psi_x = -dmu * r / s2 - dsig * r * r / (s2 * sig)
            psi_px = -dmu / s2 - 2.0 * dsig * r / (s2 * sig)
            resid = psi_x - psi_px * p - pd / s2 + 1.0
            worst = max(worst, abs(resid))
    return worst


def _jump_defect(path: PiecewisePath, model):
    worst = 0.0
    for k, tau in enumerate(path.event_times):
        x = path.segments[k].x[-1]
        p_minus = path.segments[k].p[-1]
        p_plus = path.segments[k + 1].p[0]
        lhs = psi_p(tau, x, p_plus, model) - psi_p(tau, x, p_minus, model) + 1.0 / x
        worst = max(worst, abs(lhs))
    return worst


# ---------------------------------------------------------------------------
# discretized objective (dense oracle and gradient checks)
# ---------------------------------------------------------------------------


def pp_discrete_objective(xnodes, times, event_idx, model: DiffusionModel, prior: Prior):
    """Left-endpoint discretization of the point-process action on an
    arbitrary node set, with its exact gradient.

    Returns (value, gradient).  Event times must be nodes (event_idx)."""
    x = np.asarray(xnodes, dtype=float)
    times = np.asarray(times, dtype=float)
    if np.any(x <= 0.0):
        raise ValueError("intensity nodes must be positive")
    dt = np.diff(times)
    value = float(prior.phi(x[:1]))
    grad = np.zeros_like(x)
    grad[0] += float(np.asarray(prior.grad_phi(x[:1])).reshape(-1)[0])
    for j, step in enumerate(dt):
        d = (x[j + 1] - x[j]) / step
        sig, mu = _coefs(model, times[j], x[j])
        dsig, dmu = _coef_derivs(model, times[j], x[j])
        s2 = sig * sig
        r = d - mu
        value += step * (r * r / (2.0 * s2) + x[j])
        grad[j] += step * (r * (-1.0 / step - dmu) / s2 - r * r * dsig / (s2 * sig) + 1.0)
        grad[j + 1] += r / s2
    value -= float(np.sum(np.log(x[event_idx])))
    np.add.at(grad, event_idx, -1.0 / x[event_idx])
    return value, grad


def pp_minimize_discrete(events: EventRecord, model: DiffusionModel, prior: Prior,
                         grid: TimeGrid, init=None, grad_tol=1e-7, max_iter=50_000):
    """Dense minimization of the discretized objective in log-intensity
    space (positivity for free); Barzilai-Borwein seeded descent with
    Armijo backtracking, as in the diffusion oracle optimizer."""
    times, event_idx = pp_nodes(events, grid)
    if init is None:
        init = np.full(len(times), max(events.count, 1.0) / grid.horizon_T)
    theta = np.log(np.asarray(init, dtype=float))

    def fg(th):
        xv = np.exp(th)
        value, grad = pp_discrete_objective(xv, times, event_idx, model, prior)
        return value, grad * xv

    val, g = fg(theta)
    step = 1.0 / max(1.0, float(np.linalg.norm(g)))
    prev = None
    for _ in range(max_iter):
        if float(np.max(np.abs(g))) <= grad_tol:
            break
        if prev is not None:
            s = theta - prev[0]
            yv = g - prev[1]
            sty = float(s @ yv)
            if sty > 0.0:
                step = float(s @ s) / sty
        gnorm2 = float(g @ g)
        alpha = step
        for _ in range(60):
            trial = theta - alpha * g
            tval, tg = fg(trial)
            if tval <= val - 1e-4 * alpha * gnorm2:
                break
            alpha *= 0.5
        else:
            break
        prev = (theta, g)
        theta, val, g = trial, tval, tg
    return times, np.exp(theta), event_idx, float(np.max(np.abs(g)))


# ---------------------------------------------------------------------------
# Cox-process simulation
# ---------------------------------------------------------------------------


def lognormal_prior(mean_rate: float, variance: float = 1.0) -> Prior:
    """Log-normal-induced prior on the initial intensity: keeps x positive
    and centers log x at log(mean_rate)."""
    if mean_rate <= 0.0:
        raise ValueError("mean_rate must be positive")
    m = math.log(mean_rate)
    v = float(variance)

    def phi(x):
        xv = float(np.asarray(x).reshape(-1)[0])
        if xv <= 0.0:
            return np.inf
        return (math.log(xv) - m) ** 2 / (2.0 * v) + math.log(xv)

    def grad_phi(x):
        xv = float(np.asarray(x).reshape(-1)[0])
        if xv <= 0.0:
            return np.array([np.inf])
        return np.array([(math.log(xv) - m) / (v * xv) + 1.0 / xv])

    def hess_phi(x):
        xv = float(np.asarray(x).reshape(-1)[0])
        if xv <= 0.0:
            return np.array([[np.inf]])
        return np.array([[(1.0 - (math.log(xv) - m)) / (v * xv * xv) - 1.0 / (xv * xv)]])

    return Prior(1, phi, grad_phi, hess_phi, scale=max(1.0, mean_rate),
                 probe_point=np.array([mean_rate]))


def simulate_cox(model: DiffusionModel, grid: TimeGrid, seed: int, x0=1.0):
    """Simulate the intensity by Euler-Maruyama (reflected at a small
    floor), then draw events by thinning against the piecewise-constant
    majorant of the piecewise-linear intensity."""
    h = grid.h
    N = grid.count_N
    rng_path = _rng(seed, grid.level_n, 0)
    dw = gaussians(rng_path, (N, 1)) * np.sqrt(h)
    x = np.empty(N + 1)
    x[0] = float(x0)
    if x[0] <= 0.0:
        raise ValueError("initial intensity must be positive")
    for j in range(N):
        t = j * h
        sig, mu = _coefs(model, t, x[j])
        nxt = x[j] + sig * dw[j, 0] + mu * h
        if nxt < INTENSITY_FLOOR:
            nxt = INTENSITY_FLOOR + abs(nxt - INTENSITY_FLOOR)
        if nxt > model.coefficient_cap:
            raise BlowUpError(f"intensity blew up at t={t + h:.6g}", time=t + h)
        x[j + 1] = nxt

    rng_thin = _rng(seed, grid.level_n, 3)
    events = []
    times = grid.times()
    j = 0
    t = 0.0
    while j < N:
        bar = max(x[j], x[j + 1])
        if bar > model.coefficient_cap:
            raise BlowUpError("thinning majorant overflow", time=times[j])
        if bar <= 0.0:
            j += 1
            t = times[j]
            continue
        u = float(rng_thin.random())
        t_next = t - math.log(max(u, 1e-300)) / bar
        if t_next >= times[j + 1]:
            j += 1
            t = times[j]
            continue
        t = t_next
        frac = (t - times[j]) / h
        lam_t = (1.0 - frac) * x[j] + frac * x[j + 1]
        if float(rng_thin.random()) * bar <= lam_t:
            events.append(t)
    path = SimulatedPath(grid=grid, z=x[:, None], seed=seed, wiener_increments=dw)
    return path, EventRecord(grid.horizon_T, np.array(events))
