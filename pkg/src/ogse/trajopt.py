"""Minimum-snap piecewise-polynomial trajectories along a waypoint path.

Each segment is a degree-7 polynomial in normalized time (the monomial basis
on [0, 1] keeps the KKT system well conditioned).  The squared-snap objective
with waypoint interpolation and derivative continuity is an equality-
constrained QP solved through its KKT system; velocity/acceleration limits
and safe-region containment are enforced afterwards by sampling, time
dilation, and waypoint insertion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .geometry import GeneralizedShape, contains_many

MIN_DURATION = 1e-3
KKT_RESIDUAL_TOL = 1e-8
NUM_COEFFS = 8  # degree 7


class SingularKKT(RuntimeError):
    """KKT system is singular (degenerate durations or redundant constraints)."""


class InfeasibleConstraints(RuntimeError):
    """Equality constraints cannot be satisfied to tolerance."""


class OutOfDomain(ValueError):
    """Evaluation time outside the trajectory's knot span."""


@dataclass(frozen=True)
class TrajoptParams:
    v_max: float = 3.0
    a_max: float = 2.0
    degree: int = 7
    containment_samples: int = 20
    max_repair_rounds: int = 5

    def __post_init__(self):
        if self.v_max <= 0 or self.a_max <= 0:
            raise ValueError("v_max and a_max must be positive")
        if self.degree != 7:
            raise ValueError("only degree-7 segments are supported")


@dataclass(frozen=True)
class BoundaryState:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    jerk: np.ndarray

    def __post_init__(self):
        for name in ("position", "velocity", "acceleration", "jerk"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=np.float64).reshape(3))

    @classmethod
    def at_rest(cls, position) -> "BoundaryState":
        z = np.zeros(3)
        return cls(np.asarray(position, dtype=np.float64), z, z, z)


def _unit_snap_gram() -> np.ndarray:
    q = np.zeros((NUM_COEFFS, NUM_COEFFS))
    for a in range(4, NUM_COEFFS):
        for b in range(4, NUM_COEFFS):
            ca = math.factorial(a) // math.factorial(a - 4)
            cb = math.factorial(b) // math.factorial(b - 4)
            q[a, b] = ca * cb / (a + b - 7)
    return q


_Q_UNIT = _unit_snap_gram()


def _deriv_row(order: int, tau: float) -> np.ndarray:
    """Row of d^order/dtau^order of the monomial basis at tau."""
    row = np.zeros(NUM_COEFFS)
    for k in range(order, NUM_COEFFS):
        row[k] = (math.factorial(k) / math.factorial(k - order)) * tau ** (k - order)
    return row


class PiecewisePolynomial:
    """Degree-7 segments in normalized per-segment time.

    Coefficients have shape (n_seg, 8, 3); physical derivatives of order z
    scale the normalized ones by duration**-z.
    """

    def __init__(self, coeffs: np.ndarray, durations: np.ndarray,
                 waypoints: np.ndarray, start_state: BoundaryState | None,
                 end_state: BoundaryState | None):
        self.coeffs = np.asarray(coeffs, dtype=np.float64)
        self.durations = np.asarray(durations, dtype=np.float64)
        self.knots = np.concatenate([[0.0], np.cumsum(self.durations)])
        self.waypoints = np.asarray(waypoints, dtype=np.float64)
        self.start_state = start_state
        self.end_state = end_state
        self.repair_rounds = 0
        self.fallback = False
        self.segment_shapes = None
        self.kkt_residual = None

    @property
    def n_segments(self) -> int:
        return len(self.durations)

    @property
    def duration(self) -> float:
        return float(self.knots[-1])

    def _segment_of(self, t: float) -> int:
        if t < self.knots[0] - 1e-9 or t > self.knots[-1] + 1e-9:
            raise OutOfDomain(f"t={t} outside [{self.knots[0]}, {self.knots[-1]}]")
        i = int(np.searchsorted(self.knots, t, side="right")) - 1
        return min(max(i, 0), self.n_segments - 1)

    def eval(self, t: float, order: int = 0) -> np.ndarray:
        i = self._segment_of(t)
        T = self.durations[i]
        tau = min(max((t - self.knots[i]) / T, 0.0), 1.0)
        c = self.coeffs[i]
        val = np.zeros(3)
        for k in range(NUM_COEFFS - 1, order - 1, -1):
            f = math.factorial(k) / math.factorial(k - order)
            val = val * tau + f * c[k]
        return val / T ** order

    def eval_many(self, ts: np.ndarray, order: int = 0) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.float64)
        out = np.empty((len(ts), 3))
        seg = np.clip(np.searchsorted(self.knots, ts, side="right") - 1,
                      0, self.n_segments - 1)
        for i in np.unique(seg):
            m = seg == i
            T = self.durations[i]
            tau = np.clip((ts[m] - self.knots[i]) / T, 0.0, 1.0)
            c = self.coeffs[i]
            val = np.zeros((m.sum(), 3))
            for k in range(NUM_COEFFS - 1, order - 1, -1):
                f = math.factorial(k) / math.factorial(k - order)
                val = val * tau[:, None] + f * c[k]
            out[m] = val / T ** order
        return out


def _as_waypoints(path) -> np.ndarray:
    wp = getattr(path, "waypoints", path)
    wp = np.asarray(wp, dtype=np.float64)
    if wp.ndim != 2 or wp.shape[1] != 3 or wp.shape[0] < 2:
        raise ValueError("need at least two (x, y, z) waypoints")
    return wp


def allocate_times(path, params: TrajoptParams) -> np.ndarray:
    """Per-segment durations from a trapezoidal speed profile.

    With segment length d, the cruise speed is min(v_max, sqrt(d * a_max)) and
    the duration d / v_c + v_c / a_max; degenerate segments clamp to 1 ms.
    """
    wp = _as_waypoints(path)
    d = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    v_c = np.minimum(params.v_max, np.sqrt(d * params.a_max))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(v_c > 0, d / np.where(v_c > 0, v_c, 1.0) + v_c / params.a_max, 0.0)
    return np.maximum(t, MIN_DURATION)


def min_snap_qp(path, times, start_state: BoundaryState,
                end_state: BoundaryState | None) -> PiecewisePolynomial:
    """Snap-minimizing trajectory through the waypoints at the given knots.

    Interpolates every waypoint, keeps derivative orders 0-4 continuous at
    interior knots, pins the full start state, and pins the end derivatives
    when `end_state` is given (None leaves them cost-optimal).  Solved as one
    KKT system per problem (shared across axes); a singular or inconsistent
    system raises instead of being regularized.
    """
    wp = _as_waypoints(path)
    times = np.asarray(times, dtype=np.float64)
    n = len(times)
    if wp.shape[0] != n + 1:
        raise ValueError("need one duration per waypoint segment")
    if np.any(times <= 0):
        raise SingularKKT("non-positive segment duration")
    if np.linalg.norm(start_state.position - wp[0]) > 1e-6:
        raise InfeasibleConstraints("start state position differs from first waypoint")
    if end_state is not None and \
            np.linalg.norm(end_state.position - wp[-1]) > 1e-6:
        raise InfeasibleConstraints("end state position differs from last waypoint")

    nv = NUM_COEFFS * n
    rows, rhs = [], []

    def add(row_entries, b):
        row = np.zeros(nv)
        for (seg, basis) in row_entries:
            row[seg * NUM_COEFFS:(seg + 1) * NUM_COEFFS] += basis
        rows.append(row)
        rhs.append(b)

    for i in range(n):
        add([(i, _deriv_row(0, 0.0))], wp[i])
        add([(i, _deriv_row(0, 1.0))], wp[i + 1])
    for i in range(1, n):
        for z in range(1, 5):
            left = _deriv_row(z, 1.0) / times[i - 1] ** z
            right = _deriv_row(z, 0.0) / times[i] ** z
            add([(i - 1, left), (i, -right)], np.zeros(3))
    start_derivs = (start_state.velocity, start_state.acceleration, start_state.jerk)
    for z, val in enumerate(start_derivs, start=1):
        add([(0, _deriv_row(z, 0.0) / times[0] ** z)], val)
    if end_state is not None:
        end_derivs = (end_state.velocity, end_state.acceleration, end_state.jerk)
        for z, val in enumerate(end_derivs, start=1):
            add([(n - 1, _deriv_row(z, 1.0) / times[-1] ** z)], val)

    a_mat = np.asarray(rows)
    b_mat = np.asarray([np.broadcast_to(b, (3,)) for b in rhs])
    m = a_mat.shape[0]

    # Scale segment i's coefficients by T_i^3.5: every snap Gram becomes the
    # unit one and the duration spread leaves the Hessian, which keeps the
    # KKT system solvable to tight residuals even with millisecond segments
    # next to multi-second ones.  Constraint rows are equilibrated likewise.
    col_scale = np.repeat(times ** 3.5, NUM_COEFFS)
    a_scaled = a_mat * col_scale
    row_scale = np.max(np.abs(a_scaled), axis=1)
    if np.any(row_scale == 0) or not np.all(np.isfinite(row_scale)):
        raise SingularKKT("degenerate constraint row")
    a_scaled = a_scaled / row_scale[:, None]
    b_scaled = b_mat / row_scale[:, None]

    big_q = np.zeros((nv, nv))
    for i in range(n):
        s = i * NUM_COEFFS
        big_q[s:s + NUM_COEFFS, s:s + NUM_COEFFS] = _Q_UNIT

    kkt = np.zeros((nv + m, nv + m))
    kkt[:nv, :nv] = big_q
    kkt[:nv, nv:] = a_scaled.T
    kkt[nv:, :nv] = a_scaled
    full_rhs = np.zeros((nv + m, 3))
    full_rhs[nv:] = b_scaled
    try:
        lu_piv = lu_factor(kkt)
        sol = lu_solve(lu_piv, full_rhs)
        for _ in range(2):
            resid = full_rhs - kkt @ sol
            if np.max(np.abs(resid)) < 1e-13:
                break
            sol += lu_solve(lu_piv, resid)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularKKT(str(exc)) from exc
    if not np.all(np.isfinite(sol)):
        raise SingularKKT("non-finite KKT solution")
    # Violation is measured per-constraint relative to the row's coefficient
    # scale (equilibrated max-norm); raw residuals of 1/T^4-scaled continuity
    # rows are dominated by float cancellation for millisecond segments.
    residual = np.max(np.abs(a_scaled @ sol[:nv] - b_scaled))
    if not np.isfinite(residual) or residual > KKT_RESIDUAL_TOL:
        raise InfeasibleConstraints(f"constraint residual {residual:.3e}")
    x = sol[:nv] * col_scale[:, None]

    coeffs = x.reshape(n, NUM_COEFFS, 3)
    traj = PiecewisePolynomial(coeffs, times, wp, start_state, end_state)
    traj.kkt_residual = float(residual)
    return traj


def snap_cost(traj: PiecewisePolynomial) -> float:
    """Exact integral of squared snap over all segments and axes."""
    total = 0.0
    for i in range(traj.n_segments):
        c = traj.coeffs[i]
        total += float(np.einsum("ka,kl,la->", c, _Q_UNIT, c)) / traj.durations[i] ** 7
    return total


def _check_samples(traj: PiecewisePolynomial, shapes, params: TrajoptParams,
                   extra_dt: float | None):
    """Worst velocity/acceleration ratios and first containment violation."""
    worst_v = worst_a = 0.0
    bad_seg = -1
    for i in range(traj.n_segments):
        t0, t1 = traj.knots[i], traj.knots[i + 1]
        ts = np.linspace(t0, t1, params.containment_samples)
        if extra_dt is not None and (t1 - t0) / extra_dt < 1e5:
            lattice = np.arange(math.ceil(t0 / extra_dt),
                                math.floor(t1 / extra_dt) + 1) * extra_dt
            ts = np.union1d(ts, lattice)
        pos = traj.eval_many(ts, 0)
        vel = np.linalg.norm(traj.eval_many(ts, 1), axis=1)
        acc = np.linalg.norm(traj.eval_many(ts, 2), axis=1)
        worst_v = max(worst_v, float(vel.max()) / params.v_max)
        worst_a = max(worst_a, float(acc.max()) / params.a_max)
        if bad_seg < 0 and shapes is not None:
            if not contains_many(shapes[i], pos).all():
                bad_seg = i
    return worst_v, worst_a, bad_seg


def _fallback_linear(waypoints: np.ndarray, shapes, params: TrajoptParams
                     ) -> PiecewisePolynomial:
    """Stop-and-go trapezoidal traversal of the straight waypoint path.

    Every sample lies on the waypoint chords, so containment in the per-
    segment shapes holds exactly; the profile is C1 with zero velocity at
    waypoints.
    """
    coeffs, durations, seg_shapes = [], [], []
    for i in range(len(waypoints) - 1):
        a_vec = waypoints[i]
        chord = waypoints[i + 1] - a_vec
        d = float(np.linalg.norm(chord))
        u = chord / d if d > 0 else np.zeros(3)
        v_c = min(params.v_max, math.sqrt(max(d, 0.0) * params.a_max))
        t_acc = v_c / params.a_max
        if t_acc < MIN_DURATION:
            # Sub-millimeter chord: one slow linear segment.
            c = np.zeros((NUM_COEFFS, 3))
            c[0] = a_vec
            c[1] = chord
            coeffs.append(c)
            durations.append(max(10 * d / params.v_max, MIN_DURATION))
            seg_shapes.append(shapes[i] if shapes is not None else None)
            continue
        d_acc = 0.5 * params.a_max * t_acc ** 2
        d_cruise = max(d - 2 * d_acc, 0.0)
        t_cruise = d_cruise / v_c
        phases = [(t_acc, 0.0, 0.0, 0.5 * params.a_max),
                  (t_cruise, d_acc, v_c, 0.0),
                  (t_acc, d_acc + d_cruise, v_c, -0.5 * params.a_max)]
        for T, s0, v0, half_acc in phases:
            if T < 1e-9:
                continue
            c = np.zeros((NUM_COEFFS, 3))
            c[0] = a_vec + u * s0
            c[1] = u * v0 * T
            c[2] = u * half_acc * T * T
            coeffs.append(c)
            durations.append(T)
            seg_shapes.append(shapes[i] if shapes is not None else None)
    traj = PiecewisePolynomial(np.asarray(coeffs), np.asarray(durations),
                               waypoints, BoundaryState.at_rest(waypoints[0]),
                               BoundaryState.at_rest(waypoints[-1]))
    traj.fallback = True
    traj.segment_shapes = seg_shapes
    return traj


def fallback_trajectory(waypoints, shapes, params: TrajoptParams
                        ) -> PiecewisePolynomial:
    """Stop-and-go traversal of the waypoint chords (degraded mode)."""
    return _fallback_linear(np.asarray(waypoints, dtype=np.float64),
                            list(shapes) if shapes is not None else None, params)


def enforce_feasibility(traj: PiecewisePolynomial, shapes,
                        params: TrajoptParams,
                        extra_dt: float | None = None) -> PiecewisePolynomial:
    """Repair the trajectory until sampled checks pass.

    Speed/acceleration violations dilate all durations and re-solve;
    containment violations insert the straight-path midpoint of the violating
    segment (inside that segment's shape by the edge invariant) and re-solve.
    After the repair budget, falls back to stop-and-go traversal of the
    waypoint chords, which satisfies every check by construction.
    """
    waypoints = traj.waypoints.copy()
    shapes = list(shapes) if shapes is not None else None
    start_state, end_state = traj.start_state, traj.end_state
    times = traj.durations.copy()
    dilation = 1.0
    current = traj
    for round_idx in range(params.max_repair_rounds + 1):
        worst_v, worst_a, bad_seg = _check_samples(current, shapes, params, extra_dt)
        if worst_v <= 1.0 and worst_a <= 1.0 and bad_seg < 0:
            current.repair_rounds = round_idx
            current.segment_shapes = shapes
            return current
        if round_idx == params.max_repair_rounds:
            break
        if worst_v > 1.0 or worst_a > 1.0:
            factor = min(max(worst_v, math.sqrt(worst_a)) * 1.05, 10.0)
            dilation *= factor
            times = times * factor
        else:
            mid = 0.5 * (waypoints[bad_seg] + waypoints[bad_seg + 1])
            waypoints = np.insert(waypoints, bad_seg + 1, mid, axis=0)
            if shapes is not None:
                shapes.insert(bad_seg, shapes[bad_seg])
            times = allocate_times(waypoints, params) * dilation
        try:
            current = min_snap_qp(waypoints, times, start_state, end_state)
        except (SingularKKT, InfeasibleConstraints):
            break
    result = _fallback_linear(waypoints, shapes, params)
    result.repair_rounds = params.max_repair_rounds
    return result


def export_csv(traj: PiecewisePolynomial, path, rate_hz: float = 100.0) -> None:
    """Write (t, position, velocity, acceleration) rows at a fixed rate."""
    ts = np.arange(0.0, traj.duration + 0.5 / rate_hz, 1.0 / rate_hz)
    ts = np.minimum(ts, traj.duration)
    pos = traj.eval_many(ts, 0)
    vel = traj.eval_many(ts, 1)
    acc = traj.eval_many(ts, 2)
    with open(path, "w") as f:
        f.write("t,x,y,z,vx,vy,vz,ax,ay,az\n")
        for i, t in enumerate(ts):
            row = [t, *pos[i], *vel[i], *acc[i]]
            f.write(",".join(repr(float(v)) for v in row) + "\n")
