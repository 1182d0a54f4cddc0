"""Performance-loss accounting and spline re-planning toward viewpoints.

Re-planned trajectories are piecewise quartic splines in the three pose
channels with C2 continuity at segment joins. Because every weight matrix is
diagonal, the three channels decouple into independent small QPs; equality
constraints (initial conditions and continuity) are eliminated through a
cached null-space basis, so the solver only sees the inequality rows
(sampled accelerations and the viewpoint box).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import angle_diff, unwrap_near
from .qp import kkt_residual, solve_qp
from .world import PlannerParams, ViewPoint

SAMPLES_PER_SEGMENT = 4


class InfeasiblePlan(Exception):
    """The spline program admits no trajectory for this entry step."""


class NoPlanError(Exception):
    """Every (hypothesis, viewpoint) pair was infeasible; mission hold."""


# ---------------------------------------------------------------------------
# performance loss


@dataclass
class PerformanceTracker:
    """Violation distance/time bookkeeping for one hypothesis."""

    violation_distance: float = 0.0
    violation_time: int = 0
    loss: float = 0.0

    def update(self, position, nominal_position, radius: float,
               params: PlannerParams) -> "PerformanceTracker":
        if radius <= 0.0:
            raise ValueError("mission disc radius must be positive")
        gap = float(np.linalg.norm(
            np.asarray(position, dtype=float)[:2]
            - np.asarray(nominal_position, dtype=float)[:2]
        )) - radius
        self.violation_distance = max(0.0, gap)
        if gap > 0.0:
            self.violation_time += 1
        else:
            self.violation_time = max(0, self.violation_time - 1)
        self.loss = loss_index(self.violation_distance, self.violation_time,
                               params)
        return self


def loss_index(distance: float, time_steps: int,
               params: PlannerParams) -> float:
    return 1.0 - float(np.exp(-params.loss_gain_dist * distance
                              - params.loss_gain_time * time_steps))


def predict_loss(positions, nominal_positions, v_start: int, radius: float,
                 params: PlannerParams) -> tuple[float, int]:
    """Worst predicted loss along a pose path, propagating the time counter."""
    pos = np.asarray(positions, dtype=float)[:, :2]
    nom = np.asarray(nominal_positions, dtype=float)[:, :2]
    gaps = np.linalg.norm(pos - nom, axis=1) - radius
    v = v_start
    worst = 0.0
    for gap in gaps:
        v = v + 1 if gap > 0.0 else max(0, v - 1)
        worst = max(worst, loss_index(max(0.0, gap), v, params))
    return worst, v


# ---------------------------------------------------------------------------
# spline basis, cached per (segment count, first-sample offset, dt)


def _basis_row(tau: float, deriv: int, span: float) -> np.ndarray:
    """Quartic monomial row in normalized local time s = tau/span.

    Normalization keeps the channel QPs well conditioned; the 1/span^deriv
    factor converts polynomial derivatives back to physical time.
    """
    s = tau / span
    row = np.zeros(5)
    for i in range(deriv, 5):
        c = 1.0
        for j in range(deriv):
            c *= i - j
        row[i] = c * s ** (i - deriv) / span**deriv
    return row


@dataclass(eq=False)
class _Basis:
    segments: int
    offset: int              # first sampled point within the first segment
    dt: float
    value: np.ndarray        # (n_pts, 5*segments) sampled positions
    accel: np.ndarray        # (n_pts, 5*segments) sampled accelerations
    null: np.ndarray         # null-space basis of the equality rows
    init_map: np.ndarray     # particular solution from (q0, qdot0)
    n_pts: int = field(init=False)

    def __post_init__(self):
        self.n_pts = self.value.shape[0]


_BASIS_CACHE: dict = {}


def _segment_rows(segments: int, offset: int, dt: float, deriv: int):
    """Sampled-derivative rows for local points offset..4*segments."""
    span = SAMPLES_PER_SEGMENT
    span_t = span * dt
    rows = []
    for p in range(offset, span * segments + 1):
        seg = min(p // span, segments - 1)
        tau = (p - span * seg) * dt
        row = np.zeros(5 * segments)
        row[5 * seg:5 * seg + 5] = _basis_row(tau, deriv, span_t)
        rows.append(row)
    return np.array(rows)


def spline_basis(segments: int, offset: int, dt: float) -> _Basis:
    key = (segments, offset, round(dt, 12))
    hit = _BASIS_CACHE.get(key)
    if hit is not None:
        return hit
    n = 5 * segments
    span_t = SAMPLES_PER_SEGMENT * dt
    eq_rows = [np.zeros(n), np.zeros(n)]
    tau0 = offset * dt
    eq_rows[0][:5] = _basis_row(tau0, 0, span_t)
    eq_rows[1][:5] = _basis_row(tau0, 1, span_t)
    for seg in range(segments - 1):
        for deriv in range(3):
            row = np.zeros(n)
            row[5 * seg:5 * seg + 5] = _basis_row(span_t, deriv, span_t)
            row[5 * seg + 5:5 * seg + 10] = -_basis_row(0.0, deriv, span_t)
            eq_rows.append(row)
    a_eq = np.array(eq_rows)
    u, s, vt = np.linalg.svd(a_eq)
    rank = int(np.sum(s > 1e-10 * s[0]))
    null = vt[rank:].T
    pinv = vt[:rank].T @ ((u[:, :rank] / s[:rank]).T)
    basis = _Basis(
        segments, offset, dt,
        value=_segment_rows(segments, offset, dt, 0),
        accel=_segment_rows(segments, offset, dt, 2),
        null=null,
        init_map=pinv[:, :2],
    )
    _BASIS_CACHE[key] = basis
    return basis


# ---------------------------------------------------------------------------
# trajectories


@dataclass(eq=False)
class SplineTrajectory:
    """Quartic spline over pose channels, sampled on the replan grid.

    ``start`` is the first covered grid point (0 for viewpoint plans,
    the handback point for alternatives); ``poses``/``velocities`` carry
    one row per grid point ``start..horizon``. Coefficients live in the
    normalized per-segment basis of ``_basis_row``.
    """

    coefficients: np.ndarray      # (3, segments, 5)
    start: int
    horizon: int
    dt: float
    poses: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray
    entry: int | None = None      # first in-box step for viewpoint plans
    residency: int = 0
    viewpoint: str | None = None

    @property
    def segments(self) -> int:
        return self.coefficients.shape[1]

    def pose_at(self, kappa: int) -> np.ndarray:
        return self.poses[kappa - self.start]


def _sample_trajectory(coeffs_by_channel, basis: _Basis, start: int,
                       horizon: int, dt: float, **meta) -> SplineTrajectory:
    coeffs = np.stack(coeffs_by_channel)        # (3, segments, 5)
    flat = coeffs.reshape(3, -1).T              # (5*segments, 3)
    poses = basis.value @ flat
    vel_rows = _segment_rows(basis.segments, basis.offset, dt, 1)
    velocities = vel_rows @ flat
    accelerations = basis.accel @ flat
    return SplineTrajectory(
        coefficients=coeffs, start=start, horizon=horizon, dt=dt,
        poses=poses, velocities=velocities, accelerations=accelerations,
        **meta,
    )


def _unwrap_heading_refs(nominal_poses, theta_init: float) -> np.ndarray:
    ref = np.array(nominal_poses, dtype=float)
    prev = theta_init
    for i in range(ref.shape[0]):
        ref[i, 2] = unwrap_near(ref[i, 2], prev)
        prev = ref[i, 2]
    return ref


def _solve_channel(basis: _Basis, q0: float, qd0: float, weights, targets,
                   accel_limit: float, box_rows=None, box_lo=None,
                   box_hi=None):
    """One pose channel: eliminate equalities, solve the inequality QP.

    ``weights``/``targets`` are parallel lists of per-sample weight vectors
    and reference vectors over the sampled grid; zero-weight samples cost
    nothing. Returns the full coefficient vector and the KKT residual of
    the reduced problem.
    """
    x_part = basis.init_map @ np.array([q0, qd0])
    null = basis.null
    n = basis.value.shape[1]
    p_full = np.zeros((n, n))
    q_full = np.zeros(n)
    for w_vec, target in zip(weights, targets):
        weighted = basis.value * w_vec[:, None]
        p_full += 2.0 * weighted.T @ basis.value
        q_full -= 2.0 * weighted.T @ target
    p_red = null.T @ p_full @ null + 1e-9 * np.eye(null.shape[1])
    q_red = null.T @ (p_full @ x_part + q_full)

    a_rows = [basis.accel]
    lo = [-accel_limit - basis.accel @ x_part]
    hi = [accel_limit - basis.accel @ x_part]
    if box_rows is not None:
        a_rows.append(box_rows)
        lo.append(box_lo - box_rows @ x_part)
        hi.append(box_hi - box_rows @ x_part)
    a_mat = np.vstack(a_rows) @ null
    lo = np.concatenate(lo)
    hi = np.concatenate(hi)

    res = solve_qp(p_red, q_red, a_mat, lo, hi,
                   eps_abs=1e-8, eps_rel=1e-8, max_iter=4000)
    if res.status == "primal_infeasible":
        raise InfeasiblePlan("viewpoint unreachable under the given bounds")
    if not res.ok and max(res.primal_residual, res.dual_residual) > 1e-5:
        raise InfeasiblePlan(f"channel QP did not converge: {res.status}")
    kkt = kkt_residual(p_red, q_red, a_mat, lo, hi, res.x, res.y)
    return x_part + null @ res.x, kkt


# ---------------------------------------------------------------------------
# the two spline programs


@dataclass(eq=False)
class PlanResult:
    trajectory: SplineTrajectory
    objective: float
    kkt: float          # worst channel KKT residual


def plan_viewpoint_visit(q_init, qdot_init, vp: ViewPoint, entry: int,
                         nominal_poses, params: PlannerParams,
                         dt: float) -> PlanResult:
    """Spline that dwells in the viewpoint box from ``entry`` on.

    Cost pulls toward the viewpoint pose until the residency ends, tracks
    the nominal reference afterwards, and weights the terminal point extra;
    the box is a hard constraint only during the residency interval.
    """
    horizon = params.horizon_replan
    tau = vp.residency_steps
    if not 0 <= entry <= horizon - tau:
        raise ValueError("entry step leaves no room for the residency")
    if not np.all(np.isfinite(q_init)) or not np.all(np.isfinite(qdot_init)):
        raise ValueError("initial conditions must be finite")
    end = entry + tau
    basis = spline_basis(horizon // SAMPLES_PER_SEGMENT, 0, dt)
    refs = _unwrap_heading_refs(nominal_poses, float(q_init[2]))
    vp_pose = vp.pose.copy()
    vp_pose[2] = unwrap_near(vp_pose[2], float(q_init[2]))

    n_pts = horizon + 1
    coeffs = []
    worst_kkt = 0.0
    for c in range(3):
        w_vp = np.zeros(n_pts)
        w_vp[:end + 1] = params.w_viewpoint[c]
        w_g = np.zeros(n_pts)
        w_g[end:] = params.w_track[c]
        w_f = np.zeros(n_pts)
        w_f[-1] = params.w_final[c]
        sol, kkt = _solve_channel(
            basis, float(q_init[c]), float(qdot_init[c]),
            weights=[w_vp, w_g, w_f],
            targets=[np.full(n_pts, vp_pose[c]), refs[:, c], refs[:, c]],
            accel_limit=params.accel_max[c],
            box_rows=basis.value[entry:end + 1],
            box_lo=np.full(end - entry + 1, vp_pose[c] - vp.half_extents[c]),
            box_hi=np.full(end - entry + 1, vp_pose[c] + vp.half_extents[c]),
        )
        coeffs.append(sol.reshape(-1, 5))
        worst_kkt = max(worst_kkt, kkt)

    traj = _sample_trajectory(coeffs, basis, 0, horizon, dt,
                              entry=entry, residency=tau, viewpoint=vp.tag)
    obj = 0.0
    for c in range(3):
        obj += params.w_viewpoint[c] * float(
            np.sum((traj.poses[:end + 1, c] - vp_pose[c]) ** 2))
        obj += params.w_track[c] * float(
            np.sum((traj.poses[end:, c] - refs[end:, c]) ** 2))
        obj += params.w_final[c] * float(
            (traj.poses[-1, c] - refs[-1, c]) ** 2)
    return PlanResult(traj, obj, worst_kkt)


def plan_alternative(q_hand, qdot_hand, start: int, nominal_poses,
                     params: PlannerParams, dt: float) -> PlanResult:
    """Pure nominal tracking from a handback state at grid point ``start``."""
    horizon = params.horizon_replan
    if start >= horizon:
        pose = np.asarray(q_hand, dtype=float).reshape(1, 3)
        vel = np.asarray(qdot_hand, dtype=float).reshape(1, 3)
        traj = SplineTrajectory(
            coefficients=np.zeros((3, 0, 5)), start=horizon, horizon=horizon,
            dt=dt, poses=pose, velocities=vel, accelerations=np.zeros((1, 3)),
        )
        return PlanResult(traj, 0.0, 0.0)
    first_seg = start // SAMPLES_PER_SEGMENT
    offset = start - SAMPLES_PER_SEGMENT * first_seg
    segments = horizon // SAMPLES_PER_SEGMENT - first_seg
    basis = spline_basis(segments, offset, dt)
    refs = _unwrap_heading_refs(np.asarray(nominal_poses)[start:],
                                float(q_hand[2]))
    n_pts = horizon - start + 1
    coeffs = []
    worst_kkt = 0.0
    for c in range(3):
        w_g = np.full(n_pts, params.w_track[c])
        sol, kkt = _solve_channel(
            basis, float(q_hand[c]), float(qdot_hand[c]),
            weights=[w_g], targets=[refs[:, c]],
            accel_limit=params.accel_max[c],
        )
        coeffs.append(sol.reshape(-1, 5))
        worst_kkt = max(worst_kkt, kkt)
    traj = _sample_trajectory(coeffs, basis, start, horizon, dt)
    obj = 0.0
    for c in range(3):
        obj += params.w_track[c] * float(
            np.sum((traj.poses[:, c] - refs[:, c]) ** 2))
    return PlanResult(traj, obj, worst_kkt)


def audit_trajectory(traj: SplineTrajectory, params: PlannerParams,
                     vp: ViewPoint | None = None) -> dict:
    """Constraint residuals recomputed from the polynomial coefficients."""
    worst_joint = 0.0
    span = SAMPLES_PER_SEGMENT * traj.dt
    for c in range(3):
        for seg in range(traj.segments - 1):
            for deriv in range(3):
                left = _basis_row(span, deriv, span) \
                    @ traj.coefficients[c, seg]
                right = _basis_row(0.0, deriv, span) \
                    @ traj.coefficients[c, seg + 1]
                worst_joint = max(worst_joint, abs(left - right))
    accel_over = float(np.max(
        np.abs(traj.accelerations) - np.asarray(params.accel_max), initial=0.0
    ))
    box_over = 0.0
    if vp is not None and traj.entry is not None:
        lo = traj.entry - traj.start
        rows = traj.poses[lo:lo + traj.residency + 1]
        gap = np.abs(rows - vp.pose) - vp.half_extents
        # headings are compared on the circle
        wrapped = np.abs(angle_diff(rows[:, 2], vp.pose[2])) \
            - vp.half_extents[2]
        box_over = float(max(np.max(gap[:, :2], initial=0.0),
                             np.max(wrapped, initial=0.0)))
    return {"continuity": worst_joint, "acceleration": accel_over,
            "viewpoint_box": box_over}


# ---------------------------------------------------------------------------
# entry-time search and plan selection


def ternary_search_entry(q_init, qdot_init, violation_time: int,
                         vp: ViewPoint, nominal_poses,
                         params: PlannerParams, dt: float,
                         radius: float):
    """Pick the entry step minimizing worst predicted loss.

    Infeasible probes raise the lower bound (reachability is monotone in the
    entry time); once the interval is small every remaining candidate is
    solved outright. Returns ``(plan, entry, worst_loss)``.
    """
    horizon = params.horizon_replan
    tau = vp.residency_steps
    nominal_xy = np.asarray(nominal_poses, dtype=float)[:, :2]
    cache: dict = {}
    best: tuple | None = None

    def probe(entry: int):
        nonlocal best
        if entry in cache:
            return cache[entry]
        try:
            plan = plan_viewpoint_visit(q_init, qdot_init, vp, entry,
                                        nominal_poses, params, dt)
        except InfeasiblePlan:
            cache[entry] = None
            return None
        loss, _ = predict_loss(plan.trajectory.poses[:, :2], nominal_xy,
                               violation_time, radius, params)
        cache[entry] = (loss, entry, plan)
        if best is None or (loss, entry) < (best[0], best[1]):
            best = (loss, entry, plan)
        return cache[entry]

    lo, hi = 0, horizon - tau
    while hi - lo > 3:
        third = (hi - lo) // 3
        m1, m2 = lo + third, hi - third
        r1 = probe(m1)
        if r1 is None:
            lo = m1 + 1
            continue
        r2 = probe(m2)
        if r2 is None:
            # cannot happen when feasibility is monotone; keep the left part
            hi = m2 - 1
            continue
        if r1[0] <= r2[0]:
            hi = m2 - 1
        else:
            lo = m1 + 1
    for entry in range(lo, hi + 1):
        probe(entry)
    if best is None:
        raise InfeasiblePlan(
            f"no feasible entry step for viewpoint {vp.tag!r}"
        )
    loss, entry, plan = best
    return plan, entry, loss


@dataclass(eq=False)
class ReplanCandidate:
    """Planning view of one hypothesis at the hand-off state."""

    hid: int
    order_key: tuple            # sorted support tags, for stable tie-breaks
    pose: np.ndarray
    velocity: np.ndarray
    violation_time: int


@dataclass(eq=False)
class ReplanChoice:
    hid: int
    viewpoint: ViewPoint
    plan: PlanResult
    alternative: PlanResult
    entry: int
    handback: int               # grid point where the alternative takes over
    selected_loss: float
    total_loss: float


def combined_path(choice: ReplanChoice) -> np.ndarray:
    """Poses driven if the selected hypothesis gets rejected at the box."""
    head = choice.plan.trajectory.poses[:choice.handback + 1]
    tail = choice.alternative.trajectory.poses[1:]
    return np.vstack([head, tail])


def select_replan(candidates, viewpoints, nominal_poses,
                  params: PlannerParams, dt: float,
                  radius: float) -> ReplanChoice:
    """Grid search of Algorithm-style plan selection.

    For every hypothesis/viewpoint pair: entry search, one alternative from
    the handback state, and a total loss = the pair's own worst loss plus
    the worst loss of every remaining hypothesis along the combined path.
    The first pair (in support/tag order) attaining the minimum wins.
    """
    nominal_xy = np.asarray(nominal_poses, dtype=float)[:, :2]
    ordered = sorted(candidates, key=lambda c: c.order_key)
    best: ReplanChoice | None = None
    for cand in ordered:
        for vp in sorted(viewpoints, key=lambda v: v.tag):
            try:
                plan, entry, own_loss = ternary_search_entry(
                    cand.pose, cand.velocity, cand.violation_time, vp,
                    nominal_poses, params, dt, radius,
                )
            except InfeasiblePlan:
                continue
            handback = entry + vp.residency_steps
            traj = plan.trajectory
            alternative = plan_alternative(
                traj.pose_at(handback),
                traj.velocities[handback],
                handback, nominal_poses, params, dt,
            )
            choice = ReplanChoice(cand.hid, vp, plan, alternative, entry,
                                  handback, own_loss, own_loss)
            path = combined_path(choice)[:, :2]
            for other in ordered:
                if other.hid == cand.hid:
                    continue
                loss, _ = predict_loss(path, nominal_xy,
                                       other.violation_time, radius, params)
                choice.total_loss += loss
            if best is None or choice.total_loss < best.total_loss:
                best = choice
    if best is None:
        raise NoPlanError("every hypothesis/viewpoint pair is unreachable")
    return best
