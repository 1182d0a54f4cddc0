"""Receding-horizon pose tracking via Gauss-Newton SQP.

Single-shooting condensation: the decision vector is the stacked input
sequence, sensitivities are propagated along the current rollout, and each
iteration solves a box-constrained QP for the input correction. The true
(nonlinear) cost is line-searched, so it never increases across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import angle_diff
from .models import NU, NX, POSE_SELECTOR, MotionModel
from .qp import solve_box_qp
from .world import PlannerParams


@dataclass(eq=False)
class NmpcSolution:
    inputs: np.ndarray      # (M, 3)
    states: np.ndarray      # (M+1, 5) rollout under ``inputs``
    cost: float
    status: str             # 'converged' | 'max_iter'
    sqp_iters: int

    def shifted(self) -> np.ndarray:
        """Warm-start guess for the next step: drop first, repeat last."""
        return np.vstack([self.inputs[1:], self.inputs[-1:]])


def rollout(x_init, inputs, motion: MotionModel) -> np.ndarray:
    states = np.empty((len(inputs) + 1, NX))
    states[0] = x_init
    for k, u in enumerate(inputs):
        states[k + 1] = motion.step(states[k], u)
    return states


def _pose_errors(states, ref_poses):
    err = states[:, (0, 1, 4)] - ref_poses
    err[:, 2] = angle_diff(states[:, 4], ref_poses[:, 2])
    return err


def tracking_cost(states, ref_poses, params: PlannerParams) -> float:
    err = _pose_errors(states, ref_poses)
    w_g = np.asarray(params.w_track, dtype=float)
    w_f = np.asarray(params.w_final, dtype=float)
    stage = float(np.einsum("ij,j,ij->", err[:-1], w_g, err[:-1]))
    return stage + float(err[-1] @ (w_f * err[-1]))


def solve_nmpc(x_init, ref_poses, motion: MotionModel,
               params: PlannerParams, warm: np.ndarray | None = None,
               max_sqp_iters: int | None = None) -> NmpcSolution:
    """Track ``ref_poses`` (horizon+1 rows) from ``x_init``.

    ``warm`` is an optional (horizon, 3) input guess, typically a previous
    solution's `shifted()` stack. Input bounds are enforced exactly; the
    returned states are the nonlinear rollout of the returned inputs
    (defect-free by construction).
    """
    x_init = np.asarray(x_init, dtype=float)
    ref_poses = np.asarray(ref_poses, dtype=float)
    horizon = ref_poses.shape[0] - 1
    if horizon < 1:
        raise ValueError("reference must cover at least one step")
    n_dec = horizon * NU
    u_max = np.asarray(params.u_max, dtype=float)
    lb_u = np.tile(-u_max, horizon)
    ub_u = np.tile(u_max, horizon)
    iters = params.sqp_iters if max_sqp_iters is None else max_sqp_iters

    if warm is not None and warm.shape == (horizon, NU):
        u_seq = np.clip(warm, -u_max, u_max)
    else:
        u_seq = np.zeros((horizon, NU))
    states = rollout(x_init, u_seq, motion)
    cost = tracking_cost(states, ref_poses, params)

    w_stage = np.asarray(params.w_track, dtype=float)
    w_final = np.asarray(params.w_final, dtype=float)
    status = "max_iter"
    done_iters = 0
    for it in range(iters):
        done_iters = it + 1
        # sensitivities of every pose on the horizon wrt the input stack
        jac = np.zeros(((horizon + 1) * 3, n_dec))
        sens = np.zeros((NX, n_dec))
        for k in range(horizon):
            a_k = motion.jac_x(states[k], u_seq[k])
            b_k = motion.jac_u(states[k], u_seq[k])
            sens = a_k @ sens
            sens[:, k * NU:(k + 1) * NU] += b_k
            jac[(k + 1) * 3:(k + 2) * 3] = POSE_SELECTOR @ sens
        err = _pose_errors(states, ref_poses).ravel()
        weights = np.tile(w_stage, horizon + 1)
        weights[-3:] = w_final
        hess = 2.0 * (jac.T * weights) @ jac
        # Levenberg floor: late heading-rate inputs have near-zero pose
        # sensitivity, and the resulting null directions make the active
        # set of the box QP churn on rounding noise
        hess += 1e-4 * float(hess.diagonal().max()) * np.eye(n_dec)
        grad = 2.0 * jac.T @ (weights * err)

        du_flat = u_seq.ravel()
        res = solve_box_qp(hess, grad, lb_u - du_flat, ub_u - du_flat,
                           eps_abs=1e-7, eps_rel=1e-7)
        step = res.x.reshape(horizon, NU)
        if not np.all(np.isfinite(step)):
            break
        step_norm = float(np.abs(step).max(initial=0.0))
        if step_norm < 1e-6:
            status = "converged"
            break
        # backtracking on the true cost keeps the iteration monotone
        improved = False
        t = 1.0
        for _ in range(8):
            u_try = np.clip(u_seq + t * step, -u_max, u_max)
            s_try = rollout(x_init, u_try, motion)
            c_try = tracking_cost(s_try, ref_poses, params)
            if c_try <= cost - 1e-12:
                u_seq, states, cost = u_try, s_try, c_try
                improved = True
                break
            t *= 0.5
        if not improved:
            status = "converged"
            break

    return NmpcSolution(u_seq, states, cost, status, done_iters)


def propagate_hypotheses(means, inputs, motion: MotionModel) -> np.ndarray:
    """Mean rollouts of every hypothesis under the planned input sequence."""
    means = np.atleast_2d(np.asarray(means, dtype=float))
    out = np.empty((means.shape[0], len(inputs) + 1, NX))
    for i, m in enumerate(means):
        out[i] = rollout(m, inputs, motion)
    return out
