"""Dense convex QP solvers.

solve_qp handles  min 1/2 x'Px + q'x  s.t.  l <= Ax <= u  (two-sided rows;
equalities are rows with l == u). The workhorse is operator splitting on
the normal-equations form with a final active-set polish; it also carries
the primal-infeasibility certificate. Cold-started calls first try a
predictor-corrector interior-point pass, whose polished result is accepted
only when the KKT conditions verify, so the splitting iteration remains
the reference behavior. solve_box_qp covers the pure box case with the
same interior-point scheme, which the receding-horizon controller calls
every step. Sizes here are small (dozens to a few hundred variables),
dense linear algebra is the right tool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray            # multipliers for the row constraints
    status: str              # 'solved' | 'max_iter' | 'primal_infeasible'
    iterations: int
    primal_residual: float
    dual_residual: float

    @property
    def ok(self) -> bool:
        return self.status == "solved"


def kkt_residual(P, q, A, l, u, x, y) -> float:
    """Max of stationarity, primal violation and complementarity errors."""
    P, q, x, y = map(np.asarray, (P, q, x, y))
    stat = np.linalg.norm(P @ x + q + (A.T @ y if A is not None else 0.0),
                          ord=np.inf)
    if A is None or not len(np.atleast_2d(A)):
        return float(stat)
    ax = A @ x
    viol = max(
        float(np.max(np.maximum(l - ax, 0.0), initial=0.0)),
        float(np.max(np.maximum(ax - u, 0.0), initial=0.0)),
    )
    # complementarity: positive duals push on u, negative on l; a dual
    # leaning on an infinite bound is itself the error, not 0 * inf
    gap_u = np.where(np.isfinite(u), u - ax, 1e30)
    gap_l = np.where(np.isfinite(l), ax - l, 1e30)
    comp = float(
        np.max(
            np.abs(np.maximum(y, 0.0) * gap_u)
            + np.abs(np.minimum(y, 0.0) * gap_l),
            initial=0.0,
        )
    )
    return float(max(stat, viol, comp))


def _polish(P, q, A, l, u, x, y, tol=1e-7):
    """Equality solve on the active set; returns improved (x, y) or None."""
    ax = A @ x
    low = (y < -tol) | (ax - l < tol)
    upp = (y > tol) | (u - ax < tol)
    # equality rows stay in both sets; pick the bound the iterate leans on
    act_l = np.where(low & ~(upp & (y > 0)))[0]
    act_u = np.where(upp & ~(low & (y < 0)))[0]
    rows = np.concatenate([act_l, act_u])
    if rows.size == 0:
        try:
            x_new = np.linalg.lstsq(P, -q, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        return x_new, np.zeros_like(y)
    a_act = A[rows]
    b_act = np.concatenate([l[act_l], u[act_u]])
    n = P.shape[0]
    m = rows.size
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = P + 1e-12 * np.eye(n)
    kkt[:n, n:] = a_act.T
    kkt[n:, :n] = a_act
    rhs = np.concatenate([-q, b_act])
    try:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    except np.linalg.LinAlgError:
        return None
    x_new = sol[:n]
    y_new = np.zeros_like(y)
    y_new[rows] = sol[n:]
    return x_new, y_new


def _ipm_rows(P, q, A, l, u, *, eps_abs, eps_rel,
              max_iter=40) -> QpResult | None:
    """Mehrotra predictor-corrector for  l <= Ax <= u  row constraints.

    Rows with l == u form an explicit equality block of the per-iteration
    KKT system; one-sided rows drop the barrier term of their missing
    side. Late iterations can destroy the barrier factorization, so the
    best iterate is retained and returned with status 'stalled' when
    progress stops; the caller decides whether it verifies. Returns None
    only when no usable iterate was produced.
    """
    n = q.size
    eq = (u - l) <= 1e-12
    a_e = A[eq]
    b_e = 0.5 * (l[eq] + u[eq])
    a_i = A[~eq]
    l_i = l[~eq]
    u_i = u[~eq]
    me = a_e.shape[0]
    mi = a_i.shape[0]
    has_l = np.isfinite(l_i)
    has_u = np.isfinite(u_i)
    mbar = int(has_l.sum() + has_u.sum())

    def result(x, zl, zu, nu, status, it, r_dual):
        y = np.empty(A.shape[0])
        y[eq] = nu
        y[~eq] = zu - zl
        ax = A @ x
        prim = max(
            float(np.max(np.maximum(l - ax, 0.0), initial=0.0)),
            float(np.max(np.maximum(ax - u, 0.0), initial=0.0)),
        )
        return QpResult(x, y, status, it, prim, r_dual)

    if mbar == 0:
        # equality-constrained (or vacuous) problem: one saddle solve
        kkt = np.zeros((n + me, n + me))
        kkt[:n, :n] = P
        kkt[:n, n:] = a_e.T
        kkt[n:, :n] = a_e
        try:
            sol = np.linalg.solve(kkt, np.concatenate([-q, b_e]))
        except np.linalg.LinAlgError:
            return None
        g = P @ sol[:n] + q + (a_e.T @ sol[n:] if me else 0.0)
        return result(sol[:n], np.zeros(0), np.zeros(0), sol[n:],
                      "solved", 1, float(np.linalg.norm(g, np.inf)))

    r0 = a_i @ np.zeros(n)
    sl = np.where(has_l, np.maximum(r0 - l_i, 1.0), 1.0)
    su = np.where(has_u, np.maximum(u_i - r0, 1.0), 1.0)
    zl = np.where(has_l, 1.0, 0.0)
    zu = np.where(has_u, 1.0, 0.0)
    x = np.zeros(n)
    nu = np.zeros(me)
    q_scale = max(np.linalg.norm(q, np.inf), 1.0)
    # the barrier matrix degrades as slacks collapse, so keep the best
    # iterate seen and hand it to the caller's polish when progress stops
    best = None
    best_score = np.inf
    best_it = 0

    def step_len(v, dv, mask):
        neg = mask & (dv < 0.0)
        if not neg.any():
            return 1.0
        return min(1.0, float(np.min(-v[neg] / dv[neg])))

    for it in range(1, max_iter + 1):
        r = a_i @ x
        g = P @ x + q
        r_d = g + a_i.T @ (zu - zl) + (a_e.T @ nu if me else 0.0)
        r_l = np.where(has_l, r - sl - l_i, 0.0)
        r_u = np.where(has_u, r + su - u_i, 0.0)
        r_e = a_e @ x - b_e if me else np.zeros(0)
        mu = (float(sl[has_l] @ zl[has_l])
              + float(su[has_u] @ zu[has_u])) / mbar

        dual = float(np.linalg.norm(r_d, np.inf))
        prim = max(
            float(np.linalg.norm(r_l, np.inf)) if mi else 0.0,
            float(np.linalg.norm(r_u, np.inf)) if mi else 0.0,
            float(np.linalg.norm(r_e, np.inf)) if me else 0.0,
        )
        tol_d = eps_abs + eps_rel * max(np.linalg.norm(g - q, np.inf),
                                        q_scale)
        tol_p = eps_abs + eps_rel * max(float(np.linalg.norm(r, np.inf))
                                        if mi else 0.0, 1.0)
        mu_tol = max(eps_abs, 1e-12) * q_scale
        score = max(dual / tol_d, prim / tol_p, mu / mu_tol)
        if np.isfinite(score) and score < best_score:
            best = (x.copy(), zl.copy(), zu.copy(), nu.copy(), dual)
            best_score = score
            best_it = it
        if score <= 1.0:
            return result(x, zl, zu, nu, "solved", it, dual)
        if it - best_it >= 8:
            break

        if not np.isfinite(mu) or mu > 1e16:
            break
        sl = np.maximum(sl, 1e-14)
        su = np.maximum(su, 1e-14)
        d = np.where(has_l, zl / sl, 0.0) + np.where(has_u, zu / su, 0.0)
        kkt = np.zeros((n + me, n + me))
        kkt[:n, :n] = P + a_i.T @ (a_i * d[:, None])
        kkt[:n, n:] = a_e.T
        kkt[n:, :n] = a_e
        if not np.isfinite(kkt).all():
            break
        try:
            w_inv = np.linalg.inv(kkt)
        except np.linalg.LinAlgError:
            break

        def newton(rc_l, rc_u):
            coef = (np.where(has_u, (rc_u + zu * r_u) / su, 0.0)
                    - np.where(has_l, (rc_l - zl * r_l) / sl, 0.0))
            rhs = np.concatenate([-r_d - a_i.T @ coef, -r_e])
            sol = w_inv @ rhs
            dx = sol[:n]
            adx = a_i @ dx
            dsl = np.where(has_l, adx + r_l, 0.0)
            dsu = np.where(has_u, -adx - r_u, 0.0)
            dzl = np.where(has_l, (rc_l - zl * dsl) / sl, 0.0)
            dzu = np.where(has_u, (rc_u - zu * dsu) / su, 0.0)
            return dx, sol[n:], dsl, dsu, dzl, dzu

        # predictor
        dx, dnu, dsl, dsu, dzl, dzu = newton(-sl * zl, -su * zu)
        ap = min(step_len(sl, dsl, has_l), step_len(su, dsu, has_u))
        ad = min(step_len(zl, dzl, has_l), step_len(zu, dzu, has_u))
        mu_aff = (float((sl + ap * dsl)[has_l] @ (zl + ad * dzl)[has_l])
                  + float((su + ap * dsu)[has_u]
                          @ (zu + ad * dzu)[has_u])) / mbar
        sig = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0

        # corrector
        dx, dnu, dsl, dsu, dzl, dzu = newton(sig * mu - sl * zl - dsl * dzl,
                                             sig * mu - su * zu - dsu * dzu)
        ap = 0.995 * min(step_len(sl, dsl, has_l), step_len(su, dsu, has_u))
        ad = 0.995 * min(step_len(zl, dzl, has_l), step_len(zu, dzu, has_u))
        x += min(ap, 1.0) * dx
        nu += min(ad, 1.0) * dnu
        sl += min(ap, 1.0) * dsl
        su += min(ap, 1.0) * dsu
        zl += min(ad, 1.0) * dzl
        zu += min(ad, 1.0) * dzu

    if best is None:
        return None
    bx, bzl, bzu, bnu, bdual = best
    return result(bx, bzl, bzu, bnu, "stalled", it, bdual)


def solve_qp(P, q, A=None, l=None, u=None, *, x0=None, y0=None,
             eps_abs=1e-6, eps_rel=1e-6, max_iter=5000, rho=0.1,
             sigma=1e-6, alpha=1.6, polish=True) -> QpResult:
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    n = q.size
    if A is None:
        A = np.zeros((0, n))
        l = np.zeros(0)
        u = np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    m = A.shape[0]
    if np.any(l > u + 1e-12):
        return QpResult(np.full(n, np.nan), np.zeros(m),
                        "primal_infeasible", 0, np.inf, np.inf)

    # cheap exit: no row constraint active at the unconstrained minimizer
    if m and x0 is None and y0 is None:
        try:
            c = np.linalg.cholesky(P)
            xs = np.linalg.solve(c.T, np.linalg.solve(c, -q))
        except np.linalg.LinAlgError:
            xs = None
        if xs is not None:
            ax = A @ xs
            if np.all(ax >= l - 1e-10) and np.all(ax <= u + 1e-10):
                return QpResult(xs, np.zeros(m), "solved", 1, 0.0, 0.0)

    # interior-point fast path; cold starts only. A stalled barrier run
    # is still accepted when the polished point verifies against the KKT
    # conditions; anything worse falls through to the splitting
    # iteration below, which carries the infeasibility certificate.
    if m and x0 is None and y0 is None:
        res = _ipm_rows(P, q, A, l, u, eps_abs=eps_abs, eps_rel=eps_rel)
        if res is not None:
            x_b, y_b = res.x, res.y
            kkt_b = kkt_residual(P, q, A, l, u, x_b, y_b)
            if polish:
                refined = _polish(P, q, A, l, u, x_b, y_b)
                if refined is not None and np.all(np.isfinite(refined[0])):
                    kkt_new = kkt_residual(P, q, A, l, u, *refined)
                    if kkt_new <= kkt_b:
                        x_b, y_b = refined
                        kkt_b = kkt_new
            verify = 50.0 * (eps_abs + eps_rel
                             * max(np.linalg.norm(q, np.inf), 1.0))
            if res.status == "solved" or kkt_b <= verify:
                ax = A @ x_b
                prim = max(
                    float(np.max(np.maximum(l - ax, 0.0), initial=0.0)),
                    float(np.max(np.maximum(ax - u, 0.0), initial=0.0)),
                )
                dual = float(np.linalg.norm(P @ x_b + q + A.T @ y_b,
                                            np.inf))
                return QpResult(x_b, y_b, "solved", res.iterations,
                                prim, dual)

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float).copy()
    z = A @ x

    def factor(rho_val):
        return np.linalg.inv(P + sigma * np.eye(n) + rho_val * (A.T @ A))

    m_inv = factor(rho)
    status = "max_iter"
    it = 0
    r_prim = r_dual = np.inf
    check_every = 25
    for it in range(1, max_iter + 1):
        x_tilde = m_inv @ (sigma * x - q + A.T @ (rho * z - y))
        z_tilde = A @ x_tilde
        x = alpha * x_tilde + (1 - alpha) * x
        z_hat = alpha * z_tilde + (1 - alpha) * z
        z = np.clip(z_hat + y / rho, l, u)
        dy = rho * (z_hat - z)
        y = y + dy

        if it % check_every:
            continue
        ax = A @ x
        r_prim = float(np.linalg.norm(ax - z, np.inf)) if m else 0.0
        r_dual = float(np.linalg.norm(P @ x + q + A.T @ y, np.inf))
        eps_p = eps_abs + eps_rel * max(
            np.linalg.norm(ax, np.inf) if m else 0.0,
            np.linalg.norm(z, np.inf) if m else 0.0,
        )
        eps_d = eps_abs + eps_rel * max(
            np.linalg.norm(P @ x, np.inf),
            np.linalg.norm(q, np.inf),
            np.linalg.norm(A.T @ y, np.inf) if m else 0.0,
        )
        if r_prim <= eps_p and r_dual <= eps_d:
            status = "solved"
            break
        # primal infeasibility certificate on the dual step direction
        if m and it >= 100:
            ndy = np.linalg.norm(dy, np.inf)
            if ndy > 1e-10:
                dyn = dy / ndy
                pos = np.maximum(dyn, 0.0)
                neg = np.minimum(dyn, 0.0)
                support = float(
                    np.sum(np.where(pos > 0.0, u, 0.0) * pos)
                    + np.sum(np.where(neg < 0.0, l, 0.0) * neg)
                )
                if (np.linalg.norm(A.T @ dyn, np.inf) <= 1e-6
                        and support <= -1e-6):
                    status = "primal_infeasible"
                    break
        # crude penalty adaptation, refactor at most a handful of times
        if it in (200, 800, 2400) and m:
            ratio = (r_prim + 1e-16) / (r_dual + 1e-16)
            new_rho = float(np.clip(rho * np.sqrt(ratio), 1e-6, 1e6))
            if not 0.2 < new_rho / rho < 5.0:
                rho = new_rho
                m_inv = factor(rho)

    if status == "solved" and polish and m:
        refined = _polish(P, q, A, l, u, x, y)
        if refined is not None:
            x_new, y_new = refined
            if (np.all(np.isfinite(x_new))
                    and kkt_residual(P, q, A, l, u, x_new, y_new)
                    <= kkt_residual(P, q, A, l, u, x, y)):
                x, y = x_new, y_new
    return QpResult(x, y, status, it, r_prim, r_dual)


def solve_box_qp(P, q, lb, ub, *, x0=None, eps_abs=1e-8, eps_rel=1e-8,
                 max_iter=50) -> QpResult:
    """Box-constrained specialization (A = I), used in the control hot path.

    Mehrotra predictor-corrector interior point. Active-set walks stall on
    these problems (receding-horizon Hessians couple the coordinates
    strongly, so pins and releases cascade one bound at a time), while the
    barrier path needs a dozen factorizations regardless of how many
    bounds end up active. Zero-width coordinates are eliminated up front;
    infinite bounds simply drop their barrier term.
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    n = q.size
    if np.any(lb > ub + 1e-12):
        return QpResult(np.full(n, np.nan), np.zeros(n),
                        "primal_infeasible", 0, np.inf, np.inf)

    # pin zero-width coordinates and reduce to the rest
    eq = ub - lb <= 1e-12
    if eq.any():
        ri = ~eq
        x_eq = 0.5 * (lb[eq] + ub[eq])
        if ri.any():
            sub = solve_box_qp(
                P[np.ix_(ri, ri)], q[ri] + P[np.ix_(ri, eq)] @ x_eq,
                lb[ri], ub[ri],
                x0=None if x0 is None else np.asarray(x0, float)[ri],
                eps_abs=eps_abs, eps_rel=eps_rel, max_iter=max_iter)
            x = np.empty(n)
            x[eq] = x_eq
            x[ri] = sub.x
            y = np.empty(n)
            y[ri] = sub.y
            y[eq] = -(P @ x + q)[eq]
            return QpResult(x, y, sub.status, sub.iterations,
                            sub.primal_residual, sub.dual_residual)
        x = x_eq
        g = P @ x + q
        return QpResult(x, -g, "solved", 0, 0.0, 0.0)

    has_l = np.isfinite(lb)
    has_u = np.isfinite(ub)
    m = int(has_l.sum() + has_u.sum())
    if m == 0:
        x = np.linalg.solve(P, -q)
        return QpResult(x, np.zeros(n), "solved", 1, 0.0, 0.0)

    # cheap exit: the unconstrained minimizer is usually interior here
    try:
        xs = np.linalg.solve(P, -q)
    except np.linalg.LinAlgError:
        xs = None
    if xs is not None and np.all(xs >= lb - 1e-12) \
            and np.all(xs <= ub + 1e-12):
        return QpResult(np.clip(xs, lb, ub), np.zeros(n),
                        "solved", 1, 0.0, 0.0)

    # strictly interior start
    margin = np.ones(n)
    both = has_l & has_u
    margin[both] = 0.1 * (ub[both] - lb[both])
    lo = np.where(has_l, lb + margin, -np.inf)
    hi = np.where(has_u, ub - margin, np.inf)
    x = np.clip(np.zeros(n) if x0 is None else np.asarray(x0, float),
                np.minimum(lo, hi), np.maximum(lo, hi))
    zl = np.where(has_l, 1.0, 0.0)
    zu = np.where(has_u, 1.0, 0.0)

    q_scale = max(np.linalg.norm(q, np.inf), 1.0)
    status = "max_iter"
    it = 0
    r_dual = np.inf
    for it in range(1, max_iter + 1):
        sl = np.where(has_l, x - lb, 1.0)
        su = np.where(has_u, ub - x, 1.0)
        g = P @ x + q
        r_d = g - zl + zu
        mu = (float(sl[has_l] @ zl[has_l]) + float(su[has_u] @ zu[has_u])) / m
        r_dual = float(np.linalg.norm(r_d, np.inf))
        tol = eps_abs + eps_rel * max(np.linalg.norm(g - q, np.inf), q_scale)
        if r_dual <= tol and mu <= max(eps_abs, 1e-12) * q_scale:
            status = "solved"
            break

        dl = np.where(has_l, zl / sl, 0.0)
        du = np.where(has_u, zu / su, 0.0)
        try:
            w_inv = np.linalg.inv(P + np.diag(dl + du))
        except np.linalg.LinAlgError:
            break

        def newton(rc_l, rc_u):
            rhs = -r_d + np.where(has_l, rc_l / sl, 0.0) \
                - np.where(has_u, rc_u / su, 0.0)
            dx = w_inv @ rhs
            dzl = np.where(has_l, (rc_l - zl * dx) / sl, 0.0)
            dzu = np.where(has_u, (rc_u + zu * dx) / su, 0.0)
            return dx, dzl, dzu

        def step_len(v, dv, mask):
            neg = mask & (dv < 0.0)
            if not neg.any():
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        # predictor
        dx, dzl, dzu = newton(-sl * zl, -su * zu)
        ap = min(step_len(sl, dx, has_l), step_len(su, -dx, has_u))
        ad = min(step_len(zl, dzl, has_l), step_len(zu, dzu, has_u))
        mu_aff = (float(((sl + ap * dx) @ np.where(has_l, zl + ad * dzl, 0.0)))
                  + float(((su - ap * dx)
                           @ np.where(has_u, zu + ad * dzu, 0.0)))) / m
        sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0

        # corrector
        dx, dzl, dzu = newton(sigma * mu - sl * zl - dx * dzl,
                              sigma * mu - su * zu + dx * dzu)
        ap = 0.995 * min(step_len(sl, dx, has_l), step_len(su, -dx, has_u))
        ad = 0.995 * min(step_len(zl, dzl, has_l), step_len(zu, dzu, has_u))
        x = x + min(ap, 1.0) * dx
        zl = zl + min(ad, 1.0) * dzl
        zu = zu + min(ad, 1.0) * dzu

    x = np.clip(x, lb, ub)
    y = zu - zl
    return QpResult(x, y, status, it, 0.0, r_dual)
