"""Primal-dual interior-point method for quadratically constrained programs.

Inequalities ``h(x) <= 0`` (including finite variable bounds) get slacks
``z > 0`` with ``h + z = 0``; the log-barrier on ``z`` is driven to zero
while Newton steps are taken on the perturbed KKT conditions.  The reduced
Newton system is

    [ Lxx + Jh' diag(mu/z) Jh    Jg' ] [dx  ]   [ -(Lx + Jh' (mu*h + gamma)/z) ]
    [ Jg                          0  ] [dlam] = [ -g                            ]

Because every function is at most quadratic, ``Lxx`` is the constant
multiplier-weighted sum precomputed by :class:`~stvs.optimizer.qcqp.QuadraticMap`.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .qcqp import NlpProblem

logger = logging.getLogger(__name__)


class Status(enum.Enum):
    OPTIMAL = "OPTIMAL"
    INFEASIBLE = "INFEASIBLE"
    MAX_ITER = "MAX_ITER"


@dataclass(frozen=True)
class Tolerances:
    kkt: float = 1e-6
    feasibility: float = 1e-8
    max_iter: int = 300
    gamma0: float = 0.1
    sigma: float = 0.2
    step_ratio: float = 0.99995
    min_step: float = 1e-10
    equal_steps: bool = True     # one step length for primal and dual; see README


@dataclass
class NlpSolution:
    x_star: np.ndarray
    objective: float
    max_constraint_violation: float
    kkt_residual: float
    iterations: int
    wall_time_s: float
    status: Status
    lam: np.ndarray = field(repr=False, default=None)
    mu: np.ndarray = field(repr=False, default=None)
    regularizations: int = 0
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def _inequality_system(problem: NlpProblem):
    """Stack constraint inequalities with finite variable bounds as rows of ``h``."""
    n = problem.n
    lo = np.flatnonzero(np.isfinite(problem.lb))
    hi = np.flatnonzero(np.isfinite(problem.ub))
    eye = sp.identity(n, format="csr")
    a_bounds = sp.vstack([-eye[lo], eye[hi]]).tocsr()
    k_bounds = np.r_[problem.lb[lo], -problem.ub[hi]]
    ineq = problem.ineq

    def h(x):
        return np.r_[ineq.value(x), a_bounds @ x + k_bounds]

    def jh(x):
        return sp.vstack([ineq.jacobian(x), a_bounds]).tocsr()

    return h, jh, ineq.m + len(lo) + len(hi)


def _kkt_scales(lx, lam, mu, z, x):
    grad = np.max(np.abs(lx), initial=0.0) / (1.0 + max(np.max(np.abs(lam), initial=0.0),
                                                         np.max(np.abs(mu), initial=0.0)))
    comp = float(z @ mu) / (1.0 + np.max(np.abs(x), initial=0.0)) if z.size else 0.0
    return max(grad, comp)


def solve_interior_point(problem: NlpProblem, x0: np.ndarray | None = None,
                         tol: Tolerances = Tolerances()) -> NlpSolution:
    t_start = time.perf_counter()
    n = problem.n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    h_fn, jh_fn, niq = _inequality_system(problem)
    eq, ineq, obj = problem.eq, problem.ineq, problem.objective
    neq = eq.m
    hess_obj = obj.hessian(np.ones(1))

    g = eq.value(x)
    h = h_fn(x)
    jg = eq.jacobian(x)
    jh = jh_fn(x)
    df = np.asarray(obj.jacobian(x).todense()).ravel()

    gamma = tol.gamma0
    lam = np.zeros(neq)
    z = np.ones(niq)
    big = h < -1.0
    z[big] = -h[big]
    mu = gamma / z
    mu = np.maximum(mu, 1e-2)

    lx = df + jg.T @ lam + jh.T @ mu
    n_reg = 0
    it = 0
    status = Status.MAX_ITER
    message = ""

    def violation():
        parts = [0.0]
        if neq:
            parts.append(np.max(np.abs(g)))
        if niq:
            parts.append(np.max(h))
        return float(max(parts))

    viol = violation()
    kkt = _kkt_scales(lx, lam, mu, z, x)
    while it < tol.max_iter:
        if viol <= tol.feasibility and kkt <= tol.kkt:
            status = Status.OPTIMAL
            break
        it += 1
        lxx = hess_obj + eq.hessian(lam) + _ineq_hessian(ineq, mu, niq)
        zinv = 1.0 / z
        jh_w = sp.diags(mu * zinv) @ jh
        m_mat = (lxx + jh.T @ jh_w).tocsc()
        rhs_x = -(lx + jh.T @ (zinv * (mu * h + gamma)))
        dx, dlam, used_reg = _solve_kkt(m_mat, jg, rhs_x, -g)
        n_reg += used_reg
        if dx is None:
            message = "KKT system could not be solved even with regularization"
            break
        dz = -h - z - jh @ dx
        dmu = -mu + zinv * (gamma - mu * dz)

        neg = dz < 0
        alpha_p = min(tol.step_ratio * np.min(-z[neg] / dz[neg]), 1.0) if np.any(neg) else 1.0
        neg = dmu < 0
        alpha_d = min(tol.step_ratio * np.min(-mu[neg] / dmu[neg]), 1.0) if np.any(neg) else 1.0

        if tol.equal_steps:
            alpha_p = alpha_d = min(alpha_p, alpha_d)
        x = x + alpha_p * dx
        z = z + alpha_p * dz
        lam = lam + alpha_d * dlam
        mu = mu + alpha_d * dmu
        if niq:
            gamma = tol.sigma * float(z @ mu) / niq

        g = eq.value(x)
        h = h_fn(x)
        jg = eq.jacobian(x)
        jh = jh_fn(x)
        df = np.asarray(obj.jacobian(x).todense()).ravel()
        lx = df + jg.T @ lam + jh.T @ mu
        viol = violation()
        kkt = _kkt_scales(lx, lam, mu, z, x)
        if not (np.all(np.isfinite(x)) and np.isfinite(kkt)):
            message = "iterate diverged"
            break
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug("it %3d f=%.8g viol=%.2e kkt=%.2e gamma=%.2e ap=%.3f ad=%.3f",
                         it, problem.f(x), viol, kkt, gamma, alpha_p, alpha_d)
    else:
        if viol <= tol.feasibility and kkt <= tol.kkt:
            status = Status.OPTIMAL

    if status is not Status.OPTIMAL:
        # x may be numerically non-finite after divergence; keep the report finite
        if viol > tol.feasibility or not np.isfinite(viol):
            status = Status.INFEASIBLE
            message = message or f"no feasible point found (violation {viol:.3e})"
        else:
            message = message or f"iteration limit {tol.max_iter} reached"
    return NlpSolution(
        x_star=x,
        objective=problem.f(x) if np.all(np.isfinite(x)) else float("nan"),
        max_constraint_violation=problem.violation(x) if np.all(np.isfinite(x)) else float("inf"),
        kkt_residual=float(kkt),
        iterations=it,
        wall_time_s=time.perf_counter() - t_start,
        status=status,
        lam=lam,
        mu=mu,
        regularizations=n_reg,
        message=message,
    )


def _ineq_hessian(ineq, mu, niq):
    # bound rows are linear; only the first ineq.m multipliers weight curvature
    return ineq.hessian(mu[: ineq.m])


def _solve_kkt(m_mat, jg, rhs_x, rhs_g):
    n = m_mat.shape[0]
    neq = jg.shape[0]
    reg = 0.0
    used = 0
    for attempt in range(8):
        top = m_mat + (reg * sp.identity(n, format="csc") if reg else 0)
        bottom = -reg * 1e-2 * sp.identity(neq, format="csc") if reg else None
        kkt = sp.bmat([[top, jg.T], [jg, bottom]], format="csc")
        rhs = np.r_[rhs_x, rhs_g]
        try:
            sol = spla.splu(kkt).solve(rhs)
        except RuntimeError:
            sol = None
        if sol is not None and np.all(np.isfinite(sol)):
            if used:
                logger.info("KKT system regularized with delta=%.1e", reg)
            return sol[:n], sol[n:], used
        reg = 1e-8 if reg == 0.0 else reg * 100.0
        used = 1
    return None, None, used
