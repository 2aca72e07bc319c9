"""Sparse representation of quadratically constrained programs.

Every function here is at most degree two, so the Lagrangian Hessian is a
fixed linear map of the multipliers.  :class:`QuadraticMap` precomputes that
map once; evaluating the Hessian is then a single sparse mat-vec.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class Expr:
    """Scalar quadratic expression ``const + sum c_i x_i + sum c_ij x_i x_j``."""

    __slots__ = ("const", "lin", "quad")

    def __init__(self, const=0.0, lin=None, quad=None):
        self.const = float(const)
        self.lin = defaultdict(float, lin or {})
        self.quad = defaultdict(float, quad or {})

    def add(self, other: "Expr", scale: float = 1.0) -> "Expr":
        self.const += scale * other.const
        for i, c in other.lin.items():
            self.lin[i] += scale * c
        for ij, c in other.quad.items():
            self.quad[ij] += scale * c
        return self

    def term(self, i: int, c: float) -> "Expr":
        self.lin[i] += c
        return self

    def bilinear(self, i: int, j: int, c: float) -> "Expr":
        key = (i, j) if i <= j else (j, i)
        self.quad[key] += c
        return self

    def value(self, x: np.ndarray) -> float:
        v = self.const
        for i, c in self.lin.items():
            v += c * x[i]
        for (i, j), c in self.quad.items():
            v += c * x[i] * x[j]
        return v


def var(i: int, c: float = 1.0) -> Expr:
    return Expr(lin={i: c})


def const(c: float) -> Expr:
    return Expr(const=c)


class QuadraticMap:
    """Vector of quadratic functions ``r(x) = k + A x + q(x)`` with ``m`` rows."""

    def __init__(self, n: int, exprs):
        self.n = n
        self.m = len(exprs)
        k = np.zeros(self.m)
        lr, lc, lv = [], [], []
        qr, qi, qj, qv = [], [], [], []
        for r, e in enumerate(exprs):
            k[r] = e.const
            for i, c in e.lin.items():
                if c != 0.0:
                    lr.append(r)
                    lc.append(i)
                    lv.append(c)
            for (i, j), c in e.quad.items():
                if c != 0.0:
                    qr.append(r)
                    qi.append(i)
                    qj.append(j)
                    qv.append(c)
        self.k = k
        self.A = sp.csr_matrix((lv, (lr, lc)), shape=(self.m, n))
        self.qr = np.array(qr, dtype=int)
        self.qi = np.array(qi, dtype=int)
        self.qj = np.array(qj, dtype=int)
        self.qv = np.array(qv, dtype=float)
        # Jacobian pattern: linear entries, then d/dx_i (c x_j), then d/dx_j (c x_i)
        self._jr = np.r_[np.asarray(lr, dtype=int), self.qr, self.qr]
        self._jc = np.r_[np.asarray(lc, dtype=int), self.qi, self.qj]
        self._jlin = np.asarray(lv, dtype=float)
        # Hessian pattern and multiplier map
        hi = np.r_[self.qi, self.qj]
        hj = np.r_[self.qj, self.qi]
        coef = np.r_[self.qv, self.qv]
        rows = np.r_[self.qr, self.qr]
        keys = hi.astype(np.int64) * n + hj
        uniq, pos = np.unique(keys, return_inverse=True)
        self.h_rows = (uniq // n).astype(int)
        self.h_cols = (uniq % n).astype(int)
        self.h_map = sp.csr_matrix((coef, (pos, rows)), shape=(len(uniq), self.m))

    def value(self, x: np.ndarray) -> np.ndarray:
        out = self.k + self.A @ x
        if self.qv.size:
            out += np.bincount(self.qr, weights=self.qv * x[self.qi] * x[self.qj], minlength=self.m)
        return out

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        data = np.r_[self._jlin, self.qv * x[self.qj], self.qv * x[self.qi]]
        return sp.csr_matrix((data, (self._jr, self._jc)), shape=(self.m, self.n))

    def hessian(self, w: np.ndarray) -> sp.csr_matrix:
        """Hessian of ``w . r(x)``; independent of ``x`` by construction."""
        data = self.h_map @ w
        return sp.csr_matrix((data, (self.h_rows, self.h_cols)), shape=(self.n, self.n))

    def hessian_of_row(self, r: int) -> sp.csr_matrix:
        w = np.zeros(self.m)
        w[r] = 1.0
        return self.hessian(w)


@dataclass
class NlpProblem:
    """``min f(x)  s.t.  g(x) = 0,  h(x) <= 0,  lb <= x <= ub`` with quadratic f, g, h."""

    names: list
    lb: np.ndarray
    ub: np.ndarray
    objective: QuadraticMap
    eq: QuadraticMap
    ineq: QuadraticMap
    eq_labels: list = field(default_factory=list)
    ineq_labels: list = field(default_factory=list)
    layout: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.names)

    def f(self, x):
        return float(self.objective.value(x)[0])

    def grad(self, x):
        return np.asarray(self.objective.jacobian(x).todense()).ravel()

    def violation(self, x) -> float:
        g = self.eq.value(x)
        h = self.ineq.value(x)
        parts = [0.0]
        if g.size:
            parts.append(np.max(np.abs(g)))
        if h.size:
            parts.append(np.max(h))
        parts.append(np.max(self.lb - x, initial=0.0))
        parts.append(np.max(x - self.ub, initial=0.0))
        return float(max(parts))


class ProblemBuilder:
    """Incrementally declares variables and constraints, then freezes them into an :class:`NlpProblem`."""

    def __init__(self):
        self.names = []
        self.lb = []
        self.ub = []
        self.eqs = []
        self.eq_labels = []
        self.ineqs = []
        self.ineq_labels = []
        self.obj = Expr()

    def add_var(self, name: str, lb: float = -np.inf, ub: float = np.inf) -> int:
        self.names.append(name)
        self.lb.append(lb)
        self.ub.append(ub)
        return len(self.names) - 1

    def add_eq(self, expr: Expr, label: str) -> None:
        self.eqs.append(expr)
        self.eq_labels.append(label)

    def add_ineq(self, expr: Expr, label: str) -> None:
        self.ineqs.append(expr)
        self.ineq_labels.append(label)

    def build(self, layout=None, meta=None) -> NlpProblem:
        n = len(self.names)
        return NlpProblem(
            names=list(self.names),
            lb=np.array(self.lb, dtype=float),
            ub=np.array(self.ub, dtype=float),
            objective=QuadraticMap(n, [self.obj]),
            eq=QuadraticMap(n, self.eqs),
            ineq=QuadraticMap(n, self.ineqs),
            eq_labels=list(self.eq_labels),
            ineq_labels=list(self.ineq_labels),
            layout=layout or {},
            meta=meta or {},
        )
