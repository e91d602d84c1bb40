"""Maximal subcomputation volume psi(X) for one statement.

For per-variable range sizes R_t >= 1 we solve

    max  prod_t R_t   s.t.  sum_j prod_{t in S_j} R_t / d_j <= X

where S_j is the set of distinct iteration variables of input j and d_j an
optional divisor (output reuse).  With y_t = log R_t the objective is linear
and the constraint is a log-sum-exp of linear forms, so the problem is
convex; it is solved by a log-barrier Newton method.  Integer constraints are
relaxed, which can only enlarge psi and therefore keeps lower bounds sound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np
import sympy
from scipy.optimize import minimize

from .daap import Statement


class InfeasibleError(ValueError):
    """X is too small to hold a single element of every input."""


@dataclass(frozen=True)
class AccessTerm:
    variables: tuple[str, ...]
    divisor: float = 1.0
    label: str = ""

    @property
    def coefficient(self) -> float:
        return 0.0 if math.isinf(self.divisor) else 1.0 / self.divisor


@dataclass(frozen=True)
class PsiProblem:
    variables: tuple[str, ...]
    terms: tuple[AccessTerm, ...]

    @classmethod
    def from_statement(cls, statement: Statement, divisors: Mapping[int, float] | None = None) -> "PsiProblem":
        divisors = divisors or {}
        terms = tuple(
            AccessTerm(a.variables, float(divisors.get(j, 1.0)), str(a))
            for j, a in enumerate(statement.inputs)
        )
        return cls(statement.variables, terms)

    @property
    def active_terms(self) -> list[tuple[int, AccessTerm]]:
        return [(j, t) for j, t in enumerate(self.terms) if t.coefficient > 0]

    @property
    def min_budget(self) -> float:
        """Smallest X admitting a subcomputation (all ranges equal to one)."""
        return sum(t.coefficient for _, t in self.active_terms)

    @property
    def unbounded(self) -> bool:
        covered = {v for _, t in self.active_terms for v in t.variables}
        return not self.active_terms or any(v not in covered for v in self.variables)


@dataclass
class SubcompShape:
    range_sizes: dict[str, float]
    volume: float
    access_sizes: dict[int, float]

    def budget_used(self, problem: PsiProblem) -> float:
        return sum(self.access_sizes[j] * t.coefficient for j, t in problem.active_terms)


def _shape(problem: PsiProblem, y: Mapping[str, float]) -> SubcompShape:
    ranges = {v: math.exp(y[v]) for v in problem.variables}
    access = {j: math.exp(sum(y[v] for v in t.variables)) for j, t in enumerate(problem.terms)}
    return SubcompShape(ranges, math.exp(sum(y.values())), access)


def _logsumexp(z: np.ndarray) -> float:
    top = z.max()
    return float(top + math.log(np.exp(z - top).sum()))


def _barrier(A: np.ndarray, logc: np.ndarray, log_x: float, tol: float = 1e-12) -> np.ndarray:
    m, n = A.shape
    ones = np.ones(n)
    eps = 1.0
    while _logsumexp(A @ (eps * ones) + logc) >= log_x:
        eps *= 0.5
        if eps < 1e-14:
            return np.zeros(n)
    y = 0.5 * eps * ones

    def phi(y, t):
        s = log_x - _logsumexp(A @ y + logc)
        if s <= 0 or np.any(y <= 0):
            return math.inf
        return -t * y.sum() - math.log(s) - np.log(y).sum()

    t = 1.0
    while True:
        for _ in range(200):
            z = A @ y + logc
            lse = _logsumexp(z)
            p = np.exp(z - lse)
            s = log_x - lse
            gg = A.T @ p
            hg = (A.T * p) @ A - np.outer(gg, gg)
            grad = -t * ones + gg / s - 1.0 / y
            hess = hg / s + np.outer(gg, gg) / s**2 + np.diag(1.0 / y**2)
            try:
                dy = -np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                dy = -grad / np.diag(hess)
            dec = -grad @ dy
            if dec < 1e-10:
                break
            f0 = phi(y, t)
            step = 1.0
            while step > 1e-12:
                cand = y + step * dy
                fc = phi(cand, t)
                if fc <= f0 - 0.25 * step * dec:
                    break
                step *= 0.5
            else:
                break
            y = cand
        if (n + 1) / t < tol * max(1.0, y.sum()):
            break
        t *= 50.0
    return y


def _repair(A: np.ndarray, logc: np.ndarray, log_x: float, y: np.ndarray) -> np.ndarray:
    """Clamp to y >= 0 and pull back onto the feasible side of the budget."""
    y = np.where(y < 1e-10, 0.0, y)
    for _ in range(50):
        excess = _logsumexp(A @ y + logc) - log_x
        if excess <= 0:
            break
        y = np.maximum(y - max(excess, 1e-15), 0.0)
    return y


def _solve_log_space(A: np.ndarray, logc: np.ndarray, log_x: float) -> np.ndarray:
    """SQP on the convex log-space problem; barrier Newton if SQP does not converge."""
    n = A.shape[1]

    def budget(y):
        return log_x - _logsumexp(A @ y + logc)

    def budget_jac(y):
        z = A @ y + logc
        return -(A.T @ np.exp(z - z.max() - math.log(np.exp(z - z.max()).sum())))

    res = minimize(
        lambda y: -y.sum(),
        np.zeros(n),
        jac=lambda y: -np.ones(n),
        bounds=[(0.0, None)] * n,
        constraints=[{"type": "ineq", "fun": budget, "jac": budget_jac}],
        method="SLSQP",
        options={"ftol": 1e-15, "maxiter": 500},
    )
    # status 8 means the line search cannot improve at ftol, i.e. converged to precision
    y = res.x if res.status in (0, 8) and np.all(np.isfinite(res.x)) else _barrier(A, logc, log_x)
    y = _repair(A, logc, log_x, y)
    return _polish(A, logc, log_x, y)


def _polish(A: np.ndarray, logc: np.ndarray, log_x: float, y: np.ndarray) -> np.ndarray:
    """Newton steps on the KKT system of the free coordinates (budget active)."""
    free = y > 1e-9
    if not free.any():
        return y
    best = y
    for _ in range(20):
        z = A @ y + logc
        p = np.exp(z - _logsumexp(z))
        g = (A.T @ p)[free]
        H = ((A.T * p) @ A)[np.ix_(free, free)] - np.outer(g, g)
        lam = g.sum() / (g @ g)
        r = np.concatenate([1.0 - lam * g, [log_x - _logsumexp(z)]])
        if np.abs(r).max() < 1e-15:
            break
        k = int(free.sum())
        J = np.zeros((k + 1, k + 1))
        J[:k, :k] = -lam * H
        J[:k, k] = -g
        J[k, :k] = -g
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        cand = y.copy()
        cand[free] += step[:k]
        if np.any(cand[free] < 0):
            break
        cand = _repair(A, logc, log_x, cand)
        if cand.sum() < best.sum():
            break
        y = best = cand
    return best


def _water_fill(problem: PsiProblem, X: float) -> dict[str, float] | None:
    """Closed-form optimum when active inputs use pairwise disjoint variable sets."""
    active = problem.active_terms
    sets = [set(t.variables) for _, t in active]
    if sum(len(s) for s in sets) != len(set().union(*sets)):
        return None
    # maximize prod P_j s.t. sum c_j P_j <= X, P_j >= 1: equalize c_j P_j, clamping at 1
    fixed: set[int] = set()
    while True:
        free = [k for k in range(len(active)) if k not in fixed]
        budget = X - sum(active[k][1].coefficient for k in fixed)
        share = budget / len(free)
        low = [k for k in free if share / active[k][1].coefficient < 1.0]
        if not low:
            break
        fixed.update(low)
    y = {v: 0.0 for v in problem.variables}
    for k, (_, term) in enumerate(active):
        if k in fixed:
            continue
        logp = math.log(share / term.coefficient)
        for v in term.variables:
            y[v] = logp / len(term.variables)
    return y


def solve_psi(problem: PsiProblem | Statement, X: float, M: float | None = None) -> SubcompShape:
    """Maximizing subcomputation shape for dominator budget ``X``.

    ``M`` is accepted for interface symmetry; psi does not depend on it.
    """
    if isinstance(problem, Statement):
        problem = PsiProblem.from_statement(problem)
    if X <= 0:
        raise ValueError("X must be positive")
    if problem.unbounded:
        covered = {v for _, t in problem.active_terms for v in t.variables}
        ranges = {v: (1.0 if v in covered else math.inf) for v in problem.variables}
        access = {j: math.inf if any(ranges[v] == math.inf for v in t.variables) else 1.0
                  for j, t in enumerate(problem.terms)}
        return SubcompShape(ranges, math.inf, access)
    need = problem.min_budget
    if X < need * (1 - 1e-12):
        raise InfeasibleError(f"X={X:g} cannot hold one element of each input (needs {need:g})")
    y = _water_fill(problem, X)
    if y is None:
        if X <= need * (1 + 1e-12):
            y = {v: 0.0 for v in problem.variables}
        else:
            active = problem.active_terms
            A = np.array([[1.0 if v in t.variables else 0.0 for v in problem.variables] for _, t in active])
            logc = np.array([math.log(t.coefficient) for _, t in active])
            sol = _solve_log_space(A, logc, math.log(X))
            y = dict(zip(problem.variables, sol.tolist()))
    return _shape(problem, y)


def psi(problem: PsiProblem | Statement, X: float) -> float:
    return solve_psi(problem, X).volume


# --------------------------------------------------------------------------
# closed forms

X_SYM = sympy.Symbol("X", positive=True)


def _rational(x: float, max_den: int = 10_000, tol: float = 1e-9) -> Fraction | None:
    f = Fraction(x).limit_denominator(max_den)
    if abs(float(f) - x) <= tol * max(1.0, abs(x)):
        return f
    return None


def _radical(x: float, q: int) -> sympy.Expr | None:
    """Symbolic value of ``x`` if some small power of it is rational."""
    for k in (1, 2, 3, 4, 6):
        r = _rational(x ** (q * k))
        if r is not None:
            return sympy.Rational(r.numerator, r.denominator) ** sympy.Rational(1, q * k)
    return None


@dataclass
class ClosedForm:
    """psi(X) = alpha * (X - offset) ** exponent on the probed active set.

    ``term_fractions[j]`` is the share of the budget ``X - offset`` taken by
    input j, so its access size is ``fraction * (X - offset) * divisor``.
    """

    alpha: sympy.Expr
    offset: sympy.Expr
    exponent: sympy.Rational
    bound_vars: tuple[str, ...]
    term_fractions: dict[int, sympy.Expr] = field(default_factory=dict)

    @property
    def expr(self) -> sympy.Expr:
        return self.alpha * (X_SYM - self.offset) ** self.exponent

    def __call__(self, X: float) -> float:
        return float(self.alpha) * (X - float(self.offset)) ** float(self.exponent)

    def __str__(self) -> str:
        return str(self.expr)


def detect_closed_form(problem: PsiProblem, X_probe: float, rtol: float = 1e-8) -> ClosedForm | None:
    """Fit psi to alpha*(X-offset)^e using the active set found at ``X_probe``.

    With the range sizes at their lower bound fixed to one, the remaining
    terms are monomials in the free variables; when all share one degree d,
    scaling the free variables shows psi = alpha*(X-offset)^(f/d).
    """
    if problem.unbounded:
        return None
    shape = solve_psi(problem, X_probe)
    bound = tuple(v for v in problem.variables if shape.range_sizes[v] < 1 + 1e-7)
    free = [v for v in problem.variables if v not in bound]
    offset_num = 0.0
    degrees = set()
    for _, t in problem.active_terms:
        deg = sum(1 for v in t.variables if v in free)
        if deg == 0:
            offset_num += t.coefficient
        else:
            degrees.add(deg)
    if len(degrees) > 1:
        return None
    off = _rational(offset_num)
    if off is None:
        return None
    offset = sympy.Rational(off.numerator, off.denominator)
    span = X_probe - offset_num
    if span <= 0:
        return None
    if not free:
        exponent = sympy.Integer(0)
        alpha = sympy.Integer(1)
    else:
        d = degrees.pop()
        exponent = sympy.Rational(len(free), d)
        alpha = _radical(shape.volume / span ** float(exponent), exponent.q)
        if alpha is None:
            return None
    fractions = {}
    for j, t in problem.active_terms:
        share = shape.access_sizes[j] * t.coefficient
        if any(v in free for v in t.variables):
            fr = _rational(share / span)
            if fr is None:
                continue
            fractions[j] = sympy.Rational(fr.numerator, fr.denominator)
    cf = ClosedForm(alpha, offset, exponent, bound, fractions)
    for probe in (X_probe * 0.9, X_probe * 1.1, X_probe):
        if probe <= offset_num:
            continue
        try:
            ref = psi(problem, probe)
        except InfeasibleError:
            continue
        if abs(cf(probe) - ref) > rtol * ref:
            return None
    return cf


def problem_summary(problem: PsiProblem) -> str:
    parts = []
    for _, t in problem.active_terms:
        prod = "*".join(t.variables) or "1"
        parts.append(prod if t.divisor == 1 else f"{prod}/{t.divisor:g}")
    return " + ".join(parts) + " <= X"


def terms_for(problem: PsiProblem) -> Sequence[AccessTerm]:
    return [t for _, t in problem.active_terms]
