"""Sequential and parallel I/O lower bounds for DAAP programs.

Per statement: rho(X) = psi(X) / (X - M) is minimized over X in (M, X_max];
the bound is Q_S >= |V_S| / rho.  Programs combine statements with two
corrections: shared pure inputs (reuse subtracted) and producer/consumer
pairs (consumer access terms shrunk by the producer's intensity).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import sympy

from .daap import Program, Statement, iteration_count, volume_expr
from .psi import (
    ClosedForm,
    InfeasibleError,
    PsiProblem,
    SubcompShape,
    X_SYM,
    detect_closed_form,
    solve_psi,
)

log = logging.getLogger(__name__)

M_SYM = sympy.Symbol("M", positive=True)
P_SYM = sympy.Symbol("P", positive=True, integer=True)

X_MAX_FACTOR = 100.0
GRID_POINTS = 48
GOLDEN_RTOL = 1e-9


def param_symbol(name: str) -> sympy.Symbol:
    # matches the symbols produced by daap.volume_expr
    return sympy.Symbol(name, positive=True, integer=True)


# --------------------------------------------------------------------------
# psi evaluation with an over-approximating fallback


def psi_hat(problem: PsiProblem, X: float) -> float:
    """Cheap upper bound on psi: each range capped by the loosest term holding it."""
    total = 1.0
    for v in problem.variables:
        caps = [X / t.coefficient for _, t in problem.active_terms if v in t.variables]
        total *= min(caps) if caps else math.inf
    return total


def _psi_value(problem: PsiProblem, X: float) -> float:
    try:
        value = solve_psi(problem, X).volume
    except (np.linalg.LinAlgError, FloatingPointError, OverflowError):
        value = math.nan
    if not math.isfinite(value) and not problem.unbounded:
        log.warning("psi solver failed at X=%g; using over-approximation", X)
        return psi_hat(problem, X)
    return value


# --------------------------------------------------------------------------
# X0 search


@dataclass
class X0Result:
    x0: float
    rho: float
    boundary: bool = False
    unimodal: bool = True
    closed_form: ClosedForm | None = None
    x0_expr: sympy.Expr | None = None
    rho_expr: sympy.Expr | None = None
    notes: list[str] = field(default_factory=list)

    def __iter__(self):
        # allows ``x0, rho = find_x0(...)``
        return iter((self.x0, self.rho))


def _as_problem(obj: Statement | PsiProblem) -> PsiProblem:
    return obj if isinstance(obj, PsiProblem) else PsiProblem.from_statement(obj)


def rho_at(problem: PsiProblem, X: float, M: float) -> float:
    if X <= M:
        return math.inf
    try:
        return _psi_value(problem, X) / (X - M)
    except InfeasibleError:
        return math.inf


def _golden(f, a: float, b: float, rtol: float) -> float:
    inv = (math.sqrt(5) - 1) / 2
    c, d = b - inv * (b - a), a + inv * (b - a)
    fc, fd = f(c), f(d)
    while b - a > rtol * max(abs(a), abs(b)):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = f(d)
    return (a + b) / 2


def _closed_rho(cf: ClosedForm, M: float, x_max_factor: float):
    """Symbolic (X0, rho) in M for psi = alpha (X - C0)^e."""
    e, c0 = cf.exponent, cf.offset
    if e > 1 and M > float(c0):
        x0 = (e * M_SYM - c0) / (e - 1)
    else:
        x0 = x_max_factor * M_SYM
    rho = sympy.simplify(cf.expr.subs(X_SYM, x0) / (x0 - M_SYM))
    return x0, rho


def find_x0(
    statement: Statement | PsiProblem,
    M: float,
    *,
    x_max: float | None = None,
    grid_points: int = GRID_POINTS,
) -> X0Result:
    """Minimize rho(X) = psi(X)/(X - M) over (M, x_max]."""
    if M < 1:
        raise ValueError("M must be at least 1")
    problem = _as_problem(statement)
    x_max = X_MAX_FACTOR * M if x_max is None else float(x_max)
    if problem.unbounded:
        return X0Result(x_max, math.inf, notes=["no loads bound the subcomputation; rho is infinite"])
    lo = max(M, problem.min_budget)
    if x_max <= lo:
        raise InfeasibleError(f"X_max={x_max:g} leaves no room above M and the input minimum {lo:g}")

    fractions = np.logspace(-4, 0, grid_points)
    grid = lo + (x_max - lo) * fractions
    vals = np.array([rho_at(problem, x, M) for x in grid])
    k = int(np.argmin(vals))
    notes = []
    scale = max(1.0, float(vals[k]))
    before = np.diff(vals[: k + 1])
    after = np.diff(vals[k:])
    unimodal = bool(np.all(before <= 1e-10 * scale) and np.all(after >= -1e-10 * scale))
    f = lambda x: rho_at(problem, x, M)
    if not unimodal:
        notes.append("rho(X) is not unimodal on the scan grid; using the global grid minimum")
        log.warning("statement rho(X) not unimodal; falling back to grid minimum")
        x0, rho, boundary = float(grid[k]), float(vals[k]), k == len(grid) - 1
    elif k == len(grid) - 1:
        x0, rho, boundary = x_max, float(vals[k]), True
        notes.append("rho decreases up to X_max; value is cap-dominated")
    else:
        a = float(grid[k - 1]) if k > 0 else lo
        x0 = _golden(f, a, float(grid[k + 1]), GOLDEN_RTOL)
        rho, boundary = f(x0), False

    result = X0Result(x0, rho, boundary, unimodal, notes=notes)
    if unimodal:
        cf = detect_closed_form(problem, x0)
        if cf is not None:
            x0_expr, rho_expr = _closed_rho(cf, M, x_max / M)
            rho_cf = float(rho_expr.subs(M_SYM, M))
            x0_cf = float(x0_expr.subs(M_SYM, M))
            # the analytic minimum must agree with the numeric search
            if rho_cf <= rho * (1 + 1e-9) and abs(rho_cf - rho) <= 1e-6 * rho and x0_cf <= x_max * (1 + 1e-12):
                result.closed_form = cf
                result.x0, result.rho = x0_cf, rho_cf
                result.x0_expr, result.rho_expr = x0_expr, rho_expr
                result.boundary = boundary
    return result


# --------------------------------------------------------------------------
# out-degree-one rule


def outdegree_one_bound(statement: Statement, program: Program | None = None) -> int | None:
    """Number u of inputs whose every element feeds exactly one computation.

    An input counts when its access covers all loop variables (one element
    per iteration point) and either it is marked ``@outdeg1`` or it is a
    pure program input read by exactly one access in the whole program.
    Returns ``None`` when u = 0; otherwise rho <= 1/u.
    """
    u = 0
    for a in statement.inputs:
        if a.access_dim != statement.depth:
            continue
        if a.array in statement.outdeg1:
            u += 1
        elif program is not None and program.is_pure_input(a.array) and len(program.readers_of(a.array)) == 1:
            u += 1
    return u or None


# --------------------------------------------------------------------------
# statement bounds


@dataclass
class StatementBound:
    statement: str
    x0: float
    rho: float
    rho_opt: float
    rho_cap: float | None
    u: int | None
    volume: int | None
    volume_expr: sympy.Expr
    q_lower: float | None
    shape: SubcompShape | None
    closed_form: ClosedForm | None = None
    rho_expr: sympy.Expr | None = None
    q_expr: sympy.Expr | None = None
    divisors: dict[int, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    problem: PsiProblem | None = None

    def psi(self, X: float) -> float:
        if self.closed_form is not None and X >= float(self.closed_form.offset):
            return self.closed_form(X)
        return _psi_value(self.problem, X)

    @property
    def capped(self) -> bool:
        return self.rho_cap is not None and self.rho_cap < self.rho_opt

    def to_dict(self) -> dict:
        def num(x):
            return None if x is None else (x if math.isfinite(x) else "inf")

        return {
            "statement": self.statement,
            "psi_closed_form": None if self.closed_form is None else str(self.closed_form),
            "x0": num(self.x0),
            "rho": num(self.rho),
            "rho_uncapped": num(self.rho_opt),
            "rho_cap": self.rho_cap,
            "u": self.u,
            "rho_expr": None if self.rho_expr is None else str(self.rho_expr),
            "volume": self.volume,
            "volume_expr": str(self.volume_expr),
            "q": num(self.q_lower),
            "q_expr": None if self.q_expr is None else str(self.q_expr),
            "divisors": {str(k): num(v) for k, v in self.divisors.items()},
            "notes": list(self.notes),
        }


def statement_bound(
    statement: Statement,
    M: float,
    params: Mapping[str, int] | None = None,
    *,
    program: Program | None = None,
    divisors: Mapping[int, float] | None = None,
    x_max: float | None = None,
) -> StatementBound:
    """Q_S >= |V_S| / rho with rho the smaller of the optimized and capped intensities."""
    parameters = program.parameters if program is not None else None
    names = list(parameters) if parameters is not None else sorted(
        {a.base for lp in statement.loop_nest for a in (lp.range.lower, lp.range.upper) if a.base}
        - set(statement.variables)
    )
    problem = PsiProblem.from_statement(statement, divisors)
    res = find_x0(problem, M, x_max=x_max)
    u = outdegree_one_bound(statement, program)
    cap = None if u is None else 1.0 / u
    rho = res.rho if cap is None else min(res.rho, cap)
    notes = list(res.notes)
    rho_expr = res.rho_expr
    if cap is not None and cap < res.rho:
        rho_expr = sympy.Rational(1, u)
        notes.append(f"out-degree-one cap rho <= 1/{u} binds")
    vexpr = volume_expr(statement, names)
    volume = None
    if params is not None:
        volume = iteration_count(statement, params, parameters=names)
    if math.isinf(rho):
        q = 0.0 if volume is not None else None
        q_expr = sympy.Integer(0)
    else:
        q = None if volume is None else volume / rho
        q_expr = None if rho_expr is None else sympy.simplify(vexpr / rho_expr)
    shape = None
    if not problem.unbounded and math.isfinite(res.x0):
        shape = solve_psi(problem, res.x0)
    return StatementBound(
        statement=statement.id,
        x0=res.x0,
        rho=rho,
        rho_opt=res.rho,
        rho_cap=cap,
        u=u,
        volume=volume,
        volume_expr=vexpr,
        q_lower=q,
        shape=shape,
        closed_form=res.closed_form,
        rho_expr=rho_expr,
        q_expr=q_expr,
        divisors=dict(divisors or {}),
        notes=notes,
        problem=problem,
    )


# --------------------------------------------------------------------------
# reuse corrections


@dataclass
class ReuseRecord:
    kind: str  # "input-overlap" or "output-overlap"
    arrays: tuple[str, ...]
    statements: tuple[str, ...]
    amount: float | None = None
    amount_expr: sympy.Expr | None = None
    rho_producer: float | None = None

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "arrays": list(self.arrays), "statements": list(self.statements)}
        if self.kind == "input-overlap":
            out["amount"] = self.amount
            out["amount_expr"] = None if self.amount_expr is None else str(self.amount_expr)
        else:
            r = self.rho_producer
            out["rho_producer"] = r if r is None or math.isfinite(r) else "inf"
        return out


def _topological(program: Program) -> list[str] | None:
    order: list[str] = []
    indeg = {s.id: 0 for s in program.statements}
    succ: dict[str, list[str]] = {s.id: [] for s in program.statements}
    for e in program.producer_consumer:
        if e.producer == e.consumer:
            continue
        succ[e.producer].append(e.consumer)
        indeg[e.consumer] += 1
    ready = [s.id for s in program.statements if indeg[s.id] == 0]
    while ready:
        sid = ready.pop(0)
        order.append(sid)
        for t in succ[sid]:
            indeg[t] -= 1
            if indeg[t] == 0:
                ready.append(t)
    return order if len(order) == len(indeg) else None


def output_reuse(
    program: Program,
    M: float,
    params: Mapping[str, int] | None = None,
    *,
    x_max: float | None = None,
) -> tuple[dict[str, StatementBound], list[ReuseRecord], list[str]]:
    """Statement bounds with consumer access terms divided by max(1, rho_producer)."""
    notes: list[str] = []
    order = _topological(program)
    if order is None:
        notes.append("cyclic producer/consumer chain; output reuse not applied")
        bounds = {s.id: statement_bound(s, M, params, program=program, x_max=x_max) for s in program.statements}
        return bounds, [], notes
    bounds: dict[str, StatementBound] = {}
    records: list[ReuseRecord] = []
    for sid in order:
        stmt = program.statement(sid)
        divisors: dict[int, float] = {}
        for e in program.producer_consumer:
            if e.consumer != sid or e.producer == sid:
                continue
            rho_p = bounds[e.producer].rho
            d = max(1.0, rho_p)
            for j, a in enumerate(stmt.inputs):
                if a.array == e.array:
                    # several producers: the largest divisor keeps the bound sound
                    divisors[j] = max(divisors.get(j, 1.0), d)
            records.append(ReuseRecord("output-overlap", (e.array,), (e.producer, sid), rho_producer=rho_p))
        divisors = {j: d for j, d in divisors.items() if d != 1.0}
        bounds[sid] = statement_bound(stmt, M, params, program=program, divisors=divisors, x_max=x_max)
    return bounds, records, notes


def input_reuse(
    program: Program,
    M: float,
    params: Mapping[str, int] | None = None,
    *,
    bounds: Mapping[str, StatementBound] | None = None,
    x_max: float | None = None,
) -> list[ReuseRecord]:
    """Reuse of pure input arrays read by two or more statements."""
    if bounds is None:
        bounds = {s.id: statement_bound(s, M, params, program=program, x_max=x_max) for s in program.statements}
    records = []
    arrays = sorted({a.array for s in program.statements for a in s.inputs if program.is_pure_input(a.array)})
    for array in arrays:
        readers = [s for s in program.statements if any(a.array == array for a in s.inputs)]
        if len(readers) < 2:
            continue
        amounts, exprs = [], []
        for s in readers:
            b = bounds[s.id]
            if b.shape is None or not math.isfinite(b.shape.volume):
                amounts = []
                break
            j = next(k for k, a in enumerate(s.inputs) if a.array == array)
            access = b.shape.access_sizes[j]
            if b.volume is not None:
                amounts.append(access * b.volume / b.shape.volume)
            cf = b.closed_form
            if cf is not None and j in cf.term_fractions and b.rho_expr is not None and not b.capped:
                x0 = (cf.exponent * M_SYM - cf.offset) / (cf.exponent - 1) if cf.exponent > 1 else None
                if x0 is not None:
                    div = sympy.nsimplify(b.divisors.get(j, 1.0))
                    acc = cf.term_fractions[j] * (x0 - cf.offset) * div
                    exprs.append(sympy.simplify(acc * b.volume_expr / cf.expr.subs(X_SYM, x0)))
        if not amounts and params is not None:
            continue
        amount = min(amounts) if amounts else None
        expr = None
        if exprs and len(exprs) == len(readers):
            expr = sympy.Min(*exprs) if len(exprs) > 1 else exprs[0]
            expr = sympy.simplify(expr)
            if params is not None:
                amount = substitute(expr, M=M, **params)
        records.append(ReuseRecord("input-overlap", (array,), tuple(s.id for s in readers), amount, expr))
    return records


# --------------------------------------------------------------------------
# whole program


@dataclass
class BoundReport:
    per_statement: list[StatementBound]
    reuse: list[ReuseRecord]
    q_sequential: float | None
    q_parallel: float | None
    P: int
    M: float
    params: dict[str, int]
    q_sequential_expr: sympy.Expr | None = None
    q_parallel_expr: sympy.Expr | None = None
    notes: list[str] = field(default_factory=list)

    def statement(self, sid: str) -> StatementBound:
        for b in self.per_statement:
            if b.statement == sid:
                return b
        raise KeyError(sid)

    def to_dict(self) -> dict:
        return {
            "memory": self.M,
            "ranks": self.P,
            "params": dict(self.params),
            "per_statement": [b.to_dict() for b in self.per_statement],
            "reuse": [r.to_dict() for r in self.reuse],
            "q_sequential": self.q_sequential,
            "q_parallel": self.q_parallel,
            "q_sequential_expr": None if self.q_sequential_expr is None else str(self.q_sequential_expr),
            "q_parallel_expr": None if self.q_parallel_expr is None else str(self.q_parallel_expr),
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def program_bound(
    program: Program,
    M: float,
    P: int = 1,
    params: Mapping[str, int] | None = None,
    *,
    x_max: float | None = None,
) -> BoundReport:
    """Total lower bound: sum of statement bounds minus shared-input reuse, split over P ranks."""
    if P < 1:
        raise ValueError("P must be at least 1")
    bounds, out_records, notes = output_reuse(program, M, params, x_max=x_max)
    in_records = input_reuse(program, M, params, bounds=bounds, x_max=x_max)
    ordered = [bounds[s.id] for s in program.statements]

    q_seq = None
    if params is not None:
        qs = [b.q_lower for b in ordered]
        total = sum(qs) - sum(r.amount for r in in_records if r.amount is not None)
        best = max(qs, default=0.0)
        if total < best:
            notes.append("reuse exceeded the remaining volume; total clamped to the largest statement bound")
        q_seq = max(total, best)

    q_seq_expr = None
    if all(b.q_expr is not None for b in ordered) and all(r.amount_expr is not None for r in in_records):
        q_seq_expr = sympy.simplify(
            sum((b.q_expr for b in ordered), sympy.Integer(0)) - sum((r.amount_expr for r in in_records), sympy.Integer(0))
        )
    return BoundReport(
        per_statement=ordered,
        reuse=out_records + in_records,
        q_sequential=q_seq,
        q_parallel=None if q_seq is None else q_seq / P,
        P=P,
        M=M,
        params=dict(params or {}),
        q_sequential_expr=q_seq_expr,
        q_parallel_expr=None if q_seq_expr is None else sympy.simplify(q_seq_expr / P_SYM),
        notes=notes,
    )


def leading_term(expr: sympy.Expr, var: str | sympy.Symbol = "N") -> sympy.Expr:
    """Highest-degree term of ``expr`` in ``var``."""
    sym = param_symbol(var) if isinstance(var, str) else var
    poly = sympy.Poly(sympy.expand(expr), sym)
    deg = poly.degree()
    return sympy.simplify(poly.coeff_monomial(sym**deg) * sym**deg)


def substitute(expr: sympy.Expr, M: float | None = None, P: int | None = None, **params: int) -> float:
    subs = {param_symbol(k): v for k, v in params.items()}
    if M is not None:
        subs[M_SYM] = M
    if P is not None:
        subs[P_SYM] = P
    return float(expr.subs(subs))


def sweep_memory(program: Program, memories: Sequence[float], P: int, params: Mapping[str, int]) -> list[float]:
    return [program_bound(program, m, P, params).q_parallel for m in memories]
