"""Acceptance suite: one test (and one PASS/FAIL line) per criterion check."""

import math
import time

import numpy as np
import pytest
import sympy

from iolab import parse_program, program_bound, programs
from iolab.bounds import M_SYM, P_SYM, find_x0, leading_term, param_symbol
from iolab.conflux import factorize, partial_pivot_order, random_matrix, step_model
from iolab.models import eval_model, sweep
from iolab.pebble import (
    CDag,
    Schedule,
    ScheduleError,
    gen_lu_cdag,
    greedy_schedule,
    min_io_search,
    program_cdag,
    random_schedule,
    validate_schedule,
)

N = param_symbol("N")
C2 = 6.0  # lower-order constant of the per-step model, fixed once for criterion 7


# -- 1. LU bound ---------------------------------------------------------------


@pytest.fixture(scope="module")
def lu_report():
    t0 = time.perf_counter()
    rep = program_bound(parse_program(programs.LU), 4096, 1, {"N": 1024})
    return rep, time.perf_counter() - t0


def test_c1_lu_rho(lu_report, report):
    rep, _ = lu_report
    r1, r2 = rep.statement("S1").rho, rep.statement("S2").rho
    ok = math.isclose(r1, 1.0, rel_tol=1e-9) and math.isclose(r2, math.sqrt(4096) / 2, rel_tol=1e-9)
    report("C1 LU rho_S1 = 1, rho_S2 = sqrt(M)/2", ok, f"rho_S1={r1:.12g} rho_S2={r2:.12g}")


def test_c1_lu_symbolic(lu_report, report):
    rep, _ = lu_report
    q = rep.q_parallel_expr
    lead = leading_term(q, "N")
    s1 = sympy.simplify(rep.statement("S1").q_expr / P_SYM)
    ok = (
        sympy.simplify(lead - 2 * N**3 / (3 * P_SYM * sympy.sqrt(M_SYM))) == 0
        and sympy.simplify(s1 - N * (N - 1) / (2 * P_SYM)) == 0
    )
    report("C1 LU symbolic: leading 2N^3/(3P sqrt M), S1 term N(N-1)/(2P)", ok, f"q={q}")


def test_c1_lu_numeric(lu_report, report):
    rep, _ = lu_report
    n, m, p = 1024, 4096, 1
    closed = 2 * n**3 / (3 * p * math.sqrt(m)) + n * (n - 1) / (2 * p)
    rel = abs(rep.q_parallel - closed) / closed
    report("C1 LU numeric at (1024, 4096, 1) within 1e-6 of closed form", rel <= 1e-6,
           f"engine={rep.q_parallel:.2f} closed={closed:.2f} rel={rel:.3e}")


def test_c1_lu_runtime(lu_report, report):
    _, elapsed = lu_report
    report("C1 LU bound runtime < 5 s", elapsed < 5.0, f"{elapsed:.2f} s")


# -- 2. shared input -------------------------------------------------------------


def test_c2_shared_input_symbolic(report):
    rep = program_bound(parse_program(programs.SHARED_INPUT), 64, 1)
    target = N**3 / M_SYM
    s, t = rep.statement("S"), rep.statement("T")
    reuse = [r for r in rep.reuse if r.kind == "input-overlap"]
    ok = (
        all(sympy.simplify(b.q_expr - target) == 0 for b in (s, t))
        and all(sympy.simplify(b.rho_expr - M_SYM) == 0 for b in (s, t))
        and len(reuse) == 1 and reuse[0].arrays == ("B",)
        and sympy.simplify(reuse[0].amount_expr - target) == 0
        and sympy.simplify(rep.q_sequential_expr - target) == 0
    )
    report("C2 shared input: Q_S = Q_T = Reuse(B) = Q_tot = N^3/M (symbolic)", ok,
           f"Q_tot={rep.q_sequential_expr}")


@pytest.mark.parametrize("M", [16, 64, 256])
def test_c2_shared_input_numeric(M, report):
    n = 64
    prog = parse_program(programs.SHARED_INPUT)
    rep = program_bound(prog, M, 1, {"N": n})
    x0 = find_x0(prog.statement("S"), M)
    s = rep.statement("S")
    reuse = next(r for r in rep.reuse if r.kind == "input-overlap")
    target = n**3 / M
    ok = (
        math.isclose(x0.x0, 2 * M, rel_tol=1e-9)
        and math.isclose(s.rho, M, rel_tol=1e-9)
        and math.isclose(s.q_lower, target, rel_tol=1e-9)
        and math.isclose(reuse.amount, target, rel_tol=1e-9)
        and math.isclose(rep.q_sequential, target, rel_tol=1e-9)
    )
    report(f"C2 shared input numeric at M={M}", ok,
           f"X0={x0.x0:g} rho={s.rho:g} Q_S={s.q_lower:g} reuse={reuse.amount:g} Q_tot={rep.q_sequential:g}")


# -- 3. output reuse ---------------------------------------------------------------


def test_c3_output_reuse(report):
    prog = parse_program(programs.ON_THE_FLY)
    rep = program_bound(prog, 64, 1)
    s = rep.statement("S")
    num = program_bound(prog, 64, 1, {"N": 32})
    ok = (
        sympy.simplify(rep.q_sequential_expr - N**3 / M_SYM) == 0
        and s.q_expr == 0 and math.isinf(s.rho)
        and num.q_sequential == 32**3 / 64
    )
    report("C3 output reuse: Q_{T+S} = N^3/M with the generated-array term removed", ok,
           f"Q={rep.q_sequential_expr} Q_S={s.q_expr}")


# -- 4. oracle sandwich ----------------------------------------------------------------

SANDWICH = [
    ("lu", 3),
    ("elementwise", 3),
    ("stream", 4),
    ("matrix_row_vector", 2),
    ("reduction", 6),
    ("outer_product", 3),
]


@pytest.mark.parametrize("M", [3, 4, 6])
@pytest.mark.parametrize("name,n", SANDWICH)
def test_c4_oracle_sandwich(name, n, M, report):
    if name == "lu":
        prog, cdag = parse_program(programs.LU), gen_lu_cdag(n)
    else:
        prog = parse_program(programs.ALL[name])
        cdag = program_cdag(prog, {"N": n})
    bound = program_bound(prog, M, 1, {"N": n}).q_sequential
    t0 = time.perf_counter()
    found = min_io_search(cdag, M)
    elapsed = time.perf_counter() - t0
    label = f"C4 sandwich {name}(N={n}) M={M}"
    if not found.feasible:
        # no valid schedule exists, so the schedule side of the sandwich is empty
        with pytest.raises(ValueError):
            greedy_schedule(cdag, M)
        report(label, elapsed < 60, f"bound={bound:.4g}, no schedule fits (max in-degree {cdag.max_in_degree})")
        return
    replays = [validate_schedule(cdag, found.schedule, M).q, validate_schedule(cdag, greedy_schedule(cdag, M), M).q]
    replays += [validate_schedule(cdag, random_schedule(cdag, M, seed=s), M).q for s in range(20)]
    ok = found.optimal and bound <= found.q <= min(replays) and elapsed < 60
    report(label, ok, f"bound={bound:.4g} opt={found.q} best_schedule={min(replays)} search={elapsed:.1f}s")


# -- 5-7. COnfLUX ----------------------------------------------------------------------


@pytest.mark.parametrize("c", [1, 2])
@pytest.mark.parametrize("n,P", [(128, 4), (256, 8), (512, 16)])
def test_c5_conflux_residual(n, P, c, report):
    res = factorize(n, P, c=c, seed=n + P + c)
    report(f"C5 residual N={n} P={P} c={c} below 1e-10", res.residual < 1e-10,
           f"residual={res.residual:.2e} grid={list(res.grid.grid)}")


@pytest.fixture(scope="module")
def scaling_runs():
    return {n: factorize(n, 16, n * n // 16, c=1, v=32, seed=7) for n in (256, 512, 1024)}


def _ratio(res):
    return res.max_received / (res.N**3 / (res.grid.P * math.sqrt(res.M)))


def test_c6_ratio_in_band(scaling_runs, report):
    res = scaling_runs[1024]
    r = _ratio(res)
    report("C6 measured/model at (1024, 16, 1) in [1, 3]", 1 <= r <= 3 and res.grid.grid == (4, 4, 1), f"ratio={r:.4f}")


def test_c6_ratio_non_increasing(scaling_runs, report):
    ratios = [_ratio(scaling_runs[n]) for n in (256, 512, 1024)]
    ok = all(a >= b for a, b in zip(ratios, ratios[1:]))
    report("C6 ratio non-increasing over N = 256, 512, 1024", ok, " ".join(f"{r:.4f}" for r in ratios))


def test_c7_step_model(scaling_runs, report):
    worst = 0.0
    for res in scaling_runs.values():
        for t, measured in enumerate(res.step_costs()):
            worst = max(worst, measured / step_model(res.N, res.grid.v, t, res.grid.P, res.M, C2))
    report(f"C7 every step <= 1.5 x model (c2 = {C2})", worst <= 1.5, f"worst measured/model={worst:.4f}")


# -- 8. models ---------------------------------------------------------------------------


def test_c8_candmc_ratio(report):
    rng = np.random.default_rng(8)
    bad = []
    for _ in range(100):
        n = int(rng.integers(64, 200_000))
        p = int(rng.integers(1, 100_000))
        m = int(rng.integers(16, 10**9))
        ratio = eval_model("candmc", n, p, m, exact=True) / eval_model("conflux", n, p, m, exact=True)
        if ratio != 5:
            bad.append((n, p, m, ratio))
    report("C8 candmc/conflux = 5 exactly on 100 random triples", not bad, f"{len(bad)} mismatches")


def test_c8_weak_scaling_constant(report):
    rows = sweep(["conflux"], [2**k for k in range(0, 15)], weak=4096, memory="fig5")
    words = [r.words for r in rows]
    spread = (max(words) - min(words)) / min(words)
    report("C8 weak scaling with M = N^2/P^(2/3) keeps conflux words constant within 1e-9", spread <= 1e-9,
           f"spread={spread:.2e}")


# -- 9. pebble rules ---------------------------------------------------------------------

# 0, 1 inputs; 2 = f(0, 1); 3 = g(2, 1) is the output
RULE_DAG = CDag(["input", "input", "compute", "output"], [(0, 2), (1, 2), (2, 3), (1, 3)])
_FULL = [("load", 0), ("load", 1), ("compute", 2), ("discard", 0), ("compute", 3), ("store", 3)]

INVALID = [
    # red-cap breaches
    (1, 1, [("load", 0), ("load", 1)], "red-cap"),
    (2, 1, [("load", 0), ("load", 1), ("compute", 2)], "red-cap"),
    (3, 1, [("load", 0), ("load", 1), ("compute", 2), ("compute", 3)], "red-cap"),
    (2, 1, [("load", 0), ("discard", 0), ("load", 1), ("load", 0), ("load", 1), ("compute", 2)], "red-cap"),
    (3, 2, [("load", 0, 1), ("load", 1, 1), ("load", 0, 1), ("compute", 2, 1), ("compute", 3, 1)], "red-cap"),
    # missing predecessors
    (4, 1, [("load", 0), ("compute", 2)], "missing-predecessor"),
    (4, 1, [("load", 1), ("compute", 2)], "missing-predecessor"),
    (4, 1, [("load", 0), ("load", 1), ("compute", 3)], "missing-predecessor"),
    (4, 1, [("load", 0), ("load", 1), ("compute", 2), ("discard", 1), ("compute", 3)], "missing-predecessor"),
    (4, 1, [("load", 0), ("load", 1), ("compute", 2), ("store", 2), ("discard", 2), ("compute", 3)], "missing-predecessor"),
    # cross-hue computes
    (4, 2, [("load", 0, 0), ("load", 1, 1), ("compute", 2, 0)], "cross-hue-compute"),
    (4, 2, [("load", 0, 0), ("load", 1, 0), ("compute", 2, 0), ("load", 1, 1), ("compute", 3, 1)], "cross-hue-compute"),
    (4, 2, [("load", 0, 1), ("load", 1, 1), ("compute", 2, 0)], "cross-hue-compute"),
    (4, 3, [("load", 0, 0), ("load", 1, 2), ("compute", 2, 1)], "cross-hue-compute"),
    (4, 2, [("load", 0, 0), ("load", 1, 0), ("compute", 2, 0), ("compute", 3, 1)], "cross-hue-compute"),
    # unfinished outputs
    (4, 1, [], "unfinished-outputs"),
    (4, 1, _FULL[:-1], "unfinished-outputs"),
    (4, 1, [("load", 0), ("load", 1), ("compute", 2), ("store", 2)], "unfinished-outputs"),
    (4, 2, [("load", 0, 1), ("load", 1, 1), ("compute", 2, 1), ("compute", 3, 1), ("load", 3, 0)], "unfinished-outputs"),
    (4, 1, _FULL[:-1] + [("store", 2)], "unfinished-outputs"),
]


def test_c9_invalid_schedules(report):
    assert len(INVALID) == 20
    assert validate_schedule(RULE_DAG, Schedule.of(*_FULL), 3).q == 3
    wrong = []
    for idx, (M, hues, moves, rule) in enumerate(INVALID):
        try:
            validate_schedule(RULE_DAG, Schedule.of(*moves), M, hues)
            wrong.append((idx, rule, "accepted"))
        except ScheduleError as exc:
            if exc.rule != rule:
                wrong.append((idx, rule, exc.rule))
    report("C9 20 invalid schedules rejected with the right rule", not wrong, f"wrong={wrong}")


def test_c9_fuzz_valid_schedules(report):
    cdag = gen_lu_cdag(4)
    failures = 0
    for seed in range(1000):
        M = cdag.max_in_degree + 1 + seed % 4
        hues = 1 + seed % 3
        try:
            rep = validate_schedule(cdag, random_schedule(cdag, M, hues=hues, seed=seed), M, hues)
            failures += max(rep.peak_red) > M
        except (AssertionError, ScheduleError):
            failures += 1
    report("C9 1000 random valid schedules replay without breaching the red cap", failures == 0, f"failures={failures}")


# -- 10. degenerate pivoting -------------------------------------------------------------


def test_c10_pivots_match_partial_pivoting(report):
    rng = np.random.default_rng(10)
    mismatches = 0
    for i in range(50):
        n = int(rng.integers(2, 65))
        A = random_matrix(n, seed=1000 + i)
        res = factorize(A, 1, v=1, c=1)
        mismatches += res.mask.chosen_rows != partial_pivot_order(A)
    report("C10 P=1, v=1, c=1 pivots equal partial pivoting on 50 matrices", mismatches == 0, f"mismatches={mismatches}")
