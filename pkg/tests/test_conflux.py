import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import lu_factor

from iolab.conflux import (
    GridConfig,
    GridError,
    SingularPanelError,
    butterfly_rounds,
    calibrate_c2,
    factorize,
    gepp_select,
    lu_nopivot,
    partial_pivot_order,
    random_matrix,
    select_grid,
    step_model,
)


def test_grid_rank_coords_round_trip():
    g = GridConfig(3, 2, 8, 18)
    assert g.grid == (3, 3, 2) and g.active_ranks == 18
    for r in range(18):
        assert g.rank(*g.coords(r)) == r


@pytest.mark.parametrize("kw", [dict(p1_sqrt=3, c=2, v=8, P=17), dict(p1_sqrt=2, c=4, v=2, P=16), dict(p1_sqrt=0, c=1, v=1, P=1)])
def test_grid_validation(kw):
    with pytest.raises(GridError):
        GridConfig(**kw)


def test_select_grid_prefers_layers_with_memory():
    # enough memory for two copies: [2, 2, 2] beats [2, 2, 1]
    assert select_grid(8, 256, 2 * 256 * 256 // 8).grid == (2, 2, 2)
    assert select_grid(16, 1024, 1024 * 1024 // 16).grid == (4, 4, 1)


def test_select_grid_infeasible_memory():
    with pytest.raises(GridError):
        select_grid(4, 1024, 1000)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 64), st.integers(16, 512), st.floats(0.5, 4.0))
def test_select_grid_respects_memory(P, N, slack):
    M = int(slack * N * N / P) + 1
    fits = any(N * N <= M * p * p for p in range(1, math.isqrt(P) + 1))
    if not fits:
        with pytest.raises(GridError):
            select_grid(P, N, M)
        return
    g = select_grid(P, N, M)
    assert g.active_ranks <= P
    assert N * N <= M * g.p1_sqrt**2


def test_gepp_select_matches_lapack():
    A = random_matrix(12, seed=4)
    order = gepp_select(A[:, :12], np.arange(12), 12)
    assert order == partial_pivot_order(A)


def test_gepp_select_tie_goes_to_lower_row():
    vals = np.array([[1.0], [-1.0], [1.0]])
    assert gepp_select(vals, np.array([7, 3, 5]), 1) == [1]


def test_lu_nopivot_reconstructs():
    A = random_matrix(6, seed=1) + 6 * np.eye(6)
    L, U = lu_nopivot(A)
    assert np.allclose(L @ U, A)
    assert np.allclose(np.triu(U), U) and np.allclose(np.diag(L), 1)


def test_lu_nopivot_singular():
    with pytest.raises(SingularPanelError) as err:
        lu_nopivot(np.array([[0.0, 1.0], [1.0, 0.0]]), step=3)
    assert err.value.step == 3


@pytest.mark.parametrize("p,rounds", [(1, 0), (2, 1), (3, 2), (4, 2), (5, 3), (8, 3)])
def test_butterfly_rounds(p, rounds):
    assert butterfly_rounds(p) == rounds


@pytest.mark.parametrize(
    "n,P,kw",
    [(64, 1, {}), (64, 4, {"c": 1}), (64, 4, {"c": 2}), (96, 9, {}), (100, 4, {"v": 25}), (40, 8, {"c": 2, "v": 16})],
)
def test_factorization_residual(n, P, kw):
    res = factorize(n, P, seed=n, **kw)
    assert res.residual < 1e-12
    assert res.mask.is_permutation()


def test_padding_with_identity():
    res = factorize(50, 4, c=1, v=16)
    assert res.padded_n == 64 and res.N == 50
    assert res.residual < 1e-12
    # padded rows are never chosen before real rows run out
    assert sorted(res.mask.chosen_rows[:50]) == list(range(50))


@pytest.mark.parametrize("seed", range(5))
def test_pivots_equal_partial_pivoting_single_block_column(seed):
    A = random_matrix(24, seed=seed)
    res = factorize(A, 1, v=1, c=1)
    assert res.mask.chosen_rows == partial_pivot_order(A)
    lu, piv = lu_factor(A)
    assert np.allclose(np.abs(np.diag(res.U)), np.abs(np.diag(lu)))


def test_row_masking_leaves_rows_in_place():
    A = random_matrix(32, seed=9)
    res = factorize(A, 4, c=1, v=8)
    assert np.allclose(res.L @ res.U, A[res.perm])


def test_singular_matrix_raises():
    A = np.zeros((16, 16))
    with pytest.raises(SingularPanelError):
        factorize(A, 1, v=4)


def test_results_are_deterministic():
    a = factorize(64, 4, c=1, seed=3)
    b = factorize(64, 4, c=1, seed=3)
    assert a.ledger.to_csv() == b.ledger.to_csv()
    assert a.mask.chosen_rows == b.mask.chosen_rows


def test_single_rank_communicates_nothing():
    res = factorize(64, 1)
    assert res.ledger.total_words == 0


def test_idle_ranks_receive_nothing():
    res = factorize(64, 6, c=1)  # grid [2, 2, 1] leaves two ranks idle
    assert res.grid.active_ranks == 4
    assert res.ledger.received()[4:].tolist() == [0, 0]


def test_step_costs_cover_every_step():
    res = factorize(128, 4, c=1, v=32)
    costs = res.step_costs()
    assert len(costs) == 4
    assert sum(res.ledger.by_iteration()[t].max() for t in range(4)) == sum(costs)


def test_layers_reduce_communication():
    # 32 ranks: [5, 5, 1] against [4, 4, 2]; lower-order terms hide the gain at small N
    one = factorize(640, 32, 640 * 640 // 8, c=1, v=32)
    two = factorize(640, 32, 640 * 640 // 8, c=2, v=32)
    assert (one.grid.grid, two.grid.grid) == ((5, 5, 1), (4, 4, 2))
    assert two.max_received < one.max_received


def test_step_model_decreases_with_t():
    vals = [step_model(1024, 32, t, 16, 65536) for t in range(32)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_calibrate_c2_is_tight():
    runs = [factorize(256, 16, 256 * 256 // 16, c=1, v=32)]
    c2 = calibrate_c2(runs)
    res = runs[0]
    slack = [step_model(256, 32, t, 16, res.M, c2) - m for t, m in enumerate(res.step_costs())]
    assert min(slack) == pytest.approx(0, abs=1e-6)


def test_summary_fields():
    s = factorize(64, 4, c=1).summary(c2=6.0)
    assert s["grid"] == [2, 2, 1]
    assert {"step", "measured_max_words", "model_leading", "model_with_c2"} <= set(s["steps"][0])
    assert sum(s["words_by_phase"].values()) > 0


def test_strict_memory_run():
    res = factorize(64, 4, c=1, strict_memory=True)
    assert res.residual < 1e-12


def test_every_ledger_tag_has_step_numbers():
    from iolab.conflux import PHASE_STEPS

    s = factorize(96, 9, c=1, v=16).summary()
    assert "tournament" in s["words_by_phase"]
    assert set(s["words_by_phase"]) <= set(PHASE_STEPS)
    assert s["phase_steps"]["panel-L"] == {"algorithm": [8], "proof": [7]}
