"""COnfLUX: 2.5D LU factorization with tournament pivoting on the simulated machine.

Ranks form a [p, p, c] grid.  Every layer holds a block-cyclic copy of the
matrix shape; layer sums give the true trailing matrix, because each layer
applies only its slice of every rank-v Schur update.  Pivot rows are never
moved: they are masked out of the active set.

Per step t (block column t, v columns):
  reduce the column block onto layer t % c; run a butterfly tournament among
  the p ranks of grid column t % p; broadcast A00 and the pivot indices;
  scatter A10 and reduce-scatter the pivot rows (A01) into 1D pieces; solve
  the panels locally; send each 2.5D rank its slice of L10 and U01; update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .netsim import CommLedger, MachineConfig, run_spmd


class GridError(ValueError):
    pass


class SingularPanelError(ArithmeticError):
    def __init__(self, step: int, magnitude: float):
        self.step = step
        super().__init__(f"panel at step {step} is numerically singular (pivot magnitude {magnitude:.3g})")


DEFAULT_V = 32


@dataclass(frozen=True)
class GridConfig:
    p1_sqrt: int
    c: int
    v: int
    P: int

    def __post_init__(self):
        if self.p1_sqrt < 1 or self.c < 1 or self.v < 1:
            raise GridError("grid dimensions and block size must be positive")
        if self.active_ranks > self.P:
            raise GridError(f"grid {self.grid} needs {self.active_ranks} ranks, only {self.P} available")
        if self.v < self.c:
            raise GridError(f"block size v={self.v} must be at least c={self.c}")

    @property
    def active_ranks(self) -> int:
        return self.p1_sqrt**2 * self.c

    @property
    def grid(self) -> tuple[int, int, int]:
        return (self.p1_sqrt, self.p1_sqrt, self.c)

    def rank(self, pi: int, pj: int, layer: int) -> int:
        p = self.p1_sqrt
        return layer * p * p + pi * p + pj

    def coords(self, rank: int) -> tuple[int, int, int]:
        p = self.p1_sqrt
        layer, rest = divmod(rank, p * p)
        pi, pj = divmod(rest, p)
        return pi, pj, layer


def _default_v(N: int, c: int, P: int) -> int:
    if P == 1:
        return max(c, min(N, DEFAULT_V))
    target = max(c, DEFAULT_V)
    for v in range(target, c - 1, -1):
        if N % v == 0 and v >= c:
            return v
    return target


def select_grid(
    P: int,
    N: int,
    M: int,
    *,
    c: int | None = None,
    c_max: int | None = None,
    v: int | None = None,
) -> GridConfig:
    """Grid [p, p, c] with the lowest leading-term cost 2N^3 / (active * sqrt(M_eff)).

    Each rank stores N^2/p^2 words, so p must satisfy N^2/p^2 <= M.  With
    M_eff = c N^2 / active = N^2/p^2 the score reduces to 2 N^2 / (p c).
    Ties prefer more active ranks, then fewer layers.  ``c`` pins the number
    of layers.
    """
    if P < 1 or N < 1 or M < 1:
        raise GridError("P, N and M must be positive")
    cube = math.ceil(round(P ** (1 / 3), 9))
    c_hi = min(cube, max(1, (M * P) // (N * N)))
    if c_max is not None:
        c_hi = min(c_hi, c_max)
    layers = [c] if c is not None else list(range(1, c_hi + 1))
    best = None
    for cc in layers:
        p = 1
        while (p + 1) ** 2 * cc <= P:
            p += 1
        while p >= 1:
            if p * p * cc <= P and N * N <= M * p * p:
                active = p * p * cc
                m_eff = cc * N * N / active
                score = 2 * N**3 / (active * math.sqrt(m_eff))
                key = (score, -active, cc)
                if best is None or key < best[0]:
                    best = (key, p, cc)
            p -= 1
    if best is None:
        need = math.ceil(N * N / max(1, math.isqrt(P // (c or 1))) ** 2)
        raise GridError(f"no feasible grid for P={P}, N={N}, M={M}; need M >= {need}")
    _, p, cc = best
    vv = v if v is not None else _default_v(N, cc, P)
    return GridConfig(p, cc, vv, P)


# --------------------------------------------------------------------------
# local kernels


def gepp_select(vals: np.ndarray, rows: np.ndarray, k: int) -> list[int]:
    """Positions of up to k pivot rows chosen by partial pivoting, in pivot order.

    Larger magnitude wins; exact ties go to the smaller global row index.
    """
    W = np.array(vals, dtype=float, copy=True)
    n, m = W.shape
    active = np.ones(n, dtype=bool)
    order: list[int] = []
    for j in range(min(k, m, n)):
        cand = np.flatnonzero(active)
        mags = np.abs(W[cand, j])
        ties = cand[mags == mags.max()]
        r = int(ties[np.argmin(rows[ties])])
        order.append(r)
        active[r] = False
        piv = W[r, j]
        rest = np.flatnonzero(active)
        if piv != 0 and rest.size and j + 1 < m:
            f = W[rest, j] / piv
            W[np.ix_(rest, np.arange(j + 1, m))] -= np.outer(f, W[r, j + 1 :])
    return order


def lu_nopivot(block: np.ndarray, step: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Unit-lower L and upper U with block = L @ U, without row exchanges."""
    U = np.array(block, dtype=float, copy=True)
    n = U.shape[0]
    L = np.eye(n)
    scale = max(1.0, float(np.abs(block).max(initial=0.0)))
    for j in range(n):
        piv = U[j, j]
        if abs(piv) <= 1e-14 * scale:
            raise SingularPanelError(step, abs(piv))
        L[j + 1 :, j] = U[j + 1 :, j] / piv
        U[j + 1 :, j:] -= np.outer(L[j + 1 :, j], U[j, j:])
        U[j + 1 :, j] = 0.0
    return L, U


def butterfly_rounds(p: int) -> int:
    return math.ceil(math.log2(p)) if p > 1 else 0


# --------------------------------------------------------------------------
# results


@dataclass
class PivotMask:
    chosen_rows: list[int] = field(default_factory=list)
    n: int = 0

    @property
    def remaining_rows(self) -> list[int]:
        chosen = set(self.chosen_rows)
        return [r for r in range(self.n) if r not in chosen]

    def is_permutation(self) -> bool:
        return sorted(self.chosen_rows) == list(range(self.n))


@dataclass
class FactorResult:
    L: np.ndarray
    U: np.ndarray
    mask: PivotMask
    residual: float
    ledger: CommLedger
    grid: GridConfig
    N: int
    M: int
    padded_n: int

    @property
    def perm(self) -> np.ndarray:
        return np.array(self.mask.chosen_rows)

    def step_costs(self) -> list[int]:
        """Maximum words received by any rank in each step."""
        per = self.ledger.by_iteration()
        return [int(per[t].max()) if t in per else 0 for t in range(self.padded_n // self.grid.v)]

    @property
    def max_received(self) -> int:
        return self.ledger.max_received

    def imbalance(self) -> float:
        recv = self.ledger.received()[: self.grid.active_ranks]
        return float(recv.max() / recv.mean()) if recv.mean() > 0 else 1.0

    def summary(self, c2: float | None = None) -> dict:
        steps = []
        for t, measured in enumerate(self.step_costs()):
            row = {"step": t, "measured_max_words": measured,
                   "model_leading": step_model(self.N, self.grid.v, t, self.grid.P, self.M)}
            if c2 is not None:
                row["model_with_c2"] = step_model(self.N, self.grid.v, t, self.grid.P, self.M, c2)
            steps.append(row)
        return {
            "N": self.N,
            "padded_n": self.padded_n,
            "ranks": self.grid.P,
            "grid": list(self.grid.grid),
            "active_ranks": self.grid.active_ranks,
            "v": self.grid.v,
            "memory": self.M,
            "residual": self.residual,
            "max_received_words": self.max_received,
            "model_total": conflux_model(self.N, self.grid.P, self.M),
            "imbalance": self.imbalance(),
            "steps": steps,
            "words_by_phase": self.ledger.by_tag(),
            "phase_steps": {tag: {"algorithm": list(a), "proof": list(b)} for tag, (a, b) in PHASE_STEPS.items()},
        }


# ledger tag -> (step numbers in the algorithm listing, step numbers in the cost proof)
PHASE_STEPS: dict[str, tuple[tuple[int, ...], tuple[int, ...]]] = {
    "reduce-column": ((1,), (4,)),
    "tournament-fold": ((2,), (1,)),
    "tournament": ((2,), (1,)),
    "tournament-unfold": ((2,), (1,)),
    "bcast-a00": ((3,), (2, 3)),
    "scatter-a10": ((4,), (5,)),
    "reduce-pivot-rows": ((5, 6), (11,)),
    "panel-L": ((8,), (7,)),
    "panel-U": ((10,), (9,)),
}


def conflux_model(N: float, P: float, M: float) -> float:
    return N**3 / (P * math.sqrt(M))


def step_model(N: float, v: float, t: int, P: float, M: float, c2: float = 0.0) -> float:
    return 2 * N * v * (N - t * v) / (P * math.sqrt(M)) + c2 * N * v / P


# --------------------------------------------------------------------------
# the SPMD program


class _Shared:
    """Result collector written outside the ledger (verification only)."""

    def __init__(self, n: int):
        self.L = np.zeros((n, n))  # indexed by global row, column
        self.U = np.zeros((n, n))  # indexed by pivot position, column
        self.chosen: list[int] = []


def _owner(idx: np.ndarray, v: int, p: int) -> np.ndarray:
    return (idx // v) % p


def _conflux_rank(comm, A: np.ndarray | None, grid: GridConfig, n: int, shared: _Shared):
    P_act = grid.active_ranks
    if comm.rank >= P_act:
        return None
    p, c, v = grid.p1_sqrt, grid.c, grid.v
    pi, pj, layer = grid.coords(comm.rank)
    all_idx = np.arange(n)
    rows = all_idx[_owner(all_idx, v, p) == pi]
    cols = all_idx[_owner(all_idx, v, p) == pj]
    D = A[np.ix_(rows, cols)].copy() if layer == 0 else np.zeros((rows.size, cols.size))
    comm.store["D"] = D
    remaining = np.ones(n, dtype=bool)
    slices = np.array_split(np.arange(v), c)
    my_slice = slices[layer]

    for t in range(n // v):
        comm.iteration = t
        t0 = t * v
        bc, lt = t % p, t % c
        root = grid.rank(0, bc, lt)
        participant = pj == bc and layer == lt
        blk_cols = (cols >= t0) & (cols < t0 + v)

        # 1: reduce the column block onto layer lt
        panel = None
        if pj == bc:
            part = D[:, blk_cols]
            if layer != lt:
                comm.send(grid.rank(pi, bc, lt), part, tag=("reduce-column", t), op="reduce")
            else:
                panel = np.array(part, copy=True)
                for l2 in range(c):
                    if l2 != lt:
                        panel = panel + (yield from comm.recv(grid.rank(pi, bc, l2), ("reduce-column", t)))

        # 2: tournament among the p ranks of grid column bc on layer lt
        if participant:
            pick = gepp_select(panel, rows, v)
            cand_rows, cand_vals = rows[pick], panel[pick]
            cand_rows, cand_vals = yield from _tournament(comm, grid, pi, bc, lt, t, cand_rows, cand_vals)
            L00, U00 = lu_nopivot(cand_vals, t)
            pivots = cand_rows.astype(np.int64)
        # 3: broadcast factored A00 and the pivot indices
        group = list(range(P_act))
        if comm.rank == root:
            packed = np.tril(L00, -1) + U00
            for r in group:
                if r != root:
                    comm.send(r, (packed, pivots), tag=("bcast-a00", t), op="bcast", words=packed.size)
            shared.chosen.extend(int(x) for x in pivots)
            shared.L[pivots, t0 : t0 + v] = L00
            shared.U[t0 : t0 + v, t0 : t0 + v] = U00
        else:
            packed, pivots = yield from comm.recv(root, ("bcast-a00", t))
            L00 = np.tril(packed, -1) + np.eye(v)
            U00 = np.triu(packed)

        is_piv = np.zeros(n, dtype=bool)
        is_piv[pivots] = True
        rest_rows = np.flatnonzero(remaining & ~is_piv)
        rest_cols = np.arange(t0 + v, n)
        row_chunks = np.array_split(rest_rows, P_act)
        col_chunks = np.array_split(rest_cols, P_act)
        my_rows_chunk = row_chunks[comm.rank]
        my_cols_chunk = col_chunks[comm.rank]

        # 4: scatter A10 rows into 1D chunks
        if participant:
            for k, chunk in enumerate(row_chunks):
                sel = np.isin(rows, chunk)
                if sel.any():
                    comm.send(k, panel[sel], tag=("scatter-a10", t), op="scatter")
        A10 = np.zeros((my_rows_chunk.size, v))
        for src_pi in np.unique(_owner(my_rows_chunk, v, p)):
            src_rows = np.sort(my_rows_chunk[_owner(my_rows_chunk, v, p) == src_pi])
            piece = yield from comm.recv(grid.rank(int(src_pi), bc, lt), ("scatter-a10", t))
            A10[np.searchsorted(my_rows_chunk, src_rows)] = piece

        # 5-6: reduce the pivot rows across layers, scattered as 1D column chunks
        piv_pos = np.flatnonzero(_owner(pivots, v, p) == pi)  # positions within pivot order
        if piv_pos.size:
            local_r = np.searchsorted(rows, pivots[piv_pos])
            for k, chunk in enumerate(col_chunks):
                sel = np.isin(cols, chunk)
                if sel.any():
                    comm.send(k, D[np.ix_(local_r, np.flatnonzero(sel))], tag=("reduce-pivot-rows", t), op="reduce")
        A01 = np.zeros((v, my_cols_chunk.size))
        if my_cols_chunk.size:
            owners_r = np.unique(_owner(pivots, v, p))
            owners_c = np.unique(_owner(my_cols_chunk, v, p))
            for src in sorted(grid.rank(int(a), int(b), l2) for a in owners_r for b in owners_c for l2 in range(c)):
                a, b, _ = grid.coords(src)
                rpos = np.flatnonzero(_owner(pivots, v, p) == a)
                cpos = np.flatnonzero(_owner(my_cols_chunk, v, p) == b)
                piece = yield from comm.recv(src, ("reduce-pivot-rows", t))
                A01[np.ix_(rpos, cpos)] += piece

        # 7: local panel solves
        L10 = solve_triangular(U00, A10.T, trans="T", lower=False).T if A10.size else A10
        U01 = solve_triangular(L00, A01, lower=True, unit_diagonal=True) if A01.size else A01
        comm.store.update({"L10": L10, "U01": U01})
        shared.L[my_rows_chunk, t0 : t0 + v] = L10
        shared.U[t0 : t0 + v, my_cols_chunk] = U01

        # 8-9: send every 2.5D rank its slice of the panels
        for dst in range(P_act):
            di, dj, dl = grid.coords(dst)
            rsel = _owner(my_rows_chunk, v, p) == di
            if rsel.any():
                comm.send(dst, L10[rsel][:, slices[dl]], tag=("panel-L", t), op="bcast")
            csel = _owner(my_cols_chunk, v, p) == dj
            if csel.any():
                comm.send(dst, U01[slices[dl]][:, csel], tag=("panel-U", t), op="bcast")
        upd_rows = rows[np.isin(rows, rest_rows)]
        upd_cols = cols[cols >= t0 + v]
        Lp = np.zeros((upd_rows.size, my_slice.size))
        Up = np.zeros((my_slice.size, upd_cols.size))
        for k, chunk in enumerate(row_chunks):
            mine = chunk[_owner(chunk, v, p) == pi]
            if mine.size:
                piece = yield from comm.recv(k, ("panel-L", t))
                Lp[np.searchsorted(upd_rows, mine)] = piece
        for k, chunk in enumerate(col_chunks):
            mine = chunk[_owner(chunk, v, p) == pj]
            if mine.size:
                piece = yield from comm.recv(k, ("panel-U", t))
                Up[:, np.searchsorted(upd_cols, mine)] = piece
        comm.store.update({"L10": Lp, "U01": Up})

        # 10: Schur update with this layer's slice of the inner dimension
        keep_r = ~np.isin(rows, pivots)
        keep_c = cols >= t0 + v
        D = D[np.ix_(keep_r, keep_c)]
        if Lp.size and Up.size:
            D -= Lp @ Up
        # 11: mask the pivot rows and drop the finished column block
        rows, cols = rows[keep_r], cols[keep_c]
        remaining[pivots] = False
        comm.store["D"] = D
        for key in ("L10", "U01"):
            comm.store.pop(key, None)
    return None


def _tournament(comm, grid: GridConfig, pi: int, bc: int, lt: int, t: int, rows: np.ndarray, vals: np.ndarray):
    """Butterfly playoff among the p ranks of grid column bc; everyone ends with the winners."""
    p, v = grid.p1_sqrt, grid.v
    if p == 1:
        return rows, vals
    q = 1 << (p.bit_length() - 1)
    peer = lambda i: grid.rank(i, bc, lt)

    def play(rows_a, vals_a, rows_b, vals_b):
        r = np.concatenate([rows_a, rows_b])
        x = np.vstack([vals_a, vals_b])
        pick = gepp_select(x, r, v)
        return r[pick], x[pick]

    # ranks beyond the largest power of two hand their candidates down first
    if pi >= q:
        comm.send(peer(pi - q), (vals, rows), tag=("tournament-fold", t), op="recv", words=vals.size)
        vals, rows = yield from comm.recv(peer(pi - q), ("tournament-unfold", t))
        return rows, vals
    if pi + q < p:
        ov, orow = yield from comm.recv(peer(pi + q), ("tournament-fold", t))
        rows, vals = play(rows, vals, orow, ov)
    for r in range(q.bit_length() - 1):
        partner = pi ^ (1 << r)
        comm.send(peer(partner), (vals, rows), tag=("tournament", t, r), op="recv", words=vals.size)
        ov, orow = yield from comm.recv(peer(partner), ("tournament", t, r))
        rows, vals = play(rows, vals, orow, ov)
    if pi + q < p:
        comm.send(peer(pi + q), (vals, rows), tag=("tournament-unfold", t), op="recv", words=vals.size)
    return rows, vals


def random_matrix(N: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((N, N))


def factorize(
    A: np.ndarray | int,
    P: int,
    M: int | None = None,
    *,
    grid: GridConfig | None = None,
    c: int | None = None,
    v: int | None = None,
    seed: int = 0,
    strict_memory: bool = False,
) -> FactorResult:
    """Factor A (or a seeded random N x N matrix) on P simulated ranks."""
    if isinstance(A, (int, np.integer)):
        A = random_matrix(int(A), seed)
    A = np.asarray(A, dtype=float)
    N = A.shape[0]
    if A.shape != (N, N):
        raise ValueError("matrix must be square")
    if M is None:
        layers = c or 1
        M = max(1, math.ceil(2.0 * layers * N * N / P))
    if grid is None:
        grid = select_grid(P, N, M, c=c, v=v)
    n = -(-N // grid.v) * grid.v
    Ap = np.eye(n)
    Ap[:N, :N] = A
    shared = _Shared(n)
    ledger = run_spmd(
        MachineConfig(P, M, strict_memory=strict_memory),
        lambda comm: _conflux_rank(comm, Ap, grid, n, shared),
    )
    mask = PivotMask(shared.chosen, n)
    L = shared.L[mask.chosen_rows]
    U = shared.U
    residual = float(np.linalg.norm(Ap[mask.chosen_rows] - L @ U) / np.linalg.norm(A))
    return FactorResult(L, U, mask, residual, ledger, grid, N, M, n)


def partial_pivot_order(A: np.ndarray) -> list[int]:
    """Row order chosen by dense LU with partial pivoting (LAPACK getrf)."""
    from scipy.linalg import lu_factor

    _, piv = lu_factor(A)
    perm = list(range(A.shape[0]))
    for i, j in enumerate(piv):
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def calibrate_c2(results: Sequence[FactorResult]) -> float:
    """Smallest c2 with measured <= leading + c2 * N v / P for every step of ``results``."""
    worst = 0.0
    for res in results:
        N, v, P, M = res.N, res.grid.v, res.grid.P, res.M
        for t, measured in enumerate(res.step_costs()):
            lead = step_model(N, v, t, P, M)
            worst = max(worst, (measured - lead) / (N * v / P))
    return worst
