"""Leading-term per-rank communication models and scaling sweeps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import sympy

WORD_BYTES = 8

_N, _P, _M = sympy.symbols("N P M", positive=True)


@dataclass(frozen=True)
class CostModel:
    name: str
    expr: sympy.Expr  # per-rank words in N, P, M
    note: str

    def per_rank_words(self, N: float, P: float, M: float) -> float:
        return _FAST[self.name](N, P, M)


MODELS: dict[str, CostModel] = {
    "conflux": CostModel("conflux", _N**3 / (_P * sympy.sqrt(_M)), "2.5D LU with tournament pivoting"),
    "candmc": CostModel("candmc", 5 * _N**3 / (_P * sympy.sqrt(_M)), "2.5D LU, prior communication-avoiding variant"),
    "2d": CostModel("2d", _N**2 / sympy.sqrt(_P), "2D block-cyclic LU (ScaLAPACK-style); independent of M"),
}

_FAST = {name: sympy.lambdify((_N, _P, _M), m.expr, "math") for name, m in MODELS.items()}


def eval_model(name: str, N: float, P: float, M: float, *, exact: bool = False) -> float | sympy.Expr:
    """Per-rank words of model ``name``; ``exact=True`` returns an exact sympy number."""
    try:
        model = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    if N <= 0 or P <= 0 or M <= 0:
        raise ValueError("N, P and M must be positive")
    if exact:
        vals = {s: sympy.nsimplify(x, rational=True) for s, x in ((_N, N), (_P, P), (_M, M))}
        return model.expr.subs(vals)
    return model.per_rank_words(N, P, M)


def replication_memory(N: float, P: float) -> float:
    """Memory per rank M = N^2 / P^(2/3), the least that admits full replication depth."""
    return N**2 / P ** (2 / 3)


def weak_scaling_n(base: float, P: float) -> float:
    return base * P ** (1 / 3)


@dataclass(frozen=True)
class SweepRow:
    model: str
    N: float
    P: int
    M: float
    words: float

    @property
    def bytes(self) -> float:
        return self.words * WORD_BYTES


def sweep(
    models: Sequence[str],
    ranks: Iterable[int],
    *,
    n: float | None = None,
    weak: float | None = None,
    memory: float | str = "fig5",
) -> list[SweepRow]:
    """Model table over ``ranks``; fixed ``n`` (strong scaling) or N = weak * P^(1/3)."""
    if (n is None) == (weak is None):
        raise ValueError("give exactly one of n (strong scaling) or weak (weak scaling base)")
    for m in models:
        if m not in MODELS:
            raise ValueError(f"unknown model {m!r}")
    rows = []
    for P in ranks:
        N = n if n is not None else weak_scaling_n(weak, P)
        M = replication_memory(N, P) if memory == "fig5" else float(memory)
        for m in models:
            rows.append(SweepRow(m, N, P, M, eval_model(m, N, P, M)))
    return rows


def parse_ranks(text: str) -> list[int]:
    """'4:1024' doubles from 4 to 1024; '8,27,64' lists explicit values."""
    if ":" in text:
        lo, hi = (int(x) for x in text.split(":"))
        out, p = [], lo
        while p <= hi:
            out.append(p)
            p *= 2
        return out
    return [int(x) for x in text.split(",") if x.strip()]


def to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "N", "P", "M", "words", "bytes"])
    for r in rows:
        w.writerow([r.model, repr(float(r.N)), r.P, repr(float(r.M)), repr(float(r.words)), repr(float(r.bytes))])
    return buf.getvalue()
