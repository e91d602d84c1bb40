"""Red-blue pebble game on explicit computation DAGs.

Vertices are element versions.  Inputs start with a blue pebble; a compute
vertex may receive a red pebble once all its predecessors hold red pebbles
of the same hue.  Each hue (processor) owns at most M red pebbles.  The I/O
cost Q counts loads and stores.
"""

from __future__ import annotations

import heapq
import itertools
import json
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import networkx as nx

from .daap import Program, executions, parse_program

KINDS = ("input", "compute", "output")
MOVE_KINDS = ("load", "store", "compute", "discard")


class CDagError(ValueError):
    pass


class ScheduleError(ValueError):
    def __init__(self, index: int, rule: str, message: str = ""):
        self.index = index
        self.rule = rule
        super().__init__(f"move {index}: {rule}" + (f" ({message})" if message else ""))


# --------------------------------------------------------------------------
# graph


@dataclass
class CDag:
    """Computation DAG; ``kinds[v]`` is input, compute, or output (a flagged compute vertex)."""

    kinds: list[str]
    edges: list[tuple[int, int]]
    labels: list[object] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.kinds)
        if not self.labels:
            self.labels = [None] * n
        self.preds: list[list[int]] = [[] for _ in range(n)]
        self.succs: list[list[int]] = [[] for _ in range(n)]
        for u, v in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise CDagError(f"edge ({u}, {v}) references an unknown vertex")
            if v not in self.succs[u]:
                self.succs[u].append(v)
                self.preds[v].append(u)
        self.validate()

    def validate(self):
        for v, kind in enumerate(self.kinds):
            if kind not in KINDS:
                raise CDagError(f"vertex {v}: unknown kind {kind!r}")
            if kind == "input" and self.preds[v]:
                raise CDagError(f"input vertex {v} has predecessors")
            if kind != "input" and not self.preds[v]:
                raise CDagError(f"compute vertex {v} has no predecessors")
        if not nx.is_directed_acyclic_graph(self.graph()):
            raise CDagError("graph has a cycle")

    @property
    def n(self) -> int:
        return len(self.kinds)

    @property
    def inputs(self) -> list[int]:
        return [v for v, k in enumerate(self.kinds) if k == "input"]

    @property
    def computes(self) -> list[int]:
        return [v for v, k in enumerate(self.kinds) if k != "input"]

    @property
    def outputs(self) -> list[int]:
        return [v for v, k in enumerate(self.kinds) if k == "output"]

    @property
    def max_in_degree(self) -> int:
        return max((len(p) for p in self.preds), default=0)

    def graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return g

    def to_dict(self) -> dict:
        verts = []
        for v in range(self.n):
            d = {"id": v, "kind": self.kinds[v]}
            if self.labels[v] is not None:
                d["label"] = self.labels[v]
            verts.append(d)
        return {"vertices": verts, "edges": [list(e) for e in self.edges]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping) -> "CDag":
        verts = sorted(data["vertices"], key=lambda d: d["id"])
        if [d["id"] for d in verts] != list(range(len(verts))):
            raise CDagError("vertex ids must be 0..n-1")
        labels = [_untuple(d.get("label")) for d in verts]
        return cls([d["kind"] for d in verts], [tuple(e) for e in data["edges"]], labels)


def _untuple(label):
    # JSON turns tuples into lists; restore the (statement, iteration) shape
    if isinstance(label, list):
        return tuple(_untuple(x) for x in label)
    return label


def program_cdag(program: Program, params: Mapping[str, int], declare: Mapping[str, Sequence[int]] | None = None) -> CDag:
    """cDAG of a DAAP program: one vertex per element version.

    Reading an element that has not been written creates an input vertex.
    ``declare`` pre-creates input vertices for whole arrays (shape per array).
    The final version of every written element is flagged as an output.
    """
    kinds: list[str] = []
    labels: list[object] = []
    edges: list[tuple[int, int]] = []
    current: dict[tuple, int] = {}

    def new(kind, label):
        kinds.append(kind)
        labels.append(label)
        return len(kinds) - 1

    for array, shape in (declare or {}).items():
        for idx in itertools.product(*(range(s) for s in shape)):
            current[(array, idx)] = new("input", (array, idx))

    written = set()
    for stmt, env in executions(program, params):
        preds = []
        for acc in stmt.inputs:
            key = (acc.array, tuple(env[c] for c in acc.components))
            if key not in current:
                current[key] = new("input", key)
            if current[key] not in preds:
                preds.append(current[key])
        if not preds:
            raise CDagError(f"statement {stmt.id} has no inputs; generated values are not representable")
        v = new("compute", (stmt.id, tuple(env[x] for x in stmt.variables)))
        edges.extend((p, v) for p in preds)
        key = (stmt.output.array, tuple(env[c] for c in stmt.output.components))
        current[key] = v
        written.add(key)
    for key in written:
        kinds[current[key]] = "output"
    return CDag(kinds, edges, labels)


LU_SOURCE = """\
param N
loop k in 0..N {
  loop i in k+1..N {
    S1: A[i,k] = f(A[i,k], A[k,k])
  }
  loop i in k+1..N {
    loop j in k+1..N {
      S2: A[i,j] = f(A[i,j], A[i,k], A[k,j])
    }
  }
}
"""


def gen_lu_cdag(N: int) -> CDag:
    """cDAG of in-place LU without pivoting.

    Updates of A[i,j] across k form a chain in ascending k, so reordered
    reductions are not representable and search results are relative to
    this fixed order.
    """
    if not 1 <= N <= 16:
        raise CDagError("LU cDAG generator supports 1 <= N <= 16")
    return program_cdag(parse_program(LU_SOURCE), {"N": N}, declare={"A": (N, N)})


# --------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class Move:
    kind: str
    vertex: int
    hue: int = 0


@dataclass
class Schedule:
    moves: list[Move] = field(default_factory=list)

    def __len__(self):
        return len(self.moves)

    @property
    def io_count(self) -> int:
        return sum(1 for m in self.moves if m.kind in ("load", "store"))

    def to_dict(self) -> dict:
        return {"moves": [{"kind": m.kind, "vertex": m.vertex, "hue": m.hue} for m in self.moves]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping) -> "Schedule":
        return cls([Move(d["kind"], int(d["vertex"]), int(d.get("hue", 0))) for d in data["moves"]])

    @classmethod
    def of(cls, *moves: tuple) -> "Schedule":
        return cls([Move(*m) for m in moves])


@dataclass
class Replay:
    q: int
    loads: int
    stores: int
    per_hue_io: list[int]
    peak_red: list[int]


def validate_schedule(cdag: CDag, schedule: Schedule, M: int, hues: int = 1) -> Replay:
    """Replay ``schedule`` and return its I/O count; raise ScheduleError on the first violation."""
    if M < 1 or hues < 1:
        raise ValueError("M and hues must be positive")
    red = [set() for _ in range(hues)]
    blue = set(cdag.inputs)
    loads = stores = 0
    per_hue = [0] * hues
    peak = [0] * hues
    for idx, mv in enumerate(schedule.moves):
        if not 0 <= mv.vertex < cdag.n:
            raise ScheduleError(idx, "unknown-vertex", f"vertex {mv.vertex}")
        if not 0 <= mv.hue < hues:
            raise ScheduleError(idx, "bad-hue", f"hue {mv.hue}")
        mine, v = red[mv.hue], mv.vertex
        if mv.kind == "load":
            anywhere = v in blue or any(v in r for h, r in enumerate(red) if h != mv.hue)
            if not anywhere:
                raise ScheduleError(idx, "load-source", f"vertex {v} holds no pebble")
            if v not in mine and len(mine) >= M:
                raise ScheduleError(idx, "red-cap", f"hue {mv.hue} already holds {M} red pebbles")
            mine.add(v)
            loads += 1
            per_hue[mv.hue] += 1
        elif mv.kind == "store":
            if v not in mine:
                raise ScheduleError(idx, "store-source", f"vertex {v} is not red in hue {mv.hue}")
            blue.add(v)
            stores += 1
            per_hue[mv.hue] += 1
        elif mv.kind == "compute":
            if cdag.kinds[v] == "input":
                raise ScheduleError(idx, "compute-input", f"vertex {v} is an input")
            missing = [p for p in cdag.preds[v] if p not in mine]
            if missing:
                elsewhere = [p for p in missing if any(p in r for h, r in enumerate(red) if h != mv.hue)]
                rule = "cross-hue-compute" if elsewhere else "missing-predecessor"
                raise ScheduleError(idx, rule, f"predecessors {missing} not red in hue {mv.hue}")
            if v not in mine and len(mine) >= M:
                raise ScheduleError(idx, "red-cap", f"hue {mv.hue} already holds {M} red pebbles")
            mine.add(v)
        elif mv.kind == "discard":
            if v not in mine:
                raise ScheduleError(idx, "discard-absent", f"vertex {v} is not red in hue {mv.hue}")
            mine.discard(v)
        else:
            raise ScheduleError(idx, "unknown-move", mv.kind)
        assert len(mine) <= M, "red pebble cap exceeded"
        peak[mv.hue] = max(peak[mv.hue], len(mine))
    unfinished = [v for v in cdag.outputs if v not in blue]
    if unfinished:
        raise ScheduleError(len(schedule.moves), "unfinished-outputs", f"outputs {unfinished} lack blue pebbles")
    return Replay(loads + stores, loads, stores, per_hue, peak)


def _future_uses(cdag: CDag, order: Sequence[int]) -> dict[int, list[int]]:
    uses: dict[int, list[int]] = {}
    for pos, v in enumerate(order):
        for p in cdag.preds[v]:
            uses.setdefault(p, []).append(pos)
    return uses


def greedy_schedule(cdag: CDag, M: int, order: Sequence[int] | None = None) -> Schedule:
    """Sequential schedule in ``order`` with furthest-next-use eviction; no recomputation."""
    if M < cdag.max_in_degree + 1:
        raise ValueError(f"M={M} is below max in-degree + 1 = {cdag.max_in_degree + 1}")
    order = list(order) if order is not None else cdag.computes
    uses = _future_uses(cdag, order)
    outputs = set(cdag.outputs)
    red: set[int] = set()
    blue = set(cdag.inputs)
    moves: list[Move] = []

    def next_use(x, pos):
        return next((p for p in uses.get(x, []) if p >= pos), float("inf"))

    def make_room(pos, keep):
        while len(red) >= M:
            victim = max((x for x in red if x not in keep), key=lambda x: (next_use(x, pos), x))
            if victim not in blue and next_use(victim, pos) != float("inf"):
                moves.append(Move("store", victim))
                blue.add(victim)
            moves.append(Move("discard", victim))
            red.discard(victim)

    for pos, v in enumerate(order):
        keep = set(cdag.preds[v])
        for p in cdag.preds[v]:
            if p not in red:
                make_room(pos, keep)
                moves.append(Move("load", p))
                red.add(p)
        make_room(pos, keep)
        moves.append(Move("compute", v))
        red.add(v)
        if v in outputs:
            moves.append(Move("store", v))
            blue.add(v)
    return Schedule(moves)


def random_schedule(cdag: CDag, M: int, hues: int = 1, seed: int | None = None, noise: float = 0.3) -> Schedule:
    """Random valid schedule: random topological order, random hues, random extra loads and discards."""
    if M < cdag.max_in_degree + 1:
        raise ValueError("M too small for this graph")
    rng = random.Random(seed)
    g = cdag.graph()
    indeg = {v: len(cdag.preds[v]) for v in range(cdag.n)}
    ready = [v for v in range(cdag.n) if indeg[v] == 0]
    order = []
    while ready:
        v = ready.pop(rng.randrange(len(ready)))
        if cdag.kinds[v] != "input":
            order.append(v)
        for s in g.successors(v):
            indeg[s] -= 1
            if indeg[s] == 0:
                ready.append(s)
    uses = _future_uses(cdag, order)
    outputs = set(cdag.outputs)
    red = [set() for _ in range(hues)]
    blue = set(cdag.inputs)
    moves: list[Move] = []

    def needed_later(x, pos):
        return any(p >= pos for p in uses.get(x, []))

    def evict(h, x, pos):
        if x not in blue and needed_later(x, pos):
            moves.append(Move("store", x, h))
            blue.add(x)
        moves.append(Move("discard", x, h))
        red[h].discard(x)

    def make_room(h, pos, keep):
        while len(red[h]) >= M:
            evict(h, rng.choice(sorted(red[h] - keep)), pos)

    for pos, v in enumerate(order):
        h = rng.randrange(hues)
        if rng.random() < noise:
            extra = rng.choice(sorted(blue | set().union(*red)))
            if extra not in red[h]:
                make_room(h, pos, set())
                moves.append(Move("load", extra, h))
                red[h].add(extra)
        if rng.random() < noise and red[h]:
            evict(h, rng.choice(sorted(red[h])), pos)
        keep = set(cdag.preds[v])
        for p in cdag.preds[v]:
            if p not in red[h]:
                make_room(h, pos, keep)
                if p not in blue and not any(p in r for r in red):
                    raise AssertionError("value lost")  # eviction always stores live values
                moves.append(Move("load", p, h))
                red[h].add(p)
        make_room(h, pos, keep)
        moves.append(Move("compute", v, h))
        red[h].add(v)
        if v in outputs:
            moves.append(Move("store", v, h))
            blue.add(v)
    return Schedule(moves)


# --------------------------------------------------------------------------
# exhaustive minimum-I/O search


@dataclass
class SearchResult:
    q: int | None
    optimal: bool
    feasible: bool
    schedule: Schedule | None
    expanded: int
    note: str = ""


MAX_SEARCH_COMPUTES = 12


def min_io_search(cdag: CDag, M: int, limit: int = 3_000_000) -> SearchResult:
    """Minimum number of loads and stores over all sequential schedules.

    A* over (red set, blue set) with recomputation allowed.  Two reductions
    keep the space small without losing optimality: discards happen only
    when a placement needs room, and an output is stored right after it is
    computed (storing earlier never costs more).  The heuristic counts
    unstored outputs plus input predecessors of those outputs that are not
    red, each of which needs its own load.
    """
    if len(cdag.computes) > MAX_SEARCH_COMPUTES:
        raise ValueError(f"search limited to {MAX_SEARCH_COMPUTES} compute vertices")
    if M < cdag.max_in_degree + 1:
        return SearchResult(None, False, False, None, 0,
                            f"infeasible: M={M} below max in-degree + 1 = {cdag.max_in_degree + 1}")
    n = cdag.n
    pmask = [sum(1 << p for p in cdag.preds[v]) for v in range(n)]
    in_mask = sum(1 << v for v in cdag.inputs)
    out_mask = sum(1 << v for v in cdag.outputs)
    computes = cdag.computes
    outputs = cdag.outputs

    # descendants including the vertex itself
    desc = [0] * n
    for v in reversed(list(nx.topological_sort(cdag.graph()))):
        desc[v] = 1 << v
        for w in cdag.succs[v]:
            desc[v] |= desc[w]

    def h(red, blue):
        # every unstored output needs a store; vertices with neither pebble
        # that lead to it must be computed, which forces loads of their
        # non-red input ancestors
        pending = out_mask & ~blue
        stack = [v for v in outputs if pending >> v & 1]
        seen = pending
        forced = 0
        while stack:
            w = stack.pop()
            for p in cdag.preds[w]:
                bit = 1 << p
                if red & bit or seen & bit:
                    continue
                seen |= bit
                if in_mask & bit:
                    forced |= bit
                elif not blue & bit:
                    stack.append(p)
        return bin(pending).count("1") + bin(forced).count("1")

    start = (0, in_mask)
    g = {start: 0}
    parent: dict[tuple, tuple] = {}
    tie = itertools.count()
    heap = [(h(*start), next(tie), 0, start)]
    expanded = 0
    upper = None
    try:
        upper = greedy_schedule(cdag, M)
    except ValueError:
        pass

    while heap:
        f, _, gc, state = heapq.heappop(heap)
        if gc > g.get(state, float("inf")):
            continue
        red, blue = state
        if blue & out_mask == out_mask:
            return SearchResult(gc, True, True, _rebuild(parent, state, n), expanded)
        expanded += 1
        if expanded > limit:
            q = None if upper is None else upper.io_count
            return SearchResult(q, False, True, upper, expanded, "node budget exhausted; greedy upper bound returned")
        full = bin(red).count("1") >= M
        live = out_mask & ~blue

        def push(nr, nb, cost, moves):
            ns = (nr, nb)
            ng = gc + cost
            if ng < g.get(ns, float("inf")):
                g[ns] = ng
                parent[ns] = (state, moves)
                heapq.heappush(heap, (ng + h(nr, nb), next(tie), ng, ns))

        def placements(keep):
            # (red after making room, discarded vertex or None)
            if not full:
                yield red, None
                return
            rest = red & ~keep
            while rest:
                low = rest & -rest
                yield red & ~low, low.bit_length() - 1
                rest ^= low

        # load
        cand = blue & ~red
        while cand:
            low = cand & -cand
            v = low.bit_length() - 1
            cand ^= low
            if not desc[v] & live:
                continue
            for r2, d in placements(0):
                push(r2 | low, blue, 1, (d, ("load", v)))
        # compute
        for v in computes:
            bit = 1 << v
            if red & bit or pmask[v] & ~red or not desc[v] & live:
                continue
            for r2, d in placements(pmask[v]):
                if out_mask & bit and not blue & bit:
                    push(r2 | bit, blue | bit, 1, (d, ("compute", v), ("store", v)))
                else:
                    push(r2 | bit, blue, 0, (d, ("compute", v)))
        # spill a non-output value
        cand = red & ~blue & ~out_mask
        while cand:
            low = cand & -cand
            cand ^= low
            if not desc[low.bit_length() - 1] & live & ~low:
                continue
            push(red, blue | low, 1, (None, ("store", low.bit_length() - 1)))
    return SearchResult(None, False, False, None, expanded, "no schedule reaches the outputs")


def _rebuild(parent, state, n) -> Schedule:
    steps = []
    while state in parent:
        state, moves = parent[state]
        steps.append(moves)
    out = []
    for moves in reversed(steps):
        discard, *rest = moves
        if discard is not None:
            out.append(Move("discard", discard))
        out.extend(Move(k, v) for k, v in rest)
    return Schedule(out)


# --------------------------------------------------------------------------
# X-partitions


@dataclass
class XPartition:
    subcomputations: list[frozenset[int]]
    X: int

    def __post_init__(self):
        self.subcomputations = [frozenset(s) for s in self.subcomputations]


@dataclass
class SetCheck:
    dom_min_upper: int
    min_set: int
    within_x: bool


@dataclass
class PartitionCheck:
    sets: list[SetCheck]
    acyclic: bool
    uncovered: list[int]

    @property
    def valid(self) -> bool:
        return self.acyclic and all(s.within_x for s in self.sets)


def min_set(cdag: CDag, part: Iterable[int]) -> set[int]:
    part = set(part)
    return {v for v in part if not any(s in part for s in cdag.succs[v])}


def dominator_size(cdag: CDag, part: Iterable[int]) -> int:
    """Smallest vertex set meeting every path from a graph input into ``part``.

    Vertices of ``part`` may themselves belong to the set.  Computed as a
    minimum vertex cut (unit capacities on split vertices), which is exact.
    """
    part = set(part)
    if not part:
        return 0
    g = nx.DiGraph()
    for v in range(cdag.n):
        g.add_edge(("in", v), ("out", v), capacity=1)
    for u, v in cdag.edges:
        g.add_edge(("out", u), ("in", v))
    for v in cdag.inputs:
        g.add_edge("s", ("in", v))
    for v in part:
        g.add_edge(("out", v), "t")
    return int(nx.maximum_flow_value(g, "s", "t"))


def quotient_acyclic(cdag: CDag, sets: Sequence[frozenset[int]]) -> bool:
    owner = {v: i for i, s in enumerate(sets) for v in s}
    q = nx.DiGraph()
    node = lambda v: ("set", owner[v]) if v in owner else ("v", v)
    q.add_nodes_from(node(v) for v in range(cdag.n))
    for u, v in cdag.edges:
        a, b = node(u), node(v)
        if a != b:
            q.add_edge(a, b)
    return nx.is_directed_acyclic_graph(q)


def check_xpartition(cdag: CDag, partition: XPartition) -> PartitionCheck:
    seen: set[int] = set()
    computes = set(cdag.computes)
    for s in partition.subcomputations:
        if s & seen:
            raise ValueError(f"subcomputations overlap on {sorted(s & seen)}")
        if s - computes:
            raise ValueError(f"non-compute vertices {sorted(s - computes)} in a subcomputation")
        seen |= s
    checks = []
    for s in partition.subcomputations:
        dom = dominator_size(cdag, s)
        mn = len(min_set(cdag, s))
        checks.append(SetCheck(dom, mn, dom <= partition.X and mn <= partition.X))
    return PartitionCheck(checks, quotient_acyclic(cdag, partition.subcomputations), sorted(computes - seen))


def partition_by_label(cdag: CDag, key) -> list[frozenset[int]]:
    groups: dict[object, set[int]] = {}
    for v in cdag.computes:
        groups.setdefault(key(cdag.labels[v]), set()).add(v)
    return [frozenset(groups[k]) for k in sorted(groups)]
