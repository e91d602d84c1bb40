"""Bulk-synchronous simulated machine with exact word accounting.

Rank programs are generator functions taking a :class:`Comm`.  A ``yield``
ends the rank's current superstep; messages sent during a superstep become
visible to receivers after the boundary.  ``yield from comm.recv(...)``
blocks (across supersteps) until a matching message arrives.

The ledger holds one row per remote transfer, seen from the receiver:
``rank`` received ``words`` from ``peer``.  Self-sends are free.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

OPS = ("recv", "bcast", "reduce", "scatter", "allgather")


class SimulationError(RuntimeError):
    pass


class DeadlockError(SimulationError):
    pass


class MemoryCapError(SimulationError):
    def __init__(self, rank: int, step: int, resident: int, cap: int):
        self.rank, self.step, self.resident, self.cap = rank, step, resident, cap
        super().__init__(f"rank {rank} holds {resident} words at superstep {step} (cap {cap})")


@dataclass(frozen=True)
class MachineConfig:
    ranks: int
    memory: int
    word_size: int = 8
    strict_memory: bool = False

    def __post_init__(self):
        if self.ranks < 1 or self.memory < 1:
            raise ValueError("ranks and memory must be positive")


@dataclass(frozen=True)
class LedgerEntry:
    step: int
    rank: int
    op: str
    peer: int
    words: int
    bytes: int
    iteration: int = -1
    tag: str = ""


CSV_FIELDS = ("step", "rank", "op", "peer", "words", "bytes", "iteration", "tag")


@dataclass
class CommLedger:
    ranks: int
    word_size: int = 8
    entries: list[LedgerEntry] = field(default_factory=list)
    returns: list[Any] = field(default_factory=list)
    supersteps: int = 0

    def received(self, rank: int | None = None) -> np.ndarray | int:
        out = np.zeros(self.ranks, dtype=np.int64)
        for e in self.entries:
            out[e.rank] += e.words
        return out if rank is None else int(out[rank])

    def sent(self) -> np.ndarray:
        out = np.zeros(self.ranks, dtype=np.int64)
        for e in self.entries:
            out[e.peer] += e.words
        return out

    @property
    def total_words(self) -> int:
        return sum(e.words for e in self.entries)

    @property
    def max_received(self) -> int:
        return int(self.received().max()) if self.ranks else 0

    def by_iteration(self) -> dict[int, np.ndarray]:
        """Per-rank received words for each algorithm iteration tag."""
        out: dict[int, np.ndarray] = defaultdict(lambda: np.zeros(self.ranks, dtype=np.int64))
        for e in self.entries:
            out[e.iteration][e.rank] += e.words
        return dict(sorted(out.items()))

    def by_tag(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for e in self.entries:
            out[e.tag] += e.words
        return dict(sorted(out.items()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for e in self.entries:
            w.writerow([getattr(e, f) for f in CSV_FIELDS])
        return buf.getvalue()

    def summary(self) -> dict:
        recv = self.received()
        return {
            "ranks": self.ranks,
            "word_size": self.word_size,
            "supersteps": self.supersteps,
            "total_words": self.total_words,
            "received_words": recv.tolist(),
            "sent_words": self.sent().tolist(),
            "max_received_words": int(recv.max()) if self.ranks else 0,
            "max_received_bytes": int(recv.max()) * self.word_size if self.ranks else 0,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def payload_words(payload: Any) -> int:
    if payload is None:
        return 0
    if isinstance(payload, np.ndarray):
        return int(payload.size)
    if isinstance(payload, (int, float, complex, np.number)):
        return 1
    if isinstance(payload, (tuple, list)):
        return sum(payload_words(x) for x in payload)
    if isinstance(payload, dict):
        return sum(payload_words(x) for x in payload.values())
    raise TypeError(f"cannot size payload of type {type(payload).__name__}; pass words=")


@dataclass
class _Message:
    src: int
    tag: Any
    payload: Any


def _label(tag: Any) -> str:
    # ("panel-L", t) -> "panel-L"
    if isinstance(tag, tuple) and tag:
        tag = tag[0]
    return "" if tag is None else str(tag)


class Comm:
    """Per-rank handle: messaging, collectives and the rank's resident store."""

    def __init__(self, sim: "_Sim", rank: int):
        self._sim = sim
        self.rank = rank
        self.size = sim.config.ranks
        self.iteration = -1
        self.store: dict[str, Any] = {}
        self._inbox: dict[tuple[int, Any], deque] = defaultdict(deque)
        self.waiting: tuple | None = None

    @property
    def step(self) -> int:
        return self._sim.step

    @property
    def resident_words(self) -> int:
        return sum(payload_words(x) for x in self.store.values())

    def send(self, dst: int, payload: Any, *, tag: Any = None, op: str = "recv", words: int | None = None, label: str = ""):
        if not 0 <= dst < self.size:
            raise SimulationError(f"rank {self.rank} sends to unknown rank {dst}")
        if op not in OPS:
            raise ValueError(f"unknown op {op!r}")
        n = payload_words(payload) if words is None else int(words)
        self._sim.post(self.rank, dst, tag, payload, op, n, label or _label(tag), self.iteration)

    def poll(self, src: int, tag: Any = None) -> bool:
        return bool(self._inbox.get((src, tag)))

    def recv(self, src: int, tag: Any = None):
        """Generator: ``value = yield from comm.recv(src, tag)``."""
        while True:
            box = self._inbox.get((src, tag))
            if box:
                return box.popleft().payload
            self.waiting = (src, tag)
            yield
            self.waiting = None

    # -- collectives -------------------------------------------------------
    # group: ordered rank list; root: a member.  Every member must call.

    def _check(self, group: Sequence[int], root: int | None = None):
        if self.rank not in group:
            raise SimulationError(f"rank {self.rank} is outside the group {list(group)}")
        if root is not None and root not in group:
            raise SimulationError(f"root {root} is outside the group")

    def bcast(self, group: Sequence[int], root: int, data: Any = None, *, tag: Any = "bcast", words: int | None = None):
        self._check(group, root)
        if self.rank == root:
            for r in group:
                if r != root:
                    self.send(r, data, tag=tag, op="bcast", words=words)
            return data
        return (yield from self.recv(root, tag))

    def reduce(self, group: Sequence[int], root: int, data: np.ndarray, *, tag: Any = "reduce"):
        """Sum at ``root`` in ascending group order; non-roots send their full buffer."""
        self._check(group, root)
        if self.rank != root:
            self.send(root, data, tag=tag, op="reduce")
            return None
        total = None
        for r in sorted(group):
            part = data if r == root else (yield from self.recv(r, tag))
            total = np.array(part, dtype=float, copy=True) if total is None else total + part
        return total

    def scatter(self, group: Sequence[int], root: int, parts: Sequence[Any] | None = None, *, tag: Any = "scatter"):
        self._check(group, root)
        if self.rank == root:
            if parts is None or len(parts) != len(group):
                raise SimulationError("scatter needs one part per group member")
            for r, part in zip(group, parts):
                if r != root:
                    self.send(r, part, tag=tag, op="scatter")
            return parts[list(group).index(root)]
        return (yield from self.recv(root, tag))

    def allgather(self, group: Sequence[int], data: Any, *, tag: Any = "allgather"):
        self._check(group)
        for r in group:
            if r != self.rank:
                self.send(r, data, tag=tag, op="allgather")
        out = []
        for r in group:
            out.append(data if r == self.rank else (yield from self.recv(r, tag)))
        return out


class _Sim:
    def __init__(self, config: MachineConfig, max_supersteps: int):
        self.config = config
        self.step = 0
        self.max_supersteps = max_supersteps
        self.ledger = CommLedger(config.ranks, config.word_size)
        self.pending: list[tuple[int, int, Any, Any]] = []
        self.comms = [Comm(self, r) for r in range(config.ranks)]

    def post(self, src, dst, tag, payload, op, words, label, iteration):
        self.pending.append((src, dst, tag, payload))
        if src != dst and words > 0:
            self.ledger.entries.append(
                LedgerEntry(self.step, dst, op, src, words, words * self.config.word_size, iteration, label)
            )

    def deliver(self) -> int:
        n = len(self.pending)
        for src, dst, tag, payload in self.pending:
            self.comms[dst]._inbox[(src, tag)].append(_Message(src, tag, payload))
        self.pending = []
        return n


def run_spmd(
    config: MachineConfig,
    program: Callable[[Comm], Any],
    *,
    max_supersteps: int = 1_000_000,
) -> CommLedger:
    """Run ``program`` on every rank and return the communication ledger.

    Rank return values are collected in ``ledger.returns``.
    """
    sim = _Sim(config, max_supersteps)
    gens: dict[int, Any] = {}
    returns: list[Any] = [None] * config.ranks
    for comm in sim.comms:
        out = program(comm)
        if hasattr(out, "__next__"):
            gens[comm.rank] = out
        else:
            returns[comm.rank] = out
    while gens:
        for r in sorted(gens):
            try:
                next(gens[r])
            except StopIteration as stop:
                returns[r] = stop.value
                del gens[r]
        delivered = sim.deliver()
        if config.strict_memory:
            for comm in sim.comms:
                if comm.resident_words > config.memory:
                    raise MemoryCapError(comm.rank, sim.step, comm.resident_words, config.memory)
        sim.step += 1
        if gens and delivered == 0 and all(sim.comms[r].waiting is not None for r in gens):
            waits = {r: sim.comms[r].waiting for r in sorted(gens)}
            raise DeadlockError(f"superstep {sim.step}: every live rank waits on a message that was never sent: {waits}")
        if sim.step > max_supersteps:
            raise SimulationError("superstep limit exceeded")
    sim.deliver()
    leftovers = [(comm.rank, key) for comm in sim.comms for key, box in comm._inbox.items() if box]
    if leftovers:
        raise DeadlockError(f"unreceived messages at termination: {leftovers[:5]}")
    sim.ledger.returns = returns
    sim.ledger.supersteps = sim.step
    return sim.ledger
