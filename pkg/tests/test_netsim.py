import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iolab.netsim import (
    CSV_FIELDS,
    DeadlockError,
    MachineConfig,
    MemoryCapError,
    SimulationError,
    payload_words,
    run_spmd,
)


def ring(comm):
    right, left = (comm.rank + 1) % comm.size, (comm.rank - 1) % comm.size
    comm.send(right, np.array([comm.rank], dtype=float), tag="ring")
    got = yield from comm.recv(left, "ring")
    return int(got[0])


def test_ring_four_ranks():
    led = run_spmd(MachineConfig(4, 16), ring)
    assert led.returns == [3, 0, 1, 2]
    assert len(led.entries) == 4 and led.total_words == 4
    assert led.received().tolist() == [1, 1, 1, 1]
    assert led.sent().tolist() == [1, 1, 1, 1]
    e = led.entries[0]
    assert (e.op, e.words, e.bytes) == ("recv", 1, 8)


def test_single_rank_records_nothing():
    led = run_spmd(MachineConfig(1, 16), ring)
    assert led.returns == [0]
    assert led.entries == []


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.integers(1, 40))
def test_words_conserved(P, n):
    def prog(comm):
        if comm.rank == 0:
            for r in range(1, comm.size):
                comm.send(r, np.zeros(n * r))
        else:
            yield from comm.recv(0)
        return None

    led = run_spmd(MachineConfig(P, 10**6), prog)
    assert led.received().sum() == led.sent().sum() == n * P * (P - 1) // 2
    assert led.sent()[0] == led.total_words


def test_bcast_and_reduce():
    def prog(comm):
        group = list(range(comm.size))
        x = yield from comm.bcast(group, 2, np.arange(5.0) if comm.rank == 2 else None)
        total = yield from comm.reduce(group, 0, x * (comm.rank + 1))
        return total

    led = run_spmd(MachineConfig(4, 100), prog)
    assert np.allclose(led.returns[0], np.arange(5.0) * 10)
    assert led.by_tag() == {"bcast": 15, "reduce": 15}
    assert {e.op for e in led.entries} == {"bcast", "reduce"}


def test_scatter_and_allgather():
    def prog(comm):
        group = [0, 1, 2]
        part = yield from comm.scatter(group, 1, [np.full(3, r) for r in group] if comm.rank == 1 else None)
        return (yield from comm.allgather(group, int(part[0])))

    led = run_spmd(MachineConfig(3, 100), prog)
    assert led.returns == [[0, 1, 2]] * 3
    assert led.received().tolist() == [3 + 2, 0 + 2, 3 + 2]


def test_bcast_zero_words_not_charged():
    def prog(comm):
        yield from comm.bcast([0, 1], 0, None)

    led = run_spmd(MachineConfig(2, 4), prog)
    assert led.entries == []


def test_deadlock_detected():
    def prog(comm):
        yield from comm.recv((comm.rank + 1) % comm.size, "never")

    with pytest.raises(DeadlockError):
        run_spmd(MachineConfig(3, 4), prog)


def test_unreceived_message_detected():
    def prog(comm):
        if comm.rank == 0:
            comm.send(1, np.ones(2))
        return None

    with pytest.raises(DeadlockError):
        run_spmd(MachineConfig(2, 4), prog)


def test_bad_destination():
    def prog(comm):
        comm.send(7, np.ones(1))

    with pytest.raises(SimulationError):
        run_spmd(MachineConfig(2, 4), prog)


def test_strict_memory_cap():
    def prog(comm):
        comm.store["a"] = np.zeros(10)
        yield

    with pytest.raises(MemoryCapError) as err:
        run_spmd(MachineConfig(2, 8, strict_memory=True), prog)
    assert err.value.resident == 10
    run_spmd(MachineConfig(2, 8), prog)  # lenient mode only tracks


def test_iteration_attribution():
    def prog(comm):
        for t in range(3):
            comm.iteration = t
            comm.send(1 - comm.rank, np.zeros(t + 1), tag=t)
            yield from comm.recv(1 - comm.rank, t)

    led = run_spmd(MachineConfig(2, 10), prog)
    per = led.by_iteration()
    assert sorted(per) == [0, 1, 2]
    assert [per[t].tolist() for t in range(3)] == [[1, 1], [2, 2], [3, 3]]


def test_csv_schema():
    led = run_spmd(MachineConfig(3, 16), ring)
    rows = list(csv.DictReader(io.StringIO(led.to_csv())))
    assert tuple(rows[0]) == CSV_FIELDS
    assert sum(int(r["words"]) for r in rows) == 3
    assert all(int(r["bytes"]) == 8 * int(r["words"]) for r in rows)


def test_payload_words():
    assert payload_words(None) == 0
    assert payload_words(np.zeros((3, 4))) == 12
    assert payload_words([np.zeros(2), np.zeros(3)]) == 5
    assert payload_words(2.5) == 1


def test_machine_config_validation():
    with pytest.raises(ValueError):
        MachineConfig(0, 4)
