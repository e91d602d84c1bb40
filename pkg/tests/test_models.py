import csv
import io
import math

import pytest
from hypothesis import given, settings, strategies as st

from iolab.models import MODELS, eval_model, replication_memory, parse_ranks, sweep, to_csv, weak_scaling_n


def test_known_values():
    assert eval_model("conflux", 1024, 16, 65536) == pytest.approx(1024**3 / (16 * 256))
    assert eval_model("2d", 1000, 100, 1) == pytest.approx(1e5)
    assert eval_model("2d", 1000, 100, 1) == eval_model("2d", 1000, 100, 1e9)


@settings(max_examples=200)
@given(st.integers(1, 10**6), st.integers(1, 10**6), st.integers(1, 10**10))
def test_candmc_is_five_times_conflux_exactly(N, P, M):
    assert eval_model("candmc", N, P, M, exact=True) / eval_model("conflux", N, P, M, exact=True) == 5


@settings(max_examples=200)
@given(st.floats(1, 1e6), st.floats(1, 1e6), st.floats(1, 1e10))
def test_float_and_exact_agree(N, P, M):
    for name in MODELS:
        assert eval_model(name, N, P, M) == pytest.approx(float(eval_model(name, N, P, M, exact=True)), rel=1e-12)


def test_unknown_model_and_bad_inputs():
    with pytest.raises(ValueError):
        eval_model("scalapack", 1, 1, 1)
    with pytest.raises(ValueError):
        eval_model("conflux", 0, 1, 1)


def test_replication_memory_and_weak_scaling():
    assert replication_memory(1000, 8) == pytest.approx(1000**2 / 4)
    assert weak_scaling_n(100, 27) == pytest.approx(300)


def test_weak_sweep_constant_per_rank_words():
    rows = sweep(["conflux", "candmc"], parse_ranks("1:4096"), weak=1000)
    conflux = [r.words for r in rows if r.model == "conflux"]
    assert max(conflux) / min(conflux) - 1 < 1e-9
    assert conflux[0] == pytest.approx(1000**2)


def test_strong_sweep_fixed_memory():
    rows = sweep(["conflux", "2d"], [4, 16], n=4096, memory=2**20)
    by = {(r.model, r.P): r.words for r in rows}
    assert by[("conflux", 16)] == pytest.approx(by[("conflux", 4)] / 4)
    assert by[("2d", 16)] == pytest.approx(by[("2d", 4)] / 2)


def test_sweep_needs_one_size():
    with pytest.raises(ValueError):
        sweep(["conflux"], [4])
    with pytest.raises(ValueError):
        sweep(["conflux"], [4], n=10, weak=10)


@pytest.mark.parametrize("text,out", [("4:64", [4, 8, 16, 32, 64]), ("8,27,64", [8, 27, 64]), ("1:1", [1])])
def test_parse_ranks(text, out):
    assert parse_ranks(text) == out


def test_csv_output():
    rows = sweep(["conflux"], [8], n=512)
    parsed = list(csv.DictReader(io.StringIO(to_csv(rows))))
    assert parsed[0]["model"] == "conflux"
    assert float(parsed[0]["bytes"]) == 8 * float(parsed[0]["words"])
    assert math.isclose(float(parsed[0]["M"]), 512**2 / 4)
