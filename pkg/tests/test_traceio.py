import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tikhonov_bilevel.algorithms import Method, SolverConfig, run
from tikhonov_bilevel.core import Schedule
from tikhonov_bilevel.diagnostics import FIELDS, FlowTrace, RunTrace
from tikhonov_bilevel.errors import IoError, ParseError
from tikhonov_bilevel.traceio import format_float, read_trace_csv, write_trace_csv


def test_header(tmp_path, toy):
    tr = run(toy, SolverConfig(Method.BPG, Schedule(1, 0.9), 5), np.zeros(toy.dimension))
    f = write_trace_csv(tr, tmp_path / "t.csv")
    assert f.read_text().splitlines()[0] == "k,F_res,H_gap,dist,eps,step_norm,E_lambda"


def test_energy_blank_without_oracle(tmp_path, small_l1_problem):
    c = SolverConfig(Method.BPG, Schedule(1, 0.9), 3)
    tr = run(small_l1_problem, c, np.zeros(small_l1_problem.dimension))
    lines = write_trace_csv(tr, tmp_path / "t.csv").read_text().splitlines()
    assert all(line.endswith(",") for line in lines[1:])


def test_format_float():
    assert format_float(np.nan) == ""
    assert format_float(0.1) == "0.1"
    assert format_float(np.inf) == "inf"


finite_or_nan = st.one_of(st.floats(allow_nan=False, allow_infinity=False), st.just(float("nan")))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(0, 20), data=st.data(), flow=st.booleans())
def test_round_trip_exact(tmp_path_factory, n, data, flow):
    cols = {f: np.array(data.draw(st.lists(finite_or_nan, min_size=n, max_size=n)), float)
            for f in FIELDS}
    if flow:
        t = np.array(sorted(data.draw(st.lists(st.floats(1.0, 1e6), min_size=n, max_size=n))))
        tr = FlowTrace(k=t, **cols)
    else:
        tr = RunTrace(k=np.arange(n), **cols)
    path = tmp_path_factory.mktemp("rt") / "t.csv"
    write_trace_csv(tr, path)
    back = read_trace_csv(path)
    assert type(back) is type(tr)
    np.testing.assert_array_equal(back.k, tr.k)
    for f in FIELDS:
        np.testing.assert_array_equal(getattr(back, f), getattr(tr, f))
    # writing again is byte identical
    path2 = path.with_name("t2.csv")
    write_trace_csv(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_bad_header(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("k,F\n0,1\n")
    with pytest.raises(ParseError, match="bad.csv"):
        read_trace_csv(f)


def test_bad_value(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("k,F_res,H_gap,dist,eps,step_norm,E_lambda\n0,x,,,,,\n")
    with pytest.raises(ParseError) as ei:
        read_trace_csv(f)
    assert ei.value.line == 2


def test_missing(tmp_path):
    with pytest.raises(IoError):
        read_trace_csv(tmp_path / "nope.csv")
