"""CSV persistence of traces.

Header is ``k,F_res,H_gap,dist,eps,step_norm,E_lambda`` (``t`` instead of
``k`` for flows). Floats are written with the shortest decimal string
that round-trips (``repr``); unavailable values are left blank.
"""
import csv
import math
from pathlib import Path

import numpy as np

from .diagnostics import FIELDS, FlowTrace, RunTrace
from .errors import IoError, ParseError

__all__ = ["HEADER", "format_float", "write_trace_csv", "read_trace_csv", "trace_rows"]

HEADER = ("k",) + FIELDS


def format_float(v):
    """Shortest round-trip decimal, blank for NaN."""
    v = float(v)
    if math.isnan(v):
        return ""
    return repr(v)


def trace_rows(trace):
    idx = trace.index
    flow = trace.index_name == "t"
    cols = [trace.column(f) for f in FIELDS]
    for i in range(len(idx)):
        first = format_float(idx[i]) if flow else str(int(idx[i]))
        yield [first] + [format_float(c[i]) for c in cols]


def write_trace_csv(trace, path):
    path = Path(path)
    header = (trace.index_name,) + FIELDS
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(trace_rows(trace))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def _parse(cell, lineno, name):
    if cell == "":
        return np.nan
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"bad value {cell!r} in column {name}", lineno) from None


def read_trace_csv(path):
    """Read a trace CSV back into a :class:`RunTrace` or :class:`FlowTrace`.

    Raises
    ------
    IoError
        If the file cannot be opened.
    ParseError
        On a wrong header or malformed row (message includes the file name).
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[1:]) != FIELDS or header[0] not in ("k", "t"):
            raise ParseError(f"{path}: unexpected header {header!r}", 1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(HEADER):
                raise ParseError(f"{path}: expected {len(HEADER)} fields", lineno)
            rows.append([_parse(c, lineno, n) for c, n in zip(row, header)])
    arr = np.array(rows, dtype=float).reshape(-1, len(HEADER))
    cols = {f: arr[:, i + 1] for i, f in enumerate(FIELDS)}
    if header[0] == "t":
        return FlowTrace(k=arr[:, 0], **cols, meta={"file": str(path)})
    return RunTrace(k=arr[:, 0].astype(np.int64), **cols, meta={"file": str(path)})
