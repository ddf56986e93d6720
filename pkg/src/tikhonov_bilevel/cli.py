"""Config-driven experiment runner.

Verbs::

    bilevel run     --config FILE [--set path=value ...] [--jobs N] [--force] [--sample-seed S]
    bilevel compare --config FILE [...]
    bilevel flow    --config FILE [...]
    bilevel report  OUTPUT_DIR

Config files are YAML (JSON is accepted too). A manifest written by
``run`` or ``flow`` is itself a valid config: re-running it reproduces
the trace CSVs byte for byte.

Exit codes: 0 success, 1 validation, 2 runtime, 3 I/O.
"""
import argparse
import copy
import datetime
import functools
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import problems as P
from .algorithms import Method, SolverConfig, effective_schedule, lyapunov_params, run
from .core import Oracle, Schedule
from .diagnostics import (
    best_iterate,
    check_dissipation_first,
    check_dissipation_second,
    check_holder_growth,
    fit_loglog,
)
from .errors import (
    BilevelError,
    IoError,
    MissingOracle,
    NonPositiveValues,
    ParseError,
    ValidationError,
)
from .flows import FlowConfig, integrate
from .traceio import read_trace_csv, write_trace_csv

log = logging.getLogger("tikhonov_bilevel")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
MANIFEST = "manifest.json"
MANIFEST_VERSION = 1

# admissible ranges for swept delta, after halving for first-order methods
DELTA_RANGE = {
    Method.BPG: (0.0, 1.0, False),
    Method.StaBiM: (0.0, 1.0, False),
    Method.BiSG2: (0.5, 1.0, True),
    Method.BFPG: (0.0, 2.0, False),
    Method.FBiPG: (0.0, 2.0, False),
}

METHOD_KEYS = {
    "method", "schedule", "max_iter", "step", "alpha", "gamma", "step_fraction",
    "stabim_theta_tilde", "stabim_eta0", "stabim_eta_shrink", "lam", "label",
}
FLOW_KEYS = {
    "order", "schedule", "t_end", "alpha", "dt", "x0", "v0", "samples_per_decade",
    "lam", "label",
}


# -- config handling --------------------------------------------------------


def load_config(path):
    """Read a YAML/JSON config; a manifest yields its embedded config."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"config {path} is not a mapping")
    if "manifest_version" in data:
        data = data["config"]
    return data


def _split_path(path):
    return [int(p) if p.isdigit() else p for p in path.split(".")]


def apply_override(cfg, assignment):
    """Apply ``a.b.0.c=value``; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ValidationError(f"override {assignment!r} is not path=value", "--set")
    path, raw = assignment.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    keys = _split_path(path.strip())
    node = cfg
    for i, key in enumerate(keys[:-1]):
        nxt = keys[i + 1]
        if isinstance(node, list):
            if not isinstance(key, int) or key >= len(node):
                raise ValidationError("index out of range", path)
            node = node[key]
        else:
            if key not in node or node[key] is None:
                node[key] = [] if isinstance(nxt, int) else {}
            node = node[key]
    last = keys[-1]
    if isinstance(node, list):
        if not isinstance(last, int) or last >= len(node):
            raise ValidationError("index out of range", path)
    node[last] = value
    return cfg


def _num(d, key, path, default=None, kind=float, required=False):
    if key not in d or d[key] is None:
        if required:
            raise ValidationError("is required", f"{path}.{key}")
        return default
    try:
        return kind(d[key])
    except (TypeError, ValueError):
        raise ValidationError(f"expected {kind.__name__}, got {d[key]!r}", f"{path}.{key}") from None


def parse_schedule(d, path):
    if not isinstance(d, dict):
        raise ValidationError("must be a mapping", path)
    if d.get("off"):
        return Schedule.off(
            _num(d, "delta", path, 1.0), _num(d, "beta", path, 1.0), _num(d, "t0", path, 1.0)
        )
    args = (
        _num(d, "c", path, 1.0),
        _num(d, "delta", path, required=True),
        _num(d, "beta", path, 1.0),
        _num(d, "t0", path, 1.0),
    )
    try:
        return Schedule(*args)
    except ValidationError as exc:
        raise ValidationError(exc.message, f"{path}.{exc.path}" if exc.path else path) from None


def parse_method(d, path):
    if not isinstance(d, dict):
        raise ValidationError("must be a mapping", path)
    unknown = set(d) - METHOD_KEYS
    if unknown:
        raise ValidationError(f"unknown keys {sorted(unknown)}", path)
    if "method" not in d:
        raise ValidationError("is required", f"{path}.method")
    try:
        m = Method.parse(d["method"])
    except ValidationError:
        raise ValidationError(f"unknown method {d['method']!r}", f"{path}.method") from None
    kw = {}
    for key in ("step", "alpha", "gamma", "step_fraction", "stabim_theta_tilde",
                "stabim_eta0", "stabim_eta_shrink", "lam"):
        v = _num(d, key, path)
        if v is not None:
            kw[key] = v
    try:
        return SolverConfig(
            m,
            parse_schedule(d.get("schedule", {}), f"{path}.schedule"),
            _num(d, "max_iter", path, required=True, kind=int),
            **kw,
        )
    except ValidationError as exc:
        if exc.path and not str(exc.path).startswith(path):
            raise ValidationError(exc.message, f"{path}.{exc.path}") from None
        raise


def sweep_values(sweep, sample_seed=None, path="sweep"):
    """Explicit list of sweep values (grid or seeded uniform sample)."""
    if "values" in sweep and sweep["values"] is not None:
        vals = sweep["values"]
        if not isinstance(vals, list) or not vals:
            raise ValidationError("must be a non-empty list", f"{path}.values")
        return [float(v) for v in vals]
    grid = sweep.get("grid")
    if not isinstance(grid, dict):
        raise ValidationError("needs 'values' or 'grid'", path)
    lo = _num(grid, "lo", f"{path}.grid", required=True)
    hi = _num(grid, "hi", f"{path}.grid", required=True)
    n = _num(grid, "n", f"{path}.grid", required=True, kind=int)
    if not (hi > lo and n >= 1):
        raise ValidationError("needs hi > lo and n >= 1", f"{path}.grid")
    if sample_seed is not None:
        rng = np.random.default_rng(sample_seed)
        return sorted(float(v) for v in rng.uniform(lo, hi, n))
    # evenly spaced interior points
    return [float(v) for v in np.linspace(lo, hi, n + 2)[1:-1]]


def _method_dict_with(md, parameter, value):
    md = copy.deepcopy(md)
    if parameter == "delta":
        md.setdefault("schedule", {})["delta"] = value
        return md
    keys = parameter.split(".")
    node = md
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return md


@dataclass
class Cell:
    index: int
    label: str
    method: dict
    sweep_value: Optional[float] = None

    @property
    def filename(self):
        slug = "".join(ch if ch.isalnum() or ch in "-_.=" else "_" for ch in self.label)
        return f"run_{self.index:03d}_{slug}.csv"


@dataclass
class ExperimentConfig:
    """Validated experiment description (see module docstring)."""

    problem: dict
    methods: list
    sweep: Optional[dict]
    diagnostics: dict
    output_dir: str
    record_every: int = 1
    x0: object = "zero"
    compare: dict = field(default_factory=dict)
    flows: list = field(default_factory=list)
    raw: dict = field(default_factory=dict)

    def resolved_dict(self):
        """Config with explicit sweep values, suitable for exact re-runs."""
        d = copy.deepcopy(self.raw)
        if self.sweep is not None:
            d["sweep"] = {k: v for k, v in self.sweep.items() if k != "grid"}
        return d


def validate_experiment(raw, sample_seed=None, need="methods"):
    """Check a raw config dict and resolve its sweep values."""
    if not isinstance(raw, dict):
        raise ValidationError("config must be a mapping")
    raw = copy.deepcopy(raw)
    if "problem" not in raw or not isinstance(raw["problem"], dict):
        raise ValidationError("is required", "problem")
    if "output_dir" not in raw:
        raise ValidationError("is required", "output_dir")
    if need == "methods":
        methods = raw.get("methods")
        if not isinstance(methods, list) or not methods:
            raise ValidationError("must be a non-empty list", "methods")
    if need == "flows":
        flows = raw.get("flows")
        if not isinstance(flows, list) or not flows:
            raise ValidationError("must be a non-empty list", "flows")
    sweep = raw.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict) or "parameter" not in sweep:
            raise ValidationError("needs a 'parameter'", "sweep")
        sweep = dict(sweep)
        sweep["values"] = sweep_values(sweep, sample_seed)
        sweep.setdefault("halve_first_order", sweep["parameter"] == "delta")
    diag = {"lyapunov": True, "dissipation": False, "best_iterate": False, "holder_check": False}
    diag.update(raw.get("diagnostics") or {})
    record_every = _num(raw, "record_every", "", 1, int)
    if record_every < 1:
        raise ValidationError("must be >= 1", "record_every")
    exp = ExperimentConfig(
        problem=raw["problem"],
        methods=raw.get("methods") or [],
        sweep=sweep,
        diagnostics=diag,
        output_dir=str(raw["output_dir"]),
        record_every=record_every,
        x0=raw.get("x0", "zero"),
        compare=raw.get("compare") or {},
        flows=raw.get("flows") or [],
        raw=raw,
    )
    if need == "methods":
        exp_cells(exp)
    return exp


def exp_cells(exp):
    """Expand methods x sweep values into cells (validating every cell)."""
    cells = []
    values = [None] if exp.sweep is None else exp.sweep["values"]
    for i, md in enumerate(exp.methods):
        if not isinstance(md, dict):
            raise ValidationError("must be a mapping", f"methods.{i}")
        probe = md
        if exp.sweep is not None:
            probe = _method_dict_with(md, exp.sweep["parameter"], values[0])
        base = parse_method(probe, f"methods.{i}")
        for v in values:
            mdv = md
            label = md.get("label") or base.method.value
            if v is not None:
                par = exp.sweep["parameter"]
                vv = v
                if par == "delta":
                    lo, hi, hi_closed = DELTA_RANGE[base.method]
                    if exp.sweep.get("halve_first_order") and base.method.order == 1:
                        vv = v / 2.0
                    ok = vv > lo and (vv <= hi if hi_closed else vv < hi)
                    if not ok:
                        shown = "delta/2" if vv != v else "delta"
                        rb = "]" if hi_closed else ")"
                        raise ValidationError(
                            f"{shown} = {vv:g} outside ({lo:g}, {hi:g}{rb} for "
                            f"{base.method.value} sweeps",
                            "sweep.values",
                        )
                mdv = _method_dict_with(md, par, vv)
                parse_method(mdv, f"methods.{i}")
                label = f"{label}_{par}={v:g}"
            cells.append(Cell(len(cells), label, mdv, v))
    return cells


# -- problem construction ---------------------------------------------------


def _freeze(d):
    return json.dumps(d, sort_keys=True)


@functools.lru_cache(maxsize=8)
def _build_problem_cached(key):
    return _build_problem(json.loads(key))


def build_problem(pd):
    return _build_problem_cached(_freeze(pd))


def _resolve_data_path(p):
    p = Path(p)
    env = os.environ.get(P.DATA_ENV)
    if not p.is_absolute() and env and (Path(env) / p).exists():
        return Path(env) / p
    return p


def _build_problem(pd):
    kind = pd.get("kind")
    path = "problem"
    if kind == "nemirovsky":
        spec = P.NemirovskySpec(
            _num(pd, "d", path, 200, int), _num(pd, "J", path, 100, int),
            _num(pd, "xhat_value", path, 50.0),
        )
        return P.make_nemirovsky(spec)
    if kind == "min_norm":
        if "A" in pd:
            return P.min_norm_problem(pd["A"], pd.get("b", [0.0] * len(pd["A"])))
        return P.make_min_norm_toy(
            _num(pd, "m", path, 10, int), _num(pd, "d", path, 40, int),
            _num(pd, "seed", path, 0, int), bool(pd.get("normalize", True)),
        )
    if kind == "logistic":
        if pd.get("csv_path"):
            ds = P.load_dataset_csv(_resolve_data_path(pd["csv_path"]))
        elif pd.get("synthetic_seed") is not None:
            ds = P.synthetic_dataset(
                _num(pd, "synthetic_n", path, 455, int), _num(pd, "synthetic_p", path, 30, int),
                _num(pd, "synthetic_seed", path, 0, int),
            )
        else:
            ds = P.bundled_dataset(pd.get("split", "train"))
        spec = P.LogisticLiftSpec(
            raw_features=ds.p,
            lift_degree=_num(pd, "degree", path, 3, int),
            n_samples=_num(pd, "n_samples", path, P.TRAIN_ROWS, int),
            standardize=bool(pd.get("standardize", True)),
            max_dimension=_num(pd, "max_dimension", path, 20000, int),
        )
        return P.make_logistic_lifted(ds, spec)
    raise ValidationError(f"unknown problem kind {kind!r}", "problem.kind")


def _with_oracle(prob, override):
    if not override:
        return prob
    from dataclasses import replace

    base = prob.oracle if prob.oracle is not None else Oracle()
    return replace(prob, oracle=replace(base, **override))


def make_x0(spec, dim, path="x0"):
    if spec is None or spec == "zero":
        return np.zeros(dim)
    if spec == "ones":
        return np.ones(dim)
    if isinstance(spec, str) and spec.startswith("random"):
        seed = int(spec.split(":", 1)[1]) if ":" in spec else 0
        return np.random.default_rng(seed).standard_normal(dim)
    if isinstance(spec, list):
        x = np.asarray(spec, dtype=float)
        if x.shape != (dim,):
            raise ValidationError(f"length {len(x)} != dimension {dim}", path)
        return x
    raise ValidationError(f"unsupported initial point {spec!r}", path)


# -- cells ------------------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _finite_or_none(v):
    v = float(v)
    return v if np.isfinite(v) else None


def run_cell(payload):
    """Execute one (method, sweep value) cell and write its CSV."""
    prob = _with_oracle(build_problem(payload["problem"]), payload.get("oracle_override"))
    cfg = parse_method(payload["method"], payload["method_path"]).resolved(prob)
    x0 = make_x0(payload["x0"], prob.dimension)
    diag = payload["diagnostics"]
    want_full = diag.get("dissipation") or diag.get("best_iterate")
    storage = "full" if want_full else "none"
    if want_full and prob.dimension * (cfg.max_iter + 1) > 10**7:
        storage = "thin"
    tr = run(prob, cfg, x0, storage=storage, energy=bool(diag.get("lyapunov", True)),
             record_every=payload["record_every"])
    out = Path(payload["path"])
    write_trace_csv(tr, out)
    res = {
        "file": out.name,
        "label": payload["label"],
        "method": cfg.method.value,
        "sweep_value": payload.get("sweep_value"),
        "solver": cfg.snapshot(),
        "wall_time": tr.meta["wall_time"],
        "error": tr.error,
        "sha256": _sha256(out),
        "rows": len(tr),
        "storage": tr.storage,
        "diagnostics": {},
    }
    d = res["diagnostics"]
    has_star = prob.oracle is not None and prob.oracle.x_star is not None
    if tr.error is None and has_star and tr.storage == "full":
        sched = effective_schedule(cfg)
        params = lyapunov_params(cfg, prob)
        k0 = 1
        if diag.get("dissipation"):
            chk = check_dissipation_second if cfg.method.order == 2 else check_dissipation_first
            rep = chk(prob, sched, params, tr)
            k0 = rep.k0
            d["dissipation"] = {
                "k0": rep.k0,
                "min_slack": _finite_or_none(rep.slack.min()) if len(rep.slack) else None,
                "checked": int(len(rep.k)),
            }
        if diag.get("best_iterate") and cfg.max_iter >= 2:
            kk = int(tr.iterate_k[-1]) - 1
            b = best_iterate(prob, tr, sched, params, kk, k0 or 1, cfg.method.order)
            d["best_iterate"] = {"k": kk, "which": b.which, "H_best": prob.H(b.x_best)}
    elif want_full:
        d["note"] = "dissipation/best-iterate skipped (needs x_star and full storage)"
    if diag.get("holder_check"):
        try:
            o = prob.oracle
            rng = np.random.default_rng(0)
            center = o.x_star if o.x_star is not None else np.zeros(prob.dimension)
            samples = center + rng.standard_normal((1000, prob.dimension))
            rep = check_holder_growth(prob, samples)
            d["holder"] = {"worst_ratio": rep.worst_ratio, "passed": rep.passed,
                           "lemma_ok": rep.lemma_ok}
        except (MissingOracle, AttributeError) as exc:
            d["holder"] = {"error": str(exc)}
    return res


def flow_cell(payload):
    prob = build_problem(payload["problem"])
    fd = payload["flow"]
    cfg = parse_flow(fd, payload["flow_path"], prob.dimension)
    t = time.perf_counter()
    tr = integrate(prob, cfg)
    out = Path(payload["path"])
    write_trace_csv(tr, out)
    return {
        "file": out.name,
        "label": payload["label"],
        "order": cfg.order.value,
        "sweep_value": payload.get("sweep_value"),
        "wall_time": time.perf_counter() - t,
        "error": None,
        "sha256": _sha256(out),
        "rows": len(tr),
        "dt": tr.meta["dt"],
    }


def parse_flow(fd, path, dim):
    if not isinstance(fd, dict):
        raise ValidationError("must be a mapping", path)
    unknown = set(fd) - FLOW_KEYS
    if unknown:
        raise ValidationError(f"unknown keys {sorted(unknown)}", path)
    try:
        return FlowConfig(
            order=fd.get("order", "first"),
            sched=parse_schedule(fd.get("schedule", {}), f"{path}.schedule"),
            t_end=_num(fd, "t_end", path, required=True),
            x0=make_x0(fd.get("x0", "zero"), dim, f"{path}.x0"),
            alpha=_num(fd, "alpha", path, 4.0),
            dt=_num(fd, "dt", path),
            v0=None if fd.get("v0") is None else make_x0(fd["v0"], dim, f"{path}.v0"),
            samples_per_decade=_num(fd, "samples_per_decade", path, 256, int),
            lam=_num(fd, "lam", path),
        )
    except ValidationError as exc:
        if exc.path and not str(exc.path).startswith(path):
            raise ValidationError(exc.message, f"{path}.{exc.path}") from None
        raise


# -- orchestration ----------------------------------------------------------


def git_hash():
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def _prepare_dir(out, force):
    out = Path(out)
    if (out / MANIFEST).exists() and not force:
        raise IoError(f"{out} already holds a manifest; use --force to overwrite")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    return out


def _map(fn, payloads, jobs):
    if jobs <= 1 or len(payloads) <= 1:
        results = []
        for p in payloads:
            results.append(_guard(fn, p))
        return results
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(functools.partial(_guard, fn), payloads))


def _guard(fn, payload):
    # per-cell failures are recorded, not raised
    try:
        return fn(payload)
    except BilevelError as exc:
        return {"file": None, "label": payload["label"], "error": f"{type(exc).__name__}: {exc}"}


def _write_manifest(out, kind, exp, results, t_total, argv):
    man = {
        "manifest_version": MANIFEST_VERSION,
        "kind": kind,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "git_hash": git_hash(),
        "argv": list(argv or []),
        "config": exp.resolved_dict(),
        "runs": results,
        "timings": {"total": t_total, "runs": [r.get("wall_time") for r in results]},
    }
    path = Path(out) / MANIFEST
    try:
        path.write_text(json.dumps(man, indent=2, sort_keys=False, default=_json_default))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return man


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def _oracle_override(prob, exp):
    """Reference oracle for problems without a known inner minimum."""
    o = prob.oracle
    if o is not None and o.min_inner is not None:
        return None
    n = 10 * max(int(m.get("max_iter", 0)) for m in exp.methods)
    ref = P.reference_oracle(prob, max(n, 1000), key=_freeze(exp.problem) + f"#{n}")
    return {
        "min_inner": ref.min_inner,
        "min_outer_on_argmin": ref.min_outer_on_argmin,
        "min_inner_exact": False,
        "min_outer_exact": False,
        "note": ref.note,
    }


def cmd_run(raw, jobs=1, force=False, sample_seed=None, argv=None):
    """Run every (method x sweep value) cell; write CSVs and the manifest."""
    exp = validate_experiment(raw, sample_seed)
    cells = exp_cells(exp)
    prob = build_problem(exp.problem)
    for c in cells:
        # problem-dependent checks (step sizes) before any work is done
        parse_method(c.method, f"methods[{c.label}]").resolved(prob)
    make_x0(exp.x0, prob.dimension)
    out = _prepare_dir(exp.output_dir, force)
    override = _oracle_override(prob, exp)
    payloads = [
        {
            "problem": exp.problem,
            "method": c.method,
            "method_path": f"methods[{c.label}]",
            "label": c.label,
            "sweep_value": c.sweep_value,
            "x0": exp.x0,
            "diagnostics": exp.diagnostics,
            "record_every": exp.record_every,
            "path": str(out / c.filename),
            "oracle_override": override,
        }
        for c in cells
    ]
    t = time.perf_counter()
    results = _map(run_cell, payloads, jobs)
    man = _write_manifest(out, "run", exp, results, time.perf_counter() - t, argv)
    failed = [r["label"] for r in results if r.get("error")]
    for r in results:
        log.info("%s -> %s%s", r["label"], r.get("file"),
                 f" (error: {r['error']})" if r.get("error") else "")
    if failed:
        log.error("%d run(s) failed: %s", len(failed), ", ".join(failed))
        return EXIT_RUNTIME, man
    return EXIT_OK, man


def cmd_flow(raw, jobs=1, force=False, sample_seed=None, argv=None):
    """Integrate every configured flow (times sweep values)."""
    exp = validate_experiment(raw, sample_seed, need="flows")
    prob = build_problem(exp.problem)
    cells = []
    values = [None] if exp.sweep is None else exp.sweep["values"]
    for i, fd in enumerate(exp.flows):
        for v in values:
            fdv = fd if v is None else _method_dict_with(fd, exp.sweep["parameter"], v)
            cfg = parse_flow(fdv, f"flows.{i}", prob.dimension)
            cfg.resolved_dt(prob)
            label = fd.get("label") or f"{cfg.order.value}"
            if v is not None:
                label = f"{label}_{exp.sweep['parameter']}={v:g}"
            cells.append(Cell(len(cells), label, fdv, v))
    out = _prepare_dir(exp.output_dir, force)
    payloads = [
        {
            "problem": exp.problem,
            "flow": c.method,
            "flow_path": f"flows[{c.label}]",
            "label": c.label,
            "sweep_value": c.sweep_value,
            "path": str(out / c.filename.replace("run_", "flow_")),
        }
        for c in cells
    ]
    t = time.perf_counter()
    results = _map(flow_cell, payloads, jobs)
    man = _write_manifest(out, "flow", exp, results, time.perf_counter() - t, argv)
    if any(r.get("error") for r in results):
        return EXIT_RUNTIME, man
    return EXIT_OK, man


def load_manifest(out_dir):
    path = Path(out_dir) / MANIFEST
    if not path.exists():
        raise IoError(f"no {MANIFEST} in {out_dir}")
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def load_traces(out_dir, man):
    """Read every trace listed in a manifest, failing with the missing ones."""
    out = Path(out_dir)
    missing = [r["label"] for r in man["runs"] if not r.get("file") or not (out / r["file"]).exists()]
    if missing:
        raise IoError("missing traces for runs: " + ", ".join(missing))
    traces = []
    for r in man["runs"]:
        try:
            traces.append(read_trace_csv(out / r["file"]))
        except ParseError as exc:
            raise IoError(f"corrupt trace {r['file']}: {exc}") from exc
    return traces


PANELS = ("F_res", "H_gap", "dist", "step_norm")


def _guide_delta(man, cfg):
    if cfg.get("guide_delta") is not None:
        return float(cfg["guide_delta"])
    ds = [r["solver"]["schedule"]["delta"] for r in man["runs"] if r.get("solver")]
    return max(ds) if ds else 1.0


def cmd_compare(raw, jobs=1, force=False, sample_seed=None, argv=None):
    """Merged long-format CSV plus per-panel plot data with guide columns."""
    exp = validate_experiment(raw, sample_seed)
    out = Path(exp.output_dir)
    code = EXIT_OK
    if force or not (out / MANIFEST).exists():
        code, man = cmd_run(raw, jobs, force, sample_seed, argv)
    else:
        man = load_manifest(out)
    traces = load_traces(out, man)
    labels = [r["label"] for r in man["runs"]]
    from .traceio import format_float

    rows = ["method,k,F_res,H_gap,dist,step_norm"]
    for lab, tr in zip(labels, traces):
        for i in range(len(tr)):
            rows.append(",".join([lab, str(int(tr.k[i]))] +
                                 [format_float(getattr(tr, f)[i]) for f in PANELS]))
    _write_text(out / "compare.csv", "\n".join(rows) + "\n")
    delta = _guide_delta(man, exp.compare)
    ks = sorted(set(int(k) for tr in traces for k in tr.k))
    for f in PANELS:
        cols = {}
        for lab, tr in zip(labels, traces):
            cols[lab] = dict(zip((int(k) for k in tr.k), getattr(tr, f)))
        head = ["k"] + labels + [f"guide_k^-{delta / 2:g}", f"guide_k^-{delta:g}"]
        lines = [",".join(head)]
        for k in ks:
            g1 = format_float(k ** (-delta / 2)) if k > 0 else ""
            g2 = format_float(k ** (-delta)) if k > 0 else ""
            vals = [format_float(cols[l].get(k, np.nan)) for l in labels]
            lines.append(",".join([str(k)] + vals + [g1, g2]))
        _write_text(out / f"panel_{f}.csv", "\n".join(lines) + "\n")
        if exp.compare.get("svg"):
            from .svgplot import loglog_svg

            series = {l: (np.array(list(cols[l].keys()), float), np.array(list(cols[l].values())))
                      for l in labels}
            _write_text(out / f"panel_{f}.svg", loglog_svg(series, f, delta))
    return code, man


def _write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def final_decade_window(k):
    """``[k_max / 10, k_max]``, or all positive indices if fewer than a decade."""
    k = np.asarray(k, dtype=float)
    pos = k[k > 0]
    if len(pos) == 0:
        return (1.0, 1.0)
    kmax = pos.max()
    return (max(kmax / 10.0, pos.min()), kmax)


def _final_decade_fit(tr, field, absolute=False):
    lo, hi = final_decade_window(tr.index)
    k = np.asarray(tr.index, dtype=float)
    y = np.asarray(tr.column(field), dtype=float)
    m = (k >= lo) & (k <= hi)
    if absolute:
        y = np.abs(y)
    try:
        r = fit_loglog(k[m], y[m])
        return {"slope": r.slope, "r2": r.r2, "window": [lo, hi], "absolute": absolute}
    except (NonPositiveValues, ValidationError) as exc:
        return {"slope": None, "reason": str(exc), "window": [lo, hi], "absolute": absolute}


def cmd_report(out_dir):
    """Print fitted slopes, dissipation k0 and final distances; write report.json.

    Slopes are least-squares fits in log-log coordinates over the final
    decade of the index range. The outer gap can be negative (iterates
    outside argmin F), so its slope is fitted to ``|H_gap|``.
    """
    man = load_manifest(out_dir)
    traces = load_traces(out_dir, man)
    runs = []
    for r, tr in zip(man["runs"], traces):
        last = lambda a: _finite_or_none(a[-1]) if len(a) else None
        runs.append({
            "label": r["label"],
            "file": r["file"],
            "F_res": _final_decade_fit(tr, "F_res"),
            "H_gap": _final_decade_fit(tr, "H_gap", absolute=True),
            "dist": _final_decade_fit(tr, "dist"),
            "k0": (r.get("diagnostics") or {}).get("dissipation", {}).get("k0"),
            "final_dist": last(tr.dist),
            "final_F_res": last(tr.F_res),
            "final_H_gap": last(tr.H_gap),
        })
    report = {"output_dir": str(out_dir), "kind": man.get("kind"), "runs": runs}
    _write_text(Path(out_dir) / "report.json",
                json.dumps(report, indent=2, default=_json_default))
    fmt = lambda v, w, spec: f"{'-':>{w}}" if v is None else format(v, f"{w}{spec}")
    w = max([len(x["label"]) for x in runs] + [5])
    print(f"{'run':<{w}}  {'slope F_res':>11}  {'slope |H_gap|':>13}  {'k0':>6}  {'final dist':>11}")
    for x in runs:
        print(f"{x['label']:<{w}}  {fmt(x['F_res']['slope'], 11, '.2f')}  "
              f"{fmt(x['H_gap']['slope'], 13, '.2f')}  {fmt(x['k0'], 6, 'd')}  "
              f"{fmt(x['final_dist'], 11, '.3e')}")
    return EXIT_OK, report


# -- entry point ------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true")
    ap = argparse.ArgumentParser(prog="bilevel", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in ("run", "compare", "flow"):
        sp = sub.add_parser(verb, parents=[common])
        sp.add_argument("--config", required=True)
        sp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--force", action="store_true")
        sp.add_argument("--sample-seed", type=int, default=None)
    sp = sub.add_parser("report", parents=[common])
    sp.add_argument("output_dir")
    return ap


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.verb == "report":
            code, _ = cmd_report(args.output_dir)
            return code
        raw = load_config(args.config)
        for s in args.set:
            apply_override(raw, s)
        if args.jobs < 1:
            raise ValidationError("must be >= 1", "--jobs")
        fn = {"run": cmd_run, "compare": cmd_compare, "flow": cmd_flow}[args.verb]
        code, _ = fn(raw, args.jobs, args.force, args.sample_seed, argv)
        return code
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (IoError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ParseError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BilevelError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - surface anything else as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
