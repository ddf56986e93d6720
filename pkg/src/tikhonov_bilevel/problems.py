"""Shipped bilevel instances with oracle data, and dataset ingestion.

* Nemirovsky quadratic: inner ``f(x) = 1/2 (x_1 - 1)^2 + 1/2 sum_{j=2}^J (x_{j-1} - x_j)^2``,
  outer ``||x - xhat||_1``.
* Lifted logistic regression: inner mean logistic loss on monomial
  features, outer ``||x||_1``.
* Minimum-norm least squares: inner ``1/2 ||Ax - b||^2``, outer ``1/2 ||x||^2``.
"""
import csv
import itertools
import math
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.linalg import eigvalsh_tridiagonal
from scipy.optimize import linprog

from . import prox
from .core import (
    BilevelProblem,
    CompositeObjective,
    HolderData,
    Oracle,
    SmoothTerm,
    zero_smooth,
)
from .errors import (
    DimensionOverflow,
    IoError,
    NonBinaryLabel,
    ParseError,
    RankDeficient,
    ValidationError,
)

__all__ = [
    "NemirovskySpec",
    "make_nemirovsky",
    "nemirovsky_lipschitz",
    "nemirovsky_hessian_bands",
    "LogisticLiftSpec",
    "Dataset",
    "lifted_dimension",
    "monomials",
    "lift_features",
    "standardize",
    "make_logistic_lifted",
    "is_separable",
    "min_norm_problem",
    "make_min_norm_toy",
    "load_dataset_csv",
    "bundled_dataset",
    "synthetic_dataset",
    "DATA_ENV",
    "TRAIN_ROWS",
]

DATA_ENV = "BILEVEL_DATA_DIR"
SNAPSHOT = "wdbc.csv"
TRAIN_ROWS = 455


# -- Nemirovsky ------------------------------------------------------------


@dataclass(frozen=True)
class NemirovskySpec:
    d: int = 200
    J: int = 100
    xhat_value: float = 50.0

    def __post_init__(self):
        if not (1 < self.J < self.d):
            raise ValidationError("need 1 < J < d", "problem.J")


def nemirovsky_hessian_bands(J):
    """Diagonal and off-diagonal of the inner Hessian on coordinates 1..J."""
    diag = np.full(J, 2.0)
    diag[-1] = 1.0
    return diag, -np.ones(J - 1)


def _nem_eigs(J):
    diag, off = nemirovsky_hessian_bands(J)
    return eigvalsh_tridiagonal(diag, off)


def nemirovsky_lipschitz(spec):
    """Largest eigenvalue of the inner Hessian (independent of d - J)."""
    L = float(_nem_eigs(spec.J)[-1])
    assert L < 4.0
    return L


def make_nemirovsky(spec=NemirovskySpec()):
    d, J, xv = spec.d, spec.J, float(spec.xhat_value)

    def residual(x):
        r = np.empty(J)
        r[0] = x[0] - 1.0
        r[1:] = x[: J - 1] - x[1:J]
        return r

    def f(x):
        r = residual(x)
        return 0.5 * float(r @ r)

    def grad(x):
        r = residual(x)
        g = np.zeros(d)
        g[:J] = -r
        g[0] = r[0]
        g[: J - 1] += r[1:]
        return g

    eigs = _nem_eigs(J)
    x_star = np.full(d, xv)
    x_star[:J] = 1.0
    p_star = np.zeros(d)
    p_star[:J] = np.sign(xv - 1.0)

    def project(x):
        y = np.array(x, dtype=float, copy=True)
        y[:J] = 1.0
        return y

    oracle = Oracle(
        x_star=x_star,
        min_inner=0.0,
        min_outer_on_argmin=J * abs(xv - 1.0),
        holder=HolderData(2.0, float(eigs[0])),
        project_argmin=project,
        p_star=p_star,
    )
    inner = CompositeObjective(SmoothTerm(f, grad, float(eigs[-1]), kind="quadratic"))
    outer = CompositeObjective(zero_smooth(), prox.shifted_l1(np.full(d, xv)))
    return BilevelProblem(
        inner, outer, d, oracle, name=f"nemirovsky(d={d},J={J})",
        meta={"d": d, "J": J, "xhat_value": xv},
    )


# -- min-norm least squares -------------------------------------------------


def min_norm_problem(A, b, name="min_norm"):
    """Inner ``1/2||Ax-b||^2``, outer ``1/2||x||^2`` for a full-row-rank ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    m, d = A.shape
    sv = np.linalg.svd(A, compute_uv=False)
    if len(sv) < m or sv[-1] <= 1e-10 * max(sv[0], 1e-300):
        raise RankDeficient("A is not full row rank")
    L = float(sv[0] ** 2)

    def f(x):
        r = A @ x - b
        return 0.5 * float(r @ r)

    def grad(x):
        return A.T @ (A @ x - b)

    x_star = np.linalg.pinv(A) @ b
    AAt = A @ A.T

    def project(x):
        return x - A.T @ np.linalg.solve(AAt, A @ x - b)

    oracle = Oracle(
        x_star=x_star,
        min_inner=0.0,
        min_outer_on_argmin=0.5 * float(x_star @ x_star),
        holder=HolderData(2.0, float(sv[-1] ** 2)),
        project_argmin=project,
        p_star=-x_star,
    )
    inner = CompositeObjective(SmoothTerm(f, grad, L, kind="quadratic"))
    sq = SmoothTerm(
        lambda x: 0.5 * float(x @ x), lambda x: np.array(x, dtype=float), 1.0, kind="quadratic"
    )
    outer = CompositeObjective(sq)
    return BilevelProblem(inner, outer, d, oracle, name=name, meta={"A": A, "b": b})


def make_min_norm_toy(m=10, d=40, seed=0, normalize=True, max_tries=10):
    """Random consistent underdetermined least squares, ``b = A z``.

    ``A`` is Gaussian, scaled to unit spectral norm when ``normalize``.

    Raises
    ------
    RankDeficient
        If no full-row-rank draw is found in ``max_tries``.
    """
    if not (0 < m < d):
        raise ValidationError("min-norm toy needs 0 < m < d", "problem.m")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        A = rng.standard_normal((m, d))
        sv = np.linalg.svd(A, compute_uv=False)
        if sv[-1] > 1e-8 * sv[0]:
            break
    else:
        raise RankDeficient(f"no full row rank draw in {max_tries} tries")
    if normalize:
        A /= sv[0]
    z = rng.standard_normal(d)
    return min_norm_problem(A, A @ z, name=f"min_norm(m={m},d={d},seed={seed})")


# -- datasets ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValidationError("features must be n x p and labels length n")
        if not np.all(np.isfinite(X)):
            raise ValidationError("features contain missing values")
        if not np.all((y == 0) | (y == 1)):
            raise ValidationError("labels must be 0 or 1")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def p(self):
        return self.features.shape[1]

    def head(self, n):
        return Dataset(self.features[:n], self.labels[:n], self.names)


def load_dataset_csv(path):
    """Read a CSV with a header row; the last column is the 0/1 label.

    Raises
    ------
    IoError, ParseError, NonBinaryLabel
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if len(header) < 2:
            raise ParseError("need at least one feature and a label column", 1)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                vals = [float(c) for c in row[:-1]]
            except ValueError:
                raise ParseError("non-numeric feature value", lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("missing or non-finite feature value", lineno)
            lab = row[-1].strip()
            try:
                y = float(lab)
            except ValueError:
                raise NonBinaryLabel(f"label {lab!r} is not 0 or 1", lineno) from None
            if y not in (0.0, 1.0):
                raise NonBinaryLabel(f"label {lab!r} is not 0 or 1", lineno)
            rows.append(vals)
            labels.append(y)
    if not rows:
        raise ParseError("no data rows", 2)
    return Dataset(np.array(rows), np.array(labels), tuple(header[:-1]))


def bundled_dataset(split="train"):
    """Breast cancer snapshot (label 1 = benign).

    ``split="train"`` returns the first 455 rows, ``"all"`` all 569. The
    file is looked up in ``$BILEVEL_DATA_DIR`` first.
    """
    env = os.environ.get(DATA_ENV)
    if env and (Path(env) / SNAPSHOT).exists():
        ds = load_dataset_csv(Path(env) / SNAPSHOT)
    else:
        ref = resources.files("tikhonov_bilevel").joinpath("data", SNAPSHOT)
        with resources.as_file(ref) as p:
            ds = load_dataset_csv(p)
    if split == "train":
        return ds.head(TRAIN_ROWS)
    if split == "all":
        return ds
    raise ValidationError(f"unknown split {split!r}")


def synthetic_dataset(n=455, p=30, seed=0):
    """Gaussian features with labels drawn from a random logistic model."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    w = rng.standard_normal(p) / np.sqrt(p)
    prob = 1.0 / (1.0 + np.exp(-3.0 * (X @ w)))
    y = (rng.random(n) < prob).astype(float)
    return Dataset(X, y, tuple(f"x{i}" for i in range(p)))


# -- lifted logistic regression ----------------------------------------------


@dataclass(frozen=True)
class LogisticLiftSpec:
    raw_features: int = 30
    lift_degree: int = 3
    n_samples: int = TRAIN_ROWS
    standardize: bool = True
    max_dimension: int = 20000

    @property
    def dimension(self):
        return lifted_dimension(self.raw_features, self.lift_degree)


def lifted_dimension(p, degree):
    """Number of monomials of degree <= ``degree`` in ``p`` variables."""
    return math.comb(p + degree, degree)


def monomials(p, degree):
    """Index tuples of all monomials, graded then lexicographic.

    ``()`` is the constant, ``(i,)`` is a_i, ``(i, j)`` with i <= j is a_i a_j.
    """
    out = []
    for deg in range(degree + 1):
        out.extend(itertools.combinations_with_replacement(range(p), deg))
    return out


def standardize(X):
    """Zero mean and unit variance per column (constant columns left centred)."""
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - mu) / sd


def lift_features(X, degree):
    """Evaluate every monomial of :func:`monomials` on the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    mons = monomials(p, degree)
    out = np.empty((n, len(mons)))
    for j, m in enumerate(mons):
        col = np.ones(n)
        for i in m:
            col = col * X[:, i]
        out[:, j] = col
    return out


def is_separable(Ahat, y):
    """True when some x has (2y-1) * Ahat x >= 1 for every row (LP feasibility)."""
    sgn = 2.0 * np.asarray(y) - 1.0
    n, d = Ahat.shape
    res = linprog(
        np.zeros(d),
        A_ub=-(sgn[:, None] * Ahat),
        b_ub=-np.ones(n),
        bounds=[(None, None)] * d,
        method="highs",
    )
    return res.status == 0


def make_logistic_lifted(dataset, spec=LogisticLiftSpec(), check_separable=True):
    """Mean logistic loss on lifted features (inner) and l1 norm (outer).

    Oracle: when the lifted data are linearly separable the infimum of the
    inner loss is 0 and is not attained, so ``min_inner = 0`` and there is
    no ``x_star``. Otherwise ``min_inner`` is left unset; see
    :func:`reference_oracle`.

    Raises
    ------
    DimensionOverflow
        If the lifted dimension exceeds ``spec.max_dimension``.
    """
    d = lifted_dimension(dataset.p, spec.lift_degree)
    if d > spec.max_dimension:
        raise DimensionOverflow(f"lifted dimension {d} exceeds cap {spec.max_dimension}")
    X = dataset.features[: spec.n_samples]
    y = dataset.labels[: spec.n_samples]
    if spec.standardize:
        X = standardize(X)
    Ahat = lift_features(X, spec.lift_degree)
    n = Ahat.shape[0]

    def f(x):
        z = Ahat @ x
        return float(np.mean(np.logaddexp(0.0, z) - y * z))

    def grad(x):
        z = Ahat @ x
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return Ahat.T @ (sig - y) / n

    L = float(np.linalg.norm(Ahat, 2) ** 2 / (4.0 * n))
    oracle = None
    note = ""
    if check_separable and is_separable(Ahat, y):
        note = "lifted data linearly separable: inf F = 0 is not attained"
        oracle = Oracle(min_inner=0.0, note=note)
    inner = CompositeObjective(SmoothTerm(f, grad, L, kind="logistic"))
    outer = CompositeObjective(zero_smooth(), prox.l1())
    return BilevelProblem(
        inner, outer, d, oracle,
        name=f"logistic(n={n},p={dataset.p},degree={spec.lift_degree})",
        meta={"n": n, "degree": spec.lift_degree, "separable": bool(note), "note": note},
    )


_REFERENCE_CACHE = {}


def reference_oracle(prob, n_iter=10**5, key=None):
    """Reference ``min_inner`` and outer value from a long accelerated run.

    The result is labelled inexact and cached under ``key``.
    """
    from .algorithms import Method, SolverConfig, run
    from .core import Schedule

    if key is not None and key in _REFERENCE_CACHE:
        return _REFERENCE_CACHE[key]
    cfg = SolverConfig(Method.BFPG, Schedule(1.0, 1.9, 1.0), n_iter, alpha=4.0, gamma=1.0)
    tr = run(prob, cfg, np.zeros(prob.dimension), storage="none", energy=False)
    i = int(np.argmin(tr.F))
    o = Oracle(
        min_inner=float(tr.F[i]),
        min_outer_on_argmin=float(tr.H[-1]),
        min_inner_exact=False,
        min_outer_exact=False,
        note="reference, not exact",
    )
    if key is not None:
        _REFERENCE_CACHE[key] = o
    return o
