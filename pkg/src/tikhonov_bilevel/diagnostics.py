"""Residuals, Lyapunov energies, dissipation checks and rate fits.

Notation: ``t_k = theta (k + gamma)``, ``Psi_k = F + eps_k H``. The
first-order energy is

    E_k = t_k (Psi_{k-1}(x_k) - Psi_{k-1}(x*)) + lam/2 ||x_k - x*||^2

and the second-order one

    E_k = t_k^2 (Psi_{k-1}(x_k) - Psi_{k-1}(x*))
          + 1/2 ||lam (x_{k-1} - x*) + t_k (x_k - x_{k-1}) / theta||^2
          + lam (alpha - 1 - lam) / 2 ||x_{k-1} - x*||^2

with ``theta = sqrt(s)`` for the accelerated method.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import epsilon_discrete
from .errors import MissingOracle, NonPositiveValues, ValidationError

__all__ = [
    "RunTrace",
    "FlowTrace",
    "TraceRecorder",
    "LyapunovParams",
    "DissipationReport",
    "RateFit",
    "HolderReport",
    "lyapunov_first",
    "lyapunov_second",
    "zeta_first",
    "zeta_second",
    "check_dissipation_first",
    "check_dissipation_second",
    "fit_rate",
    "fit_loglog",
    "best_iterate",
    "check_holder_growth",
    "holder_lemma_bound",
    "sum_bounds",
    "zeta_sandwich",
    "storage_policy",
]

FIELDS = ("F_res", "H_gap", "dist", "eps", "step_norm", "E_lambda")
FULL_STORAGE_LIMIT = 10**7
THIN_EVERY = 10


@dataclass
class RunTrace:
    """Per-iteration record of a solver run.

    Arrays ``k``, ``F_res``, ``H_gap``, ``dist``, ``eps``, ``step_norm`` and
    ``E_lambda`` have one entry per recorded iteration; unavailable values
    are NaN. ``iterates[i]`` is the iterate with index ``iterate_k[i]``.
    """

    k: np.ndarray
    F_res: np.ndarray
    H_gap: np.ndarray
    dist: np.ndarray
    eps: np.ndarray
    step_norm: np.ndarray
    E_lambda: np.ndarray
    F: np.ndarray = None
    H: np.ndarray = None
    iterates: Optional[np.ndarray] = None
    iterate_k: Optional[np.ndarray] = None
    storage: str = "full"
    meta: dict = field(default_factory=dict)
    error: Optional[str] = None

    index_name = "k"

    def __len__(self):
        return len(self.k)

    @property
    def index(self):
        return self.k

    def column(self, name):
        if name in ("k", "t"):
            return self.k
        return getattr(self, name)

    def iterate(self, k):
        """Stored iterate with index ``k``."""
        if self.iterates is None:
            raise ValidationError("trace holds no iterates")
        pos = np.searchsorted(self.iterate_k, k)
        if pos >= len(self.iterate_k) or self.iterate_k[pos] != k:
            raise ValidationError(f"iterate {k} not stored (policy {self.storage})")
        return self.iterates[pos]

    @property
    def x_final(self):
        return None if self.iterates is None else self.iterates[-1]


@dataclass
class FlowTrace(RunTrace):
    """Trajectory samples of a continuous flow; ``k`` holds the times.

    ``step_norm`` is ``||x'(t)||`` and ``velocities`` the stored ``x'(t)``.
    """

    velocities: Optional[np.ndarray] = None

    index_name = "t"

    @property
    def t(self):
        return self.k


def storage_policy(dim, n_iter, requested="auto"):
    """``"full"`` below 1e7 stored scalars, else ``"thin"`` (every 10th)."""
    if requested != "auto":
        if requested not in ("full", "thin", "none"):
            raise ValidationError(f"unknown storage policy {requested!r}")
        return requested
    return "full" if dim * (n_iter + 1) <= FULL_STORAGE_LIMIT else "thin"


class TraceRecorder:
    """Observer that accumulates a :class:`RunTrace` during a run.

    ``energy`` is an optional callable ``energy(k, x_k, x_km1, Fk, Hk)``
    returning the Lyapunov energy (NaN when undefined).
    """

    def __init__(self, prob, n_iter, storage="auto", energy=None, record_every=1):
        self.prob = prob
        o = prob.oracle
        self.min_inner = None if o is None else o.min_inner
        self.min_outer = None if o is None else o.min_outer_on_argmin
        self.x_star = None if (o is None or o.x_star is None) else np.asarray(o.x_star, float)
        self.storage = storage_policy(prob.dimension, n_iter, storage)
        self.energy = energy
        self.record_every = max(1, int(record_every))
        self.rows = []
        self.xs = []
        self.xk = []

    def __call__(self, k, x, x_prev, eps):
        keep_row = k % self.record_every == 0
        if self.storage == "full" or (self.storage == "thin" and k % THIN_EVERY == 0):
            self.xs.append(np.array(x, copy=True))
            self.xk.append(k)
        if not keep_row:
            return
        Fk = self.prob.F(x)
        Hk = self.prob.H(x)
        fres = Fk - self.min_inner if self.min_inner is not None else np.nan
        hgap = Hk - self.min_outer if self.min_outer is not None else np.nan
        dist = float(np.linalg.norm(x - self.x_star)) if self.x_star is not None else np.nan
        sn = float(np.linalg.norm(x - x_prev)) if x_prev is not None else np.nan
        e = np.nan
        if self.energy is not None and k >= 1:
            e = self.energy(k, x, x_prev, Fk, Hk)
        self.rows.append((k, fres, hgap, dist, eps, sn, e, Fk, Hk))

    def finish(self, meta=None, error=None):
        arr = np.array(self.rows, dtype=float).reshape(-1, 9)
        iterates = np.array(self.xs) if self.xs else None
        return RunTrace(
            k=arr[:, 0].astype(np.int64),
            F_res=arr[:, 1],
            H_gap=arr[:, 2],
            dist=arr[:, 3],
            eps=arr[:, 4],
            step_norm=arr[:, 5],
            E_lambda=arr[:, 6],
            F=arr[:, 7],
            H=arr[:, 8],
            iterates=iterates,
            iterate_k=np.array(self.xk, dtype=np.int64) if self.xk else None,
            storage=self.storage,
            meta=dict(meta or {}),
            error=error,
        )


@dataclass(frozen=True)
class LyapunovParams:
    """``lam``, ``theta`` and ``gamma`` (so ``t_k = theta (k + gamma)``).

    ``alpha`` is the momentum strength, needed for second-order energies.
    """

    lam: float
    theta: float
    gamma: float = 0.0
    alpha: Optional[float] = None

    def t(self, k):
        return self.theta * (k + self.gamma)

    def check_first(self):
        if not self.lam > 1:
            raise ValidationError("first-order energy needs lam > 1", "lambda")
        return self

    def check_second(self):
        if self.alpha is None:
            raise ValidationError("second-order energy needs alpha", "alpha")
        if not (2 < self.lam < self.alpha - 1):
            raise ValidationError("second-order energy needs lam in (2, alpha-1)", "lambda")
        return self

    @classmethod
    def first(cls, theta, gamma=0.0, lam=2.0):
        return cls(lam, theta, gamma).check_first()

    @classmethod
    def second(cls, s, alpha, gamma=0.0, lam=None):
        if lam is None:
            lam = (2.0 + (alpha - 1.0)) / 2.0
        return cls(lam, float(np.sqrt(s)), gamma, alpha).check_second()


def _star(prob):
    o = prob.oracle
    if o is None or o.x_star is None:
        raise MissingOracle(f"problem {prob.name!r} has no oracle x_star")
    xs = np.asarray(o.x_star, dtype=float)
    return xs, prob.F(xs), prob.H(xs)


def _energy_first(params, t, eps_prev, Fk, Hk, Fs, Hs, dx):
    return t * ((Fk - Fs) + eps_prev * (Hk - Hs)) + 0.5 * params.lam * float(dx @ dx)


def _energy_second(params, t, eps_prev, Fk, Hk, Fs, Hs, xk, xkm1, xs):
    lam, th, a = params.lam, params.theta, params.alpha
    v = lam * (xkm1 - xs) + t * (xk - xkm1) / th
    d = xkm1 - xs
    return (
        t * t * ((Fk - Fs) + eps_prev * (Hk - Hs))
        + 0.5 * float(v @ v)
        + 0.5 * lam * (a - 1.0 - lam) * float(d @ d)
    )


def lyapunov_first(prob, sched, params, k, x_k):
    """First-order energy E_k for ``k >= 1``.

    Raises
    ------
    MissingOracle
        If the problem has no ``x_star``.
    """
    if k < 1:
        raise ValidationError("energy defined for k >= 1")
    xs, Fs, Hs = _star(prob)
    x_k = np.asarray(x_k, dtype=float)
    e = epsilon_discrete(sched, k - 1)
    return _energy_first(params, params.t(k), e, prob.F(x_k), prob.H(x_k), Fs, Hs, x_k - xs)


def lyapunov_second(prob, sched, params, k, x_k, x_km1):
    """Second-order energy E_k for ``k >= 1`` (``params.alpha`` required)."""
    if k < 1:
        raise ValidationError("energy defined for k >= 1")
    params.check_second()
    xs, Fs, Hs = _star(prob)
    x_k = np.asarray(x_k, dtype=float)
    x_km1 = np.asarray(x_km1, dtype=float)
    e = epsilon_discrete(sched, k - 1)
    return _energy_second(
        params, params.t(k), e, prob.F(x_k), prob.H(x_k), Fs, Hs, x_k, x_km1, xs
    )


def energy_callback(prob, sched, params, order):
    """Energy closure for :class:`TraceRecorder`; None without oracle."""
    o = prob.oracle
    if o is None or o.x_star is None:
        return None
    xs, Fs, Hs = _star(prob)

    if order == 1:

        def cb(k, x, x_prev, Fk, Hk):
            e = epsilon_discrete(sched, k - 1)
            return _energy_first(params, params.t(k), e, Fk, Hk, Fs, Hs, x - xs)

    else:

        def cb(k, x, x_prev, Fk, Hk):
            e = epsilon_discrete(sched, k - 1)
            return _energy_second(params, params.t(k), e, Fk, Hk, Fs, Hs, x, x_prev, xs)

    return cb


def zeta_first(sched, params, k):
    """``theta (lam-1) eps_k - t_k (eps_k - eps_{k-1})``."""
    if k < 1:
        raise ValidationError("zeta defined for k >= 1")
    ek, ekm = epsilon_discrete(sched, k), epsilon_discrete(sched, k - 1)
    return params.theta * (params.lam - 1.0) * ek - params.t(k) * (ek - ekm)


def zeta_second(sched, params, k):
    """``theta ((lam-2) t_k + theta (lam-1)) eps_k - t_k^2 (eps_k - eps_{k-1})``."""
    if k < 1:
        raise ValidationError("zeta defined for k >= 1")
    ek, ekm = epsilon_discrete(sched, k), epsilon_discrete(sched, k - 1)
    th, lam, t = params.theta, params.lam, params.t(k)
    return th * ((lam - 2.0) * t + th * (lam - 1.0)) * ek - t * t * (ek - ekm)


@dataclass
class DissipationReport:
    """Slack ``RHS - LHS`` of the dissipation inequality for each ``k``.

    ``k0`` is the first index from which ``slack >= -tol`` holds for every
    later checked index (None if the last index fails).
    """

    k: np.ndarray
    slack: np.ndarray
    tol: np.ndarray
    k0: Optional[int]

    @property
    def ok(self):
        return self.slack >= -self.tol

    @property
    def holds_from_k0(self):
        return self.k0 is not None


def _first_sustained(k, ok):
    if len(ok) == 0 or not ok[-1]:
        return None
    bad = np.nonzero(~ok)[0]
    return int(k[0]) if len(bad) == 0 else int(k[bad[-1] + 1])


def _stored_run(trace):
    if trace.iterates is None or trace.storage != "full":
        raise ValidationError("dissipation check needs full iterate storage")
    ks = trace.iterate_k
    if not np.array_equal(ks, np.arange(ks[0], ks[0] + len(ks))):
        raise ValidationError("dissipation check needs consecutive iterates")
    return ks, trace.iterates


def check_dissipation_first(prob, sched, params, trace, rel_tol=1e-9):
    """Check E_{k+1} - E_k + zeta_k (H_k - H*) <= -theta (lam-1) (F_k - F*)."""
    params.check_first()
    xs, Fs, Hs = _star(prob)
    ks, X = _stored_run(trace)
    Fv = np.array([prob.F(x) for x in X])
    Hv = np.array([prob.H(x) for x in X])
    E = {}
    for i, k in enumerate(ks):
        if k >= 1:
            e = epsilon_discrete(sched, k - 1)
            E[k] = _energy_first(params, params.t(k), e, Fv[i], Hv[i], Fs, Hs, X[i] - xs)
    out_k, slack, tol = [], [], []
    for i, k in enumerate(ks[:-1]):
        if k < 1:
            continue
        lhs = E[k + 1] - E[k] + zeta_first(sched, params, k) * (Hv[i] - Hs)
        rhs = -params.theta * (params.lam - 1.0) * (Fv[i] - Fs)
        out_k.append(k)
        slack.append(rhs - lhs)
        tol.append(rel_tol * (1.0 + abs(E[k])))
    out_k, slack, tol = np.array(out_k), np.array(slack), np.array(tol)
    return DissipationReport(out_k, slack, tol, _first_sustained(out_k, slack >= -tol))


def check_dissipation_second(prob, sched, params, trace, rel_tol=1e-9):
    """Check the accelerated dissipation inequality

    E_{k+1} - E_k + (alpha-1-lam) theta t_{k+1} alpha_k ||(x_k - x_{k-1})/theta||^2
        + zeta_k (H_k - H*) <= -theta^2 (lam-2) k (F_k - F*),

    with ``alpha_k = 1 - alpha/(k + gamma + 1)``.
    """
    params.check_second()
    xs, Fs, Hs = _star(prob)
    ks, X = _stored_run(trace)
    Fv = np.array([prob.F(x) for x in X])
    Hv = np.array([prob.H(x) for x in X])
    th, lam, a = params.theta, params.lam, params.alpha
    E = {}
    for i in range(1, len(ks)):
        k = ks[i]
        if k >= 1:
            e = epsilon_discrete(sched, k - 1)
            E[k] = _energy_second(
                params, params.t(k), e, Fv[i], Hv[i], Fs, Hs, X[i], X[i - 1], xs
            )
    out_k, slack, tol = [], [], []
    for i in range(1, len(ks) - 1):
        k = ks[i]
        if k < 1 or k not in E:
            continue
        ak = 1.0 - a / (k + params.gamma + 1.0)
        dv = (X[i] - X[i - 1]) / th
        lhs = (
            E[k + 1]
            - E[k]
            + (a - 1.0 - lam) * th * params.t(k + 1) * ak * float(dv @ dv)
            + zeta_second(sched, params, k) * (Hv[i] - Hs)
        )
        rhs = -th * th * (lam - 2.0) * k * (Fv[i] - Fs)
        out_k.append(k)
        slack.append(rhs - lhs)
        tol.append(rel_tol * (1.0 + abs(E[k])))
    out_k, slack, tol = np.array(out_k), np.array(slack), np.array(tol)
    return DissipationReport(out_k, slack, tol, _first_sustained(out_k, slack >= -tol))


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float


def fit_loglog(x, y):
    """Least-squares line through ``(log x, log y)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        raise ValidationError("need at least two points to fit")
    if np.any(~(y > 0)) or np.any(~(x > 0)):
        raise NonPositiveValues("log-log fit needs strictly positive values")
    lx, ly = np.log(x), np.log(y)
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    res = ly - (slope * lx + icpt)
    ss = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(res @ res) / ss if ss > 0 else 1.0
    return RateFit(float(slope), float(icpt), r2)


def fit_rate(trace, field, k_window):
    """Fit ``log(field)`` against ``log(k)`` over ``k_lo <= k <= k_hi``.

    Raises
    ------
    NonPositiveValues
        If any value in the window is zero, negative or NaN.
    """
    lo, hi = k_window
    k = np.asarray(trace.column(trace.index_name), dtype=float)
    y = np.asarray(trace.column(field), dtype=float)
    m = (k >= lo) & (k <= hi)
    if not np.any(m):
        raise ValidationError(f"no samples of {field} in window {k_window}")
    return fit_loglog(k[m], y[m])


@dataclass
class BestIterate:
    x_best: np.ndarray
    which: str
    x_bar: np.ndarray


def best_iterate(prob, trace, sched, params, k, k0=1, order=2):
    """Weighted average over ``l = k0..k`` and the better of it and x_{k+1}.

    Weights are ``zeta_second`` (``order=2``) or ``zeta_first``.
    """
    if trace.iterates is None or trace.storage != "full":
        raise ValidationError("best iterate needs full iterate storage")
    zf = zeta_second if order == 2 else zeta_first
    ls = range(max(k0, 1), k + 1)
    w = np.array([zf(sched, params, l) for l in ls])
    X = np.array([trace.iterate(l) for l in ls])
    x_bar = (w[:, None] * X).sum(axis=0) / w.sum()
    x_next = trace.iterate(k + 1)
    if prob.H(x_bar) < prob.H(x_next):
        return BestIterate(x_bar, "average", x_bar)
    return BestIterate(x_next, "last", x_bar)


def weighted_average(xs, w):
    xs = np.asarray(xs, dtype=float)
    w = np.asarray(w, dtype=float)
    return (w.reshape(-1, *([1] * (xs.ndim - 1))) * xs).sum(axis=0) / w.sum()


@dataclass
class HolderReport:
    """``ratios`` = (F - min F) / (tau/rho dist^rho); +inf on argmin F."""

    ratios: np.ndarray
    worst_ratio: float
    passed: bool
    lemma_slack: Optional[np.ndarray] = None

    @property
    def lemma_ok(self):
        return None if self.lemma_slack is None else bool(np.all(self.lemma_slack >= 0))


def holder_lemma_bound(prob, x):
    """Right-hand side ``||p*|| ((F(x) - F*) / (tau/rho))^(1/rho)``."""
    o = prob.oracle
    if o is None or o.holder is None or o.p_star is None or o.x_star is None:
        raise MissingOracle("lemma bound needs x_star, holder data and p_star")
    rho, tau = o.holder.rho, o.holder.tau
    gap = max(prob.F(x) - prob.F(o.x_star), 0.0)
    return float(np.linalg.norm(o.p_star)) * (gap / (tau / rho)) ** (1.0 / rho)


def check_holder_growth(prob, samples, rel_tol=1e-9):
    """Evaluate the growth inequality (and the error-bound lemma) at samples.

    Raises
    ------
    MissingOracle
        Without an argmin projector or holder data.
    """
    o = prob.oracle
    if o is None or o.project_argmin is None or o.holder is None or o.min_inner is None:
        raise MissingOracle("holder check needs a projector, min_inner and (rho, tau)")
    rho, tau = o.holder.rho, o.holder.tau
    ratios = []
    for x in samples:
        x = np.asarray(x, dtype=float)
        d = float(np.linalg.norm(x - o.project_argmin(x)))
        lower = tau / rho * d**rho
        gap = prob.F(x) - o.min_inner
        ratios.append(np.inf if lower == 0 else gap / lower)
    ratios = np.array(ratios)
    worst = float(np.min(ratios)) if len(ratios) else np.inf
    slack = None
    if o.p_star is not None and o.x_star is not None:
        Hs = prob.H(o.x_star)
        slack = np.array(
            [holder_lemma_bound(prob, x) - (Hs - prob.H(x)) for x in samples]
        )
        slack = slack + rel_tol * (1.0 + abs(Hs))
    return HolderReport(ratios, worst, worst >= 1.0 - rel_tol, slack)


def sum_bounds(r, k0, k):
    """Integral bracket for ``sum_{l=k0}^{k} l^(-r)`` (``k0 >= 2``)."""
    if k0 < 2 or k < k0:
        raise ValidationError("need 2 <= k0 <= k")
    if r == 1:
        return np.log(k + 1) - np.log(k0), np.log(k) - np.log(k0 - 1)
    p = 1.0 - r
    if r < 0:
        return (k**p - (k0 - 1) ** p) / p, ((k + 1) ** p - k0**p) / p
    return ((k + 1) ** p - k0**p) / p, (k**p - (k0 - 1) ** p) / p


def zeta_sandwich(sched, params, ks, order=1):
    """Constants C1, C2 with C1 k^(eta-1) eps_{k-1} <= zeta_k <= C2 k^(eta-1) eps_k.

    ``eta`` equals the order. Returns ``(C1, C2)`` as the extreme ratios
    over ``ks``.
    """
    zf = zeta_first if order == 1 else zeta_second
    ks = np.asarray(ks)
    z = np.array([zf(sched, params, int(k)) for k in ks])
    e = np.array([epsilon_discrete(sched, int(k)) for k in ks])
    em = np.array([epsilon_discrete(sched, int(k) - 1) for k in ks])
    w = ks.astype(float) ** (order - 1)
    return float(np.min(z / (w * em))), float(np.max(z / (w * e)))
