"""Fixed-step RK4 integration of the continuous Tikhonov flows.

First order:   x' + grad f(x) + eps(t) grad h(x) = 0
Second order:  x'' + (alpha/t) x' + grad f(x) + eps(t) grad h(x) = 0

with ``eps(t) = c / t**delta``. Only the smooth case (fhat = hhat = 0)
is supported; hhat is tolerated when the schedule is identically zero.
"""
import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Schedule, regularized_gradient
from .diagnostics import FlowTrace
from .errors import MissingOracle, NonSmoothProblem, ValidationError

__all__ = [
    "Order",
    "FlowConfig",
    "LyapunovSeries",
    "integrate_first_flow",
    "integrate_second_flow",
    "integrate",
    "continuous_lyapunov",
    "log_grid",
    "max_stable_dt",
]


class Order(str, enum.Enum):
    First = "first"
    Second = "second"

    @classmethod
    def parse(cls, v):
        if isinstance(v, cls):
            return v
        s = str(v).lower()
        if s in ("1", "first"):
            return cls.First
        if s in ("2", "second"):
            return cls.Second
        raise ValidationError(f"unknown flow order {v!r}", "order")


def max_stable_dt(prob, sched):
    """``min(0.1, 1 / (10 (L_f + eps(t0) L_h)))``."""
    L = prob.L_f + sched.continuous(sched.t0) * prob.L_h
    return min(0.1, 1.0 / (10.0 * L)) if L > 0 else 0.1


@dataclass(frozen=True, eq=False)
class FlowConfig:
    """Flow parameters; ``dt=None`` picks :func:`max_stable_dt`.

    ``t0`` is taken from ``sched.t0``.
    """

    order: Order
    sched: Schedule
    t_end: float
    x0: np.ndarray
    alpha: float = 4.0
    dt: Optional[float] = None
    v0: Optional[np.ndarray] = None
    samples_per_decade: int = 256
    lam: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "order", Order.parse(self.order))
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        if self.v0 is not None:
            object.__setattr__(self, "v0", np.asarray(self.v0, dtype=float))
        if self.order == Order.Second and not self.alpha > 3:
            raise ValidationError("second-order flow needs alpha > 3", "alpha")
        if not self.t_end > self.t0:
            raise ValidationError("needs t_end > t0", "t_end")
        if self.dt is not None and not self.dt > 0:
            raise ValidationError("must be > 0", "dt")

    @property
    def t0(self):
        return self.sched.t0

    def resolved_dt(self, prob):
        bound = max_stable_dt(prob, self.sched)
        if self.dt is None:
            return bound
        if self.dt > bound * (1 + 1e-12):
            raise ValidationError(f"dt = {self.dt} exceeds stability bound {bound:g}", "dt")
        return self.dt

    def snapshot(self):
        return {
            "order": self.order.value,
            "sched": {"c": self.sched.c, "delta": self.sched.delta, "t0": self.sched.t0,
                      "off": self.sched.off_},
            "t_end": self.t_end,
            "alpha": self.alpha,
            "dt": self.dt,
            "samples_per_decade": self.samples_per_decade,
        }


def log_grid(t0, t_end, per_decade):
    """Logarithmically spaced output times including both ends."""
    n = max(2, int(np.ceil(np.log10(t_end / t0) * per_decade)) + 1)
    return np.geomspace(t0, t_end, n)


def _check_smooth(prob, sched):
    # hhat never enters the vector field when eps vanishes identically
    if not prob.inner.nonsmooth.is_zero or (
        not prob.outer.nonsmooth.is_zero and not sched.off_
    ):
        raise NonSmoothProblem("flows need fhat = hhat = 0")


def _lam_default(cfg):
    if cfg.lam is not None:
        return cfg.lam
    return 2.0 if cfg.order == Order.First else (cfg.alpha + 1.0) / 2.0


def _run(prob, cfg, rhs, z0, unpack):
    dt_max = cfg.resolved_dt(prob)
    t0, t1 = cfg.t0, cfg.t_end
    n = int(np.ceil((t1 - t0) / dt_max - 1e-9))
    h = (t1 - t0) / n
    grid = log_grid(t0, t1, cfg.samples_per_decade)
    idx = np.unique(np.clip(np.round((grid - t0) / h).astype(np.int64), 0, n))
    want = set(idx.tolist())
    z = z0.copy()
    out_t, out_z = [], []
    if 0 in want:
        out_t.append(t0)
        out_z.append(z.copy())
    for i in range(n):
        t = t0 + i * h
        k1 = rhs(t, z)
        k2 = rhs(t + h / 2, z + (h / 2) * k1)
        k3 = rhs(t + h / 2, z + (h / 2) * k2)
        k4 = rhs(t + h, z + h * k3)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if i + 1 in want:
            out_t.append(t0 + (i + 1) * h)
            out_z.append(z.copy())
    T = np.array(out_t)
    Z = np.array(out_z)
    X, V = unpack(T, Z)
    return _trace(prob, cfg, T, X, V, h)


def _trace(prob, cfg, T, X, V, h):
    o = prob.oracle
    F = np.array([prob.F(x) for x in X])
    Hv = np.array([prob.H(x) for x in X])
    nan = np.full(len(T), np.nan)
    fres = F - o.min_inner if o is not None and o.min_inner is not None else nan
    hgap = Hv - o.min_outer_on_argmin if o is not None and o.min_outer_on_argmin is not None else nan
    if o is not None and o.x_star is not None:
        dist = np.linalg.norm(X - o.x_star, axis=1)
    else:
        dist = nan
    eps = np.array([cfg.sched.continuous(t) for t in T])
    tr = FlowTrace(
        k=T,
        F_res=fres,
        H_gap=hgap,
        dist=dist,
        eps=eps,
        step_norm=np.linalg.norm(V, axis=1),
        E_lambda=nan.copy(),
        F=F,
        H=Hv,
        iterates=X,
        iterate_k=None,
        storage="log-grid",
        meta={"problem": prob.name, "config": cfg.snapshot(), "dt": h},
        velocities=V,
    )
    if o is not None and o.x_star is not None:
        tr.E_lambda = continuous_lyapunov(prob, cfg, tr, _lam_default(cfg)).E
    return tr


def integrate_first_flow(prob, cfg):
    """Integrate ``x' = -(grad f + eps(t) grad h)(x)``.

    Raises
    ------
    NonSmoothProblem
        If fhat or hhat is nonzero.
    """
    _check_smooth(prob, cfg.sched)
    sched = cfg.sched

    def rhs(t, x):
        return -regularized_gradient(prob, sched.continuous(t), x)

    def unpack(T, Z):
        V = np.array([rhs(t, x) for t, x in zip(T, Z)])
        return Z, V

    return _run(prob, cfg, rhs, cfg.x0.copy(), unpack)


def integrate_second_flow(prob, cfg):
    """Integrate the phase-space system ``(x, v)' = (v, -(alpha/t) v - grad Psi_t(x))``."""
    _check_smooth(prob, cfg.sched)
    if cfg.order != Order.Second:
        raise ValidationError("config is not second order", "order")
    sched, a, d = cfg.sched, cfg.alpha, prob.dimension
    v0 = np.zeros(d) if cfg.v0 is None else cfg.v0

    def rhs(t, z):
        x, v = z[:d], z[d:]
        acc = -(a / t) * v - regularized_gradient(prob, sched.continuous(t), x)
        return np.concatenate([v, acc])

    def unpack(T, Z):
        return Z[:, :d], Z[:, d:]

    return _run(prob, cfg, rhs, np.concatenate([cfg.x0, v0]), unpack)


def integrate(prob, cfg):
    if cfg.order == Order.First:
        return integrate_first_flow(prob, cfg)
    return integrate_second_flow(prob, cfg)


@dataclass
class LyapunovSeries:
    """Energy along a trajectory and its dissipation slack.

    ``dE`` is a finite-difference derivative on the output grid; ``slack``
    is ``RHS - LHS`` of the continuous dissipation inequality with that
    derivative, and ``scale`` the magnitude used to normalise it.
    """

    t: np.ndarray
    E: np.ndarray
    dE: np.ndarray
    zeta: np.ndarray
    slack: np.ndarray
    scale: np.ndarray


def continuous_lyapunov(prob, cfg, trace, lam=None):
    """Continuous energy ``E(t)`` for a flow trace.

    First order:  t (Psi_t(x) - Psi_t(x*)) + lam/2 ||x - x*||^2.
    Second order: t^2 (Psi_t(x) - Psi_t(x*)) + 1/2 ||lam (x - x*) + t x'||^2
                  + lam (alpha - 1 - lam)/2 ||x - x*||^2.
    """
    o = prob.oracle
    if o is None or o.x_star is None:
        raise MissingOracle("continuous energy needs x_star")
    lam = _lam_default(cfg) if lam is None else lam
    xs = np.asarray(o.x_star, dtype=float)
    Fs, Hs = prob.F(xs), prob.H(xs)
    T = np.asarray(trace.t, dtype=float)
    X, V = trace.iterates, trace.velocities
    F = trace.F if trace.F is not None else np.array([prob.F(x) for x in X])
    Hv = trace.H if trace.H is not None else np.array([prob.H(x) for x in X])
    eps = np.array([cfg.sched.continuous(t) for t in T])
    deps = np.array([cfg.sched.continuous_dot(t) for t in T])
    D = X - xs
    dn2 = np.einsum("ij,ij->i", D, D)
    gap = (F - Fs) + eps * (Hv - Hs)
    vn2 = np.einsum("ij,ij->i", V, V)
    if cfg.order == Order.First:
        if not lam > 1:
            raise ValidationError("first-order energy needs lam > 1", "lambda")
        E = T * gap + 0.5 * lam * dn2
        zeta = (lam - 1.0) * eps - T * deps
        extra = np.zeros_like(T)
        rhs = -(lam - 1.0) * (F - Fs)
    else:
        a = cfg.alpha
        if not (2 < lam < a - 1):
            raise ValidationError("second-order energy needs lam in (2, alpha-1)", "lambda")
        W = lam * D + T[:, None] * V
        E = T**2 * gap + 0.5 * np.einsum("ij,ij->i", W, W) + 0.5 * lam * (a - 1 - lam) * dn2
        zeta = T * (lam - 2.0) * eps - T**2 * deps
        extra = (a - 1.0 - lam) * T * vn2
        rhs = -T * (lam - 2.0) * (F - Fs)
    dE = np.gradient(E, T) if len(T) > 2 else np.full_like(T, np.nan)
    slack = rhs - (dE + zeta * (Hv - Hs) + extra)
    scale = 1.0 + np.abs(E) / T + np.abs(zeta * (Hv - Hs)) + np.abs(extra) + np.abs(rhs)
    return LyapunovSeries(T, E, dE, zeta, slack, scale)
