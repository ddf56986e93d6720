"""Diagonal Tikhonov proximal-gradient solvers behind one stepper interface.

Methods
-------
BPG
    x_{k+1} = prox_{theta (fhat + eps_k hhat)}(x_k - theta (grad f + eps_k grad h)(x_k)),
    started at k = 0.
BFPG
    alpha_k = 1 - alpha/(k + gamma + 1), y_k = x_k + alpha_k (x_k - x_{k-1}),
    x_{k+1} = prox_{s (fhat + eps_k hhat)}(y_k - s (grad f + eps_k grad h)(y_k)),
    started at k = 1 with x_1 = x_0.
FBiPG
    BFPG with gamma = alpha - 1, c = 1, beta = alpha - 1.
StaBiM
    BPG with the varying step theta_{k+1} = theta_tilde / (eta_{k+1} L_h + L_f),
    eta_{k+1} = shrink * eta_k.
BiSG2
    y_{k+1} = prox_{theta fhat}(x_k - theta grad f(x_k)),
    x_{k+1} = prox_{theta eps_k hhat}(y_{k+1} - theta eps_k grad h(y_{k+1})),
    with eps_k = c/(k+1)^delta.
"""
import enum
import time
from dataclasses import dataclass, field, replace, asdict
from typing import Callable, Optional

import numpy as np

from .core import Schedule, epsilon_discrete, regularized_gradient
from .diagnostics import LyapunovParams, TraceRecorder, energy_callback
from .errors import BilevelError, ValidationError

__all__ = [
    "Method",
    "SolverConfig",
    "SolverState",
    "step_bpg",
    "step_bfpg",
    "step_fbipg",
    "step_stabim",
    "step_bisg2",
    "initial_state",
    "effective_schedule",
    "lyapunov_params",
    "run",
]


class Method(str, enum.Enum):
    BPG = "BPG"
    BFPG = "BFPG"
    FBiPG = "FBiPG"
    StaBiM = "StaBiM"
    BiSG2 = "BiSG2"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        for m in cls:
            if m.value.lower() == str(name).lower():
                return m
        raise ValidationError(f"unknown method {name!r}", "method")

    @property
    def order(self):
        return 2 if self in (Method.BFPG, Method.FBiPG) else 1


@dataclass(frozen=True)
class SolverConfig:
    """Solver parameters.

    ``step`` is theta (BPG, BiSG2) or s (BFPG, FBiPG); when None it is
    ``step_fraction`` times the largest admissible step (2/L_f for BPG,
    1/L_f otherwise). StaBiM computes its own steps from
    ``stabim_theta_tilde``.
    """

    method: Method
    schedule: Schedule
    max_iter: int
    step: Optional[float] = None
    alpha: float = 4.0
    gamma: float = 0.0
    step_fraction: float = 0.95
    stabim_theta_tilde: float = 0.95
    stabim_eta0: float = 1.0
    stabim_eta_shrink: float = 0.75
    lam: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        if int(self.max_iter) != self.max_iter or self.max_iter < 0:
            raise ValidationError("must be a nonnegative integer", "max_iter")
        if not (0 < self.step_fraction <= 1):
            raise ValidationError("must lie in (0, 1]", "step_fraction")

    def max_step(self, prob):
        L = prob.L_f
        if L <= 0:
            return np.inf
        return 2.0 / L if self.method == Method.BPG else 1.0 / L

    def resolved(self, prob):
        """Copy with a concrete ``step``; validates against ``prob``."""
        cfg = self
        if cfg.step is None and cfg.method != Method.StaBiM:
            m = cfg.max_step(prob)
            if not np.isfinite(m):
                raise ValidationError("cannot derive a step when L_f = 0", "step")
            cfg = replace(cfg, step=cfg.step_fraction * m)
        cfg.validate(prob)
        return cfg

    def validate(self, prob):
        m = self.method
        sched = self.schedule
        Lf, Lh = prob.L_f, prob.L_h
        if m != Method.StaBiM:
            if self.step is None or not self.step > 0:
                raise ValidationError("must be > 0", "step")
        if m == Method.BPG and Lf > 0 and not self.step < 2.0 / Lf:
            raise ValidationError("BPG needs 0 < step < 2/L_f", "step")
        if m in (Method.BFPG, Method.FBiPG):
            if not self.alpha > 3:
                raise ValidationError("needs alpha > 3", "alpha")
            if Lf > 0 and not self.step < 1.0 / Lf:
                raise ValidationError("needs 0 < step < 1/L_f", "step")
        if m == Method.BFPG and not self.gamma >= 0:
            raise ValidationError("needs gamma >= 0", "gamma")
        if m == Method.BiSG2:
            if not sched.off_:
                if not (0.5 < sched.delta <= 1.0):
                    raise ValidationError("BiSG2 needs delta in (1/2, 1]", "schedule.delta")
                cmax = min(1.0 / Lh, 1.0) if Lh > 0 else 1.0
                if sched.c > cmax * (1 + 1e-12):
                    raise ValidationError(
                        f"BiSG2 needs c <= min(1/L_h, 1) = {cmax:g}", "schedule.c"
                    )
            if Lf > 0 and self.step > (1.0 / Lf) * (1 + 1e-12):
                raise ValidationError("BiSG2 needs step <= 1/L_f", "step")
        if m == Method.StaBiM:
            if not (0 < self.stabim_theta_tilde < 1):
                raise ValidationError("must lie in (0, 1)", "stabim_theta_tilde")
            if not self.stabim_eta0 > 0:
                raise ValidationError("must be > 0", "stabim_eta0")
            if not (0.75 <= self.stabim_eta_shrink <= 1):
                raise ValidationError("must lie in [0.75, 1]", "stabim_eta_shrink")
        return self

    def snapshot(self):
        d = asdict(self)
        d["method"] = self.method.value
        d["schedule"] = asdict(self.schedule)
        return d


@dataclass
class SolverState:
    """Iteration state; ``x_prev`` is x_{k-1} (None before the first step)."""

    k: int
    x_curr: np.ndarray
    x_prev: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    stabim_eta: Optional[float] = None
    theta_k: Optional[float] = None


def effective_schedule(cfg):
    """Schedule actually used by ``cfg.method``."""
    s = cfg.schedule
    if cfg.method == Method.FBiPG:
        return Schedule(1.0, s.delta, cfg.alpha - 1.0, s.t0, off_=s.off_)
    if cfg.method == Method.BiSG2:
        return s.with_(beta=1.0)
    return s


def effective_gamma(cfg):
    return cfg.alpha - 1.0 if cfg.method == Method.FBiPG else cfg.gamma


def fbipg_as_bfpg(cfg):
    """The BFPG configuration that FBiPG delegates to."""
    return replace(
        cfg,
        method=Method.BFPG,
        gamma=cfg.alpha - 1.0,
        schedule=effective_schedule(cfg),
    )


def initial_state(cfg, x0):
    x0 = np.array(x0, dtype=float, copy=True)
    if cfg.method.order == 2:
        # x_1 := x_0, the first extrapolation has zero displacement
        return SolverState(k=1, x_curr=x0, x_prev=x0.copy())
    st = SolverState(k=0, x_curr=x0)
    if cfg.method == Method.StaBiM:
        st.stabim_eta = cfg.stabim_eta0
    return st


def step_bpg(prob, cfg, state):
    k, x = state.k, state.x_curr
    eps = epsilon_discrete(cfg.schedule, k)
    th = cfg.step
    x_new = prob.prox(th, eps, x - th * regularized_gradient(prob, eps, x))
    return SolverState(k=k + 1, x_curr=x_new, x_prev=x)


def momentum(cfg, k):
    """alpha_k = 1 - alpha / (k + gamma + 1)."""
    return 1.0 - cfg.alpha / (k + cfg.gamma + 1.0)


def step_bfpg(prob, cfg, state):
    k, x, xp = state.k, state.x_curr, state.x_prev
    if xp is None:
        xp = x
    eps = epsilon_discrete(cfg.schedule, k)
    s = cfg.step
    y = x + momentum(cfg, k) * (x - xp)
    x_new = prob.prox(s, eps, y - s * regularized_gradient(prob, eps, y))
    return SolverState(k=k + 1, x_curr=x_new, x_prev=x, y=y)


def step_fbipg(prob, cfg, state):
    return step_bfpg(prob, fbipg_as_bfpg(cfg), state)


def stabim_theta(cfg, prob, eta):
    return cfg.stabim_theta_tilde / (eta * prob.L_h + prob.L_f)


def step_stabim(prob, cfg, state):
    k, x = state.k, state.x_curr
    eta = cfg.stabim_eta_shrink * state.stabim_eta
    th = stabim_theta(cfg, prob, eta)
    eps = epsilon_discrete(cfg.schedule, k)
    x_new = prob.prox(th, eps, x - th * regularized_gradient(prob, eps, x))
    return SolverState(k=k + 1, x_curr=x_new, x_prev=x, stabim_eta=eta, theta_k=th)


def step_bisg2(prob, cfg, state):
    k, x = state.k, state.x_curr
    th = cfg.step
    eps = epsilon_discrete(effective_schedule(cfg), k)
    fhat, hhat = prob.inner.nonsmooth, prob.outer.nonsmooth
    y = fhat.prox(th, x - th * prob.inner.smooth.grad(x))
    z = y - th * eps * prob.outer.smooth.grad(y) if not prob.outer.smooth.is_zero else y
    x_new = hhat.prox(th * eps, z) if eps > 0 else z
    return SolverState(k=k + 1, x_curr=x_new, x_prev=x, y=y)


STEPPERS = {
    Method.BPG: step_bpg,
    Method.BFPG: step_bfpg,
    Method.FBiPG: step_fbipg,
    Method.StaBiM: step_stabim,
    Method.BiSG2: step_bisg2,
}


def lyapunov_params(cfg, prob=None):
    """Default energy parameters for a resolved configuration."""
    gamma = effective_gamma(cfg)
    if cfg.method.order == 2:
        return LyapunovParams.second(cfg.step, cfg.alpha, gamma, cfg.lam)
    theta = cfg.step
    if cfg.method == Method.StaBiM:
        # limiting step of the varying sequence
        theta = cfg.stabim_theta_tilde / prob.L_f
    return LyapunovParams.first(theta, gamma, 2.0 if cfg.lam is None else cfg.lam)


def run(prob, cfg, x0, observer=None, storage="auto", energy=True, record_every=1):
    """Run ``cfg.max_iter`` iterations from ``x0`` and return the trace.

    Parameters
    ----------
    observer : callable, optional
        Called as ``observer(k, state)`` after every recorded state.
    storage : {"auto", "full", "thin", "none"}
        Iterate storage policy.
    energy : bool
        Record the Lyapunov energy when the oracle has ``x_star``.

    Returns
    -------
    RunTrace
        Rows k = 0..max_iter. On a step error the partial trace is
        returned with ``error`` set.
    """
    cfg = cfg.resolved(prob)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (prob.dimension,):
        raise ValidationError(
            f"x0 has shape {x0.shape}, expected ({prob.dimension},)", "x0"
        )
    sched = effective_schedule(cfg)
    params = lyapunov_params(cfg, prob)
    ecb = energy_callback(prob, sched, params, cfg.method.order) if energy else None
    rec = TraceRecorder(prob, cfg.max_iter, storage, ecb, record_every)
    stepper = STEPPERS[cfg.method]
    st = initial_state(cfg, x0)
    t_start = time.perf_counter()
    error = None
    rec(0, st.x_curr, None, epsilon_discrete(sched, 0))
    if observer is not None:
        observer(0, st)
    if cfg.method.order == 2 and cfg.max_iter >= 1:
        rec(1, st.x_curr, st.x_prev, epsilon_discrete(sched, 1))
        if observer is not None:
            observer(1, st)
    try:
        while st.k < cfg.max_iter:
            st = stepper(prob, cfg, st)
            rec(st.k, st.x_curr, st.x_prev, epsilon_discrete(sched, st.k))
            if observer is not None:
                observer(st.k, st)
    except (BilevelError, FloatingPointError, np.linalg.LinAlgError) as exc:
        error = f"{type(exc).__name__}: {exc}"
    meta = {
        "method": cfg.method.value,
        "problem": prob.name,
        "config": cfg.snapshot(),
        "lyapunov": {"lam": params.lam, "theta": params.theta, "gamma": params.gamma},
        "wall_time": time.perf_counter() - t_start,
    }
    return rec.finish(meta, error)
