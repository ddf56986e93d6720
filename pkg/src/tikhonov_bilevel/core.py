"""Domain types for simple bilevel problems.

The problem class is

    min H(x) = h(x) + hhat(x)   subject to   x in argmin F,  F = f + fhat,

with ``f``, ``h`` smooth (Lipschitz gradients) and ``fhat``, ``hhat``
proximable. Solvers work on the regularized objective
``Psi_eps = F + eps * H`` with ``eps_k = c / (k + beta)**delta``.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import prox as _prox
from .errors import ValidationError
from .prox import ProxTerm, combined_prox

__all__ = [
    "SmoothTerm",
    "ProxTerm",
    "CompositeObjective",
    "HolderData",
    "Oracle",
    "BilevelProblem",
    "Schedule",
    "zero_smooth",
    "epsilon_discrete",
    "epsilon_continuous",
    "regularized_value",
    "regularized_gradient",
    "combined_prox",
    "power_iteration",
]


@dataclass(frozen=True, eq=False)
class SmoothTerm:
    """Convex differentiable function with an L-Lipschitz gradient."""

    eval: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    kind: str = "custom"

    def __post_init__(self):
        if not self.lipschitz >= 0 or not np.isfinite(self.lipschitz):
            raise ValidationError("lipschitz must be finite and >= 0")
        if self.lipschitz == 0 and self.kind != "zero":
            raise ValidationError("lipschitz must be > 0 for a nonzero term")

    @property
    def is_zero(self):
        return self.kind == "zero"


def zero_smooth():
    """The smooth zero function (gradient Lipschitz constant 0)."""
    return SmoothTerm(
        eval=lambda x: 0.0,
        grad=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        lipschitz=0.0,
        kind="zero",
    )


@dataclass(frozen=True, eq=False)
class CompositeObjective:
    """``smooth + nonsmooth``."""

    smooth: SmoothTerm
    nonsmooth: ProxTerm = field(default_factory=_prox.zero)

    def value(self, x):
        a = self.nonsmooth.eval(x)
        if not np.isfinite(a):
            return np.inf
        return float(self.smooth.eval(x)) + float(a)

    __call__ = value


@dataclass(frozen=True)
class HolderData:
    """Parameters of the growth bound tau/rho * dist(x, argmin F)**rho <= F(x) - min F."""

    rho: float
    tau: float

    def __post_init__(self):
        if not (1.0 < self.rho <= 2.0):
            raise ValidationError("rho must lie in (1, 2]")
        if not self.tau > 0:
            raise ValidationError("tau must be positive")

    @property
    def rho_star(self):
        """Dual exponent, 1/rho + 1/rho* = 1."""
        return self.rho / (self.rho - 1.0)


@dataclass(frozen=True, eq=False)
class Oracle:
    """Known solution data of a problem.

    Any field may be ``None``. ``min_outer_exact`` is False when
    ``min_outer_on_argmin`` comes from a reference run rather than a
    closed form. ``p_star`` is an element of -dH(x*) in the normal cone of
    argmin F at x*, used by the error-bound diagnostic.
    """

    x_star: Optional[np.ndarray] = None
    min_inner: Optional[float] = None
    min_outer_on_argmin: Optional[float] = None
    holder: Optional[HolderData] = None
    project_argmin: Optional[Callable[[np.ndarray], np.ndarray]] = None
    p_star: Optional[np.ndarray] = None
    min_inner_exact: bool = True
    min_outer_exact: bool = True
    note: str = ""


@dataclass(frozen=True, eq=False)
class BilevelProblem:
    """Inner objective F, outer objective H and optional oracle data.

    ``joint_prox(s, eps, v)``, when given, evaluates
    ``prox_{s (fhat + eps hhat)}(v)`` for pairs that have no built-in rule.
    """

    inner: CompositeObjective
    outer: CompositeObjective
    dimension: int
    oracle: Optional[Oracle] = None
    name: str = "problem"
    joint_prox: Optional[Callable] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.dimension) <= 0:
            raise ValidationError("dimension must be positive")
        o = self.oracle
        if o is not None and o.x_star is not None:
            xs = np.asarray(o.x_star, dtype=float)
            if xs.shape != (self.dimension,):
                raise ValidationError("oracle x_star has wrong shape")
            if o.min_inner is not None and o.min_inner_exact:
                fv = self.inner.value(xs)
                if abs(fv - o.min_inner) > 1e-10 * max(1.0, abs(o.min_inner)):
                    raise ValidationError(
                        f"F(x_star) = {fv!r} differs from min_inner = {o.min_inner!r}"
                    )

    def F(self, x):
        return self.inner.value(x)

    def H(self, x):
        return self.outer.value(x)

    @property
    def L_f(self):
        return self.inner.smooth.lipschitz

    @property
    def L_h(self):
        return self.outer.smooth.lipschitz

    @property
    def smooth_only(self):
        return self.inner.nonsmooth.is_zero and self.outer.nonsmooth.is_zero

    def prox(self, s, eps, v):
        """prox_{s (fhat + eps hhat)}(v)."""
        return combined_prox(
            self.inner.nonsmooth, self.outer.nonsmooth, s, eps, v, joint=self.joint_prox
        )


@dataclass(frozen=True)
class Schedule:
    """Vanishing regularization ``eps_k = c/(k+beta)**delta``, ``eps(t) = c/t**delta``.

    ``Schedule.off()`` gives the identically zero schedule used to
    reduce the bilevel methods to their single-level counterparts.
    """

    c: float
    delta: float
    beta: float = 1.0
    t0: float = 1.0
    off_: bool = False

    def __post_init__(self):
        for name in ("c", "delta", "beta", "t0"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValidationError("must be finite", name)
        if self.off_:
            return
        if not self.c > 0:
            raise ValidationError("must be > 0", "c")
        if not self.delta > 0:
            raise ValidationError("must be > 0", "delta")
        if not self.beta > 0:
            raise ValidationError("must be > 0", "beta")
        if not self.t0 > 0:
            raise ValidationError("must be > 0", "t0")

    @classmethod
    def off(cls, delta=1.0, beta=1.0, t0=1.0):
        return cls(0.0, delta, beta, t0, off_=True)

    def discrete(self, k):
        return epsilon_discrete(self, k)

    def continuous(self, t):
        return epsilon_continuous(self, t)

    def continuous_dot(self, t):
        """Time derivative of eps(t)."""
        if self.off_:
            return 0.0
        return -self.delta * self.c / t ** (self.delta + 1.0)

    def with_(self, **kw):
        d = dict(c=self.c, delta=self.delta, beta=self.beta, t0=self.t0, off_=self.off_)
        d.update(kw)
        return Schedule(**d)


def epsilon_discrete(sched, k):
    """``c / (k + beta)**delta`` for ``k >= 0``."""
    if k < 0:
        raise ValidationError("k must be >= 0")
    if sched.off_:
        return 0.0
    return sched.c / (k + sched.beta) ** sched.delta


def epsilon_continuous(sched, t):
    """``c / t**delta`` for ``t >= t0``."""
    if t < sched.t0:
        raise ValidationError(f"t = {t} is before t0 = {sched.t0}")
    if sched.off_:
        return 0.0
    return sched.c / t ** sched.delta


def regularized_value(prob, eps, x):
    """``F(x) + eps * H(x)``; +inf outside the domains."""
    if eps < 0:
        raise ValidationError("eps must be >= 0")
    fv = prob.inner.value(x)
    if eps == 0:
        return fv
    return fv + eps * prob.outer.value(x)


def regularized_gradient(prob, eps, x):
    """``grad f(x) + eps * grad h(x)``."""
    if eps < 0:
        raise ValidationError("eps must be >= 0")
    g = np.asarray(prob.inner.smooth.grad(x), dtype=float)
    if eps == 0 or prob.outer.smooth.is_zero:
        return g
    return g + eps * prob.outer.smooth.grad(x)


def power_iteration(matvec, dim, tol=1e-10, max_iter=100000, seed=0):
    """Largest eigenvalue of a symmetric positive semidefinite operator.

    Parameters
    ----------
    matvec : callable
        ``matvec(v)`` applies the operator.
    dim : int
        Dimension of the operator.
    tol : float
        Relative change of the Rayleigh quotient at which to stop.

    Returns
    -------
    float
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        if abs(lam_new - lam) <= tol * abs(lam_new):
            return lam_new
        lam = lam_new
    return lam
