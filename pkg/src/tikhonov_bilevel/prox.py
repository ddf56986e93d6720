"""Proximable convex terms with closed-form proximity operators.

Every factory returns a :class:`ProxTerm`. ``prox(s, v)`` computes

    argmin_y  g(y) + ||y - v||^2 / (2 s)

for the term ``g``. Coordinate-separable terms also carry a small
structural description (``kind`` and ``params``) so that sums of two of
them can be handled exactly by :func:`combined_prox`.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import UnsupportedProxCombination

__all__ = [
    "ProxTerm",
    "zero",
    "l1",
    "shifted_l1",
    "box",
    "squared_norm",
    "combined_prox",
]


@dataclass(frozen=True, eq=False)
class ProxTerm:
    """A proper convex lsc function given by its value and its prox.

    Parameters
    ----------
    eval : callable
        ``eval(x)`` returns a float, ``np.inf`` outside the domain.
    prox : callable
        ``prox(s, v)`` returns the proximal point for modulus ``s > 0``.
    kind : str
        One of ``"zero"``, ``"abs"``, ``"box"``, ``"sq"`` for the shipped
        separable terms, ``"custom"`` otherwise.
    params : dict
        Structural parameters of the shipped kinds.
    """

    eval: Callable[[np.ndarray], float]
    prox: Callable[[float, np.ndarray], np.ndarray]
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    @property
    def is_zero(self):
        return self.kind == "zero"

    @property
    def separable(self):
        return self.kind in ("zero", "abs", "box", "sq")


def zero():
    """The zero function; its prox is the identity."""
    return ProxTerm(
        eval=lambda x: 0.0,
        prox=lambda s, v: np.array(v, dtype=float, copy=True),
        kind="zero",
    )


def _soft(v, thresh, center):
    u = v - center
    return center + np.sign(u) * np.maximum(np.abs(u) - thresh, 0.0)


def shifted_l1(center, weight=1.0):
    """``weight * ||x - center||_1``; prox is a shifted soft threshold."""
    center = np.asarray(center, dtype=float)
    weight = float(weight)
    if weight < 0:
        raise ValueError("weight must be nonnegative")

    def ev(x):
        return weight * float(np.sum(np.abs(np.asarray(x) - center)))

    def px(s, v):
        return _soft(np.asarray(v, dtype=float), s * weight, center)

    return ProxTerm(ev, px, kind="abs", params={"center": center, "weight": weight})


def l1(weight=1.0):
    """``weight * ||x||_1``."""
    return shifted_l1(0.0, weight)


def box(lo, hi):
    """Indicator of the box ``lo <= x <= hi`` (bounds may be arrays)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ValueError("empty box: lo > hi")

    def ev(x):
        x = np.asarray(x)
        return 0.0 if bool(np.all((x >= lo) & (x <= hi))) else np.inf

    def px(s, v):
        return np.clip(np.asarray(v, dtype=float), lo, hi)

    return ProxTerm(ev, px, kind="box", params={"lo": lo, "hi": hi})


def squared_norm(mu=1.0):
    """``mu/2 * ||x||^2``; prox is the shrinkage ``v / (1 + s mu)``."""
    mu = float(mu)
    if mu < 0:
        raise ValueError("mu must be nonnegative")

    def ev(x):
        x = np.asarray(x)
        return 0.5 * mu * float(x @ x)

    def px(s, v):
        return np.asarray(v, dtype=float) / (1.0 + s * mu)

    return ProxTerm(ev, px, kind="sq", params={"mu": mu})


def _prox_scaled(term, scale, s, v):
    # prox of (scale * term) with modulus s
    return term.prox(s * scale, v)


def _pair_prox(t1, a1, t2, a2, s, v):
    """Exact prox of ``a1*t1 + a2*t2`` for two separable shipped terms."""
    k1, k2 = t1.kind, t2.kind
    if k2 == "sq" and k1 != "sq":
        t1, a1, t2, a2 = t2, a2, t1, a1
        k1, k2 = k2, k1
    if k1 == "sq":
        # quadratic absorbs into the proximal term
        r = 1.0 + s * a1 * t1.params["mu"]
        return _prox_scaled(t2, a2, s / r, v / r)
    if k2 == "box" and k1 != "box":
        t1, a1, t2, a2 = t2, a2, t1, a1
        k1, k2 = k2, k1
    if k1 == "box":
        lo, hi = t1.params["lo"], t1.params["hi"]
        if k2 == "box":
            lo2 = np.maximum(lo, t2.params["lo"])
            hi2 = np.minimum(hi, t2.params["hi"])
            if np.any(lo2 > hi2):
                raise UnsupportedProxCombination("boxes have empty intersection")
            return np.clip(v, lo2, hi2)
        # 1-D convex function on an interval: clip the free minimizer
        return np.clip(_prox_scaled(t2, a2, s, v), lo, hi)
    if k1 == "abs" and k2 == "abs":
        c1, w1 = t1.params["center"], a1 * t1.params["weight"]
        c2, w2 = t2.params["center"], a2 * t2.params["weight"]
        c1 = np.broadcast_to(c1, v.shape)
        c2 = np.broadcast_to(c2, v.shape)
        # minimizer is a kink or the stationary point of one linear piece
        cands = [c1, c2]
        for g1 in (-1.0, 1.0):
            for g2 in (-1.0, 1.0):
                cands.append(v - s * (g1 * w1 + g2 * w2))
        Y = np.stack(cands)
        obj = w1 * np.abs(Y - c1) + w2 * np.abs(Y - c2) + (Y - v) ** 2 / (2.0 * s)
        idx = np.argmin(obj, axis=0)
        return np.take_along_axis(Y, idx[None, :], axis=0)[0]
    raise UnsupportedProxCombination(f"no closed form for {k1} + {k2}")


def combined_prox(fhat, hhat, s, eps, v, joint=None):
    """Evaluate ``prox_{s (fhat + eps * hhat)}(v)``.

    Supported when ``fhat`` is zero, ``hhat`` is zero (or ``eps == 0``),
    a joint prox ``joint(s, eps, v)`` is supplied, or both terms are
    shipped separable terms with a closed-form sum.

    Raises
    ------
    UnsupportedProxCombination
        If none of the above applies.
    """
    v = np.asarray(v, dtype=float)
    if s <= 0:
        raise ValueError("prox modulus must be positive")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    h_off = hhat.is_zero or eps == 0
    if fhat.is_zero and h_off:
        return v.copy()
    if h_off:
        return fhat.prox(s, v)
    if fhat.is_zero:
        return hhat.prox(s * eps, v)
    if joint is not None:
        return np.asarray(joint(s, eps, v), dtype=float)
    if fhat.separable and hhat.separable:
        return _pair_prox(fhat, 1.0, hhat, eps, s, v)
    raise UnsupportedProxCombination(
        "fhat and hhat are both nonzero and no joint prox was registered"
    )
