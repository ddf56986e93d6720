import numpy as np
import pytest

from tikhonov_bilevel import prox
from tikhonov_bilevel.core import (
    BilevelProblem,
    CompositeObjective,
    Oracle,
    SmoothTerm,
    zero_smooth,
)
from tikhonov_bilevel.problems import (
    NemirovskySpec,
    make_min_norm_toy,
    make_nemirovsky,
    min_norm_problem,
)


def quad(center=0.0, L=1.0):
    """1/2 L ||x - center||^2 as a smooth term."""

    def ev(x):
        d = np.asarray(x, float) - center
        return 0.5 * L * float(d @ d)

    def gr(x):
        return L * (np.asarray(x, float) - center)

    return SmoothTerm(ev, gr, L, kind="quadratic")


def scalar_problem(oracle=True):
    """f = 1/2 x^2, h = 1/2 (x - 1)^2 in one dimension; argmin F = {0}."""
    o = Oracle(x_star=np.zeros(1), min_inner=0.0, min_outer_on_argmin=0.5) if oracle else None
    return BilevelProblem(
        CompositeObjective(quad(0.0)), CompositeObjective(quad(1.0)), 1, o, name="scalar"
    )


def flat_problem(d=3):
    """f = h = 0 everywhere."""
    zs = zero_smooth()
    return BilevelProblem(CompositeObjective(zs), CompositeObjective(zs), d, name="flat")


@pytest.fixture(scope="session")
def toy():
    return make_min_norm_toy()


@pytest.fixture(scope="session")
def tiny_toy():
    # F = 1/2 x_1^2, H = 1/2 ||x||^2, x* = (0, 0)
    return min_norm_problem([[1.0, 0.0]], [0.0])


@pytest.fixture(scope="session")
def nem():
    return make_nemirovsky(NemirovskySpec())


@pytest.fixture(scope="session")
def small_l1_problem():
    """Min-norm inner with an l1 outer term (exercises the prox path)."""
    base = make_min_norm_toy(m=5, d=12, seed=3)
    return BilevelProblem(
        base.inner,
        CompositeObjective(zero_smooth(), prox.l1(0.5)),
        base.dimension,
        None,
        name="toy_l1",
    )


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
