import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tikhonov_bilevel.algorithms import (
    Method,
    SolverConfig,
    SolverState,
    effective_schedule,
    fbipg_as_bfpg,
    initial_state,
    momentum,
    run,
    stabim_theta,
    step_bfpg,
    step_bisg2,
    step_bpg,
    step_fbipg,
    step_stabim,
)
from tikhonov_bilevel.core import BilevelProblem, CompositeObjective, Schedule
from tikhonov_bilevel.errors import ValidationError

from conftest import flat_problem, quad, scalar_problem
from oracles import fbipg_transcription, fista_k_gamma


def cfg(method, step=None, c=1.0, delta=1.0, beta=1.0, n=10, **kw):
    return SolverConfig(Method.parse(method), Schedule(c, delta, beta), n, step=step, **kw)


class TestBPG:
    def test_fixed_point(self):
        p = flat_problem()
        x = np.array([1.0, 2.0, 3.0])
        st_ = step_bpg(p, cfg("BPG", step=0.5), SolverState(0, x))
        np.testing.assert_array_equal(st_.x_curr, x)

    def test_hand_step(self):
        p = scalar_problem()
        st_ = step_bpg(p, cfg("BPG", step=1.0), SolverState(0, np.array([1.0])))
        assert st_.x_curr[0] == 0.0

    def test_zero_eps_is_gradient_descent(self):
        p = scalar_problem()
        c = SolverConfig(Method.BPG, Schedule.off(), 1, step=0.5)
        assert step_bpg(p, c, SolverState(0, np.array([1.0]))).x_curr[0] == 0.5

    def test_step_bound(self, toy):
        with pytest.raises(ValidationError, match="2/L_f"):
            cfg("BPG", step=2.0 / toy.L_f).resolved(toy)

    def test_default_step(self, toy):
        assert cfg("BPG").resolved(toy).step == pytest.approx(0.95 * 2.0 / toy.L_f)

    def test_min_norm_convergence(self, toy):
        c = SolverConfig(Method.BPG, Schedule(0.1, 0.9), 10**4)
        tr = run(toy, c, np.zeros(toy.dimension), storage="none", energy=False)
        assert tr.dist[-1] < 1e-3


class TestBFPG:
    def test_first_momentum(self):
        c = cfg("BFPG", step=0.5, gamma=0.0, alpha=4.0)
        assert momentum(c, 1) == -1.0
        x = np.array([2.0])
        st_ = step_bfpg(scalar_problem(), c, initial_state(c, x))
        np.testing.assert_array_equal(st_.y, x)

    def test_momentum_value(self):
        assert momentum(cfg("BFPG", gamma=20.0, alpha=4.0), 19) == pytest.approx(0.9)

    def test_zero_eps_is_fista(self):
        A = np.array([[2.0, 0.3], [0.3, 0.5]])
        inner = CompositeObjective(
            quad().__class__(lambda x: 0.5 * x @ A @ x, lambda x: A @ x, float(np.linalg.eigvalsh(A)[-1]))
        )
        p = BilevelProblem(inner, CompositeObjective(quad()), 2)
        L = p.L_f
        c = SolverConfig(Method.BFPG, Schedule.off(), 100, step=0.95 / L, alpha=4.0, gamma=2.0)
        tr = run(p, c, np.array([1.0, -1.0]), storage="full", energy=False)
        ref = fista_k_gamma(lambda x: A @ x, L, [1.0, -1.0], 4.0, 2.0, 100)
        np.testing.assert_allclose(tr.iterates, ref, atol=1e-12, rtol=0)

    def test_alpha_bound(self, toy):
        with pytest.raises(ValidationError, match="alpha"):
            cfg("BFPG", alpha=3.0).resolved(toy)

    def test_trace_rows(self, toy):
        tr = run(toy, cfg("BFPG", n=10), np.ones(toy.dimension))
        np.testing.assert_array_equal(tr.k, np.arange(11))
        assert tr.F_res[1] == tr.F_res[0]


class TestFBiPG:
    def test_rewriting(self):
        c = cfg("FBiPG", alpha=4.0, c=7.0, beta=11.0, delta=1.3)
        b = fbipg_as_bfpg(c)
        assert b.method == Method.BFPG and b.gamma == 3.0
        assert (b.schedule.c, b.schedule.beta, b.schedule.delta) == (1.0, 3.0, 1.3)

    @pytest.mark.parametrize("k", [1, 2, 5, 50, 1000])
    def test_momentum_substitution(self, k):
        a = 4.5
        b = fbipg_as_bfpg(cfg("FBiPG", alpha=a))
        assert momentum(b, k) == pytest.approx(1 - a / (k + a), rel=1e-15)

    def test_step_delegates(self, toy):
        c = cfg("FBiPG", step=0.5, alpha=4.0)
        s0 = initial_state(c, np.ones(toy.dimension))
        a = step_fbipg(toy, c, s0)
        b = step_bfpg(toy, fbipg_as_bfpg(c), s0)
        np.testing.assert_array_equal(a.x_curr, b.x_curr)

    def test_matches_transcription(self, toy):
        A, b = toy.meta["A"], toy.meta["b"]
        s = 0.9 / toy.L_f
        c = SolverConfig(Method.FBiPG, Schedule(1.0, 1.5), 50, step=s, alpha=4.0)
        tr = run(toy, c, np.zeros(toy.dimension), storage="full", energy=False)
        ref = fbipg_transcription(A, b, np.zeros(toy.dimension), 4.0, 1.5, s, 50)
        np.testing.assert_allclose(tr.iterates, ref, atol=1e-12, rtol=0)

    def test_equals_bfpg_trace(self, toy):
        c = cfg("FBiPG", step=0.5, alpha=4.0, n=200, delta=1.5)
        a = run(toy, c, np.ones(toy.dimension))
        b = run(toy, fbipg_as_bfpg(c), np.ones(toy.dimension))
        np.testing.assert_array_equal(a.F_res, b.F_res)


class TestStaBiM:
    def test_eta_and_theta(self):
        p = scalar_problem()  # L_f = L_h = 1
        c = cfg("StaBiM")
        st_ = step_stabim(p, c, initial_state(c, np.array([1.0])))
        assert st_.stabim_eta == 0.75
        assert st_.theta_k == pytest.approx(0.95 / 1.75)

    def test_theta_limit(self):
        p = scalar_problem()
        c = cfg("StaBiM")
        st_ = initial_state(c, np.array([1.0]))
        while st_.stabim_eta >= 0.01 * p.L_f / p.L_h:
            st_ = step_stabim(p, c, st_)
        assert st_.theta_k == pytest.approx(0.95 / p.L_f, rel=0.01)

    def test_shrink_bounds(self, toy):
        with pytest.raises(ValidationError):
            cfg("StaBiM", stabim_eta_shrink=0.5).resolved(toy)


class TestBiSG2:
    def test_smooth_reduces_to_two_gradient_steps(self, toy):
        c = cfg("BiSG2", step=0.5, c=1.0, delta=0.75)
        x = np.random.default_rng(0).standard_normal(toy.dimension)
        st_ = step_bisg2(toy, c, SolverState(3, x))
        eps = 1.0 / 4**0.75
        y = x - 0.5 * toy.inner.smooth.grad(x)
        np.testing.assert_allclose(st_.x_curr, y - 0.5 * eps * toy.outer.smooth.grad(y), atol=1e-15)

    def test_hand_step(self):
        c = cfg("BiSG2", step=1.0, c=1.0, delta=1.0, beta=5.0)
        st_ = step_bisg2(scalar_problem(), c, SolverState(0, np.array([2.0])))
        assert st_.y[0] == 0.0 and st_.x_curr[0] == 1.0

    def test_beta_fixed(self):
        assert effective_schedule(cfg("BiSG2", c=0.5, beta=9.0)).discrete(0) == 0.5

    @pytest.mark.parametrize("kw,match", [
        (dict(delta=0.4), "delta"),
        (dict(delta=1.2), "delta"),
        (dict(c=2.0, delta=0.8), "c <="),
    ])
    def test_validation(self, toy, kw, match):
        with pytest.raises(ValidationError, match=match):
            cfg("BiSG2", **kw).resolved(toy)

    def test_exact_max_step_allowed(self, toy):
        c = cfg("BiSG2", delta=0.8, step_fraction=1.0).resolved(toy)
        assert c.step == pytest.approx(1.0 / toy.L_f)


class TestRun:
    def test_max_iter_zero(self, toy):
        for m in Method:
            c = cfg(m.value, n=0, delta=0.8)
            tr = run(toy, c, np.zeros(toy.dimension))
            assert len(tr) == 1 and tr.k[0] == 0

    def test_bad_x0(self, toy):
        with pytest.raises(ValidationError, match="x0"):
            run(toy, cfg("BPG"), np.zeros(3))

    def test_prox_path(self, small_l1_problem):
        tr = run(small_l1_problem, cfg("BFPG", n=300, delta=1.5), np.ones(small_l1_problem.dimension))
        assert tr.error is None
        assert np.all(np.isnan(tr.F_res))
        assert tr.F[-1] < 1e-3 * tr.F[0]

    def test_observer(self, toy):
        seen = []
        run(toy, cfg("BPG", n=5), np.zeros(toy.dimension), observer=lambda k, s: seen.append(k))
        assert seen == list(range(6))

    def test_record_every(self, toy):
        tr = run(toy, cfg("BPG", n=20), np.zeros(toy.dimension), record_every=5)
        np.testing.assert_array_equal(tr.k, [0, 5, 10, 15, 20])

    def test_snapshot_round_trip(self):
        c = cfg("BFPG", step=0.3, alpha=5.0, gamma=2.0)
        snap = c.snapshot()
        assert snap["method"] == "BFPG" and snap["schedule"]["c"] == 1.0

    @settings(max_examples=20, deadline=None)
    @given(
        method=st.sampled_from(["BPG", "BFPG", "FBiPG", "StaBiM"]),
        seed=st.integers(0, 1000),
    )
    def test_deterministic(self, toy, method, seed):
        x0 = np.random.default_rng(seed).standard_normal(toy.dimension)
        c = cfg(method, n=30, delta=0.8)
        a = run(toy, c, x0, storage="full")
        b = run(toy, c, x0, storage="full")
        np.testing.assert_array_equal(a.iterates, b.iterates)

    @settings(max_examples=15, deadline=None)
    @given(
        delta=st.floats(1.05, 1.95),
        c=st.floats(0.01, 1.0),
    )
    def test_bfpg_inner_residual_decreases_overall(self, toy, delta, c):
        conf = SolverConfig(Method.BFPG, Schedule(c, delta), 500, alpha=4.0, gamma=1.0)
        tr = run(toy, conf, np.zeros(toy.dimension), storage="none", energy=False)
        assert tr.F_res[-1] < 1e-2 * tr.F_res[0]
