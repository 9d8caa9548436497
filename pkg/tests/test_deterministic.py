import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from reactodiff.deterministic import (
    ForcingPath,
    Problem,
    TimeGrid,
    Trajectory,
    gronwall_bound,
    growth_envelope,
    mild_solve,
    mild_solve_k,
    picard_solve_regularized,
    verify_estimates,
)
from reactodiff.discretization import (
    BoundaryCondition,
    CoefficientSet,
    PolyForm,
    PolyTerm,
    build_grid,
    norm_H,
)
from reactodiff.errors import GridMismatch, IndexBelowShift, InvalidField
from reactodiff.evolution import PropagatorScheme, propagate
from reactodiff.yosida import ReactionPolynomial

LAP = CoefficientSet.laplacian(1)


def problem(reaction, n=32, bc="dirichlet", coeffs=LAP, L=math.pi, T=1.0):
    return Problem.build(coeffs, build_grid(0.0, L, n), BoundaryCondition(bc), reaction, 0.0, T)


CHAFEE = ReactionPolynomial.from_constants((0, 1, 0, 1))
CUBIC = ReactionPolynomial.from_constants((0, 0, 0, 1))
ZERO = ReactionPolynomial.zero()


# -- time grid and gronwall -----------------------------------------------------

def test_time_grid():
    tg = TimeGrid(0.0, 1.0, 4)
    np.testing.assert_array_equal(tg.nodes, [0, 0.25, 0.5, 0.75, 1.0])
    assert TimeGrid.from_dt(0.0, 1.0, 1e-3).n_steps == 1000
    assert tg.coarsen(2).n_steps == 2
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 3)
    with pytest.raises(ValueError):
        tg.coarsen(3)


def test_gronwall_examples():
    tg = TimeGrid(0.0, 2.0, 200)
    t = tg.nodes
    np.testing.assert_allclose(gronwall_bound(0.0, 0.0, np.ones(t.size), tg), t, rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(gronwall_bound(1.0, 2.0, np.zeros(t.size), tg), 2 * np.exp(t), rtol=1e-13)
    err = np.max(np.abs(gronwall_bound(-1.0, 0.0, np.ones(t.size), tg) - (1 - np.exp(-t))))
    assert err <= tg.dt ** 2
    # left endpoint is first order
    err_left = np.max(np.abs(gronwall_bound(-1.0, 0.0, np.ones(t.size), tg, "left") - (1 - np.exp(-t))))
    assert tg.dt / 10 <= err_left <= tg.dt
    with pytest.raises(GridMismatch):
        gronwall_bound(0.0, 0.0, np.ones(3), tg)


@given(b=st.floats(-3, 3), g0=st.floats(0, 10), dg0=st.floats(0, 5),
       g=arrays(np.float64, 21, elements=st.floats(0, 10)), dg=arrays(np.float64, 21, elements=st.floats(0, 5)),
       rule=st.sampled_from(["trapezoid", "left"]))
def test_gronwall_monotone(b, g0, dg0, g, dg, rule):
    tg = TimeGrid(0.0, 1.0, 20)
    base = gronwall_bound(b, g0, g, tg, rule)
    assert np.all(gronwall_bound(b, g0 + dg0, g, tg, rule) >= base - 1e-12 * np.abs(base))
    assert np.all(gronwall_bound(b, g0, g + dg, tg, rule) >= base - 1e-12 * np.abs(base))


# -- Picard solvers ---------------------------------------------------------------

def test_picard_zero_reaction_is_propagation(rng):
    p = problem(ZERO)
    tg = TimeGrid(0.0, 0.5, 50)
    x = rng.normal(size=32)
    y = picard_solve_regularized(p, 4.0, 100.0, x, None, tg)
    ref = propagate(p.family, PropagatorScheme("yosida_product", tg.dt, 100.0), 0.0, 0.5, x).values
    np.testing.assert_allclose(y.values[-1], ref, atol=1e-12)
    assert np.array_equal(y.values[0], x)
    y2 = mild_solve_k(p, 4.0, x, None, tg)
    ref2 = propagate(p.family, PropagatorScheme("implicit_euler", tg.dt), 0.0, 0.5, x).values
    np.testing.assert_allclose(y2.values[-1], ref2, atol=1e-12)


def test_picard_affine_scalar_oracle():
    """One node on (0, 1): A = -8. b(s) = -2s gives F_k(y) = -2k/(k+2) y, A_n = -8n/(n+8)."""
    p = problem(ReactionPolynomial.from_constants((0.0, 2.0)), n=1, L=1.0)
    k, n = 10.0, 50.0
    rate = -8 * n / (n + 8) - 2 * k / (k + 2)
    errs = []
    for steps in (100, 200, 400):
        tg = TimeGrid(0.0, 1.0, steps)
        y = picard_solve_regularized(p, k, n, np.array([1.0]), None, tg)
        errs.append(np.max(np.abs(y.values[:, 0] - np.exp(rate * tg.nodes))))
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert all(0.9 <= q <= 1.1 for q in orders), orders


def test_cubic_sup_norm_nonincreasing():
    p = problem(CUBIC)
    tg = TimeGrid(0.0, 1.0, 200)
    y = picard_solve_regularized(p, 8.0, 1e3, np.full(32, 2.0), None, tg)
    sup = y.norms("E")
    assert np.all(np.diff(sup) <= 1e-12)


def test_zero_data_zero_trajectory():
    p = problem(CHAFEE)
    tg = TimeGrid(0.0, 1.0, 100)
    assert not np.any(mild_solve_k(p, 4.0, np.zeros(32), None, tg).values)


def test_n_cascade_approaches_mild_solve_k():
    p = problem(CHAFEE, n=16)
    tg = TimeGrid(0.0, 0.5, 2000)
    x = 0.8 * np.sin(p.grid.nodes[:, 0])
    ref = mild_solve_k(p, 4.0, x, None, tg)
    d = [picard_solve_regularized(p, 4.0, n, x, None, tg).sup_distance(ref, "E") for n in (1e2, 1e3, 1e4)]
    assert d[0] > d[1] > d[2]


def test_index_below_shift():
    p = problem(CHAFEE)
    with pytest.raises(IndexBelowShift):
        mild_solve_k(p, 1.0, np.zeros(32), None, TimeGrid(0.0, 1.0, 10))


def test_invalid_data():
    p = problem(CHAFEE)
    tg = TimeGrid(0.0, 1.0, 10)
    with pytest.raises(InvalidField):
        mild_solve(p, np.full(32, np.nan), None, tg)
    with pytest.raises(GridMismatch):
        mild_solve(p, np.zeros(32), ForcingPath.zeros(TimeGrid(0.0, 1.0, 5), p.grid), tg)


def test_time_splitting_consistency():
    p = problem(CHAFEE, n=16)
    x = 0.5 * np.sin(p.grid.nodes[:, 0])
    whole = mild_solve_k(p, 8.0, x, None, TimeGrid(0.0, 1.0, 200))
    first = mild_solve_k(p, 8.0, x, None, TimeGrid(0.0, 0.5, 100))
    second = mild_solve_k(p, 8.0, first.values[-1], None, TimeGrid(0.5, 1.0, 100))
    np.testing.assert_allclose(second.values[-1], whole.values[-1], atol=1e-10)


# -- mild_solve ---------------------------------------------------------------------

def test_zero_reaction_modes_agree(rng):
    p = problem(ZERO)
    tg = TimeGrid(0.0, 1.0, 100)
    x = rng.normal(size=32)
    a = mild_solve(p, x, None, tg, mode="yosida_cascade", cross_check=True)
    b = mild_solve(p, x, None, tg, mode="semi_implicit")
    assert np.max(np.abs(a.values - b.values)) <= 1e-10
    assert a.meta["mode_gap"] <= 1e-10


def test_scalar_cubic_ode():
    """One Neumann node: A = 0, y' = -y^3, y(0) = 1, so y = (1 + 2t)^(-1/2) and max|y''| = 3."""
    p = problem(CUBIC, n=1, bc="neumann", L=1.0)
    for steps in (100, 1000):
        tg = TimeGrid(0.0, 1.0, steps)
        y = mild_solve(p, np.array([1.0]), None, tg, tol=1e-4)
        err = np.max(np.abs(y.values[:, 0] - (1 + 2 * tg.nodes) ** -0.5))
        assert err <= 2 * tg.dt * 3


def test_chafee_infante_stiE_envelope():
    p = problem(CHAFEE)
    tg = TimeGrid(0.0, 1.0, 400)
    x = 0.5 * np.sin(p.grid.nodes[:, 0])
    y = mild_solve(p, x, None, tg)
    env = growth_envelope(p, x, None, tg, "E")
    assert np.all(y.norms("E") <= env * (1 + 1e-8))
    assert p.zeta == 1.0


def test_two_modes_agree_time_dependent():
    c1 = PolyForm((PolyTerm((1.0, 1.0)),))
    c3 = PolyForm((PolyTerm((1.0,), ((1.0, 0.2),)),))
    a11 = CoefficientSet(((PolyForm((PolyTerm((1.0, 0.5)),)),),), (PolyForm(),), PolyForm())
    p = problem(ReactionPolynomial((PolyForm(), c1, PolyForm(), c3)), n=24, coeffs=a11)
    tg = TimeGrid(0.0, 1.0, 400)
    y = mild_solve(p, np.sin(p.grid.nodes[:, 0]), None, tg, tol=1e-3)
    assert y.meta["mode_gap"] <= 10 * (1e-3 + tg.dt)


def test_batched_columns_match_single_solves(rng):
    p = problem(CHAFEE, n=16)
    tg = TimeGrid(0.0, 0.5, 100)
    X = rng.normal(scale=0.7, size=(16, 3))
    batch = mild_solve(p, X, None, tg, cross_check=False)
    for j in range(3):
        single = mild_solve(p, X[:, j], None, tg, cross_check=False)
        np.testing.assert_allclose(batch.values[..., j], single.values, atol=1e-13)


# -- estimates ----------------------------------------------------------------------

def test_envelope_constant_when_zeta_zero():
    p = problem(CUBIC)
    tg = TimeGrid(0.0, 1.0, 100)
    x = np.sin(p.grid.nodes[:, 0])
    x /= norm_H(x, p.grid)
    y = mild_solve(p, x, None, tg)
    rep = verify_estimates([], p, extra=(y,))
    stiX = rep.table("stiX")[0]
    np.testing.assert_allclose(stiX.envelope, 1.0, rtol=1e-14)
    assert rep.passed


def test_lipschitz_envelope_value():
    p = problem(CHAFEE)
    tg = TimeGrid(0.0, 1.0, 200)
    xi = p.grid.nodes[:, 0]
    x = 0.5 * np.sin(xi)
    d = np.sin(2 * xi)
    z = x + 0.1 * d / norm_H(d, p.grid)
    rep = verify_estimates([(mild_solve(p, x, None, tg), mild_solve(p, z, None, tg))], p)
    lipX = rep.table("lipX")[0]
    assert lipX.envelope[-1] == pytest.approx(0.1 * math.e, rel=1e-12)
    assert rep.passed
    text = rep.to_csv(["lipX"])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["t", "lhs", "envelope", "margin", "pass"]
    assert len(rows) == tg.n_steps + 2
    assert float(rows[-1][2]) == lipX.envelope[-1]


def test_envelope_monotone_in_forcing(rng):
    p = problem(CHAFEE, n=16)
    tg = TimeGrid(0.0, 1.0, 50)
    f = rng.normal(size=(51, 16))
    x = np.zeros(16)
    small = growth_envelope(p, x, 0.5 * f, tg, "H")
    large = growth_envelope(p, x, f, tg, "H")
    assert np.all(large >= small)


def test_verify_estimates_grid_mismatch():
    p = problem(CHAFEE, n=16)
    a = Trajectory(TimeGrid(0.0, 1.0, 4), p.grid, np.zeros((5, 16)))
    b = Trajectory(TimeGrid(0.0, 1.0, 5), p.grid, np.zeros((6, 16)))
    with pytest.raises(GridMismatch):
        verify_estimates([(a, b)], p)


@settings(max_examples=10)
@given(seed=st.integers(0, 10_000), amp=st.floats(0.1, 1.0))
def test_envelopes_hold_for_random_data(seed, amp):
    p = problem(CHAFEE, n=12)
    tg = TimeGrid(0.0, 0.5, 100)
    r = np.random.default_rng(seed)
    x = amp * r.normal(size=12)
    z = x + 0.1 * r.normal(size=12)
    pair = [mild_solve(p, v, None, tg, tol=1e-3, cross_check=False) for v in (x, z)]
    rep = verify_estimates([tuple(pair)], p)
    assert rep.passed, rep.summary()
