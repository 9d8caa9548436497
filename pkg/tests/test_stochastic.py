import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reactodiff.deterministic import Problem, TimeGrid, mild_solve
from reactodiff.discretization import BoundaryCondition, CoefficientSet, build_grid, norm_H
from reactodiff.errors import AlphaOutOfRange, GridMismatch, RegularityPreconditionFailed, SequenceNotCauchy
from reactodiff.stochastic import (
    NoiseModel,
    PathEnsemble,
    chs_estimate,
    convolve_direct,
    convolve_factorized,
    generalized_solve,
    path_seed,
    pathwise_estimates,
    relative_sup_error,
    sample_wiener,
    spde_solve,
    transition_estimate,
)
from reactodiff.yosida import ReactionPolynomial

LAP = CoefficientSet.laplacian(1)
CHAFEE = ReactionPolynomial.from_constants((0, 1, 0, 1))


def problem(n=32, reaction=None):
    return Problem.build(LAP, build_grid(0.0, math.pi, n), BoundaryCondition("dirichlet"),
                         reaction or ReactionPolynomial.zero(), 0.0, 1.0)


def dirichlet_eigs(n, K):
    h = math.pi / (n + 1)
    k = np.arange(1, K + 1)
    return 4 / h ** 2 * np.sin(k * h / 2) ** 2


# -- noise and seeds ------------------------------------------------------------------

def test_increments_reproducible_and_scaled():
    model = NoiseModel(build_grid(0.0, math.pi, 32), K=8)
    tg = TimeGrid(0.0, 1.0, 4000)
    a = sample_wiener(model, tg, 11)
    b = sample_wiener(model, tg, 11)
    assert np.array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, sample_wiener(model, tg, 12).increments)
    inc = a.increments
    n = inc.size
    # mean within 5 standard errors, variance within 5 standard errors of dt
    assert abs(inc.mean()) <= 5 * math.sqrt(tg.dt / n)
    assert abs(inc.var() - tg.dt) <= 5 * tg.dt * math.sqrt(2 / n)


def test_coarsened_path_sums_increments():
    model = NoiseModel(build_grid(0.0, math.pi, 16), K=4)
    w = sample_wiener(model, TimeGrid(0.0, 1.0, 8), 3)
    c = w.coarsen(4)
    assert c.time_grid.n_steps == 2
    np.testing.assert_allclose(c.increments[0], w.increments[:4].sum(axis=0))


def test_path_seeds_do_not_depend_on_chunking():
    model = NoiseModel(build_grid(0.0, math.pi, 16), K=4)
    tg = TimeGrid(0.0, 1.0, 10)
    seeds = [path_seed(5, i) for i in range(20)]
    assert len(set(seeds)) == 20
    a = PathEnsemble(5, 20, chunk=7)
    b = PathEnsemble(5, 20, chunk=64, threads=4)
    assert [len(c) for c in a.chunks()] == [7, 7, 6]
    np.testing.assert_array_equal(a.increments(model, tg, range(20)), b.increments(model, tg, range(20)))
    np.testing.assert_array_equal(a.increments(model, tg, [13])[..., 0], sample_wiener(model, tg, seeds[13]).increments)


def test_default_basis_is_sine_modes():
    grid = build_grid(0.0, math.pi, 63)
    model = NoiseModel(grid, K=5)
    xi = grid.nodes[:, 0]
    for k in range(5):
        ref = math.sqrt(2 / math.pi) * np.sin((k + 1) * xi)
        col = model.basis[:, k]
        assert abs(abs(col @ ref) * grid.cell_volume - 1) < 1e-12
    np.testing.assert_allclose(model.eigenvalues, -dirichlet_eigs(63, 5), rtol=1e-12)


@pytest.mark.parametrize("alpha", [0.0, 0.5, 0.7, -0.1])
def test_alpha_out_of_range(alpha):
    with pytest.raises(AlphaOutOfRange):
        NoiseModel(build_grid(0.0, 1.0, 8), K=2, alpha=alpha)


@given(st.floats(1e-6, 0.5 - 1e-6))
def test_alpha_in_range_accepted(alpha):
    assert NoiseModel(build_grid(0.0, 1.0, 8), K=2, alpha=alpha).alpha == alpha


def test_gamma_weights():
    model = NoiseModel(build_grid(0.0, math.pi, 31), K=4, gamma=0.5)
    np.testing.assert_allclose(model.b(0.0), dirichlet_eigs(31, 4) ** -0.5, rtol=1e-12)


# -- convolutions ------------------------------------------------------------------------

def test_ito_isometry_direct():
    """E|Z(T)|_H^2 = sum_k dt sum_{m=1}^{n} (1 + dt lam_k)^(-2m) for implicit Euler on eigenmodes."""
    N, K, n = 16, 4, 20
    p = problem(N)
    model = NoiseModel(p.grid, K=K)
    tg = TimeGrid(0.0, 0.2, n)
    ens = PathEnsemble(1, 4000, chunk=4000)
    Z = convolve_direct(p, model, ens.increments(model, tg, range(4000)), tg, final_only=True)
    sq = norm_H(Z, p.grid) ** 2
    lam = dirichlet_eigs(N, K)
    m = np.arange(1, n + 1)
    exact = float(np.sum(tg.dt * np.sum((1 + tg.dt * lam[:, None]) ** (-2.0 * m), axis=1)))
    assert abs(sq.mean() - exact) <= 4 * sq.std() / math.sqrt(sq.size)


def test_factorized_matches_deterministic_integral():
    """With dW_1 = dt on mode 1 only, Z(t) = (1 - exp(-lam t)) / lam e_1 in the limit."""
    p = problem(32)
    model = NoiseModel(p.grid, K=2, alpha=0.2)
    lam = dirichlet_eigs(32, 1)[0]
    errs = []
    for n in (64, 256):
        tg = TimeGrid(0.0, 1.0, n)
        dW = np.zeros((n, 2))
        dW[:, 0] = tg.dt
        Z = convolve_factorized(p, model, dW, tg)
        amp = Z.values @ model.basis[:, 0] * p.grid.cell_volume
        errs.append(np.max(np.abs(amp - (1 - np.exp(-lam * tg.nodes)) / lam)))
    assert errs[1] < errs[0] < 0.02


def test_direct_and_factorized_agree():
    p = problem(32)
    model = NoiseModel(p.grid, K=16, alpha=0.2)
    w = sample_wiener(model, TimeGrid(0.0, 1.0, 512), 4)
    err = relative_sup_error(convolve_direct(p, model, w), convolve_factorized(p, model, w))
    assert err < 0.2


def test_convolution_grid_checks():
    p = problem(16)
    model = NoiseModel(p.grid, K=4)
    with pytest.raises(GridMismatch):
        convolve_direct(p, model, np.zeros((5, 4)), TimeGrid(0.0, 1.0, 6))
    with pytest.raises(GridMismatch):
        convolve_direct(problem(17), model, np.zeros((5, 4)), TimeGrid(0.0, 1.0, 5))


def test_zero_noise_gives_zero_convolution():
    p = problem(16)
    model = NoiseModel(p.grid, K=4, weights=np.zeros(4))
    w = sample_wiener(model, TimeGrid(0.0, 1.0, 16), 0)
    assert not np.any(convolve_direct(p, model, w).values)
    assert not np.any(convolve_factorized(p, model, w).values)


# -- regularity -----------------------------------------------------------------------------

@pytest.mark.parametrize("alpha,diverging", [(0.15, False), (0.2, False), (0.3, True), (0.35, True)])
def test_chs_threshold_white_noise(alpha, diverging):
    p = problem(256)
    res = chs_estimate(p, NoiseModel(p.grid, K=32, alpha=alpha), 0.0, 1.0)
    assert res.diverging is diverging
    assert res.value > 0


def test_chs_smoothed_noise_converges():
    p = problem(256)
    res = chs_estimate(p, NoiseModel(p.grid, K=32, alpha=0.35, gamma=0.5), 0.0, 1.0)
    assert not res.diverging


def test_spde_rejects_rough_noise():
    p = problem(16, CHAFEE)
    model = NoiseModel(p.grid, K=8, alpha=0.35)
    tg = TimeGrid(0.0, 1.0, 32)
    with pytest.raises(RegularityPreconditionFailed):
        spde_solve(p, model, np.zeros(16), tg, sample_wiener(model, tg, 0))


# -- pathwise SPDE --------------------------------------------------------------------------

def test_spde_zero_noise_is_deterministic():
    p = problem(16, CHAFEE)
    model = NoiseModel(p.grid, K=4, weights=np.zeros(4))
    tg = TimeGrid(0.0, 1.0, 100)
    x = 0.5 * np.sin(p.grid.nodes[:, 0])
    X = spde_solve(p, model, x, tg, sample_wiener(model, tg, 0))
    np.testing.assert_allclose(X.values, mild_solve(p, x, None, tg, tol=1e-3).values, atol=1e-12)


def test_spde_pathwise_envelopes():
    p = problem(16, CHAFEE)
    model = NoiseModel(p.grid, K=8)
    tg = TimeGrid(0.0, 1.0, 256)
    xi = p.grid.nodes[:, 0]
    w = sample_wiener(model, tg, 9)
    Z = convolve_direct(p, model, w)
    X = spde_solve(p, model, 0.5 * np.sin(xi), tg, w, Z=Z)
    Xz = spde_solve(p, model, 0.25 * np.sin(xi), tg, w, Z=Z)
    rep = pathwise_estimates(p, X, Xz, Z)
    assert {t.name for t in rep.tables} == {"stindXX", "stindEX", "lipXX", "lipEX"}
    assert rep.passed, rep.summary()


def test_generalized_solve_certificates():
    p = problem(16, CHAFEE)
    model = NoiseModel(p.grid, K=8)
    tg = TimeGrid(0.0, 0.5, 64)
    xi = p.grid.nodes[:, 0]
    x = np.where(xi < math.pi / 2, 0.5, 0.0)
    seq = [x + 2.0 ** -j * np.sin(3 * xi) for j in range(1, 5)]
    out = generalized_solve(p, model, x, seq, tg, sample_wiener(model, tg, 2))
    certs = out.meta["certificates"]
    assert len(certs) == 3 and all(c["pass"] for c in certs)
    assert certs[-1]["distance"] < certs[0]["distance"]
    with pytest.raises(SequenceNotCauchy):
        generalized_solve(p, model, x, seq[::-1], tg, sample_wiener(model, tg, 2))
    with pytest.raises(SequenceNotCauchy):
        generalized_solve(p, model, x, [], tg, sample_wiener(model, tg, 2))


# -- transition estimates ----------------------------------------------------------------------

def test_transition_of_one_is_one_and_thread_invariant():
    p = problem(16, CHAFEE)
    model = NoiseModel(p.grid, K=8)
    tg = TimeGrid(0.0, 0.5, 64)
    x = 0.5 * np.sin(p.grid.nodes[:, 0])
    one = transition_estimate(p, model, x, "one", tg, PathEnsemble(3, 12, chunk=5))
    assert one.estimate == 1.0 and one.std_error == 0.0
    assert one.moments["finite"]
    a = transition_estimate(p, model, x, {"kind": "mode", "j": 1}, tg, PathEnsemble(3, 12, chunk=5))
    b = transition_estimate(p, model, x, {"kind": "mode", "j": 1}, tg, PathEnsemble(3, 12, chunk=5, threads=3))
    assert a.estimate == b.estimate and a.std_error == b.std_error


@settings(max_examples=10)
@given(st.integers(0, 2 ** 32 - 1))
def test_bounded_functional_stays_bounded(seed):
    p = problem(12, CHAFEE)
    model = NoiseModel(p.grid, K=6)
    tg = TimeGrid(0.0, 0.25, 32)
    est = transition_estimate(p, model, np.zeros(12), {"kind": "bounded_mode", "j": 1}, tg,
                              PathEnsemble(seed, 4), moments=())
    assert abs(est.estimate) <= 1.0
