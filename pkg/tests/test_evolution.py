import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, strategies as st

from reactodiff.discretization import (
    BoundaryCondition,
    CoefficientSet,
    OperatorFamily,
    PolyForm,
    PolyTerm,
    build_grid,
    laplacian_eigenpairs,
    norm_H,
)
from reactodiff.errors import DegenerateKernel, NegativeInterval
from reactodiff.evolution import (
    EvolutionKernel,
    PropagatorScheme,
    contraction_audit,
    evolution_matrix,
    kernel_bound_fit,
    propagate,
    time_nodes,
)

IE = "implicit_euler"


def family(n=32, bc="dirichlet", coeffs=None, L=math.pi, dim=1):
    g = build_grid(0.0, L, n, dimension=dim)
    return OperatorFamily(coeffs or CoefficientSet.laplacian(dim), g, BoundaryCondition(bc))


def a11(*poly_t, xi=None):
    term = PolyTerm(tuple(poly_t), () if xi is None else (tuple(xi),))
    return CoefficientSet(((PolyForm((term,)),),), (PolyForm(),), PolyForm())


def dirichlet_heat_kernel(x, y, tau, L=math.pi, images=20):
    """Continuum Dirichlet heat kernel on (0, L) by the method of images."""
    out = np.zeros(np.broadcast(x, y).shape)
    for m in range(-images, images + 1):
        out += np.exp(-(x - y + 2 * m * L) ** 2 / (4 * tau)) - np.exp(-(x + y + 2 * m * L) ** 2 / (4 * tau))
    return out / math.sqrt(4 * math.pi * tau)


def test_time_nodes_partial_last_step():
    np.testing.assert_allclose(time_nodes(0.0, 1.0, 0.3), [0, 0.3, 0.6, 0.9, 1.0])
    assert time_nodes(0.0, 1.0, 0.25)[-1] == 1.0
    with pytest.raises(NegativeInterval):
        time_nodes(1.0, 0.0, 0.1)


def test_scheme_validation():
    with pytest.raises(ValueError):
        PropagatorScheme("rk4", 0.1)
    with pytest.raises(ValueError):
        PropagatorScheme(IE, 0.0)
    with pytest.raises(ValueError):
        PropagatorScheme("yosida_product", 0.1)


def test_identity_at_equal_times(rng):
    fam = family()
    x = rng.normal(size=32)
    for kind, n in ((IE, None), ("crank_nicolson", None), ("yosida_product", 10.0)):
        sch = PropagatorScheme(kind, 0.01, n)
        assert np.array_equal(propagate(fam, sch, 0.3, 0.3, x).values, x)
        np.testing.assert_array_equal(evolution_matrix(fam, sch, 0.5, 0.5).matrix, np.eye(32))
    with pytest.raises(NegativeInterval):
        propagate(fam, PropagatorScheme(IE, 0.1), 1.0, 0.5, x)


def test_one_step_on_eigenvector():
    fam = family()
    lam, vec = laplacian_eigenpairs(fam.grid, 1)
    dt = 0.05
    y = propagate(fam, PropagatorScheme(IE, dt), 0.0, dt, vec[:, 0]).values
    np.testing.assert_allclose(y, vec[:, 0] / (1 - dt * lam[0]), rtol=1e-13)


@pytest.mark.parametrize("j", [1, 2])
def test_nonautonomous_against_continuum(j):
    """a_11 = 1 + t: u(1) = exp(-j^2 * int_0^1 (1 + r) dr) sin(j xi) = exp(-1.5 j^2) sin(j xi)."""
    errs = []
    for n, dt in ((31, 2e-3), (63, 1e-3)):
        fam = family(n, coeffs=a11(1.0, 1.0))
        xi = fam.grid.nodes[:, 0]
        y = propagate(fam, PropagatorScheme(IE, dt), 0.0, 1.0, np.sin(j * xi)).values
        exact = math.exp(-1.5 * j ** 2) * np.sin(j * xi)
        h = fam.grid.spacing[0]
        err = np.max(np.abs(y - exact))
        assert err <= 2.0 * j ** 4 * (h ** 2 + dt) * math.exp(-1.5 * j ** 2) + 1e-12
        errs.append(err)
    assert errs[1] < errs[0]


def test_evolution_matrix_matches_propagate(rng):
    fam = family(24, coeffs=a11(1.0, 0.5, xi=(1.0, 0.25)))
    sch = PropagatorScheme(IE, 0.01)
    K = evolution_matrix(fam, sch, 0.1, 0.6)
    x = rng.normal(size=24)
    np.testing.assert_allclose(K.matrix @ x, propagate(fam, sch, 0.1, 0.6, x).values, atol=1e-12)


def test_autonomous_symmetric_and_spectral():
    fam = family(40)
    dt, T = 0.01, 0.5
    U = evolution_matrix(fam, PropagatorScheme(IE, dt), 0.0, T).matrix
    assert np.max(np.abs(U - U.T)) <= 1e-10
    # spectral oracle for implicit Euler: eigenvalues (1 - dt lam)^(-T/dt)
    lam, vec = laplacian_eigenpairs(fam.grid)
    oracle = vec @ np.diag((1 - dt * lam) ** (-round(T / dt))) @ vec.T * fam.grid.cell_volume
    np.testing.assert_allclose(U, oracle, atol=1e-12)


@given(r=st.integers(1, 19))
def test_composition_exact_on_aligned_grid(r):
    fam = family(16, coeffs=a11(1.0, 1.0))
    sch = PropagatorScheme(IE, 0.05)
    s, t = 0.0, 1.0
    rr = s + r * 0.05
    U = evolution_matrix(fam, sch, s, t).matrix
    UU = evolution_matrix(fam, sch, rr, t).matrix @ evolution_matrix(fam, sch, s, rr).matrix
    assert np.linalg.norm(U - UU) <= 1e-12


@given(seed=st.integers(0, 2 ** 31), t0=st.floats(0, 1), tau=st.floats(0.01, 1))
def test_implicit_euler_contracts(seed, t0, tau):
    fam = family(20, coeffs=a11(1.0, 0.5, xi=(1.0, 0.25)))
    K = evolution_matrix(fam, PropagatorScheme(IE, 0.01), t0, t0 + tau)
    audit = contraction_audit(K, trials=50, seed=seed)
    assert audit.sup_gain_H <= 1 + 1e-12
    assert audit.sup_gain_E <= 1 + 1e-12
    assert audit.induced_E <= 1 + 1e-12


def test_neumann_preserves_constants():
    fam = family(20, "neumann")
    K = evolution_matrix(fam, PropagatorScheme(IE, 0.01), 0.0, 0.3)
    audit = contraction_audit(K, samples=[np.ones(20)])
    assert audit.sup_gain_H == pytest.approx(1.0, abs=1e-12)
    assert audit.sup_gain_E == pytest.approx(1.0, abs=1e-12)


def test_crank_nicolson_sup_gain_can_exceed_one():
    fam = family(64)
    dt = 0.5
    K = evolution_matrix(fam, PropagatorScheme("crank_nicolson", dt), 0.0, dt)
    audit = contraction_audit(K, trials=200)
    lam = laplacian_eigenpairs(fam.grid)[0]
    z = dt * lam
    amp = np.abs((1 + z / 2) / (1 - z / 2))
    # the H gain is the largest scalar amplification factor, below one
    assert audit.induced_H == pytest.approx(amp.max(), rel=1e-10)
    assert audit.induced_E > 1.0


def test_scheme_orders():
    fam = family(31)
    lam, vec = laplacian_eigenpairs(fam.grid)
    x = vec[:, 0] + 0.5 * vec[:, 2]
    exact = sla.expm(0.5 * fam.at(0.0).matrix) @ x
    for kind, lo, hi in ((IE, 0.8, 1.2), ("crank_nicolson", 1.7, 2.3)):
        errs = [norm_H(propagate(fam, PropagatorScheme(kind, dt), 0.0, 0.5, x).values - exact, fam.grid)
                for dt in (0.02, 0.01, 0.005)]
        orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
        assert all(lo <= p <= hi for p in orders), (kind, orders)


def test_yosida_product_converges_in_n():
    fam = family(31)
    x = np.sin(fam.grid.nodes[:, 0])
    dt, T = 0.01, 0.5
    # n -> infinity limit of the product scheme is exact stepping with exp(dt A)
    ref = sla.expm(T * fam.at(0.0).matrix) @ x
    dists = [norm_H(propagate(fam, PropagatorScheme("yosida_product", dt, n), 0.0, T, x).values - ref, fam.grid)
             for n in (10.0, 1e2, 1e3, 1e4)]
    assert all(b < a for a, b in zip(dists, dists[1:]))
    rates = [math.log10(a / b) for a, b in zip(dists, dists[1:])]
    assert all(0.8 <= r <= 1.2 for r in rates[1:]), rates


# -- kernel fit ------------------------------------------------------------------

def test_discrete_kernel_near_continuum():
    fam = family(64)
    K = evolution_matrix(fam, PropagatorScheme(IE, 1e-3), 0.0, 0.1)
    xi = fam.grid.nodes[:, 0]
    oracle = dirichlet_heat_kernel(xi[:, None], xi[None, :], 0.1)
    assert np.max(np.abs(K.kernel_values() - oracle)) <= 0.02 * oracle.max()


def test_heat_kernel_fit():
    fam = family(64)
    fit = kernel_bound_fit(evolution_matrix(fam, PropagatorScheme(IE, 1e-3), 0.0, 0.1))
    M, m, ok = fit
    assert ok
    assert 3.6 <= m <= 4.4
    # prefactor of the free Gaussian: (4 pi)^(-1/2)
    assert M == pytest.approx(1 / math.sqrt(4 * math.pi), rel=0.1)


def test_long_time_kernel_fit():
    fam = family(64)
    assert kernel_bound_fit(evolution_matrix(fam, PropagatorScheme(IE, 0.05), 0.0, 10.0)).satisfied


def test_variable_diffusion_kernel_fit():
    # a_11 = 1 + xi/pi lies in [1, 2]; continuum comparison kernels have m = 4 and m = 8
    fam = family(64, coeffs=a11(1.0, xi=(1.0, 1 / math.pi)))
    fit = kernel_bound_fit(evolution_matrix(fam, PropagatorScheme(IE, 1e-3), 0.0, 0.1))
    assert fit.satisfied
    assert fit.m_fit <= 8.8


def test_kernel_fit_2d():
    fam = family(15, dim=2)
    assert kernel_bound_fit(evolution_matrix(fam, PropagatorScheme(IE, 2e-3), 0.0, 0.1)).satisfied


def test_degenerate_kernel():
    g = build_grid(0.0, 1.0, 4)
    with pytest.raises(DegenerateKernel):
        kernel_bound_fit(EvolutionKernel(0.0, 1.0, np.zeros((4, 4)), g))
    with pytest.raises(NegativeInterval):
        kernel_bound_fit(EvolutionKernel(1.0, 1.0, np.eye(4), g))


def test_factorization_cache_reuse():
    fam = family(16, coeffs=a11(1.0, 1.0))
    sch = PropagatorScheme(IE, 0.1)
    a = propagate(fam, sch, 0.0, 1.0, np.ones(16)).values
    b = propagate(fam, sch, 0.0, 1.0, np.ones(16)).values
    assert np.array_equal(a, b)
