"""Polynomial Nemytskii reactions and their Yosida regularizations.

The reaction is b(t, xi, s) = -C_top(t, xi) s^top + sum_{k<top} C_k(t, xi) s^k
with top = 2m + 1. For a shift zeta with b' <= zeta, the resolvent J_k(t, x)
is the unique solution of

    J - (F(t, J) - zeta J) / k = x,         k > max(zeta, 0),

computed node by node, and F_k(t, x) = F(t, J_k(t, x)).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .discretization import AssembledOperator, Field, PolyForm, SpatialGrid, _eval
from .errors import (
    IndexBelowShift,
    LeadingCoefficientViolation,
    NoConvergence,
    SingularResolvent,
)

_EPS = np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class ReactionPolynomial:
    """Coefficient functions C_0..C_top with ``coefficients[k]`` multiplying s^k.

    The top coefficient enters with a minus sign. ``zeta`` may be supplied to
    override the sharp dissipativity constant; it must not be smaller.
    """

    coefficients: tuple
    leading_floor: float = 1e-12
    zeta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "coefficients", tuple(self.coefficients))
        if len(self.coefficients) % 2 != 0:
            raise ValueError("reaction degree must be odd (2m+1): pass 2m+2 coefficient functions")
        object.__setattr__(self, "_cache", {})
        object.__setattr__(self, "_static", all(
            c is None or getattr(c, "time_independent", False) or getattr(c, "is_zero", False)
            for c in self.coefficients))
        object.__setattr__(self, "_zero", all(c is None or getattr(c, "is_zero", False) for c in self.coefficients))

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    @property
    def m(self) -> int:
        return (self.degree - 1) // 2

    @property
    def time_independent(self) -> bool:
        return self._static

    @property
    def vanishes_at_zero(self) -> bool:
        c0 = self.coefficients[0]
        return c0 is None or getattr(c0, "is_zero", False)

    @classmethod
    def from_constants(cls, coeffs: Sequence[float], **kw) -> "ReactionPolynomial":
        """``coeffs[k]`` is C_k; e.g. (0, 1, 0, 1) gives b(s) = -s^3 + s."""
        return cls(tuple(PolyForm.constant(float(c)) for c in coeffs), **kw)

    @classmethod
    def zero(cls) -> "ReactionPolynomial":
        return cls((PolyForm(), PolyForm()), zeta=0.0)

    @property
    def is_zero(self) -> bool:
        return self._zero

    def shifted(self, alpha: float) -> "ReactionPolynomial":
        """b + alpha*s, the reaction that absorbs an operator shift A - alpha*I."""
        if alpha == 0:
            return self
        coeffs = list(self.coefficients)
        c1 = coeffs[1] if isinstance(coeffs[1], PolyForm) else None
        if c1 is None:
            raise TypeError("shifting requires PolyForm coefficients")
        coeffs[1] = c1.plus_constant(-alpha if self.degree == 1 else alpha)
        zeta = None if self.zeta is None else self.zeta + alpha
        return ReactionPolynomial(tuple(coeffs), self.leading_floor, zeta)

    def with_zeta(self, zeta: float | None) -> "ReactionPolynomial":
        return replace(self, zeta=zeta)

    # -- nodal evaluation ---------------------------------------------------

    def nodal_coefficients(self, t: float, grid: SpatialGrid) -> np.ndarray:
        """Power-basis coefficients, shape (degree+1, size), sign of the top applied."""
        key = (id(grid), 0.0 if self.time_independent else float(t))
        cache = self._cache
        if key not in cache:
            if len(cache) > 8192:
                cache.clear()
            xi = grid.nodes
            c = np.array([_eval(fn, t, xi) for fn in self.coefficients])
            c[-1] = -c[-1]
            cache[key] = (grid, c)
        return cache[key][1]

    def check_leading(self, t: float, grid: SpatialGrid) -> None:
        if self.m == 0:
            return
        top = -self.nodal_coefficients(t, grid)[-1]
        if np.min(top) <= self.leading_floor:
            raise LeadingCoefficientViolation(
                f"leading coefficient min {np.min(top):.6g} <= floor {self.leading_floor} at t={t}"
            )

    def resolve_zeta(self, grid: SpatialGrid, times: Sequence[float]) -> float:
        """The configured zeta, or the sharp value over ``times`` when unset."""
        sharp = dissipativity_constant(self, grid, times)
        if self.zeta is None:
            return sharp
        if self.zeta < sharp - 1e-12 * max(1.0, abs(sharp)):
            raise ValueError(f"supplied zeta={self.zeta} is below the sharp value {sharp}")
        return float(self.zeta)


def _horner(c: np.ndarray, s: np.ndarray) -> np.ndarray:
    """sum_k c[k] s^k with c of shape (deg+1, N) and s of shape (N,) or (N, P)."""
    extra = (slice(None),) + (None,) * (s.ndim - 1)
    out = np.empty(s.shape)
    out[...] = c[-1][extra]
    for k in range(c.shape[0] - 2, -1, -1):
        out *= s
        out += c[k][extra]
    return out


def _derivative_coeffs(c: np.ndarray) -> np.ndarray:
    if c.shape[0] == 1:
        return np.zeros_like(c)
    return c[1:] * np.arange(1, c.shape[0])[:, None]


def dissipativity_constant(poly: ReactionPolynomial, grid: SpatialGrid,
                           times: Sequence[float] = (0.0,)) -> float:
    """max over sampled (t, node) of sup_s d/ds b(t, node, s).

    The supremum over s is located at the real roots of the second
    derivative, so it is exact for each sampled coefficient vector.
    """
    best = -np.inf
    for t in times:
        poly.check_leading(t, grid)
        c = poly.nodal_coefficients(t, grid)
        d1 = _derivative_coeffs(c)
        for col in np.unique(d1.T, axis=0):
            if col.size == 1 or np.all(col[1:] == 0):
                best = max(best, float(col[0]))
                continue
            d2 = col[1:] * np.arange(1, col.size)
            crit = np.roots(d2[::-1])
            crit = crit[np.abs(crit.imag) <= 1e-9 * (1 + np.abs(crit.real))].real
            if crit.size == 0:
                # even-degree derivative with negative leading term always has a critical point
                crit = np.array([0.0])
            best = max(best, float(np.max(np.polynomial.polynomial.polyval(crit, col))))
    return float(best) + 0.0  # no negative zero


def _effective_shift(zeta: float) -> float:
    # a non-positive shift can be replaced by 0
    return max(float(zeta), 0.0)


def nodal_resolvent(c: np.ndarray, k: float, zeta: float, x: np.ndarray,
                    tol: float = 1e-12, max_iter: int = 100):
    """Solve y - (b(y) - zeta*y)/k = x elementwise by safeguarded Newton.

    Returns (y, iterations, residual). ``zeta`` is used as given; callers
    pass the effective (non-negative) shift. For zeta at or above the sharp
    constant the root lies between x and x + (b(x) - zeta x)/k; the bracket
    is widened geometrically only if that ever fails.
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape
    xf = x.reshape(c.shape[1], -1)
    # phi(y) = q(y) - x with q increasing
    q = c * (-1.0 / k)
    if q.shape[0] < 2:
        q = np.vstack([q, np.zeros_like(q)])
    q[1] += 1.0 + zeta / k
    dq = _derivative_coeffs(q)

    def phi(y):
        return _horner(q, y) - xf

    y = xf.copy()
    r = phi(y)
    lo = np.minimum(y, y - r)
    hi = np.maximum(y, y - r)
    width = np.maximum(hi - lo, 1e-300)
    for _ in range(200):
        pl, ph = phi(lo) > 0, phi(hi) < 0
        if not (pl.any() or ph.any()):
            break
        lo -= np.where(pl, width, 0.0)
        hi += np.where(ph, width, 0.0)
        width *= 2
    base = np.abs(xf) + 1.0
    iters = 0
    for it in range(max_iter + 1):
        scale = base + np.abs(y) + np.abs(r - y + xf)
        tol_eff = np.maximum(tol, 16 * _EPS * scale)
        done = (np.abs(r) <= tol_eff) | (hi - lo <= 4 * _EPS * (np.abs(lo) + np.abs(hi)))
        if done.all():
            iters = it
            break
        if it == max_iter:
            raise NoConvergence(
                f"resolvent did not converge in {max_iter} iterations (residual {np.max(np.abs(r)):.3e})")
        np.copyto(lo, y, where=(r < 0) & (y > lo))
        np.copyto(hi, y, where=(r > 0) & (y < hi))
        with np.errstate(divide="ignore", invalid="ignore"):
            yn = y - r / _horner(dq, y)
        out = ~((yn > lo) & (yn < hi))
        np.copyto(yn, 0.5 * (lo + hi), where=out)
        np.copyto(yn, y, where=done)
        y = yn
        r = phi(y)
    return y.reshape(shape), iters, float(np.max(np.abs(r), initial=0.0))


@dataclass(frozen=True, eq=False)
class ResolventResult:
    value: Field
    iterations: int
    residual: float


def eval_reaction(poly: ReactionPolynomial, t: float, x: Field) -> Field:
    c = poly.nodal_coefficients(t, x.grid)
    return Field(x.grid, _horner(c, x.values))


def _zeta_for(poly: ReactionPolynomial, grid: SpatialGrid, t: float) -> float:
    return poly.zeta if poly.zeta is not None else dissipativity_constant(poly, grid, (t,))


def resolvent_J(poly: ReactionPolynomial, k: float, t: float, x: Field,
                tol: float = 1e-12, max_iter: int = 100) -> ResolventResult:
    zeta = _effective_shift(_zeta_for(poly, x.grid, t))
    if not k > zeta:
        raise IndexBelowShift(f"k={k} must exceed the shift max(zeta, 0)={zeta}")
    c = poly.nodal_coefficients(t, x.grid)
    y, iters, res = nodal_resolvent(c, k, zeta, x.values, tol, max_iter)
    return ResolventResult(Field(x.grid, y), iters, res)


def yosida_F(poly: ReactionPolynomial, k: float, t: float, x: Field, tol: float = 1e-12) -> Field:
    return eval_reaction(poly, t, resolvent_J(poly, k, t, x, tol).value)


def linear_yosida(op: AssembledOperator, n: float) -> AssembledOperator:
    """n A (nI - A)^{-1}, from one LU factorization of nI - A."""
    if not n > 0:
        raise ValueError("Yosida index must be positive")
    A = op.matrix
    M = n * np.eye(A.shape[0]) - A
    try:
        lu = sla.lu_factor(M, check_finite=True)
    except (ValueError, sla.LinAlgError) as exc:
        raise SingularResolvent(str(exc)) from exc
    piv = np.abs(np.diag(lu[0]))
    if np.min(piv) <= 1e-14 * max(1.0, np.max(piv)):
        raise SingularResolvent(f"nI - A is numerically singular for n={n}")
    An = n * sla.lu_solve(lu, A)
    return AssembledOperator(op.t, An, op.grid, op.bc, op.shift_applied)
