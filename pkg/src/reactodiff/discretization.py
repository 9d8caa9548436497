"""Grids, grid functions and finite-difference assembly of the elliptic operator.

The operator realized here is

    A(t)u = sum_ij a_ij(t, xi) D_ij u + sum_i a_i(t, xi) D_i u + a_0(t, xi) u

on the interior nodes of a uniform grid over an interval (d = 1) or a box
(d = 2), with Dirichlet, Neumann or Robin boundary rows eliminated through
ghost nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import (
    DimensionMismatch,
    EllipticityViolation,
    InvalidField,
    NonPositiveExtent,
    UnsupportedDimension,
)

CoefficientFn = Callable[[float, np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# grids and fields


@dataclass(frozen=True)
class SpatialGrid:
    domain_lo: tuple[float, ...]
    domain_hi: tuple[float, ...]
    n_interior: tuple[int, ...]

    @property
    def dimension(self) -> int:
        return len(self.n_interior)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(
            (hi - lo) / (n + 1)
            for lo, hi, n in zip(self.domain_lo, self.domain_hi, self.n_interior)
        )

    @property
    def size(self) -> int:
        return int(np.prod(self.n_interior))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_nodes(self, axis: int) -> np.ndarray:
        lo, h, n = self.domain_lo[axis], self.spacing[axis], self.n_interior[axis]
        return lo + h * np.arange(1, n + 1)

    @property
    def nodes(self) -> np.ndarray:
        """Node coordinates, shape (size, d), axis 0 varying slowest."""
        axes = [self.axis_nodes(a) for a in range(self.dimension)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def field(self, values) -> "Field":
        return Field(self, values)

    def sample(self, fn: Callable[[np.ndarray], np.ndarray]) -> "Field":
        """Field of ``fn`` evaluated at the nodes; ``fn`` receives shape (size, d)."""
        return Field(self, np.asarray(fn(self.nodes), dtype=float).reshape(self.size))

    def zeros(self) -> "Field":
        return Field(self, np.zeros(self.size))


def build_grid(domain_lo, domain_hi, n_interior, dimension: int = 1) -> SpatialGrid:
    """Uniform grid of interior nodes; scalars are broadcast to every axis."""
    if dimension not in (1, 2):
        raise UnsupportedDimension(f"dimension must be 1 or 2, got {dimension}")

    def per_axis(v, cast):
        if np.ndim(v) == 0:
            return tuple(cast(v) for _ in range(dimension))
        v = tuple(cast(x) for x in v)
        if len(v) != dimension:
            raise DimensionMismatch(f"expected {dimension} entries, got {len(v)}")
        return v

    lo = per_axis(domain_lo, float)
    hi = per_axis(domain_hi, float)
    n = per_axis(n_interior, int)
    for a in range(dimension):
        if not hi[a] > lo[a]:
            raise NonPositiveExtent(f"axis {a}: domain_hi={hi[a]} <= domain_lo={lo[a]}")
        if n[a] < 1:
            raise ValueError(f"axis {a}: n_interior must be >= 1, got {n[a]}")
    return SpatialGrid(lo, hi, n)


@dataclass(frozen=True, eq=False)
class Field:
    """A grid function: one real value per interior node."""

    grid: SpatialGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != self.grid.size:
            raise DimensionMismatch(f"field has {v.size} values, grid has {self.grid.size} nodes")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def __add__(self, other):
        return Field(self.grid, self.values + _values(other))

    def __sub__(self, other):
        return Field(self.grid, self.values - _values(other))

    def __mul__(self, c):
        return Field(self.grid, self.values * c)

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self.values)

    def norm_H(self) -> float:
        return norm_H(self.values, self.grid)

    def norm_E(self, mode: str = "sup", m: int = 1) -> float:
        return norm_E(self.values, self.grid, mode=mode, m=m)

    def inner(self, other) -> float:
        return float(np.dot(self.values, _values(other)) * self.grid.cell_volume)

    def require_finite(self) -> "Field":
        if not np.all(np.isfinite(self.values)):
            raise InvalidField("field contains non-finite entries")
        return self


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Field) else np.asarray(x, dtype=float)


def norm_H(values: np.ndarray, grid: SpatialGrid, axis: int = 0):
    """Discrete L2 norm; ``axis`` indexes nodes when ``values`` is batched."""
    return np.sqrt(np.sum(np.square(values), axis=axis) * grid.cell_volume)


def norm_E(values: np.ndarray, grid: SpatialGrid, mode: str = "sup", m: int = 1, axis: int = 0):
    """Sup norm, or the discrete L^{2(2m+1)} norm when ``mode == "lp"``."""
    if mode == "sup":
        return np.max(np.abs(values), axis=axis)
    if mode == "lp":
        p = 2 * (2 * m + 1)
        return (np.sum(np.abs(values) ** p, axis=axis) * grid.cell_volume) ** (1.0 / p)
    raise ValueError(f"unknown E-norm mode {mode!r}")


# ---------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class PolyTerm:
    """poly_t(t) * prod_axis poly_xi[axis](xi_axis), coefficients in increasing degree."""

    poly_t: tuple[float, ...] = (1.0,)
    poly_xi: tuple[tuple[float, ...], ...] = ()

    def __call__(self, t: float, xi: np.ndarray) -> np.ndarray:
        xi = np.atleast_2d(xi)
        out = np.full(xi.shape[0], P.polyval(t, self.poly_t), dtype=float)
        for axis, coeffs in enumerate(self.poly_xi):
            out = out * P.polyval(xi[:, axis], coeffs)
        return out


@dataclass(frozen=True)
class PolyForm:
    """Sum of polynomial product terms; the serializable coefficient form."""

    terms: tuple[PolyTerm, ...] = ()

    def __call__(self, t: float, xi: np.ndarray) -> np.ndarray:
        xi = np.atleast_2d(xi)
        out = np.zeros(xi.shape[0])
        for term in self.terms:
            out = out + term(t, xi)
        return out

    @classmethod
    def constant(cls, c: float) -> "PolyForm":
        return cls(()) if c == 0 else cls((PolyTerm((float(c),), ()),))

    @property
    def time_independent(self) -> bool:
        return all(np.all(np.asarray(term.poly_t[1:]) == 0) for term in self.terms)

    @property
    def is_zero(self) -> bool:
        return len(self.terms) == 0

    def plus_constant(self, c: float) -> "PolyForm":
        if c == 0:
            return self
        return PolyForm(self.terms + (PolyTerm((float(c),), ()),))

    def to_json(self):
        return [
            {"t": list(term.poly_t), "xi": [list(c) for c in term.poly_xi]}
            for term in self.terms
        ]

    @classmethod
    def from_json(cls, obj) -> "PolyForm":
        """Accepts a number, one term dict, or a list of term dicts."""
        if isinstance(obj, (int, float)):
            return cls.constant(float(obj))
        if isinstance(obj, dict):
            obj = [obj]
        terms = []
        for term in obj:
            xi = term.get("xi", [])
            if xi and not isinstance(xi[0], (list, tuple)):
                xi = [xi]
            terms.append(
                PolyTerm(
                    tuple(float(c) for c in term.get("t", [1.0])),
                    tuple(tuple(float(c) for c in axis) for axis in xi),
                )
            )
        return cls(tuple(terms))


def _is_time_independent(fn) -> bool:
    return getattr(fn, "time_independent", False)


def _is_zero(fn) -> bool:
    return fn is None or getattr(fn, "is_zero", False)


def _eval(fn, t, xi) -> np.ndarray:
    if _is_zero(fn):
        return np.zeros(np.atleast_2d(xi).shape[0])
    return np.broadcast_to(np.asarray(fn(t, xi), dtype=float), (np.atleast_2d(xi).shape[0],))


@dataclass(frozen=True)
class CoefficientSet:
    """Diffusion matrix, drift and potential of the elliptic operator.

    Entries are callables ``(t, xi) -> values`` with ``xi`` of shape
    (npts, d). ``PolyForm`` entries keep the set serializable.
    """

    diffusion: tuple[tuple[CoefficientFn, ...], ...]
    drift: tuple[CoefficientFn | None, ...] = ()
    potential: CoefficientFn | None = None
    ellipticity_floor: float = 1e-8

    @property
    def dimension(self) -> int:
        return len(self.diffusion)

    @property
    def time_independent(self) -> bool:
        fns = [f for row in self.diffusion for f in row] + list(self.drift) + [self.potential]
        return all(_is_zero(f) or _is_time_independent(f) for f in fns)

    def drift_at(self, i: int):
        return self.drift[i] if i < len(self.drift) else None

    def check(self, t: float, xi: np.ndarray, rtol: float = 1e-12) -> None:
        """Symmetry and ellipticity of the diffusion matrix at the sample points."""
        d = self.dimension
        a = np.empty((xi.shape[0], d, d))
        for i in range(d):
            for j in range(d):
                a[:, i, j] = _eval(self.diffusion[i][j], t, xi)
        asym = np.max(np.abs(a - np.swapaxes(a, 1, 2)), initial=0.0)
        if asym > rtol * max(1.0, np.max(np.abs(a))):
            raise EllipticityViolation(f"diffusion matrix not symmetric at t={t} (gap {asym:.3e})")
        lam_min = np.min(np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, 1, 2))))
        if lam_min < self.ellipticity_floor:
            raise EllipticityViolation(
                f"ellipticity floor {self.ellipticity_floor} violated at t={t}: min eigenvalue {lam_min:.6g}"
            )

    @classmethod
    def laplacian(cls, dimension: int = 1, scale: float = 1.0, potential: float = 0.0):
        diff = tuple(
            tuple(PolyForm.constant(scale if i == j else 0.0) for j in range(dimension))
            for i in range(dimension)
        )
        return cls(diff, tuple(PolyForm() for _ in range(dimension)), PolyForm.constant(potential),
                   ellipticity_floor=min(1e-8, scale))


@dataclass(frozen=True)
class BoundaryCondition:
    """Boundary rule applied on every face; Robin uses ``robin`` (defaults to the potential)."""

    kind: str = "dirichlet"
    robin: CoefficientFn | None = None

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann", "robin"):
            raise ValueError(f"unknown boundary condition {self.kind!r}")


# ---------------------------------------------------------------------------
# assembly


@dataclass(frozen=True, eq=False)
class AssembledOperator:
    t: float
    matrix: np.ndarray
    grid: SpatialGrid
    bc: BoundaryCondition
    shift_applied: float = 0.0

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def shifted(self, shift: float) -> "AssembledOperator":
        if shift == 0.0:
            return self
        m = self.matrix - shift * np.eye(self.size)
        return AssembledOperator(self.t, m, self.grid, self.bc, self.shift_applied + shift)


def _ghost_factor(bc: BoundaryCondition, coeffs: CoefficientSet, t: float,
                  point: np.ndarray, axis: int, h: float) -> float:
    """Ghost value as a multiple of the adjacent interior value."""
    if bc.kind == "dirichlet":
        return 0.0
    if bc.kind == "neumann":
        return 1.0
    beta_fn = bc.robin if bc.robin is not None else coeffs.potential
    beta = float(_eval(beta_fn, t, point[None, :])[0])
    a = float(_eval(coeffs.diffusion[axis][axis], t, point[None, :])[0])
    return 1.0 / (1.0 + h * beta / a)


def assemble_operator(coeffs: CoefficientSet, grid: SpatialGrid, bc: BoundaryCondition,
                      t: float) -> AssembledOperator:
    """Second-order central differences with ghost-node elimination at the boundary."""
    d = grid.dimension
    if coeffs.dimension != d:
        raise DimensionMismatch(f"coefficients are {coeffs.dimension}-D, grid is {d}-D")
    xi = grid.nodes
    coeffs.check(t, xi)
    n = grid.n_interior
    h = grid.spacing
    N = grid.size
    idx = np.arange(N).reshape(n)
    multi = np.stack(np.unravel_index(np.arange(N), n), axis=1)

    # stencil[(offset tuple)] = per-node weights
    stencil: dict[tuple[int, ...], np.ndarray] = {}

    def add(offset, w):
        stencil[offset] = stencil.get(offset, 0.0) + w

    zero = (0,) * d
    for i in range(d):
        aii = _eval(coeffs.diffusion[i][i], t, xi)
        bi = _eval(coeffs.drift_at(i), t, xi)
        e = tuple(1 if k == i else 0 for k in range(d))
        me = tuple(-k for k in e)
        add(e, aii / h[i] ** 2 + bi / (2 * h[i]))
        add(me, aii / h[i] ** 2 - bi / (2 * h[i]))
        add(zero, -2.0 * aii / h[i] ** 2)
    if d == 2:
        mixed = _eval(coeffs.diffusion[0][1], t, xi) + _eval(coeffs.diffusion[1][0], t, xi)
        if np.any(mixed != 0):
            w = mixed / (4 * h[0] * h[1])
            add((1, 1), w)
            add((-1, -1), w)
            add((1, -1), -w)
            add((-1, 1), -w)
    add(zero, _eval(coeffs.potential, t, xi))

    A = np.zeros((N, N))
    rows = np.arange(N)
    for offset, w in stencil.items():
        w = np.broadcast_to(w, (N,))
        target = multi + np.asarray(offset)
        factor = np.ones(N)
        for axis in range(d):
            lo_out = target[:, axis] < 0
            hi_out = target[:, axis] >= n[axis]
            for mask, edge, clamp in ((lo_out, grid.domain_lo[axis], 0),
                                      (hi_out, grid.domain_hi[axis], n[axis] - 1)):
                if not np.any(mask):
                    continue
                for r in np.nonzero(mask)[0]:
                    point = xi[r].copy()
                    point[axis] = edge
                    factor[r] *= _ghost_factor(bc, coeffs, t, point, axis, h[axis])
                target[mask, axis] = clamp
        cols = idx[tuple(target[:, a] for a in range(d))]
        np.add.at(A, (rows, cols), w * factor)
    return AssembledOperator(float(t), A, grid, bc)


def apply_operator(op: AssembledOperator, x) -> Field:
    v = _values(x)
    if v.shape[0] != op.size:
        raise DimensionMismatch(f"operator is {op.size}x{op.size}, field has {v.shape[0]} entries")
    return Field(op.grid, op.matrix @ v)


@dataclass(frozen=True)
class DissipativityAudit:
    max_rayleigh: float
    shift_needed: float


def dissipativity_audit(op: AssembledOperator, samples: int = 64, seed: int = 0,
                        exact_limit: int = 2048) -> DissipativityAudit:
    """Largest H-Rayleigh quotient of the operator.

    Random unit vectors always contribute; below ``exact_limit`` nodes the
    symmetric part is eigensolved as well. Values within rounding of zero are
    reported as zero.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    A = op.matrix
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((A.shape[0], samples))
    X /= np.linalg.norm(X, axis=0)
    best = float(np.max(np.einsum("ij,ij->j", X, A @ X)))
    if A.shape[0] <= exact_limit:
        best = max(best, float(np.linalg.eigvalsh(0.5 * (A + A.T))[-1]))
    scale = max(1.0, float(np.max(np.sum(np.abs(A), axis=1))))
    if abs(best) <= 1e-12 * scale:
        best = 0.0
    return DissipativityAudit(best, max(0.0, best))


@dataclass(frozen=True, eq=False)
class OperatorFamily:
    """The map t -> A(t) - shift*I on a fixed grid, with assembly caching."""

    coeffs: CoefficientSet
    grid: SpatialGrid
    bc: BoundaryCondition = field(default_factory=BoundaryCondition)
    shift: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "_cache", {})

    @property
    def autonomous(self) -> bool:
        return self.coeffs.time_independent and (
            self.bc.kind != "robin" or self.bc.robin is None or _is_time_independent(self.bc.robin)
        )

    def at(self, t: float) -> AssembledOperator:
        key = 0.0 if self.autonomous else float(t)
        cache = self._cache
        if key not in cache:
            if len(cache) > 4096:
                cache.clear()
            cache[key] = assemble_operator(self.coeffs, self.grid, self.bc, key).shifted(self.shift)
        return cache[key]

    @classmethod
    def audited(cls, coeffs, grid, bc=None, times: Sequence[float] = (0.0, 1.0), samples: int = 16):
        """Family shifted by the largest audit shift over ``times``.

        For coefficients affine in t the top eigenvalue of the symmetric part is
        convex in t, so the interval endpoints suffice.
        """
        bc = bc or BoundaryCondition()
        shift = 0.0
        for t in times:
            shift = max(shift, dissipativity_audit(assemble_operator(coeffs, grid, bc, t), samples).shift_needed)
        return cls(coeffs, grid, bc, shift)


def laplacian_eigenpairs(grid: SpatialGrid, count: int | None = None):
    """Dirichlet eigenpairs of the 1D or 2D unit-coefficient stencil.

    Eigenvectors are the discrete sine modes, H-orthonormal; returned in order
    of decreasing eigenvalue (least negative first).
    """
    h = grid.spacing
    per_axis = []
    for a in range(grid.dimension):
        n = grid.n_interior[a]
        L = grid.domain_hi[a] - grid.domain_lo[a]
        j = np.arange(1, n + 1)
        lam = -(2.0 / h[a] ** 2) * (1.0 - np.cos(j * np.pi * h[a] / L))
        x = grid.axis_nodes(a) - grid.domain_lo[a]
        vec = np.sqrt(2.0 / L) * np.sin(np.pi * np.outer(x, j) / L)
        per_axis.append((lam, vec))
    if grid.dimension == 1:
        lam, vec = per_axis[0]
    else:
        (l0, v0), (l1, v1) = per_axis
        lam = (l0[:, None] + l1[None, :]).ravel()
        vec = np.einsum("ia,jb->ijab", v0, v1).reshape(grid.size, -1)
    order = np.argsort(-lam, kind="stable")
    lam, vec = lam[order], vec[:, order]
    if count is not None:
        lam, vec = lam[:count], vec[:, :count]
    return lam, vec
