"""Discrete evolution operators U(t, s) for u' = A(t)u.

Steppers act on arrays of shape (N,) or (N, P); the second form propagates
P vectors at once (ensembles, kernel columns).
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .discretization import Field, OperatorFamily, SpatialGrid, _values
from .errors import DegenerateKernel, DimensionMismatch, NegativeInterval, SingularStep
from .yosida import linear_yosida

_LAPACK_LOCK = threading.RLock()

SCHEMES = ("implicit_euler", "crank_nicolson", "yosida_product")


@dataclass(frozen=True)
class PropagatorScheme:
    kind: str = "implicit_euler"
    dt: float = 1e-3
    yosida_index: float | None = None

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown scheme {self.kind!r}; expected one of {SCHEMES}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.kind == "yosida_product" and not (self.yosida_index and self.yosida_index > 0):
            raise ValueError("yosida_product needs a positive yosida_index")


def time_nodes(s: float, t: float, dt: float) -> np.ndarray:
    """s, s+dt, ..., with a shortened last step when dt does not divide t-s."""
    if t < s:
        raise NegativeInterval(f"t={t} < s={s}")
    if t == s:
        return np.array([float(s)])
    ratio = (t - s) / dt
    n = int(round(ratio))
    if abs(ratio - n) <= 1e-9 * max(1.0, ratio):
        nodes = s + dt * np.arange(n + 1)
    else:
        n = int(math.floor(ratio))
        nodes = np.append(s + dt * np.arange(n + 1), t)
    nodes[-1] = t
    return nodes


def _lu(M: np.ndarray):
    try:
        lu = sla.lu_factor(M, check_finite=True)
    except (ValueError, sla.LinAlgError) as exc:
        raise SingularStep(str(exc)) from exc
    piv = np.abs(np.diag(lu[0]))
    if piv.min() <= 1e-14 * max(1.0, piv.max()):
        raise SingularStep("step matrix is numerically singular")
    return lu


class Propagator:
    """One-step maps of a scheme over an operator family, with caching.

    Each step matrix is formed once, keyed by (t_{i+1}, h), or by h alone
    when the family is autonomous.
    """

    def __init__(self, family: OperatorFamily, scheme: PropagatorScheme):
        self.family = family
        self.scheme = scheme
        self._cache: dict = {}

    @property
    def grid(self) -> SpatialGrid:
        return self.family.grid

    def _key(self, t0: float, t1: float):
        h = float(t1 - t0)
        if self.family.autonomous:
            return (round(h, 15),)
        return (float(t0), float(t1)) if self.scheme.kind == "crank_nicolson" else (float(t1), round(h, 15))

    def _matrix(self, t0: float, t1: float) -> np.ndarray:
        key = self._key(t0, t1)
        M = self._cache.get(key)
        if M is not None:
            return M
        # concurrent LAPACK calls from several threads corrupt the bundled
        # OpenBLAS, so factorizations are serialized and steps use matmul only
        with _LAPACK_LOCK:
            M = self._cache.get(key)
            if M is None:
                M = self._build(t0, t1)
                if len(self._cache) > 4096:
                    self._cache.clear()
                self._cache[key] = M
        return M

    def _build(self, t0: float, t1: float) -> np.ndarray:
        h = t1 - t0
        A1 = self.family.at(t1).matrix
        eye = np.eye(A1.shape[0])
        kind = self.scheme.kind
        if kind == "implicit_euler":
            return sla.lu_solve(_lu(eye - h * A1), eye, check_finite=False)
        if kind == "crank_nicolson":
            A0 = self.family.at(t0).matrix
            return sla.lu_solve(_lu(eye - 0.5 * h * A1), eye + 0.5 * h * A0, check_finite=False)
        An = linear_yosida(self.family.at(t1), self.scheme.yosida_index).matrix
        return sla.expm(h * An)

    def step(self, t0: float, t1: float, x: np.ndarray) -> np.ndarray:
        if t1 == t0:
            return np.array(x, dtype=float, copy=True)
        return self._matrix(t0, t1) @ x

    def step_matrix(self, t0: float, t1: float) -> np.ndarray:
        return self.step(t0, t1, np.eye(self.grid.size))

    def nodes(self, s: float, t: float) -> np.ndarray:
        return time_nodes(s, t, self.scheme.dt)

    def run(self, s: float, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.grid.size:
            raise DimensionMismatch(f"state of length {x.shape[0]} on a grid of size {self.grid.size}")
        nodes = self.nodes(s, t)
        y = x.copy()
        for t0, t1 in zip(nodes[:-1], nodes[1:]):
            y = self.step(t0, t1, y)
        return y


def get_propagator(family: OperatorFamily, scheme: PropagatorScheme) -> Propagator:
    """Shared propagator per (family, scheme) so repeated solves reuse factorizations."""
    store = family.__dict__.get("_propagators")
    if store is None:
        store = {}
        object.__setattr__(family, "_propagators", store)
    if scheme not in store:
        store[scheme] = Propagator(family, scheme)
    return store[scheme]


def propagate(family: OperatorFamily, scheme: PropagatorScheme, s: float, t: float, x) -> Field:
    if t < s:
        raise NegativeInterval(f"t={t} < s={s}")
    y = get_propagator(family, scheme).run(s, t, _values(x))
    return Field(family.grid, y)


@dataclass(frozen=True, eq=False)
class EvolutionKernel:
    s: float
    t: float
    matrix: np.ndarray
    grid: SpatialGrid

    def kernel_values(self) -> np.ndarray:
        """k(xi_i, y_j, t, s) = U_ij / cell_volume."""
        return self.matrix / self.grid.cell_volume


def evolution_matrix(family: OperatorFamily, scheme: PropagatorScheme, s: float, t: float) -> EvolutionKernel:
    if t < s:
        raise NegativeInterval(f"t={t} < s={s}")
    U = get_propagator(family, scheme).run(s, t, np.eye(family.grid.size))
    return EvolutionKernel(float(s), float(t), U, family.grid)


@dataclass(frozen=True)
class KernelFit:
    M_fit: float
    m_fit: float
    satisfied: bool
    worst_ratio: float

    def __iter__(self):
        return iter((self.M_fit, self.m_fit, self.satisfied))


def _upper_hull_mask(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vertices of the upper convex hull of points sorted by x."""
    hull: list[int] = []
    for i in range(x.size):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            if (x[b] - x[a]) * (y[i] - y[a]) - (y[b] - y[a]) * (x[i] - x[a]) >= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    mask = np.zeros(x.size, dtype=bool)
    mask[hull] = True
    return mask


def kernel_bound_fit(kernel: EvolutionKernel, threshold: float = 1e-14, inflation: float = 0.10) -> KernelFit:
    """Fit |k| <= M tau^{-d/2} exp(-|xi-y|^2 / (m tau)).

    The slope and intercept come from a least-squares fit of log|k| against
    -|xi-y|^2/tau on the upper hull of the largest entry at each separation,
    trimmed of points lying more than ``inflation`` below the fit. ``satisfied`` checks every
    entry against the fitted envelope inflated by ``inflation``.
    """
    tau = kernel.t - kernel.s
    if not tau > 0:
        raise NegativeInterval("kernel fit needs t > s")
    k = np.abs(kernel.kernel_values())
    nodes = kernel.grid.nodes
    d2 = np.sum((nodes[:, None, :] - nodes[None, :, :]) ** 2, axis=-1)
    mask = k > threshold
    if not np.any(mask):
        raise DegenerateKernel("all kernel entries are below the threshold")
    key = np.round(d2[mask], 10)
    uniq, inv = np.unique(key, return_inverse=True)
    kmax = np.full(uniq.size, -np.inf)
    np.maximum.at(kmax, inv, np.log(k[mask]))
    u = uniq / tau
    slope, intercept = 0.0, float(kmax.max())
    # only points on the upper hull can bind an upper envelope
    keep = _upper_hull_mask(u, kmax)
    # points far below the line (boundary-attenuated separations) carry no
    # information about the envelope shape; drop them and refit
    for _ in range(100):
        if keep.sum() < 2 or np.ptp(u[keep]) == 0:
            break
        slope, intercept = np.polyfit(-u[keep], kmax[keep], 1)
        below = kmax - (intercept - slope * u) < -math.log1p(inflation)
        new_keep = keep & ~below
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
    dim = kernel.grid.dimension
    m_fit = math.inf if slope <= 0 else 1.0 / slope
    M_fit = math.exp(intercept) * tau ** (dim / 2)
    log_env = intercept - max(slope, 0.0) * (d2 / tau)
    ratio = np.where(mask, k / np.exp(log_env), 0.0)
    worst = float(ratio.max())
    return KernelFit(M_fit, m_fit, bool(worst <= 1.0 + inflation), worst)


@dataclass(frozen=True)
class ContractionAudit:
    sup_gain_H: float
    sup_gain_E: float
    induced_E: float
    induced_H: float

    def __iter__(self):
        return iter((self.sup_gain_H, self.sup_gain_E))


def contraction_audit(kernel: EvolutionKernel, trials: int = 1000, seed: int = 0,
                      samples: Sequence[np.ndarray] | None = None) -> ContractionAudit:
    """Empirical and exact gains of U in the discrete H and sup norms."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    U = kernel.matrix
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((U.shape[0], trials)) if samples is None else np.column_stack(samples)
    Y = U @ X
    gain_H = np.linalg.norm(Y, axis=0) / np.linalg.norm(X, axis=0)
    gain_E = np.max(np.abs(Y), axis=0) / np.max(np.abs(X), axis=0)
    induced_E = float(np.max(np.sum(np.abs(U), axis=1)))
    induced_H = float(np.linalg.norm(U, 2))
    return ContractionAudit(float(gain_H.max()), float(gain_E.max()), induced_E, induced_H)
