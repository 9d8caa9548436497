"""Cylindrical Wiener noise, stochastic convolutions and pathwise SPDE solves.

W(t) = sum_k beta_k(t) e_k is truncated to K modes of an H-orthonormal basis
(discrete Dirichlet sine modes by default) and B(t) acts diagonally,
B(t) e_k = b_k(t) e_k. Increment tables have shape (n_steps, K) for one path
or (n_steps, K, P) for a batch of P paths.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.integrate import quad

from .deterministic import (
    ForcingPath,
    Problem,
    TimeGrid,
    Trajectory,
    mild_solve,
    growth_envelope,
    _audit,
    as_scheme,
)
from .discretization import SpatialGrid, _values, laplacian_eigenpairs, norm_E, norm_H
from .errors import (
    AlphaOutOfRange,
    GridMismatch,
    RegularityPreconditionFailed,
    SequenceNotCauchy,
)
from .evolution import Propagator, PropagatorScheme, get_propagator
from .discretization import OperatorFamily
from .yosida import ReactionPolynomial

DEFAULT_CHUNK = 64


def _check_alpha(alpha: float) -> float:
    if not 0.0 < alpha < 0.5:
        raise AlphaOutOfRange(f"alpha={alpha} must lie in (0, 1/2)")
    return float(alpha)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Truncated cylindrical noise with diagonal B.

    ``weights`` gives b_k, either as a length-K array or a callable
    t -> array. With ``gamma`` set, b_k = |lambda_k|^{-gamma} for the
    Dirichlet Laplacian eigenvalues lambda_k, i.e. B = (-A)^{-gamma}: gamma > 0
    smooths the noise.
    """

    grid: SpatialGrid
    K: int = 32
    alpha: float = 0.2
    weights: np.ndarray | Callable[[float], np.ndarray] | None = None
    gamma: float | None = None
    basis: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None

    def __post_init__(self):
        _check_alpha(self.alpha)
        if self.K < 1 or self.K > self.grid.size:
            raise ValueError(f"K={self.K} must lie in [1, {self.grid.size}]")
        object.__setattr__(self, "default_basis", self.basis is None)
        if self.basis is None:
            lam, vec = laplacian_eigenpairs(self.grid, self.K)
            object.__setattr__(self, "basis", vec)
            object.__setattr__(self, "eigenvalues", lam)
        basis = np.asarray(self.basis, dtype=float)
        if basis.shape != (self.grid.size, self.K):
            raise GridMismatch("basis must have shape (grid.size, K)")
        gram = basis.T @ basis * self.grid.cell_volume
        if np.max(np.abs(gram - np.eye(self.K))) > 1e-10:
            raise ValueError("noise basis is not H-orthonormal")
        object.__setattr__(self, "basis", basis)
        if self.gamma is not None:
            if self.eigenvalues is None:
                raise ValueError("gamma weights need eigenvalues")
            w = np.abs(np.asarray(self.eigenvalues)) ** (-float(self.gamma))
            object.__setattr__(self, "weights", w)
        elif self.weights is None:
            object.__setattr__(self, "weights", np.ones(self.K))
        elif not callable(self.weights):
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.K,):
                raise ValueError("weights must have length K")
            object.__setattr__(self, "weights", w)

    def b(self, t: float) -> np.ndarray:
        w = self.weights(t) if callable(self.weights) else self.weights
        return np.asarray(w, dtype=float)

    @property
    def autonomous(self) -> bool:
        return not callable(self.weights)

    @property
    def is_zero(self) -> bool:
        return self.autonomous and not np.any(self.weights)

    def apply(self, t: float, dW: np.ndarray) -> np.ndarray:
        """B(t) sum_k dW_k e_k for dW of shape (K,) or (K, P)."""
        b = self.b(t)
        return self.basis @ (b[:, None] * dW if dW.ndim == 2 else b * dW)

    def with_K(self, K: int) -> "NoiseModel":
        w = self.weights
        if not callable(w) and self.gamma is None:
            w = np.ones(K) if np.all(w == 1) else None
            if w is None:
                raise ValueError("cannot resize explicit weights")
        return NoiseModel(self.grid, K, self.alpha, None if self.gamma is not None else w, self.gamma)

    def on_grid(self, grid: SpatialGrid) -> "NoiseModel":
        """The same noise (default sine basis, same b_k) on another grid."""
        if not self.default_basis:
            raise ValueError("only the default basis can be moved to another grid")
        return NoiseModel(grid, self.K, self.alpha, None if self.gamma is not None else self.weights, self.gamma)

    def with_alpha(self, alpha: float) -> "NoiseModel":
        return NoiseModel(self.grid, self.K, alpha, None if self.gamma is not None else self.weights,
                          self.gamma, self.basis, self.eigenvalues)


@dataclass(frozen=True, eq=False)
class WienerPath:
    seed: int | None
    time_grid: TimeGrid
    increments: np.ndarray

    @property
    def K(self) -> int:
        return self.increments.shape[1]

    def coarsen(self, factor: int) -> "WienerPath":
        """The same Brownian path seen on a grid with ``factor`` times larger steps."""
        tg = self.time_grid.coarsen(factor)
        inc = self.increments.reshape((tg.n_steps, factor) + self.increments.shape[1:]).sum(axis=1)
        return WienerPath(self.seed, tg, inc)


def sample_wiener(model: NoiseModel, time_grid: TimeGrid, seed: int) -> WienerPath:
    rng = np.random.default_rng(int(seed))
    inc = rng.standard_normal((time_grid.n_steps, model.K)) * math.sqrt(time_grid.dt)
    return WienerPath(int(seed), time_grid, inc)


def path_seed(master_seed: int, index: int) -> int:
    """64-bit seed of path ``index``, derived by spawning from the master seed."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class PathEnsemble:
    """Paths 0..n_paths-1 keyed by seeds derived from ``master_seed``.

    Work is split into fixed-size chunks processed independently, so results
    do not depend on the number of threads.
    """

    master_seed: int
    n_paths: int
    chunk: int = DEFAULT_CHUNK
    threads: int = 1

    def seed(self, i: int) -> int:
        return path_seed(self.master_seed, i)

    def chunks(self) -> list[range]:
        return [range(a, min(a + self.chunk, self.n_paths)) for a in range(0, self.n_paths, self.chunk)]

    def increments(self, model: NoiseModel, time_grid: TimeGrid, idx: Iterable[int]) -> np.ndarray:
        return np.stack([sample_wiener(model, time_grid, self.seed(i)).increments for i in idx], axis=-1)

    def map_chunks(self, fn: Callable[[range], object]) -> list:
        chunks = self.chunks()
        if self.threads <= 1 or len(chunks) <= 1:
            return [fn(c) for c in chunks]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, chunks))


def _increments(path) -> tuple[np.ndarray, TimeGrid | None]:
    if isinstance(path, WienerPath):
        return path.increments, path.time_grid
    return np.asarray(path, dtype=float), None


def _scheme(time_grid: TimeGrid, scheme: str) -> PropagatorScheme:
    return as_scheme(scheme, time_grid.dt)


def _direct(prop: Propagator, model: NoiseModel, t: np.ndarray, dW: np.ndarray, keep_all: bool = True):
    shape = (prop.grid.size,) + dW.shape[2:]
    Z = np.zeros(shape)
    out = np.zeros((t.size,) + shape) if keep_all else None
    for i in range(t.size - 1):
        Z = prop.step(t[i], t[i + 1], Z + model.apply(t[i], dW[i]))
        if keep_all:
            out[i + 1] = Z
    return out if keep_all else Z


def convolve_direct(problem: Problem, model: NoiseModel, path, time_grid: TimeGrid | None = None,
                    scheme: str = "implicit_euler", final_only: bool = False):
    """Left-point Ito sum via Z_{i+1} = U(t_{i+1}, t_i) [Z_i + B(t_i) dW_i].

    Unrolled, Z(t_i) = sum_{j<i} U(t_i, t_j) B(t_j) dW_j.
    """
    dW, tg0 = _increments(path)
    tg = time_grid or tg0
    if tg is None or dW.shape[0] != tg.n_steps or dW.shape[1] != model.K:
        raise GridMismatch("increments are not aligned with the time grid and noise model")
    if model.grid != problem.grid:
        raise GridMismatch("noise model and problem live on different grids")
    prop = get_propagator(problem.family, _scheme(tg, scheme))
    if model.is_zero:
        Z = np.zeros((tg.n_steps + 1, problem.grid.size) + dW.shape[2:])
        return Z[-1] if final_only else Trajectory(tg, problem.grid, Z, {"kind": "direct"})
    Z = _direct(prop, model, tg.nodes, dW, keep_all=not final_only)
    if final_only:
        return Z
    return Trajectory(tg, problem.grid, Z, {"kind": "direct", "scheme": scheme})


# -- factorization weights (time measured in units of dt) ------------------------------

def _G(u, a):
    u = np.maximum(np.asarray(u, dtype=float), 0.0)
    return u ** (2 - a) / ((1 - a) * (2 - a))


def _mom(p, a):
    """int_0^1 (u - 1/2) h(p + u) du with h(w) = w_+^{1-a}/(1-a)."""
    p = np.asarray(p, dtype=float)

    def P1(u):
        u = np.maximum(u, 0.0)
        return u ** (2 - a) / ((1 - a) * (2 - a))

    def P2(u):
        u = np.maximum(u, 0.0)
        return u ** (3 - a) / ((1 - a) * (3 - a))

    return (P2(p + 1) - P2(p)) - (p + 0.5) * (P1(p + 1) - P1(p))


@dataclass(frozen=True)
class FactorizationWeights:
    """Product-integration weights for the two factorization stages.

    inner: cbar[p] is the cell average of (sigma - r)^{-a} over sigma-cell l,
    r-cell j = l - p; mb[p] is its first moment in sigma. outer: D[q] and
    D1[q] integrate (t_n - sigma)^{a-1} and (t_n - sigma)^{a-1}(u - 1/2) over
    sigma-cell l = n - q. E[q] integrates the diagonal cell exactly.
    """

    alpha: float
    cbar: np.ndarray
    mb: np.ndarray
    D: np.ndarray
    D1: np.ndarray
    E: np.ndarray

    @classmethod
    def build(cls, alpha: float, n: int) -> "FactorizationWeights":
        a = _check_alpha(alpha)
        p = np.arange(n, dtype=float)
        cbar = _G(p + 1, a) - 2 * _G(p, a) + _G(p - 1, a)
        mb = _mom(p, a) - np.where(p >= 1, _mom(p - 1, a), 0.0)
        q = np.arange(1, n + 1, dtype=float)
        D = (q ** a - (q - 1) ** a) / a
        D1 = np.empty(n)
        E = np.empty(n)
        for i, qq in enumerate(q):
            D1[i] = quad(lambda u: (qq - u) ** (a - 1) * (u - 0.5), 0, 1, limit=200)[0]
            E[i] = quad(lambda u: (qq - u) ** (a - 1) * u ** (1 - a) / (1 - a), 0, 1, limit=200)[0]
        return cls(a, cbar, mb, D, D1, E)

    @property
    def prefactor(self) -> float:
        return math.sin(math.pi * self.alpha) / math.pi


_WEIGHT_CACHE: dict = {}


def factorization_weights(alpha: float, n: int) -> FactorizationWeights:
    key = (float(alpha), int(n))
    if key not in _WEIGHT_CACHE:
        _WEIGHT_CACHE[key] = FactorizationWeights.build(alpha, n)
    return _WEIGHT_CACHE[key]


def convolve_factorized(problem: Problem, model: NoiseModel, path, time_grid: TimeGrid | None = None,
                        scheme: str = "implicit_euler") -> Trajectory:
    """Z(t) = (sin(pi a)/pi) int U(t, sigma)(t - sigma)^{a-1} Y(sigma) d sigma.

    Y(sigma) = int U(sigma, r)(sigma - r)^{-a} B dW(r) is represented on each
    sigma-cell by its average and first moment (piecewise-linear projection);
    both singular kernels are integrated exactly over cells. Cost is
    quadratic in the number of steps.
    """
    dW, tg0 = _increments(path)
    tg = time_grid or tg0
    if tg is None or dW.shape[0] != tg.n_steps or dW.shape[1] != model.K:
        raise GridMismatch("increments are not aligned with the time grid and noise model")
    a = _check_alpha(model.alpha)
    n = tg.n_steps
    N = problem.grid.size
    batch = dW.shape[2:]
    Z = np.zeros((n + 1, N) + batch)
    if model.is_zero:
        return Trajectory(tg, problem.grid, Z, {"kind": "factorized"})
    if np.ptp(np.diff(tg.nodes)) > 1e-12 * tg.dt:
        raise GridMismatch("factorized convolution needs a uniform time grid")
    w = factorization_weights(a, n)
    prop = get_propagator(problem.family, _scheme(tg, scheme))
    t = tg.nodes
    scale = tg.dt ** (-a)
    P = int(np.prod(batch)) if batch else 1
    dWb = dW.reshape(n, model.K, P)
    # columns stored as (N, 3, P, cell) in Fortran order so the first m cells
    # of all three stacks form one contiguous (N, 3*P*m) block:
    # V = U(t_l, t_j) B dW_j, PY = U(t_l, t_j) Ybar_j, PM likewise for the moment
    store = np.zeros((N, 3, P, n), order="F")
    V, PY, PM = store[:, 0], store[:, 1], store[:, 2]
    Zb = np.zeros((n + 1, N, P))
    for l in range(n):
        if l > 0:
            # stage 1 on sigma-cell l from earlier r-cells j, p = l - j >= 1
            Ybar = scale * (V[:, :, :l] @ w.cbar[l:0:-1])
            Ymom = scale * (V[:, :, :l] @ w.mb[l:0:-1])
            PY[:, :, l] = Ybar
            PM[:, :, l] = Ymom
        V[:, :, l] = model.apply(t[l], dWb[l])
        m = l + 1
        # advance every stored column to t_{l+1}
        block = store[:, :, :, :m].reshape(N, 3 * P * m, order="F")
        store[:, :, :, :m] = prop.step(t[l], t[l + 1], block).reshape(N, 3, P, m, order="F")
        # stage 2 at t_{l+1}: sigma-cell c has q = m - c
        acc = (PY[:, :, :m] @ w.D[m - 1::-1] + 12.0 * (PM[:, :, :m] @ w.D1[m - 1::-1])) / scale
        acc += V[:, :, :m] @ w.E[m - 1::-1]
        Zb[l + 1] = w.prefactor * acc
    Z = Zb.reshape((n + 1, N) + batch)
    return Trajectory(tg, problem.grid, Z, {"kind": "factorized", "alpha": a, "scheme": scheme})


def relative_sup_error(reference: Trajectory, other: Trajectory) -> float:
    """sup_t |Z_ref - Z|_H / sup_t |Z_ref|_H."""
    num = np.max(norm_H(reference.values - other.values, reference.grid, axis=1), axis=0)
    den = np.max(norm_H(reference.values, reference.grid, axis=1), axis=0)
    return float(np.max(num / den))


# -- Hilbert-Schmidt regularity estimate -----------------------------------------------

@dataclass(frozen=True)
class CHSResult:
    value: float
    diverging: bool
    growth_exponent: float
    values_by_K: tuple

    def __iter__(self):
        return iter((self.value, self.diverging, self.growth_exponent))


def graded_nodes(s: float, t: float, per_decade: int = 12, decades: float = 7.0) -> np.ndarray:
    """r-nodes from s to t, geometrically refined towards t."""
    L = t - s
    tau = L * np.logspace(0.0, -decades, int(per_decade * decades) + 1)
    return np.concatenate([t - tau, [t]])


def chs_estimate(problem: Problem, model: NoiseModel, s: float, t: float, alpha: float | None = None,
                 time_grid=None, scheme: str = "implicit_euler", per_decade: int = 12) -> CHSResult:
    """sup_xi sum_{k<=K} int_s^t (t-r)^{-2a} [U(t,r) B(r) e_k]^2(xi) dr.

    The r-grid is graded geometrically towards t where the weight is
    singular; the weight is integrated exactly per cell against the mean of
    the squared integrand at the cell ends. Values for K/4, K/2 and K modes
    give growth_exponent = log2 of the ratio of successive increments; the
    sum is flagged diverging when that exponent is positive.
    """
    a = _check_alpha(model.alpha if alpha is None else alpha)
    if not t > s:
        raise ValueError("chs_estimate needs t > s")
    r = graded_nodes(s, t, per_decade) if time_grid is None else np.asarray(
        time_grid.nodes if isinstance(time_grid, TimeGrid) else time_grid, dtype=float)
    prop = Propagator(problem.family, _scheme(TimeGrid(s, t, 1), scheme))
    N = problem.grid.size
    R = np.eye(N)  # U(t, r_j), built backwards
    sq_next = None
    contrib = np.zeros((N, model.K))
    e = 1.0 - 2.0 * a
    for j in range(r.size - 1, -1, -1):
        if j < r.size - 1:
            R = R @ prop.step_matrix(r[j], r[j + 1])
        cols = R @ (model.basis * model.b(r[j]))
        sq = cols ** 2
        if sq_next is not None:
            w = ((t - r[j]) ** e - (t - r[j + 1]) ** e) / e
            contrib += 0.5 * w * (sq + sq_next)
        sq_next = sq
    cum = np.cumsum(contrib, axis=1)
    Ks = [max(1, model.K // 4), max(1, model.K // 2), model.K]
    vals = [float(np.max(cum[:, k - 1])) for k in Ks]
    d1 = vals[1] - vals[0]
    d2 = vals[2] - vals[1]
    if d1 > 0 and d2 > 0:
        growth = math.log2(d2 / d1)
    else:
        growth = -math.inf if d2 <= 0 else math.inf
    return CHSResult(vals[-1], bool(growth > 0), float(growth), tuple(zip(Ks, vals)))


# -- pathwise SPDE ------------------------------------------------------------------

_CHS_CACHE: dict = {}


def _regularity(problem: Problem, model: NoiseModel, s: float, T: float) -> CHSResult:
    """Hilbert-Schmidt regularity sum used as the solve precondition.

    The growth test needs modes well inside the resolved spectrum, so in 1D
    with the default basis it runs on a grid with at least 8K nodes.
    """
    key = (id(problem), id(model), s, T)
    if key not in _CHS_CACHE:
        grid = problem.grid
        target, tmodel = problem, model
        if grid.dimension == 1 and model.default_basis and grid.size < 8 * model.K:
            fine = SpatialGrid(grid.domain_lo, grid.domain_hi, (8 * model.K,))
            fam = problem.family
            target = Problem(OperatorFamily(fam.coeffs, fine, fam.bc, fam.shift), ReactionPolynomial.zero(),
                             problem.times)
            tmodel = model.on_grid(fine)
        _CHS_CACHE[key] = (problem, model, chs_estimate(target, tmodel, s, T))
    return _CHS_CACHE[key][2]


def spde_solve(problem: Problem, model: NoiseModel, x, time_grid: TimeGrid, path,
               scheme: str = "implicit_euler", tol: float = 1e-3, check_regularity: bool = True,
               cross_check: bool = True, Z: Trajectory | None = None) -> Trajectory:
    """X = Y + Z with Z the direct convolution and Y the mild solution forced by Z.

    ``path`` may hold one path or a batch; ``x`` may be (N,) or (N, P).
    """
    if check_regularity and not model.is_zero:
        chs = _regularity(problem, model, time_grid.s, time_grid.T)
        if chs.diverging:
            raise RegularityPreconditionFailed(
                f"Hilbert-Schmidt sum grows with K (exponent {chs.growth_exponent:.3f}) for alpha={model.alpha}")
    if Z is None:
        Z = convolve_direct(problem, model, path, time_grid, scheme)
    Fz = np.stack([problem.F(tn, Z.values[i]) for i, tn in enumerate(time_grid.nodes)])
    if not np.all(np.isfinite(Fz)):
        raise RegularityPreconditionFailed("F(t, Z(t)) is not finite along the path")
    Y = mild_solve(problem, x, ForcingPath.from_trajectory(Z), time_grid, scheme, "yosida_cascade", tol,
                   cross_check=cross_check)
    X = Y.values + (Z.values if Y.values.ndim == Z.values.ndim else Z.values[..., None])
    return Trajectory(time_grid, problem.grid, X, {**Y.meta, "Y": Y, "Z": Z})


def pathwise_estimates(problem: Problem, X: Trajectory, Xz: Trajectory, Z: Trajectory):
    """Growth envelopes (stindXX, stindEX) and Lipschitz envelopes (lipXX, lipEX) per path.

    Returns an EstimateReport whose tables are stacked over paths.
    """
    from .deterministic import EstimateReport

    tg = X.time_grid
    report = EstimateReport()
    scale = tg.dt + max(problem.grid.spacing) ** 2
    z = problem.zeta_eff
    decay = np.exp(z * (tg.nodes - tg.s))
    P = 1 if X.values.ndim == 2 else X.values.shape[2]
    for p in range(P):
        col = (lambda v: v) if X.values.ndim == 2 else (lambda v, p=p: v[..., p])
        zv = col(Z.values) if Z.values.ndim == X.values.ndim else Z.values
        for traj in (X, Xz):
            xv = col(traj.values)
            for name, kind, norm in (("stindXX", "H", norm_H), ("stindEX", "E", norm_E)):
                env = growth_envelope(problem, xv[0], zv, tg, kind) + norm(zv, problem.grid, axis=1)
                report.tables.append(_audit(name, tg.nodes, norm(xv, problem.grid, axis=1), env, scale, 1.0))
        d = col(X.values) - col(Xz.values)
        for name, norm in (("lipXX", norm_H), ("lipEX", norm_E)):
            nd = norm(d, problem.grid, axis=1)
            report.tables.append(_audit(name, tg.nodes, nd, decay * nd[0], scale, 1.0))
    return report


def generalized_solve(problem: Problem, model: NoiseModel, x, approximating_sequence: Sequence,
                      time_grid: TimeGrid, path, scheme: str = "implicit_euler", tol: float = 1e-3) -> Trajectory:
    """Solve along x_n -> x in H and certify the Cauchy property of the solutions.

    All x_n are solved in one batch so they share the regularization index,
    which makes the Lipschitz envelope exact for every pair.
    """
    x = _values(x)
    seq = [np.asarray(_values(v), dtype=float) for v in approximating_sequence]
    if not seq:
        raise SequenceNotCauchy("empty approximating sequence")
    dist = [float(norm_H(v - x, problem.grid)) for v in seq]
    if any(b > a * (1 + 1e-12) + 1e-15 for a, b in zip(dist, dist[1:])):
        raise SequenceNotCauchy(f"distances to the limit do not decrease: {dist}")
    Z = convolve_direct(problem, model, path, time_grid, scheme)
    if Z.values.ndim != 2:
        raise GridMismatch("generalized_solve takes a single noise path")
    X = spde_solve(problem, model, np.stack(seq, axis=1), time_grid, path, scheme, tol,
                   cross_check=False, Z=Z)
    bound_factor = math.exp(problem.zeta_eff * (time_grid.T - time_grid.s))
    certs = []
    for i in range(len(seq) - 1):
        gap = float(np.max(norm_H(X.values[:, :, i + 1] - X.values[:, :, i], problem.grid, axis=1)))
        bound = bound_factor * float(norm_H(seq[i + 1] - seq[i], problem.grid))
        certs.append({"n": i + 1, "distance": gap, "bound": bound,
                      "pass": bool(gap <= bound * (1 + 1e-8) + 1e-14)})
    final = X.values[:, :, -1]
    return Trajectory(time_grid, problem.grid, final, {"certificates": certs, "data_distances": dist,
                                                         "k": X.meta.get("k")})


# -- transition operators -------------------------------------------------------------

def make_functional(spec, grid: SpatialGrid, model: NoiseModel | None = None) -> Callable[[np.ndarray], np.ndarray]:
    """phi acting on states of shape (N,) or (N, P).

    Accepted specs: a callable, "one", {"kind": "mode", "j": 1} for <u, e_j>_H,
    {"kind": "bounded_mode", "j": 1} for tanh(<u, e_j>_H), {"kind": "norm_H"}.
    """
    if callable(spec):
        return spec
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind")
    if kind == "one":
        return lambda u: np.ones(u.shape[1:]) if u.ndim > 1 else np.float64(1.0)
    if kind in ("mode", "bounded_mode"):
        j = int(spec.get("j", 1))
        if model is not None and j <= model.K:
            e = model.basis[:, j - 1]
        else:
            e = laplacian_eigenpairs(grid, j)[1][:, j - 1]
        w = e * grid.cell_volume
        if kind == "mode":
            return lambda u: w @ u
        return lambda u: np.tanh(w @ u)
    if kind == "norm_H":
        return lambda u: norm_H(u, grid)
    raise ValueError(f"unknown functional {spec!r}")


@dataclass
class TransitionEstimate:
    estimate: float
    std_error: float
    n_paths: int
    moments: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.estimate, self.std_error))


def _fsum_stats(v: np.ndarray) -> tuple[float, float]:
    n = v.size
    mean = math.fsum(v.tolist()) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum(((v - mean) ** 2).tolist()) / (n - 1)
    return mean, math.sqrt(var / n)


def ensemble_final_states(problem: Problem, model: NoiseModel, x, time_grid: TimeGrid, ensemble: PathEnsemble,
                          scheme: str = "implicit_euler", tol: float = 1e-3, with_sup_F: bool = False):
    """X(T) for every path, in path order, plus sup_t |F(t, Z(t))|_E when requested."""

    def work(idx: range):
        dW = ensemble.increments(model, time_grid, idx)
        Z = convolve_direct(problem, model, dW, time_grid, scheme)
        X = spde_solve(problem, model, x, time_grid, dW, scheme, tol, cross_check=False, Z=Z)
        supF = None
        if with_sup_F:
            Fz = np.stack([problem.F(tn, Z.values[i]) for i, tn in enumerate(time_grid.nodes)])
            supF = np.max(np.max(np.abs(Fz), axis=1), axis=0)
        return X.values[-1], supF

    parts = ensemble.map_chunks(work)
    finals = np.concatenate([p[0] for p in parts], axis=1)
    supF = np.concatenate([p[1] for p in parts]) if with_sup_F else None
    return finals, supF


def transition_estimate(problem: Problem, model: NoiseModel, x, phi, time_grid: TimeGrid,
                        ensemble: PathEnsemble, scheme: str = "implicit_euler", tol: float = 1e-3,
                        moments: Sequence[int] = (2, 4)) -> TransitionEstimate:
    """Monte-Carlo P_{s,t} phi(x) = E[phi(X_{s,x}(t))] with its standard error.

    Also reports ensemble p-th moments of sup_t |F(t, Z(t))|_E.
    """
    fn = make_functional(phi, problem.grid, model)
    finals, supF = ensemble_final_states(problem, model, _values(x), time_grid, ensemble, scheme, tol,
                                         with_sup_F=bool(moments))
    vals = np.asarray(fn(finals), dtype=float).reshape(-1)
    est, se = _fsum_stats(vals)
    mom = {}
    if supF is not None:
        for p in moments:
            mom[f"p{p}"] = math.fsum((supF ** p).tolist()) / supF.size
        mom["finite"] = bool(np.all(np.isfinite(supF)))
    return TransitionEstimate(est, se, ensemble.n_paths, mom)
