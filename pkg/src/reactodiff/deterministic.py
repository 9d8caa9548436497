"""Mild solutions of y' = A(t)y + F(t, y + f(t)) by Yosida regularization.

The discrete mild form uses left-endpoint quadrature composed with a
one-step propagator:

    y_{i+1} = U(t_{i+1}, t_i) [ y_i + dt_i F_k(t_i, y_i + f_i) ].

Solvers accept states of shape (N,) or (N, P) so independent data and noise
paths can be advanced together.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .discretization import (
    BoundaryCondition,
    CoefficientSet,
    Field,
    OperatorFamily,
    SpatialGrid,
    _values,
    norm_E,
    norm_H,
)
from .errors import (
    GridMismatch,
    IndexBelowShift,
    InvalidField,
    ModeDisagreement,
    NoConvergence,
)
from .evolution import Propagator, PropagatorScheme, get_propagator
from .yosida import ReactionPolynomial, _horner, dissipativity_constant, nodal_resolvent

K_CAP = 2.0 ** 14
ENVELOPE_SLACK = 1e-8
ENVELOPE_ALLOWANCE = 1.0


@dataclass(frozen=True)
class TimeGrid:
    s: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > self.s:
            raise ValueError("TimeGrid needs T > s")
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be >= 1")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def from_dt(cls, s: float, T: float, dt: float) -> "TimeGrid":
        return cls(float(s), float(T), max(1, int(round((T - s) / dt))))

    @property
    def dt(self) -> float:
        return (self.T - self.s) / self.n_steps

    @cached_property
    def nodes(self) -> np.ndarray:
        t = self.s + self.dt * np.arange(self.n_steps + 1)
        t[-1] = self.T
        return t

    def coarsen(self, factor: int) -> "TimeGrid":
        if self.n_steps % factor:
            raise ValueError(f"{self.n_steps} steps not divisible by {factor}")
        return TimeGrid(self.s, self.T, self.n_steps // factor)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States on a TimeGrid; ``values`` has shape (n_steps+1, N) or (n_steps+1, N, P)."""

    time_grid: TimeGrid
    grid: SpatialGrid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape[0] != self.time_grid.n_steps + 1:
            raise GridMismatch("trajectory length does not match its time grid")

    @property
    def states(self) -> list[Field]:
        return [Field(self.grid, v) for v in self.values]

    def state(self, i: int) -> Field:
        return Field(self.grid, self.values[i])

    @property
    def final(self) -> Field:
        return self.state(-1)

    def norms(self, kind: str = "H") -> np.ndarray:
        if kind == "H":
            return norm_H(self.values, self.grid, axis=1)
        return norm_E(self.values, self.grid, axis=1)

    def sup_distance(self, other: "Trajectory", kind: str = "H") -> float:
        _check_same(self, other)
        diff = Trajectory(self.time_grid, self.grid, self.values - other.values)
        return float(np.max(diff.norms(kind)))


def _check_same(a: Trajectory, b: Trajectory):
    if a.time_grid != b.time_grid or a.grid != b.grid or a.values.shape != b.values.shape:
        raise GridMismatch("trajectories live on different grids")


@dataclass(frozen=True, eq=False)
class ForcingPath:
    time_grid: TimeGrid
    values: np.ndarray

    @classmethod
    def zeros(cls, time_grid: TimeGrid, grid: SpatialGrid, batch: int | None = None) -> "ForcingPath":
        shape = (time_grid.n_steps + 1, grid.size) + (() if batch is None else (batch,))
        return cls(time_grid, np.zeros(shape))

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "ForcingPath":
        return cls(traj.time_grid, traj.values)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)


@dataclass(eq=False)
class Problem:
    """Operator family plus reaction, with the operator shift moved into F.

    ``zeta`` is the dissipativity constant of the shifted reaction; the
    resolvent and the envelopes use ``zeta_eff = max(zeta, 0)``.
    """

    family: OperatorFamily
    reaction: ReactionPolynomial
    times: Sequence[float] = (0.0, 1.0)

    def __post_init__(self):
        self.shifted = self.reaction.shifted(self.family.shift)
        t_samples = (self.times[0],) if self.shifted.time_independent else tuple(
            np.linspace(min(self.times), max(self.times), 9))
        self.zeta_sharp = dissipativity_constant(self.shifted, self.family.grid, t_samples)
        self.zeta = self.shifted.resolve_zeta(self.family.grid, t_samples)

    @classmethod
    def build(cls, coeffs: CoefficientSet, grid: SpatialGrid, bc: BoundaryCondition | None,
              reaction: ReactionPolynomial, s: float = 0.0, T: float = 1.0, samples: int = 16) -> "Problem":
        family = OperatorFamily.audited(coeffs, grid, bc, times=(s, T), samples=samples)
        return cls(family, reaction, (s, T))

    @property
    def grid(self) -> SpatialGrid:
        return self.family.grid

    @property
    def zeta_eff(self) -> float:
        return max(self.zeta, 0.0)

    @property
    def k0(self) -> float:
        return 2.0 * max(1.0, self.zeta)

    def F(self, t: float, Y: np.ndarray) -> np.ndarray:
        return _horner(self.shifted.nodal_coefficients(t, self.grid), Y)

    def F_k(self, k: float, t: float, Y: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        c = self.shifted.nodal_coefficients(t, self.grid)
        J, _, _ = nodal_resolvent(c, k, self.zeta_eff, Y, tol)
        return _horner(c, J)


def as_scheme(scheme, dt: float) -> PropagatorScheme:
    """A scheme name, or a PropagatorScheme whose step is reset to ``dt``."""
    if isinstance(scheme, PropagatorScheme):
        return replace(scheme, dt=dt)
    return PropagatorScheme(scheme, dt)


def _prepare(problem: Problem, x, f: ForcingPath | None, time_grid: TimeGrid):
    """Validate and broadcast: x of shape (N,) or (N, P) against f of (n+1, N[, P])."""
    x = np.array(_values(x), dtype=float)
    if x.shape[0] != problem.grid.size:
        raise GridMismatch("initial datum does not match the problem grid")
    if not np.all(np.isfinite(x)):
        raise InvalidField("initial datum has non-finite entries")
    fv = None
    if f is not None:
        if f.time_grid != time_grid:
            raise GridMismatch("forcing path is not aligned with the time grid")
        if f.values.shape[1] != problem.grid.size:
            raise GridMismatch("forcing path does not match the problem grid")
        if np.any(f.values):
            fv = f.values
    if fv is not None:
        if fv.ndim == 3 and x.ndim == 1:
            x = np.repeat(x[:, None], fv.shape[2], axis=1)
        elif fv.ndim == 2 and x.ndim == 2:
            fv = fv[:, :, None]
        if fv.ndim == 3 and fv.shape[2] not in (1, x.shape[1]):
            raise GridMismatch("forcing batch does not match the data batch")
    return x, fv


def _window_reaction(problem: Problem, k: float, ts: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """F_k(t_j, Y[j]) for a block of time nodes, batched when F is autonomous."""
    if problem.shifted.is_zero:
        return np.zeros_like(Y)
    if problem.shifted.time_independent:
        moved = np.moveaxis(Y, 0, 1)
        return np.moveaxis(problem.F_k(k, ts[0], moved), 1, 0)
    return np.stack([problem.F_k(k, t, y) for t, y in zip(ts, Y)])


def _picard(problem: Problem, prop: Propagator, k: float, x: np.ndarray, fv,
            time_grid: TimeGrid, tol: float, max_sweeps: int) -> tuple[np.ndarray, dict]:
    if not k > problem.zeta_eff:
        raise IndexBelowShift(f"k={k} must exceed max(zeta, 0)={problem.zeta_eff}")
    t = time_grid.nodes
    n = time_grid.n_steps
    dts = np.diff(t)
    Y = np.empty((n + 1,) + x.shape)
    Y[0] = x
    # subwindows shorter than 1/(6k) make each Picard map a 1/2-contraction
    width = max(1, int(math.floor(1.0 / (6.0 * k * time_grid.dt))))
    sweeps_total = 0
    i0 = 0
    zero_reaction = problem.shifted.is_zero
    while i0 < n:
        i1 = min(n, i0 + width)
        Y[i0 + 1:i1 + 1] = Y[i0]
        for sweep in range(1, max_sweeps + 1):
            if zero_reaction:
                Fw = None
            else:
                arg = Y[i0:i1] if fv is None else Y[i0:i1] + fv[i0:i1]
                Fw = _window_reaction(problem, k, t[i0:i1], arg)
            z = Y[i0]
            change = 0.0
            scale = 1.0
            for j in range(i0, i1):
                rhs = z if Fw is None else z + dts[j] * Fw[j - i0]
                z = prop.step(t[j], t[j + 1], rhs)
                change = max(change, float(np.max(np.abs(z - Y[j + 1]), initial=0.0)))
                scale = max(scale, float(np.max(np.abs(z), initial=0.0)))
                Y[j + 1] = z
            sweeps_total += 1
            # left-endpoint Picard on a window of w steps is exact after w sweeps
            if zero_reaction or sweep >= i1 - i0 or change <= tol * scale:
                break
        else:
            raise NoConvergence(f"Picard iteration did not settle within {max_sweeps} sweeps (window {i0}..{i1})")
        i0 = i1
    return Y, {"window_steps": width, "sweeps": sweeps_total}


def picard_solve_regularized(problem: Problem, k: float, n: float, x, f: ForcingPath | None,
                             time_grid: TimeGrid, tol: float = 1e-12, max_sweeps: int = 200) -> Trajectory:
    """Doubly regularized solve: F_k with the Yosida-product propagator at index n."""
    x, fv = _prepare(problem, x, f, time_grid)
    prop = get_propagator(problem.family, PropagatorScheme("yosida_product", time_grid.dt, float(n)))
    Y, info = _picard(problem, prop, k, x, fv, time_grid, tol, max_sweeps)
    return Trajectory(time_grid, problem.grid, Y, {"k": k, "n": n, "scheme": "yosida_product", "tol": tol, **info})


def mild_solve_k(problem: Problem, k: float, x, f: ForcingPath | None, time_grid: TimeGrid,
                 scheme: str = "implicit_euler", tol: float = 1e-12, max_sweeps: int = 200) -> Trajectory:
    x, fv = _prepare(problem, x, f, time_grid)
    prop = get_propagator(problem.family, as_scheme(scheme, time_grid.dt))
    Y, info = _picard(problem, prop, k, x, fv, time_grid, tol, max_sweeps)
    return Trajectory(time_grid, problem.grid, Y, {"k": k, "scheme": scheme, "tol": tol, **info})


def _semi_implicit(problem: Problem, x: np.ndarray, fv, time_grid: TimeGrid, scheme: str) -> np.ndarray:
    """Lie splitting: implicit pointwise reaction, then one propagator step."""
    prop = get_propagator(problem.family, as_scheme(scheme, time_grid.dt))
    t = time_grid.nodes
    Y = np.empty((time_grid.n_steps + 1,) + x.shape)
    Y[0] = x
    zeta = problem.zeta_eff
    for i in range(time_grid.n_steps):
        h = t[i + 1] - t[i]
        if not 1.0 / h > zeta:
            raise IndexBelowShift(f"semi-implicit step needs dt*zeta < 1 (dt={h}, zeta={zeta})")
        y = Y[i]
        if not problem.shifted.is_zero:
            c = problem.shifted.nodal_coefficients(t[i + 1], problem.grid)
            shift = 0.0 if fv is None else fv[i + 1]
            # w - dt*b(w) = y + f with w = v + f
            w, _, _ = nodal_resolvent(c, 1.0 / h, 0.0, y + shift)
            y = w - shift
        Y[i + 1] = prop.step(t[i], t[i + 1], y)
    return Y


def _cascade(problem: Problem, prop: Propagator, k: float, x: np.ndarray, fv, time_grid: TimeGrid,
             tol: float, picard_tol: float):
    """Double k until successive solves agree within tol.

    Batched columns stop independently: each column keeps the first solve
    that is within tol of its predecessor, so its result does not depend on
    the other columns.
    """
    prev, _ = _picard(problem, prop, k, x, fv, time_grid, picard_tol, 200)
    if x.ndim == 1:
        out = None
        history = []
        while True:
            k *= 2
            if k > K_CAP:
                raise NoConvergence(f"k-cascade exceeded the cap {K_CAP:g} (last distance {history[-1][1]:.3e})")
            cur, _ = _picard(problem, prop, k, x, fv, time_grid, picard_tol, 200)
            dist = float(np.max(np.abs(cur - prev)))
            history.append((k, dist))
            if dist <= tol:
                return cur, history, k
            prev = cur
    out = np.empty_like(prev)
    k_col = np.zeros(x.shape[1])
    active = np.arange(x.shape[1])
    history = []
    while active.size:
        k *= 2
        if k > K_CAP:
            raise NoConvergence(f"k-cascade exceeded the cap {K_CAP:g} for {active.size} columns")
        f_act = None if fv is None else (fv if fv.shape[2] == 1 else fv[:, :, active])
        cur, _ = _picard(problem, prop, k, x[:, active], f_act, time_grid, picard_tol, 200)
        dist = np.max(np.abs(cur - prev), axis=(0, 1))
        history.append((k, float(dist.max())))
        done = dist <= tol
        out[:, :, active[done]] = cur[:, :, done]
        k_col[active[done]] = k
        active = active[~done]
        prev = cur[:, :, ~done]
    return out, history, float(k_col.max())


def mild_solve(problem: Problem, x, f: ForcingPath | None, time_grid: TimeGrid,
               scheme: str = "implicit_euler", mode: str = "yosida_cascade", tol: float = 1e-4,
               k0: float | None = None, cross_check: bool = True, picard_tol: float = 1e-12) -> Trajectory:
    """Mild solution as the limit of the k-regularized problems.

    ``yosida_cascade`` doubles k from k0 until successive trajectories are
    within ``tol`` in sup-in-time sup norm. ``semi_implicit`` is the
    independent splitting scheme; with ``cross_check`` both are run and
    compared.
    """
    xv, fv = _prepare(problem, x, f, time_grid)
    if mode == "semi_implicit":
        Y = _semi_implicit(problem, xv, fv, time_grid, scheme)
        return Trajectory(time_grid, problem.grid, Y, {"mode": mode, "scheme": scheme})
    if mode != "yosida_cascade":
        raise ValueError(f"unknown mode {mode!r}")
    prop = get_propagator(problem.family, as_scheme(scheme, time_grid.dt))
    k = problem.k0 if k0 is None else float(k0)
    if problem.shifted.is_zero:
        Yk, _ = _picard(problem, prop, k, xv, fv, time_grid, picard_tol, 200)
        history = [(k, 0.0)]
        k_final = k
    else:
        Yk, history, k_final = _cascade(problem, prop, k, xv, fv, time_grid, tol, picard_tol)
    traj = Trajectory(time_grid, problem.grid, Yk)
    k = k_final
    meta = {"mode": mode, "scheme": scheme, "k": k, "tol": tol, "cascade": history}
    if cross_check:
        other = _semi_implicit(problem, xv, fv, time_grid, scheme)
        gap = float(np.max(np.abs(other - traj.values)))
        limit = 10.0 * (tol + time_grid.dt)
        meta["mode_gap"] = gap
        if gap > limit:
            raise ModeDisagreement(f"cascade and semi-implicit differ by {gap:.3e} > {limit:.3e}")
    return Trajectory(time_grid, problem.grid, traj.values, meta)


# -- estimates ----------------------------------------------------------------

def gronwall_bound(b: float, gamma0: float, g: Sequence[float], time_grid: TimeGrid,
                   rule: str = "trapezoid") -> np.ndarray:
    """e^{b(t-t0)} gamma0 + int_{t0}^t e^{b(t-r)} g(r) dr on the grid nodes.

    ``rule`` is "trapezoid" or "left" (left-endpoint Riemann sum, the rule
    matching the solver's own quadrature).
    """
    g = np.asarray(g, dtype=float)
    t = time_grid.nodes
    if g.shape[0] != t.size:
        raise GridMismatch("g is not aligned with the time grid")
    out = np.empty(t.size)
    acc = 0.0
    out[0] = gamma0
    for i in range(t.size - 1):
        h = t[i + 1] - t[i]
        e = math.exp(b * h)
        if rule == "trapezoid":
            acc = e * acc + 0.5 * h * (e * g[i] + g[i + 1])
        elif rule == "left":
            acc = e * (acc + h * g[i])
        else:
            raise ValueError(f"unknown quadrature rule {rule!r}")
        out[i + 1] = math.exp(b * (t[i + 1] - t[0])) * gamma0 + acc
    return out


def growth_envelope(problem: Problem, x0: np.ndarray, fv, time_grid: TimeGrid, kind: str,
                    rule: str = "left") -> np.ndarray:
    """e^{zeta(t-s)}|x| + 3 int e^{zeta(t-r)} (|F(r, f)| + max(0, zeta)|f|) dr."""
    norm = norm_H if kind == "H" else norm_E
    z = problem.zeta_eff
    if fv is None:
        F0 = np.stack([problem.F(t, np.zeros(x0.shape)) for t in time_grid.nodes])
        f_norm = np.zeros(time_grid.n_steps + 1)
    else:
        F0 = np.stack([problem.F(t, fv[i]) for i, t in enumerate(time_grid.nodes)])
        f_norm = norm(fv, problem.grid, axis=1)
    g = 3.0 * (norm(F0, problem.grid, axis=1) + z * f_norm)
    return gronwall_bound(z, float(norm(x0, problem.grid)), g, time_grid, rule)


@dataclass
class EstimateTable:
    name: str
    t: np.ndarray
    lhs: np.ndarray
    envelope: np.ndarray
    passed: np.ndarray
    allowance_needed: float

    @property
    def margin(self) -> np.ndarray:
        return self.envelope - self.lhs

    @property
    def all_pass(self) -> bool:
        return bool(np.all(self.passed))


@dataclass
class EstimateReport:
    tables: list[EstimateTable] = field(default_factory=list)
    rate: dict | None = None

    @property
    def passed(self) -> bool:
        return all(tb.all_pass for tb in self.tables)

    def table(self, name: str) -> list[EstimateTable]:
        return [tb for tb in self.tables if tb.name == name]

    def to_csv(self, names: Sequence[str] | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "lhs", "envelope", "margin", "pass"])
        for tb in self.tables:
            if names is not None and tb.name not in names:
                continue
            for row in zip(tb.t, tb.lhs, tb.envelope, tb.margin, tb.passed):
                w.writerow(["%.17g" % row[0], "%.17g" % row[1], "%.17g" % row[2], "%.17g" % row[3],
                            "true" if row[4] else "false"])
        return buf.getvalue()

    def summary(self) -> dict:
        out: dict = {}
        for tb in self.tables:
            s = out.setdefault(tb.name, {"nodes": 0, "failures": 0, "min_margin": math.inf, "allowance_needed": 0.0})
            s["nodes"] += int(tb.t.size)
            s["failures"] += int(np.sum(~tb.passed))
            s["min_margin"] = min(s["min_margin"], float(np.min(tb.margin)))
            s["allowance_needed"] = max(s["allowance_needed"], tb.allowance_needed)
        if self.rate is not None:
            out["stimaconv"] = self.rate
        return out


def _audit(name: str, t, lhs, env, scale: float, allowance: float) -> EstimateTable:
    lhs = np.asarray(lhs, dtype=float)
    env = np.asarray(env, dtype=float)
    passed = lhs <= env * (1.0 + ENVELOPE_SLACK + allowance * scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        excess = np.where(env > 0, lhs / env - 1.0 - ENVELOPE_SLACK, np.where(lhs > 0, np.inf, 0.0))
    needed = float(max(0.0, np.max(excess)) / scale) if scale > 0 else 0.0
    return EstimateTable(name, np.asarray(t, dtype=float), lhs, env, passed, needed)


def verify_estimates(traj_pairs, problem: Problem, f: ForcingPath | None = None,
                     allowance: float = ENVELOPE_ALLOWANCE, extra: Sequence[Trajectory] = (),
                     rule: str = "left") -> EstimateReport:
    """Audit the growth (stiX, stiE) and Lipschitz (lipX, lipE) envelopes.

    ``traj_pairs`` holds (y_x, y_z) solved on the same grids; ``f`` is the
    forcing both were solved with. Each node passes when
    lhs <= envelope * (1 + 1e-8 + allowance*(dt + h^2)).
    """
    report = EstimateReport()
    seen: list[Trajectory] = []
    for a, b in traj_pairs:
        _check_same(a, b)
        for tr in (a, b):
            if not any(tr is s for s in seen):
                seen.append(tr)
    for tr in extra:
        seen.append(tr)
    if not seen:
        return report
    tg = seen[0].time_grid
    fv = None
    if f is not None:
        if f.time_grid != tg:
            raise GridMismatch("forcing path is not aligned with the trajectories")
        fv = f.values if np.any(f.values) else None
    scale = tg.dt + max(problem.grid.spacing) ** 2
    grow = math.exp  # local alias
    for tr in seen:
        if tr.time_grid != tg or tr.grid != problem.grid:
            raise GridMismatch("trajectories live on different grids")
        for name, kind in (("stiX", "H"), ("stiE", "E")):
            env = growth_envelope(problem, tr.values[0], fv, tg, kind, rule)
            report.tables.append(_audit(name, tg.nodes, tr.norms(kind), env, scale, allowance))
    z = problem.zeta_eff
    decay = np.array([grow(z * (t - tg.s)) for t in tg.nodes])
    for a, b in traj_pairs:
        diff = Trajectory(tg, problem.grid, a.values - b.values)
        for name, kind in (("lipX", "H"), ("lipE", "E")):
            n = diff.norms(kind)
            report.tables.append(_audit(name, tg.nodes, n, decay * n[0], scale, allowance))
    return report


def cascade_rate(problem: Problem, x, f: ForcingPath | None, time_grid: TimeGrid,
                 ks: Sequence[float] = (4, 8, 16, 32, 64), scheme: str = "implicit_euler") -> dict:
    """Log-log slope of sup_t |y^k - y^{2k}|_H^2 against k."""
    sols = {}
    for k in sorted(set(ks) | {2 * k for k in ks}):
        sols[k] = mild_solve_k(problem, k, x, f, time_grid, scheme)
    ks = list(ks)
    d2 = [sols[k].sup_distance(sols[2 * k], "H") ** 2 for k in ks]
    slope, intercept = np.polyfit(np.log(ks), np.log(d2), 1)
    fitted_C = float(max(d * k / 1.5 for d, k in zip(d2, ks)))
    return {"k": [float(k) for k in ks], "dist_sq": [float(d) for d in d2], "slope": float(slope),
            "intercept": float(intercept), "fitted_C": fitted_C}
