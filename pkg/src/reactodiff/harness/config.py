"""Experiment configs: JSON schema validation, dataclasses and model assembly."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from ..deterministic import Problem, TimeGrid
from ..discretization import BoundaryCondition, CoefficientSet, PolyForm, SpatialGrid, build_grid
from ..errors import ConfigInvalid, ReactoDiffError
from ..evolution import PropagatorScheme
from ..stochastic import NoiseModel
from ..yosida import ReactionPolynomial

SCHEMA_VERSION = 1
KINDS = ("deterministic_solve", "estimate_audit", "k_convergence", "n_convergence",
         "spde_ensemble", "chs_sweep", "factorization_compare", "transition_table")


@lru_cache(maxsize=1)
def schema() -> dict:
    text = resources.files("reactodiff.harness").joinpath("config.schema.json").read_text()
    return json.loads(text)


def _form(obj) -> list:
    """Canonical JSON of a coefficient form."""
    return PolyForm.from_json(obj).to_json()


@dataclass
class GridConfig:
    lo: list
    hi: list
    n: list


@dataclass
class CoefficientConfig:
    # None means the unit diffusion matrix
    diffusion: list | None = None
    drift: list | None = None
    potential: list = field(default_factory=list)
    ellipticity_floor: float = 1e-8


@dataclass
class ReactionConfig:
    # coefficients[k] multiplies s^k; the last one enters with a minus sign
    coefficients: list = field(default_factory=lambda: [[], []])
    zeta: float | None = None
    leading_floor: float = 1e-12


@dataclass
class ProblemConfig:
    grid: GridConfig
    coefficients: CoefficientConfig = field(default_factory=CoefficientConfig)
    bc: str = "dirichlet"
    robin: list | None = None
    reaction: ReactionConfig = field(default_factory=ReactionConfig)
    initial: list = field(default_factory=list)
    perturbation: list | None = None


@dataclass
class NoiseConfig:
    basis: str = "dirichlet_sine"
    K: int = 32
    alpha: float = 0.2
    weights: list | float | None = None
    gamma: float | None = None


@dataclass
class SolverConfig:
    scheme: str = "implicit_euler"
    dt: float = 1e-3
    # None: 1e-4 for deterministic kinds, 1e-3 for pathwise (noise-forced) solves
    tol: float | None = None
    picard_tol: float = 1e-12
    k0: float | None = None
    n: float | None = None
    mode: str = "yosida_cascade"
    cross_check: bool = True


@dataclass
class SweepConfig:
    alphas: list = field(default_factory=list)
    gammas: list = field(default_factory=list)
    ks: list = field(default_factory=list)
    ns: list = field(default_factory=list)
    dts: list = field(default_factory=list)


@dataclass
class RunConfig:
    kind: str
    s: float = 0.0
    T: float = 1.0
    master_seed: int = 0
    n_paths: int = 100
    chunk: int = 64
    sweep: SweepConfig = field(default_factory=SweepConfig)
    functionals: list = field(default_factory=lambda: [{"kind": "one"}])


@dataclass
class ExperimentConfig:
    problem: ProblemConfig
    run: RunConfig
    noise: NoiseConfig | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return _drop_none(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        other = copy.deepcopy(self)
        other.run.master_seed = int(seed)
        return other


def _path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path)


def validate_dict(data: dict) -> None:
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: (len(list(e.absolute_path)), str(e.message)))
    if errors:
        # the deepest error names the offending field most precisely
        err = max(errors, key=lambda e: len(list(e.absolute_path)))
        raise ConfigInvalid(_path(err), err.message)


def _drop_none(obj):
    # unset optional fields are omitted, which is how the schema spells "default"
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_drop_none(v) for v in obj]
    return obj


def from_dict(data: dict, check: bool = True) -> ExperimentConfig:
    """Validate ``data`` against the schema and the model invariants."""
    if not isinstance(data, dict):
        raise ConfigInvalid("", "config must be a JSON object")
    validate_dict(data)
    p = data["problem"]
    coeffs = p.get("coefficients", {})
    cc = CoefficientConfig(
        diffusion=None if "diffusion" not in coeffs else [[_form(f) for f in row] for row in coeffs["diffusion"]],
        drift=None if "drift" not in coeffs else [_form(f) for f in coeffs["drift"]],
        potential=_form(coeffs.get("potential", 0)),
        ellipticity_floor=float(coeffs.get("ellipticity_floor", 1e-8)),
    )
    r = p.get("reaction", {})
    rc = ReactionConfig(
        coefficients=[_form(f) for f in r.get("coefficients", [0, 0])],
        zeta=None if r.get("zeta") is None else float(r["zeta"]),
        leading_floor=float(r.get("leading_floor", 1e-12)),
    )
    g = p["grid"]
    pc = ProblemConfig(
        grid=GridConfig([float(v) for v in g["lo"]], [float(v) for v in g["hi"]], [int(v) for v in g["n"]]),
        coefficients=cc,
        bc=p.get("bc", "dirichlet"),
        robin=None if p.get("robin") is None else _form(p["robin"]),
        reaction=rc,
        initial=_form(p.get("initial", 0)),
        perturbation=None if p.get("perturbation") is None else _form(p["perturbation"]),
    )
    nc = None
    if "noise" in data:
        n = data["noise"]
        w = n.get("weights")
        nc = NoiseConfig(
            basis=n.get("basis", "dirichlet_sine"),
            K=int(n.get("K", 32)),
            alpha=float(n.get("alpha", 0.2)),
            weights=None if w is None else (float(w) if isinstance(w, (int, float)) else [float(v) for v in w]),
            gamma=None if n.get("gamma") is None else float(n["gamma"]),
        )
    s = data.get("solver", {})
    sc = SolverConfig(
        scheme=s.get("scheme", "implicit_euler"),
        dt=float(s.get("dt", 1e-3)),
        tol=None if s.get("tol") is None else float(s["tol"]),
        picard_tol=float(s.get("picard_tol", 1e-12)),
        k0=None if s.get("k0") is None else float(s["k0"]),
        n=None if s.get("n") is None else float(s["n"]),
        mode=s.get("mode", "yosida_cascade"),
        cross_check=bool(s.get("cross_check", True)),
    )
    rn = data["run"]
    sw = rn.get("sweep", {})
    run = RunConfig(
        kind=rn["kind"],
        s=float(rn.get("s", 0.0)),
        T=float(rn.get("T", 1.0)),
        master_seed=int(rn.get("master_seed", 0)),
        n_paths=int(rn.get("n_paths", 100)),
        chunk=int(rn.get("chunk", 64)),
        sweep=SweepConfig(*(list(map(float, sw.get(k, []))) for k in ("alphas", "gammas", "ks", "ns", "dts"))),
        functionals=[dict(f) for f in rn.get("functionals", [{"kind": "one"}])],
    )
    cfg = ExperimentConfig(pc, run, nc, sc, int(data.get("version", SCHEMA_VERSION)))
    if check:
        build(cfg)
    return cfg


def load_config(source) -> ExperimentConfig:
    """Config from a dict, a JSON string or a path."""
    if isinstance(source, dict):
        return from_dict(source)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigInvalid("", f"cannot read config: {exc}") from exc
    else:
        text = source
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid("", f"not valid JSON: {exc}") from exc
    return from_dict(data)


# -- model assembly ----------------------------------------------------------------

@dataclass(eq=False)
class Setup:
    grid: SpatialGrid
    problem: Problem
    model: NoiseModel | None
    time_grid: TimeGrid
    x0: np.ndarray
    z0: np.ndarray


def _invalid(path: str):
    """Re-raise model errors as ConfigInvalid naming ``path``."""

    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, typ, exc, tb):
            if exc is None or isinstance(exc, ConfigInvalid):
                return False
            if isinstance(exc, (ReactoDiffError, ValueError, TypeError, np.linalg.LinAlgError)):
                raise ConfigInvalid(path, str(exc)) from exc
            return False

    return _Guard()


def _sample(form: list, grid: SpatialGrid, t: float) -> np.ndarray:
    return PolyForm.from_json(form)(t, grid.nodes)


def build(cfg: ExperimentConfig) -> Setup:
    """Assemble grid, problem, noise model and initial data; invariants are checked here."""
    p = cfg.problem
    g = p.grid
    if not len(g.lo) == len(g.hi) == len(g.n):
        raise ConfigInvalid("problem.grid", "lo, hi and n must have one entry per axis")
    d = len(g.n)
    with _invalid("problem.grid"):
        grid = build_grid(g.lo, g.hi, g.n, d)
    c = p.coefficients
    if c.diffusion is not None and (len(c.diffusion) != d or any(len(row) != d for row in c.diffusion)):
        raise ConfigInvalid("problem.coefficients.diffusion", f"expected a {d}x{d} matrix")
    if c.drift is not None and len(c.drift) != d:
        raise ConfigInvalid("problem.coefficients.drift", f"expected {d} entries")
    diffusion = tuple(
        tuple(PolyForm.from_json(c.diffusion[i][j]) if c.diffusion is not None else PolyForm.constant(float(i == j))
              for j in range(d))
        for i in range(d)
    )
    drift = tuple(PolyForm.from_json(f) for f in c.drift) if c.drift is not None else tuple(PolyForm() for _ in range(d))
    coeffs = CoefficientSet(diffusion, drift, PolyForm.from_json(c.potential), c.ellipticity_floor)
    bc = BoundaryCondition(p.bc, None if p.robin is None else PolyForm.from_json(p.robin))
    run = cfg.run
    if not run.T > run.s:
        raise ConfigInvalid("run.T", f"T={run.T} must exceed s={run.s}")
    with _invalid("problem.reaction.coefficients"):
        reaction = ReactionPolynomial(tuple(PolyForm.from_json(f) for f in p.reaction.coefficients),
                                      p.reaction.leading_floor, p.reaction.zeta)
        for t in (run.s, run.T):
            reaction.check_leading(t, grid)
    with _invalid("problem.coefficients"):
        problem = Problem.build(coeffs, grid, bc, reaction, run.s, run.T)
    sv = cfg.solver
    if sv.dt > run.T - run.s:
        raise ConfigInvalid("solver.dt", f"dt={sv.dt} exceeds the time horizon {run.T - run.s}")
    if sv.scheme == "yosida_product" and not sv.n:
        raise ConfigInvalid("solver.n", "yosida_product needs a positive linear Yosida index n")
    with _invalid("solver"):
        PropagatorScheme(sv.scheme, sv.dt, sv.n)
    tg = TimeGrid.from_dt(run.s, run.T, sv.dt)
    model = None
    if cfg.noise is not None:
        nz = cfg.noise
        if nz.K > grid.size:
            raise ConfigInvalid("noise.K", f"K={nz.K} exceeds the number of grid nodes {grid.size}")
        if nz.gamma is not None and nz.weights is not None:
            raise ConfigInvalid("noise.gamma", "give either weights or gamma, not both")
        w = nz.weights
        if isinstance(w, float):
            w = np.full(nz.K, w)
        elif w is not None:
            if len(w) != nz.K:
                raise ConfigInvalid("noise.weights", f"expected K={nz.K} weights, got {len(w)}")
            w = np.asarray(w, dtype=float)
        with _invalid("noise"):
            model = NoiseModel(grid, nz.K, nz.alpha, w, nz.gamma)
    for a in run.sweep.alphas:
        if not 0.0 < a < 0.5:
            raise ConfigInvalid("run.sweep.alphas", f"alpha={a} must lie in (0, 1/2)")
    x0 = _sample(p.initial, grid, run.s)
    z0 = 0.5 * x0 if p.perturbation is None else _sample(p.perturbation, grid, run.s)
    return Setup(grid, problem, model, tg, x0, z0)
