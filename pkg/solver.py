"""
Inverse problem: find values v so that the moment measure of psi_v is mu.

Maximizes I(v) = log Z(v) - sum_i w_i v_i (weights normalized to 1), which is
concave; its gradient is m_i / Z - w_i. The ascent uses limited-memory BFGS
with a backtracking line search and removes the gauge directions (constants
and linear forms) after every step.
"""

from __future__ import annotations

import logging
import math
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from convex_core import GaugeTransform, PolyhedralPotential
from errors import ConvergenceError, InvalidMeasureError, ToleranceBelowNoiseError
from measures import DiscreteMeasure, validate
from quadrature import MassResult, ProposalSpec, draw_proposal, exact_masses, mc_masses

logger = logging.getLogger(__name__)

QUADRATURE_MODES = ("exact", "exact2d", "mc")
MAX_CANONICAL_STEPS = 100
# relative slack for accepting a step whose objective change is below rounding
NOISE_FACTOR = 1e2 * np.finfo(float).eps


@dataclass(frozen=True)
class SolverConfig:
    gradient_tol: float = 1e-8
    max_iters: int = 1000
    backtrack: float = 0.5
    sufficient_increase: float = 1e-4
    max_line_search: int = 60
    quadrature: str = "exact"
    samples: int = 1_000_000
    memory: int = 10
    seed: int = 0
    threads: int = 1
    log_every: int = 25
    mc_block_size: int = 65536
    mc_variance_threshold: float = 1e6
    canonical_tol: float = 1e-12
    active_tol: float = 1e-12

    def __post_init__(self):
        if self.quadrature not in QUADRATURE_MODES:
            raise ValueError(f"Unknown quadrature mode '{self.quadrature}'; expected one of {QUADRATURE_MODES}")
        for name in ("gradient_tol", "max_iters", "sufficient_increase", "max_line_search", "samples",
                     "memory", "threads", "log_every", "mc_block_size", "mc_variance_threshold",
                     "canonical_tol", "active_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"Config value {name} must be positive, got {getattr(self, name)}")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack must lie in (0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def monte_carlo(self):
        return self.quadrature == "mc"

    @classmethod
    def from_file(cls, path, **overrides) -> "SolverConfig":
        """
        Load a flat TOML config; keyword overrides that are not None win

        Raises:
            ValueError: unknown keys or invalid values
        """
        with open(path, "rb") as f:
            data = tomllib.load(f)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown config keys in {path}: {', '.join(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def with_overrides(self, **overrides) -> "SolverConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SolveReport:
    iterations: int
    objective_trace: list
    grad_norm_trace: list
    step_trace: list
    final_weights: np.ndarray
    gauge: GaugeTransform
    converged: bool
    wall_time: float
    message: str = ""
    quadrature: str = "exact"
    total_mass: float = 1.0
    metadata: dict = field(default_factory=dict)

    @property
    def final_grad_norm(self):
        return self.grad_norm_trace[-1] if self.grad_norm_trace else math.nan

    def trace_records(self):
        return [{"iteration": k, "objective": obj, "grad_inf_norm": g, "step": s}
                for k, (obj, g, s) in enumerate(zip(self.objective_trace, self.grad_norm_trace, self.step_trace))]

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "message": self.message,
            "wall_time": self.wall_time,
            "quadrature": self.quadrature,
            "final_objective": self.objective_trace[-1] if self.objective_trace else None,
            "final_grad_inf_norm": self.final_grad_norm,
            "final_weights": self.final_weights.tolist(),
            "total_mass": self.total_mass,
            "gauge": self.gauge.to_dict(),
            "objective_trace": list(self.objective_trace),
            "grad_inf_norm_trace": list(self.grad_norm_trace),
            **self.metadata,
        }


@dataclass(frozen=True, eq=False)
class Evaluation:
    values: np.ndarray
    potential: PolyhedralPotential
    masses: MassResult
    objective: float
    gradient: np.ndarray


class MassEvaluator:
    """Computes masses with the configured quadrature; Monte Carlo draws are made once and reused"""

    def __init__(self, config: SolverConfig):
        self.config = config
        self.draws = None

    def masses(self, potential: PolyhedralPotential) -> MassResult:
        cfg = self.config
        if cfg.monte_carlo or potential.dim > 2:
            if self.draws is None:
                spec = ProposalSpec().resolve(potential)
                self.draws = draw_proposal(spec, potential.dim, cfg.samples, cfg.seed, cfg.mc_block_size)
            return mc_masses(potential, draws=self.draws, variance_threshold=cfg.mc_variance_threshold,
                             workers=cfg.threads)
        return exact_masses(potential, workers=cfg.threads)

    def evaluate(self, atoms, weights, values) -> Evaluation:
        potential = PolyhedralPotential(atoms, values)
        result = self.masses(potential)
        objective_value = math.log(result.total) - float(weights @ values)
        return Evaluation(np.asarray(values, dtype=float), potential, result, objective_value,
                          result.masses / result.total - weights)


def _normalized(measure: DiscreteMeasure):
    return measure.atoms, measure.weights / measure.total_mass


def objective(measure: DiscreteMeasure, values, config: SolverConfig | None = None) -> float:
    """I(v) = log Z(v) - sum_i w_i v_i with w normalized to a probability vector"""
    atoms, weights = _normalized(measure)
    return MassEvaluator(config or SolverConfig()).evaluate(atoms, weights, np.asarray(values, dtype=float)).objective


def gradient(measure: DiscreteMeasure, values, config: SolverConfig | None = None) -> np.ndarray:
    """g_i = m_i(v) / Z(v) - w_i"""
    atoms, weights = _normalized(measure)
    return MassEvaluator(config or SolverConfig()).evaluate(atoms, weights, np.asarray(values, dtype=float)).gradient


def gauge_basis(atoms):
    """Columns spanning the gauge directions: the constant vector and (y_i . e_k)_i"""
    return np.column_stack([np.ones(len(atoms)), atoms])


def project_gauge(values, atoms, weights):
    """Remove the weighted least-squares component of v along the gauge directions"""
    basis = gauge_basis(atoms)
    gram = basis.T @ (weights[:, None] * basis)
    coef = np.linalg.solve(gram, basis.T @ (weights * values))
    return values - basis @ coef


def _lbfgs_direction(grad, history):
    """Two-loop recursion; grad is the gradient of the function being minimized"""
    q = grad.copy()
    coefs = []
    for s, y in reversed(history):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        q -= a * y
        coefs.append((rho, a))
    if history:
        s, y = history[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y), (rho, a) in zip(history, reversed(coefs)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def solve(measure: DiscreteMeasure, config: SolverConfig | None = None, initial_values=None):
    """
    Solve for the polyhedral potential whose moment measure is the target

    Args:
        measure: target measure; must pass validate
        config: SolverConfig (defaults when omitted)
        initial_values: starting values (zeros when omitted)

    Returns:
        tuple: (canonicalized PolyhedralPotential, SolveReport)

    Raises:
        InvalidMeasureError: a validation condition fails
        ToleranceBelowNoiseError: gradient_tol below the Monte Carlo noise floor
    """
    config = config or SolverConfig()
    check = validate(measure)
    if not check.ok:
        raise InvalidMeasureError("Target measure violates the existence conditions: "
                                  + "; ".join(check.failures()))
    started = time.perf_counter()
    atoms, weights = _normalized(measure)
    evaluator = MassEvaluator(config)

    values = np.zeros(measure.size) if initial_values is None else np.asarray(initial_values, dtype=float).copy()
    if values.shape != (measure.size,):
        raise InvalidMeasureError(f"Initial values must have shape ({measure.size},)")
    values = project_gauge(values, atoms, weights)
    current = evaluator.evaluate(atoms, weights, values)

    if config.monte_carlo or measure.dim > 2:
        floor = float(np.max(current.masses.mass_errors)) / current.masses.total
        if config.gradient_tol < floor:
            raise ToleranceBelowNoiseError(
                f"gradient_tol {config.gradient_tol:.3g} is below the sampling noise floor {floor:.3g}; "
                "increase samples or loosen the tolerance")

    objectives = [current.objective]
    grad_norms = [float(np.max(np.abs(current.gradient)))]
    steps = [0.0]
    history = []
    converged = grad_norms[-1] <= config.gradient_tol
    message = "converged" if converged else ""
    iteration = 0

    while not converged and iteration < config.max_iters:
        iteration += 1
        g = current.gradient
        direction = _lbfgs_direction(-g, history) if history else g.copy()
        if float(direction @ g) <= 0:
            history.clear()
            direction = g.copy()

        accepted, t = None, 1.0
        while accepted is None:
            slope = float(direction @ g)
            noise = NOISE_FACTOR * (1.0 + abs(current.objective))
            for _ in range(config.max_line_search):
                trial_values = project_gauge(current.values + t * direction, atoms, weights)
                trial = evaluator.evaluate(atoms, weights, trial_values)
                if trial.objective >= current.objective + config.sufficient_increase * t * slope - noise:
                    accepted = trial
                    break
                t *= config.backtrack
            if accepted is None:
                if not history:
                    break
                logger.debug(f"Line search failed at iteration {iteration}; resetting curvature memory")
                history.clear()
                direction, t = g.copy(), 1.0
        if accepted is None:
            message = "line search failed"
            logger.warning(f"Line search failed at iteration {iteration}; stopping")
            break

        s = accepted.values - current.values
        y = -(accepted.gradient - g)
        if float(s @ y) > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            history.append((s, y))
            if len(history) > config.memory:
                history.pop(0)
        current = accepted
        objectives.append(current.objective)
        grad_norms.append(float(np.max(np.abs(current.gradient))))
        steps.append(t)
        converged = grad_norms[-1] <= config.gradient_tol
        if iteration % config.log_every == 0:
            logger.info(f"Iteration {iteration}: objective {current.objective:.12g}, "
                        f"max|g| {grad_norms[-1]:.3e}, step {t:.3g}")

    if converged:
        message = "converged"
        logger.info(f"Converged in {iteration} iterations (max|g| = {grad_norms[-1]:.3e})")
    else:
        message = message or "maximum iterations reached"
        logger.warning(f"Solver stopped without convergence after {iteration} iterations: {message}")

    potential, gauge = canonicalize(current.potential, config, evaluator)
    report = SolveReport(
        iterations=iteration, objective_trace=objectives, grad_norm_trace=grad_norms, step_trace=steps,
        final_weights=current.masses.weights, gauge=gauge, converged=converged,
        wall_time=time.perf_counter() - started, message=message, quadrature=config.quadrature,
        total_mass=current.masses.total,
        metadata={"active_atoms": potential.active_set(config.active_tol).tolist()})
    return potential, report


def canonicalize(potential: PolyhedralPotential, config: SolverConfig | None = None,
                 evaluator: MassEvaluator | None = None):
    """
    Fix the gauge: translate so exp(-psi) has barycenter 0, then shift so Z = 1

    Translating psi by b moves the barycenter of exp(-psi) by b, so a single
    step usually suffices; the loop repeats until the barycenter is below
    tolerance.

    Returns:
        tuple: (canonical PolyhedralPotential, GaugeTransform applied)

    Raises:
        ConvergenceError: barycenter not centered within MAX_CANONICAL_STEPS
    """
    config = config or SolverConfig()
    evaluator = evaluator or MassEvaluator(config)
    gauge = GaugeTransform.identity(potential.dim)
    current = potential
    scale = 1.0 + float(np.abs(potential.atoms).max())
    for _ in range(MAX_CANONICAL_STEPS):
        result = evaluator.masses(current)
        shift = -result.barycenter
        noise = 4.0 * float(np.max(result.first_moment_error)) / result.total if result.method == "mc" else 0.0
        if np.linalg.norm(shift) <= max(config.canonical_tol * scale, noise):
            break
        step = GaugeTransform(shift, 0.0)
        current = current.apply_gauge(step)
        gauge = gauge.compose(step)
    else:
        raise ConvergenceError(f"Barycenter not centered after {MAX_CANONICAL_STEPS} translation steps")
    normalize = GaugeTransform(np.zeros(potential.dim), -math.log(result.total))
    return current.apply_gauge(normalize), gauge.compose(normalize)


def solve_surface_variant(surface: DiscreteMeasure, config: SolverConfig | None = None, initial_values=None):
    """
    Solve for psi whose surface-variant measure |y| d mu is the given measure

    The moment measure is recovered with weights proportional to nu_i / |y_i|
    and must itself satisfy the existence conditions.

    Returns:
        tuple: (PolyhedralPotential, SolveReport, recovered moment measure)
    """
    norms = np.linalg.norm(surface.atoms, axis=1)
    if np.any(norms <= 0):
        raise InvalidMeasureError("Surface-variant atoms must be away from the origin")
    weights = surface.weights / norms
    target = DiscreteMeasure(surface.atoms, weights / weights.sum())
    potential, report = solve(target, config, initial_values)
    return potential, report, target
