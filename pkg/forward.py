"""
Forward moment measures: the push-forward of exp(-psi) dx under grad psi.

Polyhedral potentials push forward to atoms weighted by cell masses; analytic
potentials are handled by self-normalized importance sampling, reporting
standard errors for requested statistics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq, minimize_scalar
from scipy.special import logsumexp, softmax

from convex_core import PolyhedralPotential
from errors import (ImportanceVarianceError, IntegrabilityError, InvalidPotentialError,
                    NonMonotoneBranchError)
from measures import DiscreteMeasure, ValidationReport, simplex_vertices, validate
from quadrature import (DEFAULT_BLOCK_SIZE, DEFAULT_VARIANCE_THRESHOLD, ProposalSpec, draw_proposal,
                        exact_masses)

logger = logging.getLogger(__name__)

FD_STEP = 1e-6
NECESSARY_SIGMAS = 4.0
CONVEXITY_TRIALS = 64


@dataclass(frozen=True, eq=False)
class AnalyticPotential:
    """
    A smooth convex potential given by vectorized callables

    value maps an (M, n) array to (M,) values; gradient to (M, n). When
    gradient is None a central finite difference is used. tail_rate is a
    lower bound alpha on the growth psi(x) >= alpha |x| - beta and sets the
    sampling proposal.
    """
    name: str
    value: Callable
    dim: int
    tail_rate: float
    gradient: Callable | None = None

    def evaluate(self, X):
        return np.asarray(self.value(np.asarray(X, dtype=float).reshape(-1, self.dim)), dtype=float)

    def grad(self, X):
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        if self.gradient is not None:
            return np.asarray(self.gradient(X), dtype=float)
        out = np.empty_like(X)
        for j in range(self.dim):
            step = np.zeros(self.dim)
            step[j] = FD_STEP
            out[:, j] = (self.evaluate(X + step) - self.evaluate(X - step)) / (2 * FD_STEP)
        return out

    def check_convexity(self, trials=200, seed=0, scale=3.0, tol=1e-9, strict=False):
        """
        Chord convexity on random pairs; returns the worst violation (<= tol means convex)

        With strict=True a violation beyond tol (relative to the chord values)
        raises InvalidPotentialError instead of logging a warning.
        """
        rng = np.random.default_rng(seed)
        X = rng.normal(scale=scale, size=(trials, self.dim))
        Y = rng.normal(scale=scale, size=(trials, self.dim))
        lam = rng.uniform(size=(trials, 1))
        mid = self.evaluate(lam * X + (1 - lam) * Y)
        chord = lam[:, 0] * self.evaluate(X) + (1 - lam[:, 0]) * self.evaluate(Y)
        worst = float(np.max(mid - chord))
        if worst > tol * (1.0 + np.abs(chord).max()):
            message = f"Potential {self.name} fails chord convexity by {worst:.3g}"
            if strict:
                logger.error(message)
                raise InvalidPotentialError(message)
            logger.warning(message)
        return worst


# -- gallery ----------------------------------------------------------------------

def gaussian_potential(dim) -> AnalyticPotential:
    return AnalyticPotential(
        "gaussian", lambda X: 0.5 * np.sum(X * X, axis=1), dim, tail_rate=1.0, gradient=lambda X: X)


def _log_cosh(t):
    t = np.abs(t)
    return t + np.log1p(np.exp(-2 * t)) - math.log(2.0)


def cube_potential(dim) -> AnalyticPotential:
    """psi(x) = sum_i 2 log cosh(x_i / 2); grad psi is uniform on [-1, 1]^n"""
    return AnalyticPotential(
        "cube", lambda X: np.sum(2 * _log_cosh(X / 2), axis=1), dim, tail_rate=1.0,
        gradient=lambda X: np.tanh(X / 2))


def simplex_potential(dim) -> AnalyticPotential:
    """psi(x) = (n+1) log sum_i exp(x . v_i / (n+1)) over the regular simplex vertices v_i"""
    corners = simplex_vertices(dim).atoms
    scale = dim + 1

    def value(X):
        return scale * logsumexp(X @ corners.T / scale, axis=1)

    def gradient(X):
        return softmax(X @ corners.T / scale, axis=1) @ corners

    # grows at least like the inradius of the simplex
    return AnalyticPotential("simplex", value, dim, tail_rate=1.0 / dim, gradient=gradient)


def sphere_potential(dim) -> AnalyticPotential:
    def gradient(X):
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        return X / np.where(norms > 0, norms, 1.0)

    return AnalyticPotential("sphere", lambda X: np.linalg.norm(X, axis=1), dim, tail_rate=1.0,
                             gradient=gradient)


def parallelepiped_potential(matrix) -> AnalyticPotential:
    """Cube potential composed with an invertible linear map T; grad = T^t tanh(Tx / 2)"""
    T = np.asarray(matrix, dtype=float)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise InvalidPotentialError("Parallelepiped map must be a square matrix")
    smallest = float(np.linalg.svd(T, compute_uv=False).min())
    if smallest <= 1e-12:
        raise InvalidPotentialError("Parallelepiped map must be invertible")
    cube = cube_potential(T.shape[0])
    return AnalyticPotential(
        "parallelepiped", lambda X: cube.evaluate(X @ T.T), T.shape[0], tail_rate=smallest,
        gradient=lambda X: np.tanh((X @ T.T) / 2) @ T)


GALLERY = {
    "gaussian": gaussian_potential,
    "cube": cube_potential,
    "simplex": simplex_potential,
    "sphere": sphere_potential,
}


# -- estimates --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MomentMeasureEstimate:
    """
    A computed moment measure, normalized to total mass 1.

    kind "exact" holds the atoms y_i with weights m_i / Z (weight_errors from
    the quadrature); kind "sampled" holds a weighted cloud of grad psi(x_k)
    with self-normalized importance weights. raw_total is the un-normalized
    mass (Z for a potential, nu(R^n) for a surface variant).
    """
    atoms: np.ndarray
    weights: np.ndarray
    kind: str
    raw_total: float
    raw_total_error: float = 0.0
    weight_errors: np.ndarray | None = None
    atom_indices: np.ndarray | None = None
    label: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.atoms.shape[1]

    @property
    def size(self):
        return self.atoms.shape[0]

    @property
    def barycenter(self):
        return self.weights @ self.atoms

    @property
    def effective_sample_size(self):
        return float(1.0 / np.sum(self.weights ** 2))

    def statistic(self, func):
        """
        Weighted mean of func over the measure, with its standard error

        Args:
            func: maps the (M, n) atom array to (M,) or (M, k) values

        Returns:
            tuple: (estimate, standard error), scalars or (k,) arrays
        """
        f = np.asarray(func(self.atoms), dtype=float)
        w = self.weights if f.ndim == 1 else self.weights[:, None]
        estimate = np.sum(w * f, axis=0)
        if self.kind == "sampled":
            se = np.sqrt(np.sum((w * (f - estimate)) ** 2, axis=0))
        elif self.weight_errors is not None:
            e = self.weight_errors if f.ndim == 1 else self.weight_errors[:, None]
            se = np.sqrt(np.sum((e * (f - estimate)) ** 2, axis=0))
        else:
            se = np.zeros_like(estimate)
        return estimate, se

    def barycenter_error(self):
        return self.statistic(lambda Y: Y)[1]

    def restrict(self, mask) -> "MomentMeasureEstimate":
        """Keep the atoms selected by mask and renormalize"""
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("Restriction removes every atom")
        w = self.weights[mask]
        kept = w.sum()
        errors = None if self.weight_errors is None else self.weight_errors[mask] / kept
        indices = None if self.atom_indices is None else self.atom_indices[mask]
        return replace(self, atoms=self.atoms[mask], weights=w / kept, weight_errors=errors,
                       atom_indices=indices, raw_total=self.raw_total * kept,
                       raw_total_error=self.raw_total_error * kept)

    def to_measure(self) -> DiscreteMeasure:
        keep = self.weights > 0
        return DiscreteMeasure(self.atoms[keep], self.weights[keep])

    def summary(self):
        bary, bary_se = self.statistic(lambda Y: Y)
        return {
            "kind": self.kind,
            "label": self.label,
            "size": self.size,
            "raw_total": self.raw_total,
            "raw_total_error": self.raw_total_error,
            "barycenter": np.atleast_1d(bary).tolist(),
            "barycenter_error": np.atleast_1d(bary_se).tolist(),
            "effective_sample_size": self.effective_sample_size,
            **self.metadata,
        }


def moment_measure_polyhedral(potential: PolyhedralPotential, samples=1_000_000, seed=0, workers=1,
                              **mc_options) -> MomentMeasureEstimate:
    """
    Moment measure of a polyhedral potential: sum_i (m_i / Z) delta_{y_i}

    Exact in dimensions 1 and 2, importance sampling elsewhere. Only atoms
    with positive mass are kept.
    """
    witness = potential.check_integrability()
    if not witness.integrable:
        raise IntegrabilityError(f"exp(-psi) is not integrable (alpha = {witness.alpha:.3g})")
    result = exact_masses(potential, workers=workers, samples=samples, seed=seed, **mc_options)
    keep = np.flatnonzero(result.masses > 0)
    weights = result.masses[keep] / result.total
    errors = result.mass_errors[keep] / result.total
    return MomentMeasureEstimate(
        potential.atoms[keep], weights, "exact", result.total, result.total_error,
        weight_errors=errors, atom_indices=keep, label="polyhedral",
        metadata={"method": result.method, "samples": result.samples})


def moment_measure_sampled(potential: AnalyticPotential, samples=1_000_000, seed=0,
                           block_size=DEFAULT_BLOCK_SIZE, variance_threshold=DEFAULT_VARIANCE_THRESHOLD,
                           proposal: ProposalSpec | None = None) -> MomentMeasureEstimate:
    """
    Sampled moment measure of an analytic potential

    Draws from the same two-sided exponential proposal as the Monte Carlo
    quadrature (rate tail_rate / 2 unless given), weights by exp(-psi) / q
    and maps every draw through grad psi. The potential is spot-checked for
    convexity first; InvalidPotentialError if the check fails.
    """
    potential.check_convexity(trials=CONVEXITY_TRIALS, seed=seed, strict=True)
    spec = proposal or ProposalSpec()
    rate = spec.rate if spec.rate is not None else potential.tail_rate / 2.0
    if rate <= 0:
        raise IntegrabilityError(f"Potential {potential.name} has no positive growth rate")
    center = spec.center if spec.center is not None else (0.0,) * potential.dim
    draws = draw_proposal(ProposalSpec(rate, tuple(center)), potential.dim, samples, seed, block_size)
    X = np.concatenate(draws.blocks)
    log_q = np.concatenate(draws.log_densities)
    log_w = -potential.evaluate(X) - log_q
    finite = np.isfinite(log_w)
    if not finite.all():
        raise ImportanceVarianceError(f"{np.count_nonzero(~finite)} importance weights are not finite")
    log_norm = logsumexp(log_w)
    weights = np.exp(log_w - log_norm)
    relative_variance = len(weights) * float(np.sum(weights ** 2)) - 1.0
    if relative_variance > variance_threshold:
        raise ImportanceVarianceError(
            f"Importance weights have relative variance {relative_variance:.3g}; "
            "use a heavier-tailed proposal (smaller rate)")
    raw_total = math.exp(log_norm) / len(weights)
    # standard error of the plain importance estimate of Z
    raw_error = raw_total * math.sqrt(max(relative_variance, 0.0) / len(weights))
    ess = 1.0 / float(np.sum(weights ** 2))
    logger.info(f"Sampled {potential.name}: {len(weights)} draws, effective sample size {ess:.0f}")
    return MomentMeasureEstimate(
        potential.grad(X), weights, "sampled", raw_total, raw_error, label=potential.name,
        metadata={"samples": int(len(weights)), "seed": int(seed), "proposal_rate": float(rate)})


def necessary_conditions_report(estimate: MomentMeasureEstimate, tol=1e-9,
                                sigmas=NECESSARY_SIGMAS) -> ValidationReport:
    """Barycenter and span conditions on a computed moment measure, with tolerance widened to sigmas standard errors"""
    error = float(np.linalg.norm(estimate.barycenter_error()))
    return validate(estimate.to_measure(), tol=max(tol, sigmas * error), span_tol=tol)


def surface_variant(estimate: MomentMeasureEstimate) -> MomentMeasureEstimate:
    """
    Reweight a moment measure by |y|

    raw_total becomes the mass of the variant relative to the normalized
    moment measure, i.e. the integral of |grad psi| exp(-psi) / Z.
    """
    norms = np.linalg.norm(estimate.atoms, axis=1)
    mass, mass_se = estimate.statistic(lambda Y: np.linalg.norm(Y, axis=1))
    if mass <= 0:
        raise ValueError("Surface variant of a measure concentrated at the origin is zero")
    weights = estimate.weights * norms / mass
    errors = None
    if estimate.weight_errors is not None:
        errors = estimate.weight_errors * norms / mass
    return replace(estimate, weights=weights, weight_errors=errors, raw_total=float(mass),
                   raw_total_error=float(mass_se), label=f"{estimate.label}:surface")


# -- one-dimensional identity -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class OneDimMeasure:
    """Probability measure on an interval with density, used by the one-dimensional identity check"""
    name: str
    density: Callable
    lower: float
    upper: float

    def total(self):
        return quad(self.density, self.lower, self.upper, limit=200)[0]

    def upper_first_moment(self, y):
        """int_y^upper t dmu(t)"""
        return quad(lambda t: t * self.density(t), y, self.upper, limit=200, epsabs=1e-14, epsrel=1e-13)[0]


def standard_gaussian_measure() -> OneDimMeasure:
    return OneDimMeasure("gaussian", lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi),
                         -math.inf, math.inf)


def uniform_measure(lower=-1.0, upper=1.0) -> OneDimMeasure:
    width = upper - lower
    return OneDimMeasure("uniform", lambda t: 1.0 / width, lower, upper)


def normalized_gaussian_1d() -> AnalyticPotential:
    """x^2 / 2 + log sqrt(2 pi), so that exp(-psi) integrates to 1"""
    shift = 0.5 * math.log(2 * math.pi)
    return AnalyticPotential("gaussian-1d", lambda X: 0.5 * X[:, 0] ** 2 + shift, 1, tail_rate=1.0,
                             gradient=lambda X: X.copy())


def normalized_cube_1d() -> AnalyticPotential:
    """2 log cosh(x / 2) + log 4, whose moment measure is uniform on [-1, 1]"""
    return AnalyticPotential("cube-1d", lambda X: 2 * _log_cosh(X[:, 0] / 2) + math.log(4.0), 1,
                             tail_rate=1.0, gradient=lambda X: np.tanh(X / 2))


IDENTITY_CONVENTIONS = (
    "mu is a probability measure; psi is normalized so that the integral of exp(-psi) is 1; "
    "the local inverse of psi is taken on its increasing branch")


@dataclass(frozen=True, eq=False)
class IdentityResidualReport:
    grid: np.ndarray
    residuals: np.ndarray
    max_residual: float
    potential_mass: float
    measure_mass: float
    conventions: str = IDENTITY_CONVENTIONS

    def to_dict(self):
        return {
            "conventions": self.conventions,
            "max_residual": self.max_residual,
            "potential_mass": self.potential_mass,
            "measure_mass": self.measure_mass,
            "grid": self.grid.tolist(),
            "residuals": self.residuals.tolist(),
        }


class _IncreasingBranch:
    """Inverse of a one-dimensional convex psi on [argmin psi, inf)"""

    def __init__(self, potential: AnalyticPotential, grid_points=400):
        self.psi = lambda x: float(potential.evaluate(np.array([[x]]))[0])
        found = minimize_scalar(self.psi, bracket=(-1.0, 1.0), tol=1e-12)
        self.start = float(found.x)
        self.minimum = self.psi(self.start)
        grid = self.start + np.geomspace(1e-4, 50.0, grid_points)
        values = potential.evaluate(grid[:, None])
        if np.any(np.diff(values) <= 0):
            bad = grid[1:][np.diff(values) <= 0][0]
            raise NonMonotoneBranchError(f"psi is not increasing to the right of its minimum near x = {bad:.4g}")

    def __call__(self, s):
        if s < self.minimum:
            return math.nan
        hi = self.start + 1.0
        while self.psi(hi) < s:
            hi = self.start + 2 * (hi - self.start)
            if hi - self.start > 1e8:
                raise NonMonotoneBranchError("psi does not reach the requested level")
        return brentq(lambda x: self.psi(x) - s, self.start, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)


def one_dim_identity_residual(potential: AnalyticPotential, measure: OneDimMeasure, grid,
                              step=2e-6) -> IdentityResidualReport:
    """
    Residual of (psi^{-1})'(-log int_y^inf t dmu(t)) = 1 / y on a grid of y > 0

    The derivative of the inverse is a central difference of the increasing
    branch inverse. Points whose level falls below min psi get an infinite
    residual.
    """
    if potential.dim != 1:
        raise InvalidPotentialError("The identity check is one-dimensional")
    grid = np.asarray(grid, dtype=float)
    if np.any(grid <= 0):
        raise ValueError("Grid points must be positive")
    potential_mass = quad(lambda x: math.exp(-potential.evaluate(np.array([[x]]))[0]), -np.inf, np.inf)[0]
    measure_mass = measure.total()
    if abs(potential_mass - 1) > 1e-6 or abs(measure_mass - 1) > 1e-6:
        logger.warning(f"Identity check expects normalized inputs: int exp(-psi) = {potential_mass:.6g}, "
                       f"mu(R) = {measure_mass:.6g}")
    inverse = _IncreasingBranch(potential)
    residuals = np.empty(len(grid))
    for k, y in enumerate(grid):
        tail = measure.upper_first_moment(y)
        if tail <= 0:
            residuals[k] = math.inf
            continue
        level = -math.log(tail)
        lo, hi = inverse(level - step), inverse(level + step)
        if math.isnan(lo) or math.isnan(hi):
            residuals[k] = math.inf
            continue
        residuals[k] = abs((hi - lo) / (2 * step) - 1.0 / y)
    return IdentityResidualReport(grid, residuals, float(residuals.max()), potential_mass, measure_mass)
