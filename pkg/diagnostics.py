"""
Numerical certification of the inequalities satisfied by moment measures.

Every check returns a CheckResult with margin = rhs - lhs; a check passes
when margin >= -tolerance. Tolerances include 5 times the quadrature error
bars, so exact-mode checks are tight and sampled ones are widened.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from convex_core import GaugeTransform, PolyhedralPotential
from errors import IntegrabilityError, PreconditionError, UnknownCaseError
from forward import (cube_potential, gaussian_potential, moment_measure_sampled,
                     necessary_conditions_report, parallelepiped_potential, simplex_potential,
                     sphere_potential)
from measures import DiscreteMeasure, center, simplex_vertices
from quadrature import MassResult, exact_masses, simplex_integrals
from solver import SolverConfig, canonicalize, solve

logger = logging.getLogger(__name__)

ERROR_SIGMAS = 5.0
GALLERY_SIGMAS = 4.0
CENTER_TOL = 1e-8
DIRECTION_GRID = 4096
GALLERY_DIMS = {"cube": 2, "gaussian": 3, "sphere": 2, "simplex": 2, "parallelepiped": 2}


@dataclass(frozen=True)
class CheckResult:
    name: str
    lhs: float
    rhs: float
    tolerance: float
    metadata: dict = field(default_factory=dict)

    @property
    def margin(self):
        return self.rhs - self.lhs

    @property
    def passed(self):
        margin = self.margin
        return bool(not math.isnan(margin) and margin >= -self.tolerance)

    def to_record(self):
        return {
            "name": self.name,
            "seed": self.metadata.get("seed"),
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin": self.margin,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def _masses(potential: PolyhedralPotential) -> MassResult:
    return exact_masses(potential)


def _rel_error(result: MassResult):
    return result.total_error / result.total


def _require_same_atoms(p0: PolyhedralPotential, p1: PolyhedralPotential):
    if p0.atoms.shape != p1.atoms.shape or not np.array_equal(p0.atoms, p1.atoms):
        raise PreconditionError("Both potentials must share the same atom set")


def _require_centered(result: MassResult, potential: PolyhedralPotential, check):
    scale = 1.0 + float(np.abs(potential.atoms).max())
    offset = float(np.linalg.norm(result.barycenter))
    if offset > CENTER_TOL * scale:
        raise PreconditionError(f"{check} needs exp(-psi) centered at the origin; barycenter is off by "
                                f"{offset:.3g} (canonicalize first)")


# -- Prekopa --------------------------------------------------------------------

def check_prekopa_midpoint(u0: PolyhedralPotential, u1, lam=0.5, tol=1e-10) -> CheckResult:
    """
    log-concavity of Z along value arrays:
    log Z((1 - lam) v0 + lam v1) >= (1 - lam) log Z(v0) + lam log Z(v1)

    Args:
        u0: potential with values v0
        u1: potential on the same atoms, or a value array v1
        lam: interpolation parameter; outside [0, 1] the inequality reverses
        tol: base tolerance on the log-scale margin
    """
    if not isinstance(u1, PolyhedralPotential):
        u1 = u0.with_values(u1)
    _require_same_atoms(u0, u1)
    mixed = u0.with_values((1 - lam) * u0.values + lam * u1.values)
    r0, r1, rm = _masses(u0), _masses(u1), _masses(mixed)
    lhs = (1 - lam) * math.log(r0.total) + lam * math.log(r1.total)
    rhs = math.log(rm.total)
    noise = abs(1 - lam) * _rel_error(r0) + abs(lam) * _rel_error(r1) + _rel_error(rm)
    return CheckResult("prekopa-midpoint", lhs, rhs, tol + ERROR_SIGMAS * noise, {"lambda": lam})


def check_prekopa_translation(u0: PolyhedralPotential, gauge: GaugeTransform, lam=0.5, tol=1e-10) -> CheckResult:
    """Equality case: a gauge-transformed pair must give a zero midpoint margin"""
    inner = check_prekopa_midpoint(u0, u0.apply_gauge(gauge), lam, tol)
    return CheckResult("prekopa-translation", abs(inner.margin), 0.0, inner.tolerance,
                       {"lambda": lam, "margin": inner.margin})


def check_subgradient_prekopa(p0: PolyhedralPotential, v1, weights=None, tol=1e-9) -> CheckResult:
    """
    log Z(v0) - log Z(v1) >= sum_i mu_i (v0_i - v1_i), mu the moment measure of p0

    weights overrides the moment measure (used to plant violations). A
    non-integrable v1 makes the right side +inf and the check passes
    vacuously.
    """
    r0 = _masses(p0)
    mu_bar = r0.weights if weights is None else np.asarray(weights, dtype=float)
    v1 = np.asarray(v1, dtype=float)
    lhs = float(mu_bar @ (p0.values - v1))
    try:
        r1 = _masses(p0.with_values(v1))
    except IntegrabilityError:
        return CheckResult("subgradient-prekopa", lhs, math.inf, tol, {"vacuous": True})
    rhs = math.log(r0.total) - math.log(r1.total)
    noise = _rel_error(r0) + _rel_error(r1) + float(np.abs(p0.values - v1).max()) * float(np.sum(r0.mass_errors)) / r0.total
    return CheckResult("subgradient-prekopa", lhs, rhs, tol + ERROR_SIGMAS * noise, {"vacuous": False})


# -- Santalo and Fradelizi --------------------------------------------------------

def conjugate_integral(potential: PolyhedralPotential) -> float:
    """Integral of exp(-psi*) over conv(atoms), exact on the simplices of the lower envelope"""
    env = potential.envelope
    if env.kind == "lp" or env.simplices is None:
        raise PreconditionError("Conjugate integrals are available in dimensions 1 and 2 only")
    phi = potential.envelope_values()
    simplices = np.asarray(env.simplices)
    verts = potential.atoms[simplices]
    mass, _ = simplex_integrals(verts, -phi[simplices])
    return float(np.abs(mass).sum())


def check_santalo(potential: PolyhedralPotential, require_centered=True, tol=1e-9) -> CheckResult:
    """
    Functional Santalo: Z * int exp(-psi*) <= (2 pi)^n when exp(-psi) has barycenter 0

    Raises:
        PreconditionError: the potential is not centered and require_centered is set
    """
    result = _masses(potential)
    if require_centered:
        _require_centered(result, potential, "Santalo check")
    n = potential.dim
    conj = conjugate_integral(potential)
    product = result.total * conj
    bound = (2 * math.pi) ** n
    noise = result.total_error * conj
    return CheckResult("santalo", product, bound, tol * bound + ERROR_SIGMAS * noise,
                       {"total": result.total, "conjugate_integral": conj, "centered": require_centered})


def infimum(potential: PolyhedralPotential) -> float:
    """inf psi = -psi*(0), exact"""
    return -potential.conjugate_at(np.zeros(potential.dim))


def check_fradelizi(potential: PolyhedralPotential, require_centered=True, tol=1e-9) -> CheckResult:
    """psi(0) <= inf psi + n when exp(-psi) has barycenter 0"""
    if require_centered:
        _require_centered(_masses(potential), potential, "Fradelizi check")
    at_origin = potential.evaluate(np.zeros(potential.dim))[0]
    lowest = infimum(potential)
    return CheckResult("fradelizi", at_origin, lowest + potential.dim, tol,
                       {"inf_psi": lowest, "centered": require_centered})


# -- lower-bound lemmas -------------------------------------------------------------

def _directions(dim, count, seed=0):
    if dim == 2:
        theta = np.pi * np.arange(count) / count
        return np.column_stack([np.cos(theta), np.sin(theta)])
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((count, dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def spread_minimum(measure: DiscreteMeasure, grid=DIRECTION_GRID):
    """
    m = min over unit theta of int |x . theta| dmu(x), mu normalized

    In the plane the minimum sits at a direction orthogonal to some atom
    (the function is concave between those kinks), so those directions are
    added to the angular grid. In dimension >= 3 the best grid direction is
    refined locally.
    """
    w = measure.weights / measure.total_mass
    Y = measure.atoms
    n = measure.dim
    if n == 1:
        return float(w @ np.abs(Y[:, 0]))

    def spread(thetas):
        return np.abs(thetas @ Y.T) @ w

    thetas = _directions(n, grid if n == 2 else grid * n)
    if n == 2:
        norms = np.linalg.norm(Y, axis=1)
        kinks = np.column_stack([-Y[:, 1], Y[:, 0]])[norms > 0] / norms[norms > 0, None]
        thetas = np.vstack([thetas, kinks])
    values = spread(thetas)
    best = float(values.min())
    if n > 2:
        start = thetas[int(np.argmin(values))]
        found = minimize(lambda t: float(spread((t / np.linalg.norm(t))[None, :])[0]), start, method="Nelder-Mead",
                         options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
        best = min(best, float(found.fun))
    return best


def lower_bound_constant(measure: DiscreteMeasure, grid=DIRECTION_GRID):
    """
    c = kappa_n^(1/n) m / (4 e^(1/n)), kappa_n the volume of the unit ball

    Returns:
        tuple: (c, m)
    """
    n = measure.dim
    m = spread_minimum(measure, grid)
    log_kappa = 0.5 * n * math.log(math.pi) - gammaln(n / 2 + 1)
    return math.exp(log_kappa / n) * m / (4 * math.exp(1.0 / n)), m


def check_lower_bound_lemma(measure: DiscreteMeasure, potential: PolyhedralPotential, constant_factor=1.0,
                            tol=1e-9):
    """
    Both lower bounds on a convex phi with phi(0) = 0:
      (int exp(-phi))^(1/n) (int (phi - inf phi) dmu + 1) >= c
      int phi dmu >= (c / 2 pi) (int exp(-psi))^(1/n) - (n + 1)
    where phi is the convex envelope of the atom values and psi its conjugate.

    Args:
        measure: probability-normalized internally; same atoms as potential
        potential: supplies the values; shifted so that phi(0) = 0
        constant_factor: multiplies c (values > 1 plant a violation)

    Returns:
        list: two CheckResults
    """
    if measure.atoms.shape != potential.atoms.shape or not np.allclose(measure.atoms, potential.atoms):
        raise PreconditionError("Measure and potential must share the same atoms")
    n = measure.dim
    w = measure.weights / measure.total_mass
    shift = potential.conjugate_at(np.zeros(n))
    if not np.isfinite(shift):
        raise PreconditionError("The origin must lie in the convex hull of the atoms")
    shifted = potential.with_values(potential.values - shift)
    phi = shifted.envelope_values()
    lowest = float(phi.min())
    conj = conjugate_integral(shifted)
    result = _masses(shifted)
    c, m = lower_bound_constant(measure)
    c *= constant_factor
    meta = {"c_mu": c, "m_mu": m, "constant_factor": constant_factor}
    integral_phi = float(w @ phi)
    first = CheckResult("lower-bound-product", c, conj ** (1.0 / n) * (float(w @ (phi - lowest)) + 1.0), tol,
                        dict(meta))
    noise = (c / (2 * math.pi)) * result.total ** (1.0 / n) * _rel_error(result) / n
    second = CheckResult("lower-bound-integral", (c / (2 * math.pi)) * result.total ** (1.0 / n) - (n + 1),
                         integral_phi, tol + ERROR_SIGMAS * noise, dict(meta))
    return [first, second]


# -- integration by parts -------------------------------------------------------------

def check_integration_by_parts(potential: PolyhedralPotential, tol=1e-9) -> CheckResult:
    """
    int x . grad psi exp(-psi) <= n Z, computed as sum_i y_i . (first moment of cell i)

    The two sides agree for polyhedral potentials; the residual is kept in
    the metadata.
    """
    result = _masses(potential)
    n = potential.dim
    lhs = float(np.sum(potential.atoms * result.cell_first_moments))
    rhs = n * result.total
    noise = n * result.total_error + float(np.abs(potential.atoms).sum(axis=1).max()) * float(
        np.sum(result.first_moment_error))
    return CheckResult("integration-by-parts", lhs, rhs, tol * rhs + ERROR_SIGMAS * noise,
                       {"residual": rhs - lhs, "method": result.method})


# -- gallery ------------------------------------------------------------------------

def _within(name, estimate, se, target, meta, sigmas=GALLERY_SIGMAS):
    return CheckResult(name, float(abs(estimate - target)), float(sigmas * se), 1e-12, dict(meta))


def _moment_checks(case, cloud, second_moment, meta):
    results = []
    means, mean_se = cloud.statistic(lambda Y: Y)
    for j in range(cloud.dim):
        results.append(_within(f"{case}:mean[{j}]", means[j], mean_se[j], 0.0, meta))
    if second_moment is not None:
        for j in range(cloud.dim):
            for k in range(j, cloud.dim):
                est, se = cloud.statistic(lambda Y: Y[:, j] * Y[:, k])
                results.append(_within(f"{case}:second[{j},{k}]", est, se, second_moment[j, k], meta))
    return results


def _support_check(name, violations, meta):
    return CheckResult(name, float(violations), 0.0, 0.0, dict(meta))


def random_linear_map(dim, seed):
    rng = np.random.default_rng([seed, 7])
    while True:
        T = np.eye(dim) + 0.5 * rng.standard_normal((dim, dim))
        if np.linalg.svd(T, compute_uv=False).min() > 0.2:
            return T


def gallery_run(case, dim=None, samples=1_000_000, seed=0):
    """
    Compare the sampled moment measure of a closed-form potential with its known target

    Cases: gaussian (standard Gaussian), cube (uniform on [-1, 1]^n), sphere
    (unit sphere), simplex (uniform on the regular simplex), parallelepiped
    (image of the cube case under a random linear map).

    Raises:
        UnknownCaseError: case is not in the gallery
    """
    if case not in GALLERY_DIMS:
        raise UnknownCaseError(f"Unknown gallery case '{case}'; expected one of {sorted(GALLERY_DIMS)}")
    n = dim or GALLERY_DIMS[case]
    meta = {"case": case, "dim": n, "samples": samples, "seed": seed}
    if case == "gaussian":
        cloud = moment_measure_sampled(gaussian_potential(n), samples, seed)
        return _moment_checks(case, cloud, np.eye(n), meta)
    if case == "cube":
        cloud = moment_measure_sampled(cube_potential(n), samples, seed)
        results = _moment_checks(case, cloud, None, meta)
        for j in range(n):
            est, se = cloud.statistic(lambda Y: np.abs(Y[:, j]))
            results.append(_within(f"cube:mean_abs[{j}]", est, se, 0.5, meta))
        outside = np.count_nonzero(np.abs(cloud.atoms).max(axis=1) > 1.0 + 1e-12)
        results.append(_support_check("cube:support", outside, meta))
        return results
    if case == "sphere":
        cloud = moment_measure_sampled(sphere_potential(n), samples, seed)
        results = _moment_checks(case, cloud, None, meta)
        radii = np.linalg.norm(cloud.atoms[cloud.weights > 0], axis=1)
        results.append(CheckResult("sphere:radius", float(np.abs(radii - 1.0).max()), 1e-9, 0.0, dict(meta)))
        return results
    if case == "simplex":
        corners = simplex_vertices(n).atoms
        cloud = moment_measure_sampled(simplex_potential(n), samples, seed)
        second = corners.T @ corners / ((n + 1) * (n + 2))
        results = _moment_checks(case, cloud, second, meta)
        outside = np.count_nonzero((cloud.atoms @ corners.T).min(axis=1) < -1.0 / n - 1e-9)
        results.append(_support_check("simplex:support", outside, meta))
        return results
    T = random_linear_map(n, seed)
    cloud = moment_measure_sampled(parallelepiped_potential(T), samples, seed)
    results = _moment_checks(case, cloud, T.T @ T / 3.0, meta)
    cube_coords = np.linalg.solve(T.T, cloud.atoms.T).T
    outside = np.count_nonzero(np.abs(cube_coords).max(axis=1) > 1.0 + 1e-9)
    results.append(_support_check("parallelepiped:support", outside, meta))
    return results


# -- random instances -----------------------------------------------------------------

def random_potential(seed, count=8, dim=2, value_scale=0.5) -> PolyhedralPotential:
    """Gaussian atoms centered at their mean (so 0 is interior to the hull) with Gaussian values"""
    rng = np.random.default_rng(seed)
    atoms = rng.standard_normal((count, dim))
    atoms -= atoms.mean(axis=0)
    return PolyhedralPotential(atoms, value_scale * rng.standard_normal(count))


def random_measure(seed, count=8, dim=2) -> DiscreteMeasure:
    rng = np.random.default_rng(seed)
    atoms = rng.standard_normal((count, dim))
    weights = rng.uniform(0.5, 1.5, size=count)
    return center(DiscreteMeasure(atoms, weights / weights.sum()))


# -- planted violations ---------------------------------------------------------------

def _expect_failure(result: CheckResult) -> CheckResult:
    """Wraps a planted violation: passes exactly when the inner check fails"""
    return CheckResult(f"negative:{result.name}", result.margin, -result.tolerance, 0.0,
                       {**result.metadata, "planted_margin": result.margin})


def _translate_until_failing(potential, check, limit=64.0):
    direction = -potential.atoms[int(np.argmax(np.linalg.norm(potential.atoms, axis=1)))]
    direction = direction / np.linalg.norm(direction)
    t = 1.0
    while True:
        moved = potential.apply_gauge(GaugeTransform(t * direction, 0.0))
        result = check(moved, require_centered=False)
        if not result.passed or t >= limit:
            return result
        t *= 2.0


def negative_controls(seed=0, samples=100_000):
    """Every checker evaluated on an input built to violate it"""
    results = []
    p0 = random_potential(seed)
    rng = np.random.default_rng([seed, 1])
    v1 = p0.values + rng.standard_normal(p0.size)
    results.append(check_prekopa_midpoint(p0, v1, lam=2.0))

    truth = _masses(p0).weights
    wrong = 0.5 * truth
    wrong[int(np.argmin(truth))] += 0.5
    results.append(check_subgradient_prekopa(p0, p0.values - 1e-3 * (wrong - truth), weights=wrong))

    canonical, _ = canonicalize(random_potential(seed, count=10))
    results.append(_translate_until_failing(canonical, check_santalo))
    results.append(_translate_until_failing(canonical, check_fradelizi))

    measure = random_measure(seed)
    test = PolyhedralPotential(measure.atoms, 0.5 * rng.standard_normal(measure.size))
    honest = check_lower_bound_lemma(measure, test)[0]
    inflate = 2.0 * honest.rhs / honest.lhs + 2.0
    results.append(check_lower_bound_lemma(measure, test, constant_factor=inflate)[0])

    cloud = moment_measure_sampled(gaussian_potential(2), samples, seed)
    truncated = cloud.restrict(cloud.atoms[:, 0] <= 0)
    report = necessary_conditions_report(truncated)
    bary_se = float(np.linalg.norm(truncated.barycenter_error()))
    results.append(CheckResult("necessary-conditions", float(np.linalg.norm(truncated.barycenter)),
                               max(report.tolerance, GALLERY_SIGMAS * bary_se), 0.0,
                               {"barycenter_ok": report.barycenter_ok}))
    return [_expect_failure(r) for r in results]


# -- sweeps -----------------------------------------------------------------------------

def _prekopa_job(seed, **_):
    p0 = random_potential(seed)
    rng = np.random.default_rng([seed, 2])
    v1 = 0.5 * rng.standard_normal(p0.size)
    gauge = GaugeTransform(rng.standard_normal(p0.dim), float(rng.standard_normal()))
    return [check_prekopa_midpoint(p0, v1), check_prekopa_translation(p0, gauge)]


def _subgradient_job(seed, **_):
    measure = random_measure(seed, count=6)
    p0, _ = solve(measure, SolverConfig(gradient_tol=1e-9))
    rng = np.random.default_rng([seed, 3])
    return [check_subgradient_prekopa(p0, p0.values + 0.1 * rng.standard_normal(p0.size))]


def _santalo_job(seed, **_):
    canonical, _ = canonicalize(random_potential(seed, count=10))
    return [check_santalo(canonical)]


def _fradelizi_job(seed, **_):
    canonical, _ = canonicalize(random_potential(seed, count=10))
    return [check_fradelizi(canonical)]


def _lower_bound_job(seed, **_):
    measure = random_measure(seed)
    rng = np.random.default_rng([seed, 4])
    test = PolyhedralPotential(measure.atoms, 0.5 * rng.standard_normal(measure.size))
    return check_lower_bound_lemma(measure, test)


def _ibp_job(seed, **_):
    return [check_integration_by_parts(random_potential(seed))]


def _gallery_job(seed, samples=200_000, **_):
    results = []
    for case in GALLERY_DIMS:
        results.extend(gallery_run(case, samples=samples, seed=seed))
    return results


def _negative_job(seed, samples=100_000, **_):
    return negative_controls(seed, samples=samples)


SUITES = {
    "prekopa": _prekopa_job,
    "subgradient": _subgradient_job,
    "santalo": _santalo_job,
    "fradelizi": _fradelizi_job,
    "lower-bound": _lower_bound_job,
    "ibp": _ibp_job,
    "gallery": _gallery_job,
    "negative-controls": _negative_job,
}


def run_suite(name, seeds, threads=1, **options):
    """
    Run a named sweep over seeds in a thread pool

    Args:
        name: one of SUITES
        seeds: iterable of integer seeds
        threads: worker threads
        options: forwarded to the suite (e.g. samples)

    Returns:
        list: CheckResults in seed order, each tagged with its seed
    """
    if name not in SUITES:
        raise UnknownCaseError(f"Unknown check suite '{name}'; expected one of {sorted(SUITES)}")
    job = SUITES[name]
    seeds = [int(s) for s in seeds]

    def run(seed):
        return [replace(r, metadata={**r.metadata, "seed": seed}) for r in job(seed, **options)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            batches = list(pool.map(run, seeds))
    else:
        batches = [run(s) for s in seeds]
    results = [r for batch in batches for r in batch]
    failed = [r for r in results if not r.passed]
    logger.info(f"Suite {name}: {len(results) - len(failed)}/{len(results)} checks passed")
    for r in failed:
        logger.warning(f"Failed {r.name} (seed {r.metadata.get('seed')}): margin {r.margin:.3g}, "
                       f"tolerance {r.tolerance:.3g}")
    return results


def write_ledger(results, path):
    """Write CheckResults to a CSV ledger (name, seed, lhs, rhs, margin, tolerance, passed)"""
    from file_processor import FileProcessor
    return FileProcessor().save_ledger(results, path)
