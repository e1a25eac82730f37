"""
Integrals of exp(-psi) for polyhedral potentials.

On the cell of atom i the integrand is exp(v_i - y_i . x), an exponential of
an affine function, so cell masses and first moments have closed forms over
simplices. Planar cells are clipped to a box whose truncation error is
certified by a tail bound; in dimension 1 the cells are intervals integrated
exactly; in higher dimension masses are estimated by importance sampling.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq
from scipy.special import exprel, gammaincc, gammaln

from cells2d import CellDecomposition, build_cells, clip_cell
from convex_core import PolyhedralPotential
from errors import (DegeneratePolygonError, DivergentIntegralError, ImportanceVarianceError,
                    IntegrabilityError, InvalidPotentialError)

logger = logging.getLogger(__name__)

TAIL_REL_TOL = 1e-14
DEFAULT_BLOCK_SIZE = 65536
DEFAULT_VARIANCE_THRESHOLD = 1e6


@dataclass(frozen=True, eq=False)
class MassResult:
    """Cell masses m_i, total Z and first moments, with error bounds.

    Errors are certified truncation bounds on the exact paths (0 in
    dimension 1) and standard errors on the Monte Carlo path.
    """
    masses: np.ndarray
    total: float
    mass_errors: np.ndarray
    total_error: float
    first_moment: np.ndarray
    first_moment_error: np.ndarray
    cell_first_moments: np.ndarray
    method: str
    samples: int = 0
    radius: float | None = None

    @property
    def weights(self):
        """Normalized masses m_i / Z"""
        return self.masses / self.total

    @property
    def barycenter(self):
        return self.first_moment / self.total

    def to_dict(self):
        return {
            "method": self.method,
            "total": self.total,
            "total_error": self.total_error,
            "masses": self.masses.tolist(),
            "mass_errors": self.mass_errors.tolist(),
            "first_moment": self.first_moment.tolist(),
            "first_moment_error": self.first_moment_error.tolist(),
            "samples": self.samples,
            "radius": self.radius,
        }


# -- simplex integrals ------------------------------------------------------------

def exp_divided_differences(nodes):
    """
    Divided differences exp[z_0, ..., z_k] for a batch of node tuples

    Uses the exponential of the bidiagonal matrix with the nodes on the
    diagonal and ones above it: its top-right entry is the divided
    difference, with no removable singularity at repeated nodes.

    Args:
        nodes: (T, k+1) array

    Returns:
        np.ndarray: (T,) divided differences
    """
    z = np.atleast_2d(np.asarray(nodes, dtype=float))
    count, order = z.shape
    if count == 0:
        return np.empty(0)
    shift = z.max(axis=1)
    mats = np.zeros((count, order, order))
    idx = np.arange(order)
    mats[:, idx, idx] = z - shift[:, None]
    mats[:, idx[:-1], idx[1:]] = 1.0
    return expm(mats)[:, 0, -1] * np.exp(shift)


def simplex_integrals(vertices, values):
    """
    Integrals of exp(f) and x exp(f) over a batch of simplices, f affine

    Args:
        vertices: (T, n+1, n) simplex vertices
        values: (T, n+1) values of f at the vertices

    Returns:
        tuple: (mass (T,), first moment (T, n)) using signed volumes
    """
    verts = np.asarray(vertices, dtype=float)
    vals = np.asarray(values, dtype=float)
    count, corners, dim = verts.shape
    if count == 0:
        return np.empty(0), np.empty((0, dim))
    edges = verts[:, 1:, :] - verts[:, :1, :]
    # n! |S| = |det(edges)|; sign kept so fans of non-convex polygons cancel correctly
    scaled_volume = np.linalg.det(edges) if dim > 1 else edges[:, 0, 0]
    mass = scaled_volume * exp_divided_differences(vals)
    moment = np.zeros((count, dim))
    for k in range(corners):
        nodes = np.column_stack([vals, vals[:, k]])
        moment += exp_divided_differences(nodes)[:, None] * verts[:, k, :]
    moment *= scaled_volume[:, None]
    return mass, moment


def _fan(polygon):
    """Triangles (p0, p_k, p_k+1) of a polygon fan"""
    k = len(polygon)
    if k < 3:
        return np.empty((0, 3, 2))
    idx = np.arange(1, k - 1)
    return np.stack([np.repeat(polygon[:1], k - 2, axis=0), polygon[idx], polygon[idx + 1]], axis=1)


def _segments_cross(p, q, r, s):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    d1, d2 = orient(r, s, p), orient(r, s, q)
    d3, d4 = orient(p, q, r), orient(p, q, s)
    return d1 * d2 < 0 and d3 * d4 < 0


def is_self_intersecting(polygon):
    poly = np.asarray(polygon, dtype=float)
    k = len(poly)
    for i in range(k):
        for j in range(i + 2, k):
            if i == 0 and j == k - 1:
                continue
            if _segments_cross(poly[i], poly[(i + 1) % k], poly[j], poly[(j + 1) % k]):
                return True
    return False


def _cone_integral(apex, r1, r2, a, b):
    rate1, rate2 = float(a @ r1), float(a @ r2)
    jac = abs(r1[0] * r2[1] - r1[1] * r2[0])
    if jac == 0.0:
        return 0.0
    return math.exp(b - a @ apex) * jac / (rate1 * rate2)


def _strip_integral(start, edge, ray, a, b):
    jac = abs(edge[0] * ray[1] - edge[1] * ray[0])
    if jac == 0.0:
        return 0.0
    return math.exp(b - a @ start) * jac * float(exprel(-(a @ edge))) / float(a @ ray)


def exp_affine_polygon(polygon, a, b, rays=None):
    """
    Exact integral of exp(-(a . x - b)) over a planar polygon

    Args:
        polygon: (K, 2) vertices of a simple polygon; for an unbounded convex
            region, the counter-clockwise finite vertex chain
        a: covector (2,)
        b: scalar offset
        rays: optional (r_in, r_out) unit directions to infinity attached to
            the first and last vertex of the chain

    Returns:
        float: the integral
    """
    poly = np.asarray(polygon, dtype=float).reshape(-1, 2)
    a = np.asarray(a, dtype=float).reshape(2)
    b = float(b)
    if rays is not None and len(rays):
        r_in, r_out = (np.asarray(r, dtype=float) for r in rays)
        for r in (r_in, r_out):
            if a @ r <= 0:
                raise DivergentIntegralError(f"Integral diverges along recession direction {r.tolist()}")
        if len(poly) == 0:
            raise DegeneratePolygonError("An unbounded region needs at least one finite vertex")
        first, last = poly[0], poly[-1]
        bounded_part = exp_affine_polygon(poly, a, b) if len(poly) >= 3 else 0.0
        return (bounded_part
                + _strip_integral(first, last - first, r_in, a, b)
                + _cone_integral(last, r_in, r_out, a, b))
    if len(poly) < 3:
        return 0.0
    if is_self_intersecting(poly):
        raise DegeneratePolygonError("Polygon is self-intersecting")
    tris = _fan(poly)
    values = b - tris @ a
    mass, _ = simplex_integrals(tris, values)
    return abs(float(mass.sum()))


# -- tail bounds ----------------------------------------------------------------

def _sphere_area(dim):
    """Surface area of the unit sphere S^{n-1}"""
    return 2.0 * math.pi ** (dim / 2) / math.gamma(dim / 2)


def _radial_tail(potential, radius, power):
    witness = potential.check_integrability()
    if not witness.integrable:
        raise IntegrabilityError(f"No linear growth: alpha = {witness.alpha:.3g}")
    n, alpha, beta = potential.dim, witness.alpha, witness.beta
    order = n + power
    # e^beta |S^{n-1}| int_R^inf r^(order-1) e^(-alpha r) dr
    log_scale = beta + math.log(_sphere_area(n)) + gammaln(order) - order * math.log(alpha)
    return math.exp(log_scale) * float(gammaincc(order, alpha * max(float(radius), 0.0)))


def tail_bound(potential: PolyhedralPotential, radius) -> float:
    """
    Upper bound on the integral of exp(-psi) outside the box [-R, R]^n

    Uses psi(x) >= alpha |x| - beta and integrates the radial bound outside
    the Euclidean ball of radius R, which contains the box complement.
    """
    return _radial_tail(potential, radius, 0)


def moment_tail_bound(potential: PolyhedralPotential, radius) -> float:
    """Upper bound on the integral of |x| exp(-psi) outside the box [-R, R]^n"""
    return _radial_tail(potential, radius, 1)


def mass_lower_bound(potential: PolyhedralPotential) -> float:
    """Z >= exp(-psi(0)) * 2^n n! / L^n with L = max_i |y_i|_1"""
    n = potential.dim
    lipschitz = float(np.abs(potential.atoms).sum(axis=1).max())
    psi0 = float(-potential.values.min())
    return math.exp(-psi0 + n * math.log(2.0) + gammaln(n + 1) - n * math.log(lipschitz))


def truncation_radius(potential: PolyhedralPotential, rel_tol=TAIL_REL_TOL) -> float:
    """Smallest R (to bisection accuracy) whose tail bound is below rel_tol times a lower bound on Z"""
    target = rel_tol * mass_lower_bound(potential)
    hi = 1.0
    while tail_bound(potential, hi) > target:
        hi *= 2.0
        if hi > 1e12:
            raise IntegrabilityError("Could not find a truncation radius; growth rate too small")
    lo = hi / 2.0 if hi > 1.0 else 0.0
    if tail_bound(potential, lo) <= target:
        return hi
    radius = brentq(lambda r: tail_bound(potential, r) - target, lo, hi, xtol=1e-6)
    # bisection may stop just short of the target
    return float(radius) * (1.0 + 1e-6) + 1e-6


# -- exact paths ------------------------------------------------------------------

def exact_masses_1d(potential: PolyhedralPotential) -> MassResult:
    """Closed-form cell masses and moments on the line; cells are intervals between hull breakpoints"""
    if potential.dim != 1:
        raise InvalidPotentialError("exact_masses_1d needs a one-dimensional potential")
    witness = potential.check_integrability()
    if not witness.integrable:
        raise IntegrabilityError("Atoms must lie on both sides of the origin")
    y, v = potential.atoms[:, 0], potential.values
    chain = potential.envelope.chain
    ys, vs = y[chain], v[chain]
    breaks = (vs[1:] - vs[:-1]) / (ys[1:] - ys[:-1])
    masses = np.zeros(potential.size)
    moments = np.zeros((potential.size, 1))

    # leftmost cell (-inf, x0], slope ys[0] < 0
    rate, u = -ys[0], breaks[0]
    head = math.exp(vs[0] - ys[0] * u)
    masses[chain[0]] = head / rate
    moments[chain[0], 0] = head * (u / rate - 1.0 / rate ** 2)
    # rightmost cell [x_last, inf), slope ys[-1] > 0
    rate, lo = ys[-1], breaks[-1]
    head = math.exp(vs[-1] - ys[-1] * lo)
    masses[chain[-1]] = head / rate
    moments[chain[-1], 0] = head * (lo / rate + 1.0 / rate ** 2)

    if len(chain) > 2:
        lo, hi = breaks[:-1], breaks[1:]
        slopes, offsets = ys[1:-1], vs[1:-1]
        segs = np.stack([lo, hi], axis=1)[:, :, None]
        values = offsets[:, None] - slopes[:, None] * segs[:, :, 0]
        mass, moment = simplex_integrals(segs, values)
        masses[chain[1:-1]] = mass
        moments[chain[1:-1]] = moment

    total = float(masses.sum())
    first = moments.sum(axis=0)
    return MassResult(masses, total, np.zeros(potential.size), 0.0, first, np.zeros(1),
                      moments, method="exact1d")


def exact_masses_2d(potential: PolyhedralPotential, decomposition: CellDecomposition | None = None,
                    rel_tol=TAIL_REL_TOL, radius=None, workers=1) -> MassResult:
    """
    Exact planar cell masses over clipped cells plus certified tails

    Args:
        potential: planar polyhedral potential with 0 interior to the atom hull
        decomposition: cells from build_cells (built here when omitted)
        rel_tol: the truncation radius makes the tail bound <= rel_tol * Z
        radius: explicit truncation radius, overriding the policy
        workers: threads for the cell construction

    Returns:
        MassResult with error fields carrying the tail bounds
    """
    if potential.dim != 2:
        raise InvalidPotentialError("exact_masses_2d needs a planar potential")
    if decomposition is None:
        decomposition = build_cells(potential, workers=workers)
    R = truncation_radius(potential, rel_tol) if radius is None else float(radius)
    logger.debug(f"Truncation radius R = {R:.4g}")

    tris, owners = [], []
    for cell in decomposition.cells:
        poly = clip_cell(cell, R)
        fan = _fan(poly)
        if len(fan):
            tris.append(fan)
            owners.append(np.full(len(fan), cell.atom_index))
    masses = np.zeros(potential.size)
    moments = np.zeros((potential.size, 2))
    if tris:
        tris = np.concatenate(tris)
        owners = np.concatenate(owners)
        y, v = potential.atoms[owners], potential.values[owners]
        values = v[:, None] - np.einsum("tkd,td->tk", tris, y)
        mass, moment = simplex_integrals(tris, values)
        np.add.at(masses, owners, mass)
        np.add.at(moments, owners, moment)
    masses = np.maximum(masses, 0.0)

    tail = tail_bound(potential, R)
    moment_tail = moment_tail_bound(potential, R)
    total = float(masses.sum())
    mass_errors = np.where(masses > 0, tail, 0.0)
    return MassResult(masses, total, mass_errors, tail, moments.sum(axis=0), np.full(2, moment_tail),
                      moments, method="exact2d", radius=R)


def exact_masses(potential: PolyhedralPotential, workers=1, **mc_options) -> MassResult:
    """Exact masses in dimension 1 and 2; importance sampling elsewhere"""
    if potential.dim == 1:
        return exact_masses_1d(potential)
    if potential.dim == 2:
        return exact_masses_2d(potential, workers=workers)
    logger.info(f"No exact quadrature in dimension {potential.dim}; using importance sampling")
    return mc_masses(potential, workers=workers, **mc_options)


# -- Monte Carlo ------------------------------------------------------------------

@dataclass(frozen=True)
class ProposalSpec:
    """Product of two-sided exponentials centered at `center` with the given rate.

    rate None means alpha / 2 for the potential's recession rate alpha.
    """
    rate: float | None = None
    center: tuple | None = None

    def resolve(self, potential: PolyhedralPotential) -> "ProposalSpec":
        rate = self.rate
        if rate is None:
            witness = potential.check_integrability()
            if not witness.integrable:
                raise IntegrabilityError(f"No linear growth: alpha = {witness.alpha:.3g}")
            rate = witness.alpha / 2.0
        if rate <= 0:
            raise ValueError("Proposal rate must be positive")
        center = tuple(self.center) if self.center is not None else (0.0,) * potential.dim
        return ProposalSpec(float(rate), center)


@dataclass(frozen=True, eq=False)
class ProposalDraws:
    """Seeded proposal samples split into fixed blocks; reused across evaluations for common random numbers"""
    blocks: tuple
    log_densities: tuple
    spec: ProposalSpec
    seed: int

    @property
    def count(self):
        return sum(len(block) for block in self.blocks)


def laplace_log_density(X, spec: ProposalSpec):
    center = np.asarray(spec.center)
    dim = X.shape[1]
    return dim * math.log(spec.rate / 2.0) - spec.rate * np.abs(X - center).sum(axis=1)


def draw_proposal(spec: ProposalSpec, dim, samples, seed, block_size=DEFAULT_BLOCK_SIZE) -> ProposalDraws:
    """
    Draw proposal samples in blocks of block_size

    Block k uses default_rng([seed, k]), so the draws do not depend on how
    the blocks are later distributed over threads.
    """
    if samples < 1:
        raise ValueError("Need at least one sample")
    center = np.asarray(spec.center)
    blocks, logs = [], []
    remaining, k = int(samples), 0
    while remaining > 0:
        size = min(block_size, remaining)
        rng = np.random.default_rng([int(seed), k])
        X = center + rng.laplace(0.0, 1.0 / spec.rate, size=(size, dim))
        blocks.append(X)
        logs.append(laplace_log_density(X, spec))
        remaining -= size
        k += 1
    return ProposalDraws(tuple(blocks), tuple(logs), spec, int(seed))


def _block_sums(potential, X, log_q):
    values, idx = potential.evaluate_many(X)
    w = np.exp(-values - log_q)
    count = potential.size
    sums = np.bincount(idx, weights=w, minlength=count)
    squares = np.bincount(idx, weights=w * w, minlength=count)
    wx = w[:, None] * X
    cell_moments = np.column_stack([np.bincount(idx, weights=wx[:, j], minlength=count)
                                    for j in range(X.shape[1])])
    return sums, squares, cell_moments, wx.sum(axis=0), (wx * wx).sum(axis=0), float((w * w).sum())


def mc_masses(potential: PolyhedralPotential, proposal: ProposalSpec | None = None, samples=1_000_000,
              seed=0, block_size=DEFAULT_BLOCK_SIZE, variance_threshold=DEFAULT_VARIANCE_THRESHOLD,
              workers=1, draws: ProposalDraws | None = None) -> MassResult:
    """
    Importance-sampling estimate of the cell masses in any dimension

    m_i = E_q[exp(-psi(X)) 1{argmax(X) = i} / q(X)] with a product
    two-sided exponential proposal q. Deterministic per seed for any
    thread count.

    Raises:
        ImportanceVarianceError: relative variance of the weights exceeds
            variance_threshold
    """
    if draws is None:
        spec = (proposal or ProposalSpec()).resolve(potential)
        draws = draw_proposal(spec, potential.dim, samples, seed, block_size)
    jobs = list(zip(draws.blocks, draws.log_densities))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda job: _block_sums(potential, *job), jobs))
    else:
        parts = [_block_sums(potential, *job) for job in jobs]

    n_samples = draws.count
    sums = sum(p[0] for p in parts)
    squares = sum(p[1] for p in parts)
    cell_moments = sum(p[2] for p in parts) / n_samples
    first_sum = sum(p[3] for p in parts)
    first_sq = sum(p[4] for p in parts)
    total_sq = sum(p[5] for p in parts)

    masses = sums / n_samples
    total = float(masses.sum())
    if total <= 0:
        raise ImportanceVarianceError("All importance weights vanished; the proposal misses the mass")
    relative_variance = (total_sq / n_samples) / total ** 2 - 1.0
    if relative_variance > variance_threshold:
        raise ImportanceVarianceError(
            f"Importance weights have relative variance {relative_variance:.3g} "
            f"(threshold {variance_threshold:.3g}); use a heavier-tailed proposal (smaller rate)")

    def stderr(sum_w, sum_w2):
        var = np.maximum(sum_w2 / n_samples - (sum_w / n_samples) ** 2, 0.0)
        return np.sqrt(var / n_samples)

    first = first_sum / n_samples
    return MassResult(masses, total, stderr(sums, squares), float(stderr(sums.sum(), total_sq)),
                      first, stderr(first_sum, first_sq), cell_moments, method="mc", samples=n_samples)
