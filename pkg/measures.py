"""
Target measures: weighted atom clouds, validation of the existence conditions
(finite positive mass, full-dimensional support, barycenter at the origin),
and constructors for the standard sample measures.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from errors import DegeneratePolygonError, InvalidMeasureError

logger = logging.getLogger(__name__)

BARYCENTER_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finite measure sum_i w_i delta_{y_i} on R^n"""
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.array(self.weights, dtype=float).reshape(-1)
        if atoms.ndim != 2 or atoms.shape[0] == 0:
            raise InvalidMeasureError("Measure needs at least one atom")
        if len(weights) != len(atoms):
            raise InvalidMeasureError(f"Got {len(atoms)} atoms but {len(weights)} weights")
        if not (np.all(np.isfinite(atoms)) and np.all(np.isfinite(weights))):
            raise InvalidMeasureError("Atoms and weights must be finite")
        if np.any(weights <= 0):
            raise InvalidMeasureError("Weights must be strictly positive")
        atoms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self):
        return self.atoms.shape[1]

    @property
    def size(self):
        return self.atoms.shape[0]

    @property
    def total_mass(self):
        return float(self.weights.sum())

    @property
    def barycenter(self):
        return self.weights @ self.atoms / self.total_mass

    def scaled(self, factor) -> "DiscreteMeasure":
        """Image of the measure under y -> factor * y"""
        return DiscreteMeasure(self.atoms * factor, self.weights)

    def to_dict(self):
        return {"dim": self.dim, "atoms": self.atoms.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, data):
        try:
            atoms = np.asarray(data["atoms"], dtype=float)
            weights = np.asarray(data["weights"], dtype=float)
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidMeasureError(f"Malformed measure record: {e}") from e
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if "dim" in data and atoms.size and atoms.shape[1] != int(data["dim"]):
            raise InvalidMeasureError(f"Declared dim {data['dim']} does not match atoms of width {atoms.shape[1]}")
        return cls(atoms, weights)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of the three existence conditions for a target measure"""
    mass_ok: bool
    span_ok: bool
    barycenter_ok: bool
    barycenter_vector: np.ndarray = field(repr=False)
    smallest_singular_value: float
    tolerance: float = BARYCENTER_TOL

    @property
    def ok(self):
        return self.mass_ok and self.span_ok and self.barycenter_ok

    def failures(self):
        """Human-readable list of failed conditions"""
        messages = []
        if not self.mass_ok:
            messages.append("condition (i): total mass must be finite and positive")
        if not self.span_ok:
            messages.append("condition (ii): support lies in a lower-dimensional subspace "
                            f"(smallest singular value {self.smallest_singular_value:.3g})")
        if not self.barycenter_ok:
            messages.append("condition (iii): barycenter is not at the origin "
                            f"(|b| = {np.linalg.norm(self.barycenter_vector):.3g})")
        return messages

    def to_dict(self):
        return {
            "mass_ok": self.mass_ok,
            "span_ok": self.span_ok,
            "barycenter_ok": self.barycenter_ok,
            "barycenter_vector": np.asarray(self.barycenter_vector).tolist(),
            "smallest_singular_value": self.smallest_singular_value,
            "tolerance": self.tolerance,
        }


def validate(measure: DiscreteMeasure, tol=BARYCENTER_TOL, span_tol=None) -> ValidationReport:
    """
    Check the existence conditions for a moment-measure potential

    Args:
        measure: target measure
        tol: barycenter tolerance on |sum w_i y_i| / W
        span_tol: threshold for the smallest weighted singular value (defaults to tol)

    Returns:
        ValidationReport
    """
    if tol <= 0:
        raise InvalidMeasureError("Tolerance must be positive")
    if measure is None or measure.size == 0:
        raise InvalidMeasureError("Cannot validate an empty measure")
    span_tol = tol if span_tol is None else span_tol
    total = measure.total_mass
    mass_ok = bool(np.isfinite(total) and total > 0)
    barycenter = measure.barycenter
    weighted = np.sqrt(measure.weights / total)[:, None] * measure.atoms
    singular = np.linalg.svd(weighted, compute_uv=False)
    smallest = float(singular[measure.dim - 1]) if len(singular) >= measure.dim else 0.0
    span_ok = smallest > span_tol
    barycenter_ok = bool(np.linalg.norm(barycenter) <= tol)
    report = ValidationReport(mass_ok, span_ok, barycenter_ok, barycenter, smallest, tol)
    if not report.ok:
        logger.info(f"Measure validation failed: {'; '.join(report.failures())}")
    return report


def center(measure: DiscreteMeasure) -> DiscreteMeasure:
    """Translate atoms so the barycenter sits at the origin"""
    return DiscreteMeasure(measure.atoms - measure.barycenter, measure.weights)


# -- constructors -------------------------------------------------------------

def signed_area(polygon):
    p = np.asarray(polygon, dtype=float)
    q = np.roll(p, -1, axis=0)
    return 0.5 * float(np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]))


def points_in_polygon(points, polygon):
    """Even-odd rule point-in-polygon test, vectorized over points"""
    pts = np.asarray(points, dtype=float)
    poly = np.asarray(polygon, dtype=float)
    inside = np.zeros(len(pts), dtype=bool)
    x, y = pts[:, 0], pts[:, 1]
    for (x0, y0), (x1, y1) in zip(poly, np.roll(poly, -1, axis=0)):
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < x_cross)
    return inside


def regular_polygon(sides, radius=1.0):
    angles = 2 * np.pi * np.arange(sides) / sides
    return radius * np.column_stack([np.cos(angles), np.sin(angles)])


def unit_square(centered=False):
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return square - 0.5 if centered else square


def sample_uniform_polygon(polygon, count, seed, centered=True) -> DiscreteMeasure:
    """
    Empirical measure of i.i.d. uniform points in a simple polygon

    Args:
        polygon: (K, 2) vertex array, positively oriented
        count: number of atoms N >= 3
        seed: seed for numpy's default_rng
        centered: translate the cloud so its barycenter is exactly 0

    Returns:
        DiscreteMeasure with weights 1/N
    """
    poly = np.asarray(polygon, dtype=float)
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) < 3:
        raise DegeneratePolygonError("Polygon needs at least three 2D vertices")
    area = signed_area(poly)
    if abs(area) <= 1e-14 * max(1.0, np.abs(poly).max() ** 2):
        raise DegeneratePolygonError("Polygon has zero area")
    if area < 0:
        logger.warning("Polygon is negatively oriented; reversing vertex order")
        poly = poly[::-1]
    if count < 3:
        raise InvalidMeasureError("Need at least n + 1 = 3 atoms in the plane")
    rng = np.random.default_rng(seed)
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    accept_rate = abs(area) / float(np.prod(hi - lo))
    samples = []
    have = 0
    while have < count:
        batch = int((count - have) / accept_rate * 1.2) + 16
        draws = rng.uniform(lo, hi, size=(batch, 2))
        draws = draws[points_in_polygon(draws, poly)]
        samples.append(draws)
        have += len(draws)
    atoms = np.concatenate(samples)[:count]
    measure = DiscreteMeasure(atoms, np.full(count, 1.0 / count))
    return center(measure) if centered else measure


def sphere_atoms(dim, count, seed=0) -> DiscreteMeasure:
    """
    Antipodally paired unit vectors with equal weights

    In the plane the atoms are the count-th roots of unity; in higher
    dimension half of them are normalized Gaussian draws (seeded) and the
    other half their antipodes.
    """
    if count < 2 * dim:
        raise InvalidMeasureError(f"Need at least {2 * dim} atoms on the sphere in dimension {dim}")
    if count % 2:
        raise InvalidMeasureError("Sphere atoms are built in antipodal pairs; count must be even")
    half = count // 2
    if dim == 1:
        if count != 2:
            raise InvalidMeasureError("The 0-sphere has exactly two points")
        base = np.ones((1, 1))
    elif dim == 2:
        angles = 2 * np.pi * np.arange(half) / count
        base = np.column_stack([np.cos(angles), np.sin(angles)])
    else:
        rng = np.random.default_rng(seed)
        base = rng.standard_normal((half, dim))
        base /= np.linalg.norm(base, axis=1, keepdims=True)
    atoms = np.concatenate([-base, base]) if dim == 1 else np.concatenate([base, -base])
    return DiscreteMeasure(atoms, np.full(len(atoms), 1.0 / len(atoms)))


def simplex_vertices(dim) -> DiscreteMeasure:
    """n + 1 unit vectors summing to zero and spanning R^n (regular simplex)"""
    if dim < 1:
        raise InvalidMeasureError("Dimension must be at least 1")
    corners = np.eye(dim + 1) - 1.0 / (dim + 1)
    # orthonormal basis of the hyperplane sum(x) = 0
    basis = np.linalg.svd(corners)[2][:dim]
    atoms = corners @ basis.T
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    atoms -= atoms.mean(axis=0)
    if dim == 1:
        atoms = np.sort(atoms, axis=0)
    return DiscreteMeasure(atoms, np.full(dim + 1, 1.0 / (dim + 1)))
