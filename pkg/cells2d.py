"""
Exact cell decomposition of a planar polyhedral potential.

Cell i = {x : (y_j - y_i) . x <= v_j - v_i for all j != i}, the region where
atom i attains the max. Cells are built by clipping a large box against the
half-planes of the atom's neighbours in the regular triangulation (the lower
hull of the lifted points); the remaining half-planes are redundant.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from convex_core import PolyhedralPotential
from errors import IntegrabilityError, InvalidPotentialError

logger = logging.getLogger(__name__)

MERGE_TOL = 1e-10
SLIVER_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Cell:
    """One cell of the decomposition.

    normals/offsets hold the half-planes normals . x <= offsets defining the
    cell. vertices is the ordered (counter-clockwise) finite vertex list; for
    an unbounded cell rays = (r_in, r_out), unit directions to infinity
    attached to vertices[0] and vertices[-1].
    """
    atom_index: int
    normals: np.ndarray
    offsets: np.ndarray
    vertices: np.ndarray
    rays: np.ndarray
    bounded: bool

    @property
    def empty(self):
        return len(self.vertices) == 0

    def contains(self, X, tol=1e-12):
        X = np.atleast_2d(X)
        slack = X @ self.normals.T - self.offsets
        scale = tol * (1.0 + np.abs(self.offsets))
        return np.all(slack <= scale, axis=1)

    def to_record(self, mass=None):
        return {
            "atom_index": self.atom_index,
            "bounded": self.bounded,
            "mass": mass,
            "vertices": ";".join(f"{x!r} {y!r}" for x, y in self.vertices),
            "rays": ";".join(f"{x!r} {y!r}" for x, y in self.rays),
        }


@dataclass(frozen=True, eq=False)
class CellDecomposition:
    """All cells of a planar potential, plus masses once quadrature has run"""
    potential: PolyhedralPotential
    cells: tuple
    degenerate: bool = False
    masses: np.ndarray | None = None
    total: float | None = None

    def with_masses(self, masses, total) -> "CellDecomposition":
        return replace(self, masses=np.asarray(masses, dtype=float), total=float(total))

    def locate(self, X):
        """Index of the lowest-numbered non-empty cell containing each point (-1 if none)"""
        X = np.atleast_2d(X)
        found = np.full(len(X), -1)
        for cell in self.cells:
            if cell.empty:
                continue
            hit = (found < 0) & cell.contains(X)
            found[hit] = cell.atom_index
        return found

    def to_records(self):
        records = []
        for cell in self.cells:
            mass = None if self.masses is None else float(self.masses[cell.atom_index])
            records.append(cell.to_record(mass))
        return records


# -- polygon clipping ---------------------------------------------------------

def polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    q = np.roll(poly, -1, axis=0)
    return 0.5 * float(np.sum(poly[:, 0] * q[:, 1] - q[:, 0] * poly[:, 1]))


def is_sliver(poly):
    """True for polygons with no interior: fewer than 3 vertices or area tiny next to diameter squared"""
    if len(poly) < 3:
        return True
    extent = float(np.max(poly.max(axis=0) - poly.min(axis=0)))
    return abs(polygon_area(poly)) <= SLIVER_TOL * extent ** 2


def box(radius):
    r = float(radius)
    return np.array([[-r, -r], [r, -r], [r, r], [-r, r]])


def merge_close(poly, tol=MERGE_TOL):
    """Drop consecutive vertices closer than tol (relative to the polygon scale)"""
    if len(poly) < 2:
        return poly
    scale = tol * (1.0 + np.abs(poly).max())
    keep = [poly[0]]
    for p in poly[1:]:
        if np.max(np.abs(p - keep[-1])) > scale:
            keep.append(p)
    if len(keep) > 1 and np.max(np.abs(keep[0] - keep[-1])) <= scale:
        keep.pop()
    return np.array(keep)


def clip_halfplane(poly, normal, offset):
    """Sutherland-Hodgman step: intersection of a convex polygon with normal . x <= offset"""
    if len(poly) == 0:
        return poly
    s = poly @ normal - offset
    inside = s <= 0
    if inside.all():
        return poly
    if not inside.any():
        return np.empty((0, 2))
    out = []
    count = len(poly)
    for k in range(count):
        nxt = (k + 1) % count
        if inside[k]:
            out.append(poly[k])
        if inside[k] != inside[nxt]:
            t = s[k] / (s[k] - s[nxt])
            out.append(poly[k] + t * (poly[nxt] - poly[k]))
    return np.array(out)


def clip_to_halfplanes(poly, normals, offsets):
    for a, b in zip(normals, offsets):
        poly = clip_halfplane(poly, a, b)
        if len(poly) == 0:
            break
    return poly


def clip_cell(cell: Cell, radius) -> np.ndarray:
    """
    Intersection of a cell with the box [-R, R]^2

    Args:
        cell: Cell from build_cells
        radius: half side R > 0

    Returns:
        np.ndarray: (K, 2) counter-clockwise vertices, empty when the intersection is empty
    """
    if radius <= 0:
        raise ValueError("Clipping radius must be positive")
    if cell.empty:
        return np.empty((0, 2))
    # no vertex merging here: repeated vertices integrate to zero, merged ones would not
    poly = clip_to_halfplanes(box(radius), cell.normals, cell.offsets)
    if len(poly) < 3:
        return np.empty((0, 2))
    return poly


# -- decomposition ------------------------------------------------------------

def _neighbour_sets(potential: PolyhedralPotential):
    env = potential.envelope
    count = potential.size
    neighbours = [set() for _ in range(count)]
    if env.kind == "facets":
        for tri in env.simplices:
            for a in tri:
                neighbours[a].update(int(b) for b in tri if b != a)
    everyone = set(range(count))
    return [sorted(nb) if nb else sorted(everyone - {i}) for i, nb in enumerate(neighbours)]


def _snap_ray(direction, normals):
    """Replace an approximate boundary direction by the exact edge direction it follows"""
    perps = np.column_stack([-normals[:, 1], normals[:, 0]])
    perps /= np.linalg.norm(perps, axis=1, keepdims=True)
    candidates = np.concatenate([perps, -perps])
    return candidates[int(np.argmax(candidates @ direction))]


def _build_one(potential: PolyhedralPotential, index, neighbours, big):
    y, v = potential.atoms, potential.values
    others = np.asarray(neighbours, dtype=int)
    normals = y[others] - y[index]
    offsets = v[others] - v[index]
    poly = merge_close(clip_to_halfplanes(box(big), normals, offsets))
    if is_sliver(poly):
        return Cell(index, normals, offsets, np.empty((0, 2)), np.empty((0, 2)), True)
    on_box = np.max(np.abs(poly), axis=1) >= big * (1 - 1e-9)
    if not on_box.any():
        return Cell(index, normals, offsets, poly, np.empty((0, 2)), True)
    if on_box.all():
        logger.warning(f"Cell {index} has no finite vertex; keeping the clipped box polygon")
        return Cell(index, normals, offsets, poly, np.empty((0, 2)), False)
    count = len(poly)
    # rotate so the finite chain is contiguous and starts right after the box part
    start = next(k for k in range(count) if on_box[k - 1] and not on_box[k])
    order = [(start + k) % count for k in range(count)]
    chain = [k for k in order if not on_box[k]]
    first, last = chain[0], chain[-1]
    r_in = poly[(first - 1) % count] - poly[first]
    r_out = poly[(last + 1) % count] - poly[last]
    rays = np.array([_snap_ray(r_in / np.linalg.norm(r_in), normals),
                     _snap_ray(r_out / np.linalg.norm(r_out), normals)])
    return Cell(index, normals, offsets, poly[chain], rays, False)


def build_cells(potential: PolyhedralPotential, workers=1) -> CellDecomposition:
    """
    Build every cell of a planar polyhedral potential

    Args:
        potential: PolyhedralPotential with dim == 2
        workers: thread count for the per-atom half-plane intersections

    Returns:
        CellDecomposition (geometry only; masses are filled in by quadrature)
    """
    if potential.dim != 2:
        raise InvalidPotentialError(f"Exact cells are planar only, got dimension {potential.dim}")
    witness = potential.check_integrability()
    if not witness.integrable:
        raise IntegrabilityError(f"Origin is not interior to the atom hull (alpha = {witness.alpha:.3g})")
    env = potential.envelope
    neighbours = _neighbour_sets(potential)
    slopes = env.slopes if env.slopes is not None else np.zeros((1, 2))
    big = max(1e3, 10.0 * (1.0 + float(np.abs(slopes).max())))
    active = set(potential.active_set().tolist())

    def build(i):
        if i not in active:
            return Cell(i, np.empty((0, 2)), np.empty(0), np.empty((0, 2)), np.empty((0, 2)), True)
        return _build_one(potential, i, neighbours[i], big)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(build, range(potential.size)))
    else:
        cells = [build(i) for i in range(potential.size)]
    degenerate = env.kind != "facets"
    if degenerate:
        logger.info("Lifted points are coplanar; all cells share a single vertex")
    return CellDecomposition(potential, tuple(cells), degenerate)
