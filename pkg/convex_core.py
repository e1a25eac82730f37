"""
Polyhedral convex potentials psi_v(x) = max_i (y_i . x - v_i).

The potential is the Legendre transform of the atom data {(y_i, v_i)}; its
conjugate is the lower convex envelope of that data on conv(atoms).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, Delaunay, QhullError

from errors import InvalidPotentialError

logger = logging.getLogger(__name__)

ACTIVE_TOL = 1e-12
# HiGHS works to roughly this accuracy, so the LP path cannot resolve 1e-12
LP_ACTIVE_TOL = 1e-9
# lower-hull facets flatter than this (unit normal z-component) are vertical
VERTICAL_FACET_TOL = 1e-9


@dataclass(frozen=True)
class IntegrabilityWitness:
    """Result of check_integrability.

    alpha is the recession rate min_theta max_i y_i . theta (positive iff the
    origin is interior to conv(atoms)); beta = max_i v_i. Together they give
    psi(x) >= alpha |x| - beta.
    """
    integrable: bool
    alpha: float
    beta: float


@dataclass(frozen=True, eq=False)
class GaugeTransform:
    """psi(x) -> psi(x - b) - c, i.e. v_i -> v_i + y_i . b + c"""
    translation: np.ndarray
    constant: float = 0.0

    def __post_init__(self):
        b = np.array(self.translation, dtype=float).reshape(-1)
        b.setflags(write=False)
        object.__setattr__(self, "translation", b)
        object.__setattr__(self, "constant", float(self.constant))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), 0.0)

    def compose(self, other: "GaugeTransform") -> "GaugeTransform":
        """Gauge equal to applying self first, then other"""
        return GaugeTransform(self.translation + other.translation, self.constant + other.constant)

    def to_dict(self):
        return {"translation": self.translation.tolist(), "constant": self.constant}


class LowerEnvelope:
    """Lower convex envelope of the lifted points (y_i, v_i) over conv(atoms).

    Dimension 1 uses a monotone-chain lower hull, dimension 2 the lower facets
    of the 3D hull of lifted points (an affine fit when they are coplanar),
    higher dimensions a small linear program per query.
    """

    def __init__(self, atoms, values, atom_hull=None):
        self.atoms = atoms
        self.values = values
        self.dim = atoms.shape[1]
        self.atom_hull = atom_hull
        self.degenerate = False
        self.simplices = None
        self.slopes = None
        self.intercepts = None
        if self.dim == 1:
            self.kind = "chain"
            self._build_chain()
        elif self.dim == 2:
            self._build_facets()
        else:
            self.kind = "lp"

    def _build_chain(self):
        order = np.argsort(self.atoms[:, 0], kind="stable")
        hull = []
        for i in order:
            while len(hull) >= 2:
                o, a = hull[-2], hull[-1]
                cross = ((self.atoms[a, 0] - self.atoms[o, 0]) * (self.values[i] - self.values[o])
                         - (self.values[a] - self.values[o]) * (self.atoms[i, 0] - self.atoms[o, 0]))
                if cross <= 0:
                    hull.pop()
                else:
                    break
            hull.append(int(i))
        self.chain = np.array(hull, dtype=int)
        self.simplices = np.column_stack([self.chain[:-1], self.chain[1:]])

    def _build_facets(self):
        lifted = np.column_stack([self.atoms, self.values])
        try:
            hull = ConvexHull(lifted)
        except QhullError:
            self._build_affine()
            return
        eq = hull.equations
        lower = eq[:, 2] < -VERTICAL_FACET_TOL
        self.kind = "facets"
        self.simplices = hull.simplices[lower]
        self.slopes = -eq[lower, :2] / eq[lower, 2:3]
        self.intercepts = -eq[lower, 3] / eq[lower, 2]

    def _build_affine(self):
        design = np.column_stack([self.atoms, np.ones(len(self.atoms))])
        coef, *_ = np.linalg.lstsq(design, self.values, rcond=None)
        residual = np.max(np.abs(design @ coef - self.values))
        if residual > ACTIVE_TOL * (1.0 + np.max(np.abs(self.values))):
            # atoms themselves are collinear; nothing better than the LP
            self.kind = "lp"
            return
        self.kind = "affine"
        self.degenerate = True
        self.slopes = coef[None, :2]
        self.intercepts = coef[2:3]
        if self.atom_hull is not None:
            self.simplices = Delaunay(self.atoms).simplices

    def inside(self, Y, tol=1e-12):
        """Boolean mask of query points lying in conv(atoms)"""
        Y = np.atleast_2d(Y)
        if self.dim == 1:
            lo, hi = self.atoms[:, 0].min(), self.atoms[:, 0].max()
            scale = tol * (1.0 + max(abs(lo), abs(hi)))
            return (Y[:, 0] >= lo - scale) & (Y[:, 0] <= hi + scale)
        if self.atom_hull is None:
            return np.ones(len(Y), dtype=bool)
        eq = self.atom_hull.equations
        return np.all(Y @ eq[:, :-1].T + eq[:, -1] <= tol * (1.0 + np.abs(Y).max(axis=1))[:, None], axis=1)

    def evaluate(self, Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        out = np.full(len(Y), np.inf)
        if self.kind == "lp":
            for k, y in enumerate(Y):
                out[k] = self._solve_lp(y)
            return out
        mask = self.inside(Y)
        if not np.any(mask):
            return out
        if self.kind == "chain":
            xs = self.atoms[self.chain, 0]
            out[mask] = np.interp(Y[mask, 0], xs, self.values[self.chain])
        else:
            planes = Y[mask] @ self.slopes.T + self.intercepts
            out[mask] = planes.max(axis=1)
        return out

    def _solve_lp(self, y):
        n_atoms = len(self.atoms)
        a_eq = np.vstack([self.atoms.T, np.ones((1, n_atoms))])
        b_eq = np.concatenate([y, [1.0]])
        res = linprog(self.values, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
        if res.status == 2:
            return np.inf
        if res.status != 0:
            logger.warning(f"Envelope LP returned status {res.status}: {res.message}")
            return np.inf
        return float(res.fun)


@dataclass(frozen=True, eq=False)
class PolyhedralPotential:
    """psi_v(x) = max_i (y_i . x - v_i) with atoms y_i and values v_i.

    Arrays are stored read-only; every operation returns new objects.
    """
    atoms: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        values = np.array(self.values, dtype=float).reshape(-1)
        if atoms.ndim != 2 or atoms.shape[1] < 1:
            raise InvalidPotentialError(f"Atoms must be an (N, n) array, got shape {atoms.shape}")
        n_atoms, dim = atoms.shape
        if len(values) != n_atoms:
            raise InvalidPotentialError(f"Got {n_atoms} atoms but {len(values)} values")
        if n_atoms < dim + 1:
            raise InvalidPotentialError(f"Need at least {dim + 1} atoms in dimension {dim}, got {n_atoms}")
        if not (np.all(np.isfinite(atoms)) and np.all(np.isfinite(values))):
            raise InvalidPotentialError("Atoms and values must be finite")
        if len(np.unique(atoms, axis=0)) != n_atoms:
            raise InvalidPotentialError("Atoms must be pairwise distinct")
        atoms.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "values", values)

    @property
    def dim(self):
        return self.atoms.shape[1]

    @property
    def size(self):
        return self.atoms.shape[0]

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, x):
        """
        Evaluate psi at a single point

        Args:
            x: point of R^n

        Returns:
            tuple: (psi(x), smallest index attaining the max)
        """
        scores = self.atoms @ np.asarray(x, dtype=float).reshape(self.dim) - self.values
        idx = int(np.argmax(scores))
        return float(scores[idx]), idx

    def evaluate_many(self, X):
        """Vectorized evaluate: returns (values, argmax indices) for an (M, n) array"""
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        scores = X @ self.atoms.T - self.values
        idx = np.argmax(scores, axis=1)
        return scores[np.arange(len(X)), idx], idx

    def subgradient(self, x):
        """Element of the subdifferential at x; equals grad psi where psi is differentiable"""
        return self.atoms[self.evaluate(x)[1]].copy()

    # -- conjugation --------------------------------------------------------

    @cached_property
    def atom_hull(self):
        if self.dim == 1:
            return None
        try:
            return ConvexHull(self.atoms)
        except QhullError:
            return None

    @cached_property
    def envelope(self) -> LowerEnvelope:
        return LowerEnvelope(self.atoms, self.values, self.atom_hull)

    def conjugate_at(self, y):
        """Legendre transform psi*(y); +inf outside conv(atoms)"""
        return float(self.envelope.evaluate(np.asarray(y, dtype=float).reshape(1, self.dim))[0])

    def envelope_values(self):
        """psi* at every atom (<= v_i, with equality exactly on active atoms)"""
        return self.envelope.evaluate(self.atoms)

    def active_set(self, tol=ACTIVE_TOL):
        """Indices whose lifted point lies on the lower envelope (degenerate-active included)"""
        if self.envelope.kind == "lp":
            tol = max(tol, LP_ACTIVE_TOL)
        env = self.envelope_values()
        return np.flatnonzero(env >= self.values - tol * (1.0 + np.abs(self.values)))

    # -- gauge --------------------------------------------------------------

    def apply_gauge(self, gauge: GaugeTransform) -> "PolyhedralPotential":
        b = np.asarray(gauge.translation, dtype=float).reshape(self.dim)
        return self.with_values(self.values + self.atoms @ b + gauge.constant)

    def with_values(self, values) -> "PolyhedralPotential":
        """Same atoms, new values; the atom hull is shared rather than rebuilt"""
        new = PolyhedralPotential(self.atoms, values)
        if "atom_hull" in self.__dict__:
            new.__dict__["atom_hull"] = self.__dict__["atom_hull"]
        if "witness_rate" in self.__dict__:
            new.__dict__["witness_rate"] = self.__dict__["witness_rate"]
        return new

    # -- integrability ------------------------------------------------------

    @cached_property
    def witness_rate(self):
        """Recession rate alpha; depends on the atoms only"""
        if self.dim == 1:
            y = self.atoms[:, 0]
            return float(min(y.max(), -y.min()))
        if self.atom_hull is None:
            return 0.0
        # unit outward normals: distance from 0 to facet plane is -offset
        return float(np.min(-self.atom_hull.equations[:, -1]))

    def check_integrability(self) -> IntegrabilityWitness:
        alpha = self.witness_rate
        return IntegrabilityWitness(integrable=alpha > ACTIVE_TOL, alpha=alpha, beta=float(self.values.max()))

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return {"dim": self.dim, "atoms": self.atoms.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, data):
        try:
            atoms = np.asarray(data["atoms"], dtype=float)
            values = np.asarray(data["values"], dtype=float)
            dim = int(data.get("dim", atoms.shape[1] if atoms.ndim == 2 else 1))
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidPotentialError(f"Malformed potential record: {e}") from e
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.shape[1] != dim:
            raise InvalidPotentialError(f"Declared dim {dim} does not match atoms of width {atoms.shape[1]}")
        return cls(atoms, values)
