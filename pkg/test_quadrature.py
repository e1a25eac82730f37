import math

import numpy as np
import pytest
from scipy.integrate import quad

from cells2d import build_cells
from convex_core import GaugeTransform, PolyhedralPotential
from errors import DegeneratePolygonError, DivergentIntegralError, ImportanceVarianceError, IntegrabilityError
from measures import simplex_vertices
from quadrature import (ProposalSpec, draw_proposal, exact_masses, exact_masses_1d, exact_masses_2d,
                        exp_affine_polygon, exp_divided_differences, mass_lower_bound, mc_masses,
                        moment_tail_bound, simplex_integrals, tail_bound, truncation_radius)
from test_data_generator import random_centered_measure

SUP_NORM_ATOMS = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
UNIT_SQUARE = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]


@pytest.fixture
def sup_norm():
    return PolyhedralPotential(SUP_NORM_ATOMS, np.zeros(4))


def random_potential(seed, count=8):
    measure = random_centered_measure(count, 2, seed)
    values = 0.5 * np.random.default_rng(seed + 50).standard_normal(count)
    return PolyhedralPotential(measure.atoms, values)


# -- divided differences and simplices ---------------------------------------------------

def test_divided_differences_distinct_nodes():
    z = np.array([[0.0, 1.0]])
    assert exp_divided_differences(z)[0] == pytest.approx(math.e - 1.0, rel=1e-14)


def test_divided_differences_repeated_nodes():
    z = np.array([[0.3, 0.3, 0.3]])
    assert exp_divided_differences(z)[0] == pytest.approx(math.exp(0.3) / 2, rel=1e-14)


def test_divided_differences_nearly_repeated_nodes():
    z = np.array([[1.0, 1.0 + 1e-9]])
    assert exp_divided_differences(z)[0] == pytest.approx(math.e, rel=1e-8)


def test_simplex_integrals_on_a_segment():
    verts = np.array([[[0.0], [2.0]]])
    values = np.array([[0.0, -2.0]])
    mass, moment = simplex_integrals(verts, values)
    assert mass[0] == pytest.approx(1 - math.exp(-2), rel=1e-13)
    assert moment[0, 0] == pytest.approx(1 - 3 * math.exp(-2), rel=1e-13)


# -- polygons ----------------------------------------------------------------------------

def test_square_area():
    assert exp_affine_polygon(UNIT_SQUARE, [0.0, 0.0], 0.0) == pytest.approx(1.0, rel=1e-14)


def test_square_separable():
    assert exp_affine_polygon(UNIT_SQUARE, [1.0, 0.0], 0.0) == pytest.approx(0.6321206, abs=1e-7)


def test_triangle():
    tri = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
    assert exp_affine_polygon(tri, [1.0, 1.0], 0.0) == pytest.approx(1 - 2 / math.e, rel=1e-13)


def test_orientation_does_not_matter():
    forward = exp_affine_polygon(UNIT_SQUARE, [0.4, -0.7], 0.2)
    assert exp_affine_polygon(UNIT_SQUARE[::-1], [0.4, -0.7], 0.2) == pytest.approx(forward, rel=1e-14)


def test_self_intersecting_polygon():
    with pytest.raises(DegeneratePolygonError):
        exp_affine_polygon([[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]], [0.0, 0.0], 0.0)


def test_quadrant_cone():
    value = exp_affine_polygon([[0.0, 0.0]], [1.0, 1.0], 0.0, rays=([0.0, 1.0], [1.0, 0.0]))
    assert value == pytest.approx(1.0, rel=1e-14)


def test_half_strip():
    value = exp_affine_polygon([[1.0, 0.0], [0.0, 0.0]], [1.0, 1.0], 0.0, rays=([0.0, 1.0], [0.0, 1.0]))
    assert value == pytest.approx(1 - math.exp(-1), rel=1e-13)


def test_divergent_ray():
    with pytest.raises(DivergentIntegralError):
        exp_affine_polygon([[0.0, 0.0]], [1.0, 0.0], 0.0, rays=([0.0, 1.0], [1.0, 0.0]))


def test_unbounded_cells_agree_with_clipped_quadrature():
    P = random_potential(5)
    cells = build_cells(P)
    clipped = exact_masses_2d(P, cells)
    for cell in cells.cells:
        if cell.empty:
            continue
        i = cell.atom_index
        rays = None if cell.bounded else cell.rays
        exact = exp_affine_polygon(cell.vertices, P.atoms[i], P.values[i], rays=rays)
        assert exact == pytest.approx(clipped.masses[i], rel=1e-9)


# -- tails and truncation -------------------------------------------------------------------

def test_tail_bound_dominates_true_tail():
    P = PolyhedralPotential([[-1.0], [1.0]], [0.0, 0.0])
    true_tail = 2 * math.exp(-10)
    bound = tail_bound(P, 10.0)
    assert true_tail * (1 - 1e-12) <= bound <= 10 * true_tail


def test_tail_bound_decreases():
    P = PolyhedralPotential(SUP_NORM_ATOMS, np.zeros(4))
    bounds = [tail_bound(P, r) for r in (10.0, 20.0, 40.0)]
    assert bounds[0] > bounds[1] > bounds[2] > 0


def test_moment_tail_exceeds_mass_tail_far_out(sup_norm):
    assert moment_tail_bound(sup_norm, 30.0) > tail_bound(sup_norm, 30.0)


def test_truncation_radius_policy(sup_norm):
    R = truncation_radius(sup_norm)
    assert tail_bound(sup_norm, R) <= 1e-14 * 8
    assert mass_lower_bound(sup_norm) <= 8.0 * (1 + 1e-12)


def test_tail_bound_needs_integrability():
    with pytest.raises(IntegrabilityError):
        tail_bound(PolyhedralPotential([[1.0], [2.0]], [0.0, 0.0]), 5.0)


# -- exact masses ----------------------------------------------------------------------------

def test_sup_norm_masses(sup_norm):
    result = exact_masses_2d(sup_norm)
    assert result.total == pytest.approx(8.0, rel=1e-12)
    np.testing.assert_allclose(result.masses, 2.0, rtol=1e-12)
    np.testing.assert_allclose(result.barycenter, 0.0, atol=1e-12)


@pytest.mark.parametrize("c", [-1.0, 0.5])
def test_constant_values_scale_total(c):
    P = PolyhedralPotential(SUP_NORM_ATOMS, np.full(4, c))
    assert exact_masses_2d(P).total == pytest.approx(8 * math.exp(c), rel=1e-12)


def test_constant_gauge_scales_by_exponential(sup_norm):
    doubled = sup_norm.apply_gauge(GaugeTransform(np.zeros(2), math.log(2)))
    assert exact_masses(doubled).total == pytest.approx(16.0, rel=1e-12)
    halved = sup_norm.apply_gauge(GaugeTransform(np.zeros(2), -math.log(2)))
    assert exact_masses(halved).total == pytest.approx(4.0, rel=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_first_moment_identity(seed):
    P = random_potential(seed)
    result = exact_masses_2d(P)
    assert np.linalg.norm(result.masses @ P.atoms) <= 1e-10 * result.total


def test_exact_matches_numerical_integration_on_the_line():
    P = PolyhedralPotential([[-1.0], [0.5], [2.0]], [0.2, -0.3, 0.4])
    result = exact_masses_1d(P)
    reference = quad(lambda x: math.exp(-P.evaluate([x])[0]), -np.inf, np.inf, epsabs=1e-13)[0]
    assert result.total == pytest.approx(reference, rel=1e-7)
    assert result.method == "exact1d"


def test_asymmetric_line_masses():
    P = PolyhedralPotential([[-1.0], [2.0]], [0.0, 0.0])
    result = exact_masses(P)
    assert result.total == pytest.approx(1.5, rel=1e-14)
    np.testing.assert_allclose(result.weights, [2 / 3, 1 / 3], rtol=1e-14)
    assert result.weights @ P.atoms[:, 0] == pytest.approx(0.0, abs=1e-15)
    # int x exp(-psi) = -1 + 1/4 on the two half-lines
    assert result.first_moment[0] == pytest.approx(-0.75, rel=1e-14)


def test_inactive_atom_on_the_line_has_no_mass():
    P = PolyhedralPotential([[-1.0], [0.0], [1.0]], [0.0, 0.0, 0.0])
    result = exact_masses_1d(P)
    np.testing.assert_allclose(result.masses, [1.0, 0.0, 1.0], atol=1e-15)


def test_cell_first_moments_sum_to_first_moment():
    P = random_potential(8)
    result = exact_masses_2d(P)
    np.testing.assert_allclose(result.cell_first_moments.sum(axis=0), result.first_moment, atol=1e-14)


# -- Monte Carlo -------------------------------------------------------------------------------

def test_mc_sup_norm(sup_norm):
    result = mc_masses(sup_norm, samples=1_000_000, seed=3)
    assert np.all(np.abs(result.masses - 2.0) <= 4 * result.mass_errors)


def test_mc_on_the_line():
    P = PolyhedralPotential([[-1.0], [1.0]], [0.0, 0.0])
    result = mc_masses(P, samples=1_000_000, seed=4)
    assert abs(result.total - 2.0) <= 4 * result.total_error


def test_mc_first_moment_in_dimension_three():
    P = PolyhedralPotential(simplex_vertices(3).atoms, np.zeros(4))
    result = exact_masses(P, samples=1_000_000, seed=5)
    assert result.method == "mc"
    moment = result.masses @ P.atoms
    spread = np.sqrt((result.mass_errors ** 2) @ (P.atoms ** 2))
    assert np.all(np.abs(moment) <= 4 * spread + 1e-12)


def test_mc_is_deterministic_across_threads(sup_norm):
    serial = mc_masses(sup_norm, samples=200_000, seed=1, block_size=10_000)
    parallel = mc_masses(sup_norm, samples=200_000, seed=1, block_size=10_000, workers=4)
    np.testing.assert_array_equal(serial.masses, parallel.masses)


def test_mc_reuses_draws(sup_norm):
    draws = draw_proposal(ProposalSpec().resolve(sup_norm), 2, 50_000, seed=2)
    assert draws.count == 50_000
    a = mc_masses(sup_norm, draws=draws)
    b = mc_masses(sup_norm.apply_gauge(GaugeTransform(np.zeros(2), 1.0)), draws=draws)
    np.testing.assert_allclose(b.masses, a.masses * math.e, rtol=1e-12)


def test_mc_variance_explosion(sup_norm):
    with pytest.raises(ImportanceVarianceError):
        mc_masses(sup_norm, proposal=ProposalSpec(rate=20.0), samples=20_000, seed=0, variance_threshold=10.0)
