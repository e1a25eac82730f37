import math

import numpy as np
import pytest

from convex_core import GaugeTransform, PolyhedralPotential
from errors import ImportanceVarianceError, IntegrabilityError, InvalidPotentialError
from forward import (AnalyticPotential, cube_potential, gaussian_potential, moment_measure_polyhedral,
                     moment_measure_sampled, necessary_conditions_report, normalized_cube_1d,
                     normalized_gaussian_1d, one_dim_identity_residual, parallelepiped_potential,
                     simplex_potential, sphere_potential, standard_gaussian_measure, surface_variant,
                     uniform_measure)
from measures import simplex_vertices
from quadrature import ProposalSpec
from test_data_generator import random_centered_measure

SUP_NORM_ATOMS = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
SAMPLES = 400_000


def within(estimate, se, target, sigmas=4.0):
    return np.all(np.abs(np.asarray(estimate) - target) <= sigmas * np.asarray(se))


# -- polyhedral push-forward ----------------------------------------------------------------

def test_symmetric_line_weights():
    P = PolyhedralPotential([[-1.0], [1.0]], [-math.log(2), -math.log(2)])
    estimate = moment_measure_polyhedral(P)
    np.testing.assert_allclose(estimate.weights, [0.5, 0.5], rtol=1e-14)
    assert estimate.raw_total == pytest.approx(1.0, rel=1e-14)


def test_sup_norm_weights():
    estimate = moment_measure_polyhedral(PolyhedralPotential(SUP_NORM_ATOMS, np.zeros(4)))
    np.testing.assert_allclose(estimate.weights, 0.25, rtol=1e-12)
    assert estimate.kind == "exact"


def test_asymmetric_line_weights():
    estimate = moment_measure_polyhedral(PolyhedralPotential([[-1.0], [2.0]], [0.0, 0.0]))
    np.testing.assert_allclose(estimate.weights, [2 / 3, 1 / 3], rtol=1e-14)
    assert estimate.barycenter[0] == pytest.approx(0.0, abs=1e-15)


def test_inactive_atoms_are_dropped():
    P = PolyhedralPotential([[-1.0], [0.0], [1.0]], [0.0, 1.0, 0.0])
    estimate = moment_measure_polyhedral(P)
    assert estimate.atom_indices.tolist() == [0, 2]


def test_translation_does_not_change_weights():
    measure = random_centered_measure(8, 2, seed=3)
    P = PolyhedralPotential(measure.atoms, np.random.default_rng(3).normal(size=8) * 0.5)
    moved = P.apply_gauge(GaugeTransform(np.array([0.4, -1.1]), 0.0))
    np.testing.assert_allclose(moment_measure_polyhedral(moved).weights,
                               moment_measure_polyhedral(P).weights, rtol=1e-9)


def test_constant_gauge_scales_raw_total():
    P = PolyhedralPotential(SUP_NORM_ATOMS, np.zeros(4))
    scaled = moment_measure_polyhedral(P.apply_gauge(GaugeTransform(np.zeros(2), 0.7)))
    assert scaled.raw_total == pytest.approx(8 * math.exp(0.7), rel=1e-12)
    np.testing.assert_allclose(scaled.weights, 0.25, rtol=1e-12)


def test_polyhedral_output_passes_conditions():
    measure = random_centered_measure(10, 2, seed=8)
    P = PolyhedralPotential(measure.atoms, np.random.default_rng(8).normal(size=10))
    assert necessary_conditions_report(moment_measure_polyhedral(P)).ok


def test_polyhedral_requires_integrability():
    with pytest.raises(IntegrabilityError):
        moment_measure_polyhedral(PolyhedralPotential([[1.0], [2.0]], [0.0, 0.0]))


def test_to_measure_round_trip():
    estimate = moment_measure_polyhedral(PolyhedralPotential(SUP_NORM_ATOMS, np.zeros(4)))
    measure = estimate.to_measure()
    np.testing.assert_array_equal(measure.atoms, estimate.atoms)
    assert measure.total_mass == pytest.approx(1.0)


# -- sampled push-forward -------------------------------------------------------------------

def test_gaussian_cloud():
    cloud = moment_measure_sampled(gaussian_potential(1), SAMPLES, seed=0)
    mean, mean_se = cloud.statistic(lambda Y: Y[:, 0])
    second, second_se = cloud.statistic(lambda Y: Y[:, 0] ** 2)
    assert within(mean, mean_se, 0.0)
    assert within(second, second_se, 1.0)
    assert necessary_conditions_report(cloud).ok


def test_cube_cloud():
    cloud = moment_measure_sampled(cube_potential(2), SAMPLES, seed=1)
    mean, mean_se = cloud.statistic(lambda Y: Y)
    spread, spread_se = cloud.statistic(lambda Y: np.abs(Y))
    assert within(mean, mean_se, 0.0)
    assert within(spread, spread_se, 0.5)
    assert np.abs(cloud.atoms).max() <= 1.0


def test_simplex_cloud():
    corners = simplex_vertices(2).atoms
    cloud = moment_measure_sampled(simplex_potential(2), SAMPLES, seed=2)
    mean, mean_se = cloud.statistic(lambda Y: Y)
    assert within(mean, mean_se, 0.0)
    assert np.all(cloud.atoms @ corners.T >= -0.5 - 1e-12)


def test_sphere_cloud_is_on_the_sphere():
    cloud = moment_measure_sampled(sphere_potential(2), 50_000, seed=3)
    np.testing.assert_allclose(np.linalg.norm(cloud.atoms, axis=1), 1.0, atol=1e-12)


def test_parallelepiped_cloud_support():
    T = np.array([[1.0, 0.5], [0.0, 2.0]])
    cloud = moment_measure_sampled(parallelepiped_potential(T), 50_000, seed=4)
    cube_coords = np.linalg.solve(T.T, cloud.atoms.T).T
    assert np.abs(cube_coords).max() <= 1.0 + 1e-12


def test_parallelepiped_needs_invertible_map():
    with pytest.raises(InvalidPotentialError):
        parallelepiped_potential([[1.0, 2.0], [2.0, 4.0]])


def test_sampling_is_reproducible():
    a = moment_measure_sampled(cube_potential(2), 10_000, seed=9)
    b = moment_measure_sampled(cube_potential(2), 10_000, seed=9)
    np.testing.assert_array_equal(a.atoms, b.atoms)
    np.testing.assert_array_equal(a.weights, b.weights)


def test_narrow_proposal_is_rejected():
    with pytest.raises(ImportanceVarianceError):
        moment_measure_sampled(sphere_potential(2), 20_000, seed=0, proposal=ProposalSpec(rate=20.0),
                               variance_threshold=10.0)


def test_finite_difference_gradient():
    analytic = cube_potential(2)
    numeric = AnalyticPotential("cube-fd", analytic.value, 2, tail_rate=1.0)
    X = np.random.default_rng(0).normal(size=(20, 2))
    np.testing.assert_allclose(numeric.grad(X), analytic.grad(X), atol=1e-8)


@pytest.mark.parametrize("factory", [gaussian_potential, cube_potential, simplex_potential, sphere_potential])
def test_gallery_potentials_are_convex(factory):
    assert factory(2).check_convexity() <= 1e-9


@pytest.mark.parametrize("value", [
    lambda X: 0.5 * np.sum(X * X, axis=1) + 20.0 * np.cos(X[:, 0]),
    lambda X: -0.5 * np.sum(X * X, axis=1),
])
def test_sampling_rejects_nonconvex_potential(value):
    potential = AnalyticPotential("wavy", value, 2, tail_rate=1.0)
    assert potential.check_convexity() > 1e-3
    with pytest.raises(InvalidPotentialError, match="convexity"):
        moment_measure_sampled(potential, 10_000, seed=0)


# -- necessary conditions and surface variant ---------------------------------------------------

def test_truncated_cloud_fails_barycenter():
    cloud = moment_measure_sampled(gaussian_potential(2), 100_000, seed=5)
    truncated = cloud.restrict(cloud.atoms[:, 0] <= 0)
    assert not necessary_conditions_report(truncated).barycenter_ok


def test_surface_variant_on_the_sphere_keeps_weights():
    estimate = moment_measure_polyhedral(PolyhedralPotential(SUP_NORM_ATOMS, np.zeros(4)))
    surface = surface_variant(estimate)
    np.testing.assert_allclose(surface.weights, estimate.weights, rtol=1e-12)
    assert surface.raw_total == pytest.approx(1.0)


def test_surface_variant_reweights_by_radius():
    estimate = moment_measure_polyhedral(PolyhedralPotential([[-1.0], [2.0]], [0.0, 0.0]))
    np.testing.assert_allclose(surface_variant(estimate).weights, [0.5, 0.5], rtol=1e-12)


def test_surface_variant_of_gaussian_cloud():
    cloud = moment_measure_sampled(gaussian_potential(1), SAMPLES, seed=6)
    surface = surface_variant(cloud)
    assert abs(surface.raw_total - math.sqrt(2 / math.pi)) <= 4 * surface.raw_total_error


# -- one-dimensional identity ------------------------------------------------------------------

def test_identity_for_gaussian():
    report = one_dim_identity_residual(normalized_gaussian_1d(), standard_gaussian_measure(),
                                       np.linspace(0.2, 2.0, 10))
    assert report.max_residual <= 1e-6
    assert report.potential_mass == pytest.approx(1.0, rel=1e-8)


def test_identity_for_uniform():
    report = one_dim_identity_residual(normalized_cube_1d(), uniform_measure(), np.linspace(0.1, 0.9, 9))
    assert report.max_residual <= 1e-6


def test_identity_detects_mismatch():
    report = one_dim_identity_residual(normalized_gaussian_1d(), uniform_measure(), np.linspace(0.1, 0.9, 9))
    assert report.max_residual >= 0.1


def test_identity_report_records_conventions():
    report = one_dim_identity_residual(normalized_gaussian_1d(), standard_gaussian_measure(), [1.0])
    assert "probability measure" in report.to_dict()["conventions"]


def test_identity_needs_positive_grid():
    with pytest.raises(ValueError):
        one_dim_identity_residual(normalized_gaussian_1d(), standard_gaussian_measure(), [0.0, 1.0])
