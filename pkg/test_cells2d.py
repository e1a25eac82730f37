import numpy as np
import pytest

from cells2d import (box, build_cells, clip_cell, clip_halfplane, is_sliver, merge_close, polygon_area)
from convex_core import GaugeTransform, PolyhedralPotential
from errors import IntegrabilityError, InvalidPotentialError
from test_data_generator import random_centered_measure

SUP_NORM_ATOMS = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]


def vertex_set(poly, digits=10):
    return {tuple(p) for p in np.round(np.asarray(poly), digits) + 0.0}


@pytest.fixture
def sup_norm_cells():
    return build_cells(PolyhedralPotential(SUP_NORM_ATOMS, np.zeros(4)))


def random_potential(seed, count=12):
    measure = random_centered_measure(count, 2, seed)
    values = 0.5 * np.random.default_rng(seed + 100).standard_normal(count)
    return PolyhedralPotential(measure.atoms, values)


def test_polygon_helpers():
    square = box(1.0)
    assert polygon_area(square) == pytest.approx(4.0)
    assert not is_sliver(square)
    assert is_sliver(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 1e-14]]))
    half = clip_halfplane(square, np.array([1.0, 0.0]), 0.0)
    assert polygon_area(half) == pytest.approx(2.0)
    assert len(clip_halfplane(square, np.array([1.0, 0.0]), -2.0)) == 0


def test_merge_close_drops_repeats():
    poly = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1e-14], [1.0, 1.0], [0.0, 1.0], [0.0, 1e-14]])
    assert len(merge_close(poly)) == 4


def test_sup_norm_cells_are_congruent(sup_norm_cells):
    assert sup_norm_cells.degenerate
    areas = [polygon_area(clip_cell(cell, 5.0)) for cell in sup_norm_cells.cells]
    np.testing.assert_allclose(areas, 25.0, rtol=1e-12)
    assert not any(cell.bounded for cell in sup_norm_cells.cells)


def test_quadrant_cell_clipped_to_unit_box(sup_norm_cells):
    poly = clip_cell(sup_norm_cells.cells[0], 1.0)
    assert vertex_set(poly) == {(0.0, 0.0), (1.0, -1.0), (1.0, 1.0)}
    assert polygon_area(poly) == pytest.approx(1.0)


def test_unbounded_cell_rays(sup_norm_cells):
    cell = sup_norm_cells.cells[0]
    assert vertex_set(cell.vertices) == {(0.0, 0.0)}
    s = 1 / np.sqrt(2)
    assert vertex_set(cell.rays) == vertex_set([[s, -s], [s, s]])


def test_low_value_swallows_origin():
    P = PolyhedralPotential(SUP_NORM_ATOMS, [-10.0, 0.0, 0.0, 0.0])
    cells = build_cells(P)
    near = np.array([[0.0, 0.0], [-4.0, 0.0], [0.0, 4.0], [-3.0, -3.0]])
    assert cells.locate(near).tolist() == [0, 0, 0, 0]


def test_bounded_cell_is_unchanged_by_clipping():
    atoms = SUP_NORM_ATOMS + [[0.0, 0.0]]
    P = PolyhedralPotential(atoms, [0.0, 0.0, 0.0, 0.0, -1.0])
    cell = build_cells(P).cells[4]
    assert cell.bounded
    assert vertex_set(cell.vertices) == {(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)}
    assert vertex_set(clip_cell(cell, 10.0)) == vertex_set(cell.vertices)


def test_inactive_atom_has_empty_cell():
    P = PolyhedralPotential(SUP_NORM_ATOMS + [[0.0, 0.0]], [0.0, 0.0, 0.0, 0.0, 1.0])
    cells = build_cells(P)
    assert cells.cells[4].empty
    assert len(clip_cell(cells.cells[4], 10.0)) == 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_point_location_matches_argmax(seed):
    P = random_potential(seed)
    cells = build_cells(P, workers=2)
    X = np.random.default_rng(seed).uniform(-3, 3, size=(20_000, 2))
    scores = X @ P.atoms.T - P.values
    top2 = np.sort(scores, axis=1)[:, -2:]
    clear = top2[:, 1] - top2[:, 0] > 1e-9
    _, idx = P.evaluate_many(X)
    np.testing.assert_array_equal(cells.locate(X[clear]), idx[clear])


def test_translation_moves_cells():
    P = random_potential(4)
    b = np.array([0.7, -0.3])
    moved = build_cells(P.apply_gauge(GaugeTransform(b, 0.0)))
    original = build_cells(P)
    X = np.random.default_rng(9).uniform(-2, 2, size=(2000, 2))
    np.testing.assert_array_equal(moved.locate(X + b), original.locate(X))


def test_records_carry_masses(sup_norm_cells):
    filled = sup_norm_cells.with_masses([2.0] * 4, 8.0)
    records = filled.to_records()
    assert [r["mass"] for r in records] == [2.0] * 4
    assert records[0]["bounded"] is False
    assert records[0]["rays"].count(";") == 1


def test_build_cells_needs_the_plane():
    with pytest.raises(InvalidPotentialError):
        build_cells(PolyhedralPotential([[-1.0], [1.0]], [0.0, 0.0]))


def test_build_cells_needs_integrability():
    with pytest.raises(IntegrabilityError):
        build_cells(PolyhedralPotential([[1.0, 0.0], [2.0, 1.0], [2.0, -1.0]], [0.0, 0.0, 0.0]))


def test_clip_cell_rejects_bad_radius(sup_norm_cells):
    with pytest.raises(ValueError):
        clip_cell(sup_norm_cells.cells[0], 0.0)
