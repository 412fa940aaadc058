import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldforge.geom import (
    CLASS_LEAF, CLASS_STEM, Axis, LabeledMesh, LeafAnchor, Skeleton, WindField, animate, leaf_mesh, merge_meshes,
    plant_mesh, polyline_length, skeletonize, transform_mesh, tube_mesh,
)
from fieldforge.plantsim import LeafParams, PlantNode, PlantParams, PlantStructure, TropismParams, grow


def chain(points, organ=0):
    nodes = [PlantNode(i, i - 1 if i else None, organ, tuple(map(float, p)), 0.5, float(i), 0)
             for i, p in enumerate(points)]
    return PlantStructure(nodes)


def straight_axis(n_seg, length=10.0, radius=1.0):
    z = np.linspace(0, length, n_seg + 1)
    pts = np.stack([np.zeros_like(z), np.zeros_like(z), z], axis=1)
    return Skeleton(axes=[Axis(pts, np.full(n_seg + 1, radius), z.copy(), CLASS_STEM, 3, 7)])


def edge_length_oracle(structure):
    # independent of skeletonize: every non-leaf edge belongs to exactly one axis
    nodes = structure.nodes
    return sum(math.dist(n.position, nodes[n.parent].position)
               for n in nodes if n.parent is not None and n.organ != 2)


def check_mesh(m: LabeledMesh):
    assert m.triangles.min() >= 0 and m.triangles.max() < m.n_vertices
    assert np.isfinite(m.vertices).all()
    assert np.allclose(np.linalg.norm(m.normals, axis=1), 1.0, atol=1e-6)
    assert len(m.tri_class) == len(m.tri_plant) == len(m.tri_organ) == m.n_triangles


# ---- skeletonize

def test_collinear_interior_vertex_merged():
    sk = skeletonize(chain([(0, 0, 0), (0, 0, 1), (0, 0, 2)]), 0.01)
    assert len(sk.axes) == 1 and len(sk.axes[0].vertices) == 2


def test_zero_tolerance_keeps_vertices():
    sk = skeletonize(chain([(0, 0, 0), (0, 0, 1), (0, 0, 2)]), 0.0)
    assert len(sk.axes[0].vertices) == 3


def test_bent_vertex_kept():
    sk = skeletonize(chain([(0, 0, 0), (0, 0, 1), (0.1, 0, 2)]), 0.01)
    assert len(sk.axes[0].vertices) == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**64 - 1), st.floats(5, 40))
def test_length_exact_without_merging(seed, days):
    s = grow(PlantParams(), seed, days)
    total = sum(polyline_length(a.vertices) for a in skeletonize(s, 0.0).axes)
    oracle = edge_length_oracle(s)
    assert total == pytest.approx(oracle, rel=1e-9, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**64 - 1))
def test_length_exact_for_collinear_merges(seed):
    # sigma = 0: every axis is a straight line, all interior vertices merge exactly
    p = replace(PlantParams(), tropism=TropismParams(kind="none", sigma=0.0))
    s = grow(p, seed, 30.0)
    sk = skeletonize(s, 0.01)
    assert all(len(a.vertices) == 2 for a in sk.axes)
    assert sum(polyline_length(a.vertices) for a in sk.axes) == pytest.approx(edge_length_oracle(s), rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**64 - 1))
def test_length_loss_bounded_by_tolerance(seed):
    s = grow(PlantParams(), seed, 30.0)
    tol = 0.01
    total = sum(polyline_length(a.vertices) for a in skeletonize(s, tol).axes)
    oracle = edge_length_oracle(s)
    assert total <= oracle * (1 + 1e-12)
    assert (oracle - total) / oracle <= 1.0 - math.cos(tol)


def test_leaves_become_anchors():
    s = grow(PlantParams(), 0, 30.0)
    sk = skeletonize(s, 0.01, plant_id=5)
    assert len(sk.leaves) == sum(n.organ == 2 for n in s.nodes)
    assert all(a.plant_id == 5 for a in sk.leaves)
    organ_ids = [a.organ_id for a in sk.axes] + [lf.organ_id for lf in sk.leaves]
    assert len(set(organ_ids)) == len(organ_ids)


# ---- tube_mesh

def test_tube_counts():
    m = tube_mesh(straight_axis(4), 6)
    assert (m.n_vertices, m.n_triangles) == (30, 48)
    check_mesh(m)
    assert set(m.labels()) == {(CLASS_STEM, 3, 7)}


def test_cylinder_area():
    r, L = 1.5, 12.0
    m = tube_mesh(straight_axis(5, L, r), 16)
    assert m.triangle_areas().sum() == pytest.approx(2 * math.pi * r * L, rel=0.05)


def test_tube_rejects_few_sides():
    with pytest.raises(ValueError):
        tube_mesh(straight_axis(2), 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(3, 12))
def test_tube_nondegenerate(seed, sides):
    sk = skeletonize(grow(PlantParams(), seed, 25.0), 0.01)
    m = tube_mesh(sk, sides)
    check_mesh(m)
    assert (m.triangle_areas() > 0).all()
    n = sum(len(a.vertices) for a in sk.axes)
    assert m.n_vertices == n * sides
    assert m.n_triangles == 2 * sides * (n - len(sk.axes))


def test_parallel_transport_on_bend():
    # ring frames must not twist: each ring's first offset stays orthogonal to its tangent
    pts = np.array([[0, 0, 0], [0, 0, 5], [2, 0, 9], [6, 0, 11]], dtype=float)
    sk = Skeleton(axes=[Axis(pts, np.ones(4), pts[:, 2].copy(), CLASS_STEM, 0, 0)])
    m = tube_mesh(sk, 8)
    check_mesh(m)
    rings = m.vertices.reshape(4, 8, 3) - pts[:, None, :]
    assert np.allclose(np.linalg.norm(rings, axis=2), 1.0)


# ---- leaf_mesh

def anchor():
    return LeafAnchor(np.array([1.0, 2.0, 3.0]), np.array([1.0, 0.0, 0.0]), 3.0, 2, 9)


def test_leaf_counts_and_labels():
    m = leaf_mesh(anchor(), PlantParams())
    assert (m.n_vertices, m.n_triangles) == (18, 16)
    check_mesh(m)
    assert set(m.labels()) == {(CLASS_LEAF, 2, 9)}


def test_flat_leaf_extent_is_length():
    lf = LeafParams(leaf_length=17.0, curvature=0.0)
    m = leaf_mesh(anchor(), lf)
    mid = m.vertices.reshape(9, 2, 3).mean(axis=1)
    assert np.linalg.norm(mid[-1] - mid[0]) == pytest.approx(17.0, abs=1e-9)


def test_leaf_width_peaks_mid_blade():
    lf = LeafParams(leaf_width=5.0, curvature=0.0)
    v = leaf_mesh(anchor(), lf).vertices.reshape(9, 2, 3)
    widths = np.linalg.norm(v[:, 0] - v[:, 1], axis=1)
    assert widths.max() == pytest.approx(5.0) and np.argmax(widths) == 4


# ---- animate

def test_zero_wind_is_identity():
    m = plant_mesh(grow(PlantParams(), 1, 20.0), PlantParams())
    out = animate(m, m.heights, WindField(speed=0.0), 1.3, 0.4)
    assert np.array_equal(out.vertices, m.vertices)


def test_ground_vertices_do_not_move():
    m = plant_mesh(grow(PlantParams(), 1, 20.0), PlantParams())
    out = animate(m, m.heights, WindField(speed=3.0), 0.7, 0.2)
    still = m.heights == 0
    assert still.any()
    assert np.array_equal(out.vertices[still], m.vertices[still])


def test_sway_formula_example():
    sk = straight_axis(2, 10.0)
    m = tube_mesh(sk, 4)
    wind = WindField(speed=2.0, direction=(0.0, 1.0), gust_frequency=0.5, sway_coefficient=1.5)
    out = animate(m, m.heights, wind, 0.0, math.pi / 2)
    top = m.heights == m.heights.max()
    d = out.vertices[top] - m.vertices[top]
    assert np.allclose(d, [0.0, 3.0, 0.0])


def test_leaf_flutter_term():
    m = leaf_mesh(anchor(), PlantParams())
    wind = WindField(speed=1.0, direction=(1.0, 0.0), gust_frequency=0.25, sway_coefficient=2.0)
    t, phase = 0.3, 0.1
    out = animate(m, m.heights, wind, t, phase)
    h = m.heights
    delta = 2.0 * 1.0 * (h / h.max()) ** 2 * math.sin(2 * math.pi * 0.25 * t + phase)
    expect = delta + 0.25 * delta * math.sin(4 * math.pi * 0.25 * t + 9)
    assert np.allclose(out.vertices[:, 0] - m.vertices[:, 0], expect, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 10), st.floats(0.05, 3), st.floats(0, 100), st.floats(0, 6.3), st.floats(0, 6.3))
def test_animation_periodic_and_label_preserving(speed, freq, t, phase, dir_angle):
    m = plant_mesh(grow(PlantParams(), 3, 20.0), PlantParams())
    wind = WindField(speed, (math.cos(dir_angle), math.sin(dir_angle)), freq, 1.5)
    a = animate(m, m.heights, wind, t, phase)
    b = animate(m, m.heights, wind, t + 1.0 / freq, phase)
    assert np.allclose(a.vertices, b.vertices, atol=1e-9 * (1 + speed * 1.5 * 30))
    assert a.labels() == m.labels()
    assert np.array_equal(a.triangles, m.triangles)
    assert np.array_equal(a.vertices[:, 2], m.vertices[:, 2])


def test_wind_validation():
    with pytest.raises(ValueError):
        WindField(speed=-1.0)
    with pytest.raises(ValueError):
        WindField(direction=(1.0, 1.0))


def test_animate_checks_heights():
    m = leaf_mesh(anchor(), PlantParams())
    with pytest.raises(ValueError):
        animate(m, m.heights[:-1], WindField(speed=1.0), 0.0)


# ---- composition and export

def test_plant_mesh_and_transform():
    m = plant_mesh(grow(PlantParams(), 0, 30.0), PlantParams(), plant_id=4)
    check_mesh(m)
    assert set(m.tri_class.tolist()) == {CLASS_STEM, CLASS_LEAF}
    assert set(m.tri_plant.tolist()) == {4}
    moved = transform_mesh(m, (10.0, -5.0), math.pi / 3, 0.5)
    check_mesh(moved)
    assert moved.labels() == m.labels()
    assert np.allclose(moved.triangle_areas(), 0.25 * m.triangle_areas())


def test_merge_offsets_indices():
    a, b = leaf_mesh(anchor(), PlantParams()), tube_mesh(straight_axis(3), 5)
    m = merge_meshes([a, b])
    assert m.n_vertices == a.n_vertices + b.n_vertices
    assert np.array_equal(m.triangles[a.n_triangles:], b.triangles + a.n_vertices)
    assert merge_meshes([]).n_vertices == 0


def test_mesh_text(tmp_path):
    m = tube_mesh(straight_axis(1), 3)
    text = m.to_text()
    lines = text.splitlines()
    assert lines[0] == "MESH v1 6 6"
    assert lines[1].startswith("v ") and lines[7].split()[0] == "t"
    assert lines[7].split()[4:] == ["1", "3", "7"]
    m.save(tmp_path / "m.txt")
    assert (tmp_path / "m.txt").read_text() == text
