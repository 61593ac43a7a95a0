import math

import numpy as np
import pytest

from _support import small_bundle
from tubeox.errors import BudgetError, ResolutionError
from tubeox.mesh import INLET, OUTLET, SYMMETRY, TUBE_BASE, BoundaryTag, boundary_nodes, triangle_angles, validate
from tubeox.meshgen import BundleGeometry, build_geometry, generate


def loop_area(pslg):
    P = pslg.points[pslg.segments]
    return 0.5 * np.sum(P[:, 0, 0] * P[:, 1, 1] - P[:, 1, 0] * P[:, 0, 1])


def test_single_tube_loop():
    g = BundleGeometry(n_tubes=1, boundary_h=0.1, interior_h=0.2)
    assert g.length == pytest.approx(9.0)
    pslg = build_geometry(g)
    # closed loop: every point starts exactly one segment and ends exactly one
    assert sorted(pslg.segments[:, 0]) == sorted(pslg.segments[:, 1]) == list(range(len(pslg.points)))
    # area of the 9 x 1 strip minus a half disc, up to the polygonal arc
    assert loop_area(pslg) == pytest.approx(9.0 - math.pi / 8, abs=5e-3)
    arc = pslg.points[np.unique(pslg.segments[pslg.arc_tube == 1])]
    np.testing.assert_allclose(np.hypot(arc[:, 0] - 3.0, arc[:, 1]), 0.5, atol=1e-14)
    assert set(pslg.codes) == {INLET, OUTLET, SYMMETRY, TUBE_BASE + 1}


def test_default_length_and_centers():
    g = BundleGeometry()
    assert g.length == pytest.approx(27.0)
    s = BundleGeometry(arrangement="staggered").tube_centers()
    np.testing.assert_allclose(s[:3], [[3, 0], [5, 1], [7, 0]])
    np.testing.assert_allclose(BundleGeometry().tube_centers()[:, 1], 0.0)


def test_boundary_h_too_large():
    with pytest.raises(ResolutionError):
        build_geometry(BundleGeometry(n_tubes=2, boundary_h=0.6, interior_h=0.6))
    with pytest.raises(ResolutionError):
        BundleGeometry(boundary_h=0.0)


@pytest.mark.parametrize("arrangement", ["inline", "staggered"])
def test_small_bundle_quality(arrangement):
    g, m = small_bundle(arrangement)
    rep = validate(m, n_tubes=3)
    assert rep.ok and rep.boundary_loops == 1
    assert rep.min_angle_deg >= 20.7
    assert m.areas.sum() == pytest.approx(g.length - 3 * math.pi / 8, rel=5e-3)
    for i, c in m.tubes.items():
        nodes = boundary_nodes(m, BoundaryTag.tube_wall(i)).nodes
        r = np.hypot(*(m.vertices[nodes] - c.center).T)
        np.testing.assert_allclose(r, 0.5, atol=1e-12)


def test_deterministic():
    _, a = small_bundle()
    _, b = small_bundle()
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.triangles, b.triangles)


def test_refinement_scales_cell_count():
    base = BundleGeometry(n_tubes=2, boundary_h=0.1, interior_h=0.2, upstream_margin=2, downstream_margin=3)
    n1 = generate(base).n_triangles
    n2 = generate(base.with_sizes(0.05, 0.1)).n_triangles
    assert 3.2 <= n2 / n1 <= 4.8


def test_tube_arcs_resolved_alike(coarse_inline_mesh):
    m = coarse_inline_mesh
    # every tube sees about the same resolution; encroachment splits differ slightly
    counts = [len(boundary_nodes(m, BoundaryTag.tube_wall(i)).nodes) for i in m.tubes]
    assert max(counts) <= 1.15 * min(counts)


def test_coarse_counts(coarse_inline_mesh, coarse_staggered_mesh):
    assert abs(coarse_inline_mesh.n_vertices / 8370 - 1) <= 0.25
    assert abs(coarse_staggered_mesh.n_vertices / 8362 - 1) <= 0.25
    ang = triangle_angles(coarse_staggered_mesh.vertices, coarse_staggered_mesh.triangles)
    assert ang.min() >= 20.7


def test_budget_error():
    g = BundleGeometry(n_tubes=2, boundary_h=0.05, interior_h=0.05, max_vertices=200)
    with pytest.raises(BudgetError):
        generate(g)
