"""Small meshes and analytic fields shared by the tests."""

from __future__ import annotations

import numpy as np

from tubeox.flow import FlowField
from tubeox.mesh import INLET, OUTLET, SYMMETRY, build_mesh, enrich_p2
from tubeox.meshgen import BundleGeometry, generate

SQUARE_MSH = """$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
6
1 1 2 3 3 1 2
2 1 2 2 2 2 3
3 1 2 3 3 3 4
4 1 2 1 1 4 1
5 2 2 0 1 1 2 3
6 2 2 0 1 1 3 4
$EndElements
"""


def rect_mesh(nx: int, ny: int | None = None, lx: float = 1.0, ly: float = 1.0, jitter: float = 0.0, seed: int = 0):
    """Structured triangulation of [0, lx] x [0, ly] with strip tags.

    Left edge Inlet, right edge Outlet, bottom and top Symmetry.
    """
    ny = ny or nx
    x = np.linspace(0, lx, nx + 1)
    y = np.linspace(0, ly, ny + 1)
    X, Y = np.meshgrid(x, y, indexing="xy")
    V = np.column_stack([X.ravel(), Y.ravel()])
    if jitter:
        rng = np.random.default_rng(seed)
        inner = (V[:, 0] > 0) & (V[:, 0] < lx) & (V[:, 1] > 0) & (V[:, 1] < ly)
        V[inner] += jitter * rng.uniform(-1, 1, (inner.sum(), 2)) * [lx / nx, ly / ny]
    idx = lambda i, j: j * (nx + 1) + i
    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            if (i + j) % 2:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    edges, codes = [], []
    for i in range(nx):
        edges.append((idx(i, 0), idx(i + 1, 0)))
        codes.append(SYMMETRY)
        edges.append((idx(i + 1, ny), idx(i, ny)))
        codes.append(SYMMETRY)
    for j in range(ny):
        edges.append((idx(nx, j), idx(nx, j + 1)))
        codes.append(OUTLET)
        edges.append((idx(0, j + 1), idx(0, j)))
        codes.append(INLET)
    return build_mesh(V, np.array(tris), np.array(edges), np.array(codes))


def interpolate_p2(p2, fn):
    """Blocked P2 vector of ``fn(points) -> (n, 2)``."""
    vals = fn(p2.nodes)
    return np.concatenate([vals[:, 0], vals[:, 1]])


def uniform_flow(p2, speed=1.0) -> FlowField:
    u = interpolate_p2(p2, lambda x: np.column_stack([np.full(len(x), speed), np.zeros(len(x))]))
    return FlowField(p2, u, np.zeros(p2.base.n_vertices), 1.0)


def small_bundle(arrangement="inline", n_tubes=3, h=0.12, **kw):
    g = BundleGeometry(arrangement=arrangement, n_tubes=n_tubes, boundary_h=h, interior_h=1.4 * h,
                       upstream_margin=2.0, downstream_margin=3.0, **kw)
    return g, generate(g)


def small_bundle_p2(arrangement="inline", n_tubes=3, h=0.12):
    g, m = small_bundle(arrangement, n_tubes, h)
    return g, enrich_p2(m)


def rates(errors, hs):
    errors, hs = np.asarray(errors), np.asarray(hs)
    return np.log(errors[:-1] / errors[1:]) / np.log(hs[:-1] / hs[1:])


def l2_error(mesh, kind, values, exact, degree=8):
    """L2 norm of ``values - exact`` with ``values`` a P1 or P2 nodal vector."""
    from tubeox.fem import ElementSpace, physical_points
    space = ElementSpace(mesh, kind, degree)
    base = mesh.base if kind == "P2" else mesh
    cells = mesh.cell_nodes if kind == "P2" else mesh.triangles
    vh = space.values(np.asarray(values)[cells])
    x = physical_points(base, space.rule)
    return float(np.sqrt(np.sum(space.dx * (vh - exact(x)) ** 2)))


def mms_flow(p2, re, convection=True):
    """Navier-Stokes (or Stokes) with the divergence-free pair
    u = (sin pi x sin pi y, cos pi x cos pi y), p = sin pi x cos pi y,
    Dirichlet data on the whole boundary and one pinned pressure vertex."""
    from tubeox.fem import merge_constraints
    from tubeox.flow import FlowProblem
    pi = np.pi

    def u_exact(x):
        X, Y = x[..., 0], x[..., 1]
        return np.stack([np.sin(pi * X) * np.sin(pi * Y), np.cos(pi * X) * np.cos(pi * Y)], axis=-1)

    def p_exact(x):
        return np.sin(pi * x[..., 0]) * np.cos(pi * x[..., 1])

    def forcing(x):
        X, Y = x[..., 0], x[..., 1]
        u = u_exact(x)
        f = 2 * pi ** 2 / re * u
        f[..., 0] += pi * np.cos(pi * X) * np.cos(pi * Y)
        f[..., 1] += -pi * np.sin(pi * X) * np.sin(pi * Y)
        if convection:
            s1, c1, s2, c2 = np.sin(pi * X), np.cos(pi * X), np.sin(pi * Y), np.cos(pi * Y)
            f[..., 0] += u[..., 0] * pi * c1 * s2 + u[..., 1] * pi * s1 * c2
            f[..., 1] += u[..., 0] * (-pi * s1 * c2) + u[..., 1] * (-pi * c1 * s2)
        return f

    base = p2.base
    n = p2.n_nodes
    nodes = np.unique(np.concatenate([p2.boundary_p2_nodes(t) for t in base.tags]))
    ub = u_exact(p2.nodes[nodes])
    cons = merge_constraints((nodes, ub[:, 0]), (n + nodes, ub[:, 1]))
    pin = int(np.argmin(np.linalg.norm(base.vertices - 0.5, axis=1)))
    prob = FlowProblem(p2, re, constraints=cons, forcing=forcing,
                       pressure_pin=(pin, float(p_exact(base.vertices[pin]))))
    return prob, u_exact, p_exact
