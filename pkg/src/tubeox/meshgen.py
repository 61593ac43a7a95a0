"""Strip domains for in-line and staggered tube bundles and their triangulation.

The strip spans ``0 <= x1 <= length`` and ``0 <= x2 <= strip_width``; tubes of
diameter 1 appear as half-circle notches cut into the symmetry edges.
Triangulation is a conforming Delaunay refinement in the spirit of Ruppert's
algorithm: circumcenters of poor or oversized triangles are inserted in
batches, boundary subsegments are split whenever they are encroached, and the
whole point set is re-triangulated with Qhull after every batch.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .errors import BudgetError, GeometryError, ResolutionError
from .mesh import (
    INLET,
    OUTLET,
    SYMMETRY,
    TUBE_BASE,
    TUBE_RADIUS,
    Circle,
    Mesh,
    build_mesh,
)

log = logging.getLogger(__name__)

RATIO_BOUND = math.sqrt(2.0)


class Arrangement(str, enum.Enum):
    INLINE = "inline"
    STAGGERED = "staggered"


@dataclass(frozen=True)
class BundleGeometry:
    arrangement: Arrangement = Arrangement.INLINE
    n_tubes: int = 10
    pitch: float = 2.0
    strip_width: float = 1.0
    upstream_margin: float = 3.0
    downstream_margin: float = 6.0
    boundary_h: float = 0.03
    interior_h: float = 0.04
    grading: float = 0.3
    max_vertices: int = 400_000

    def __post_init__(self):
        object.__setattr__(self, "arrangement", Arrangement(self.arrangement))
        if self.pitch <= 2 * TUBE_RADIUS:
            raise GeometryError(f"pitch {self.pitch} lets tubes of diameter 1 overlap")
        if self.upstream_margin <= TUBE_RADIUS or self.downstream_margin <= TUBE_RADIUS:
            raise GeometryError("margins must exceed the tube radius")
        if self.n_tubes < 0:
            raise GeometryError("n_tubes must be non-negative")
        if self.strip_width <= TUBE_RADIUS:
            raise GeometryError("strip_width must exceed the tube radius")
        if self.boundary_h <= 0 or self.interior_h <= 0:
            raise ResolutionError("mesh sizes must be positive")

    @property
    def length(self) -> float:
        return self.upstream_margin + max(self.n_tubes - 1, 0) * self.pitch + self.downstream_margin

    @property
    def midline(self) -> float:
        return 0.5 * self.strip_width

    def tube_centers(self) -> np.ndarray:
        k = np.arange(self.n_tubes)
        x1 = self.upstream_margin + k * self.pitch
        if self.arrangement is Arrangement.INLINE:
            x2 = np.zeros(self.n_tubes)
        else:
            x2 = np.where(k % 2 == 0, 0.0, self.strip_width)
        return np.column_stack([x1, x2])

    def circles(self) -> dict[int, Circle]:
        return {i + 1: Circle((float(c[0]), float(c[1])), TUBE_RADIUS)
                for i, c in enumerate(self.tube_centers())}

    def with_sizes(self, boundary_h, interior_h):
        return replace(self, boundary_h=boundary_h, interior_h=interior_h)

    def size_at(self, pts) -> np.ndarray:
        """Target edge length: ``boundary_h`` on tube walls growing to ``interior_h``."""
        pts = np.atleast_2d(pts)
        h = np.full(len(pts), self.interior_h)
        for c in self.tube_centers():
            dist = np.maximum(np.linalg.norm(pts - c, axis=1) - TUBE_RADIUS, 0.0)
            h = np.minimum(h, self.boundary_h + self.grading * dist)
        return h


@dataclass
class PSLG:
    """Closed boundary loop, counterclockwise around the fluid region.

    ``arc_tube[k]`` is the 1-based tube of segment ``k`` (0 for straight
    segments) and ``arc_theta[k]`` the polar angles of its endpoints.
    """

    points: np.ndarray
    segments: np.ndarray
    codes: np.ndarray
    arc_tube: np.ndarray
    arc_theta: np.ndarray
    circles: dict[int, Circle] = field(default_factory=dict)


def build_geometry(g: BundleGeometry) -> PSLG:
    if g.boundary_h > 0.5:
        raise ResolutionError(f"boundary_h = {g.boundary_h} under-resolves the tube arcs (max 0.5)")
    L, W = g.length, g.strip_width
    circles = g.circles()
    bottom = [(i, c) for i, c in circles.items() if c.center[1] == 0.0]
    top = [(i, c) for i, c in circles.items() if c.center[1] == W]

    pts: list[tuple[float, float]] = []
    segs, codes, tubes, thetas = [], [], [], []

    def add_point(p):
        pts.append((float(p[0]), float(p[1])))
        return len(pts) - 1

    def straight(a, b, code):
        ia = len(pts) - 1
        pa, pb = np.array(pts[ia]), np.asarray(b, dtype=float)
        n = max(1, math.ceil(np.linalg.norm(pb - pa) / _edge_size(g, pa, pb) - 1e-9))
        for k in range(1, n + 1):
            p = pb if k == n else pa + (pb - pa) * k / n
            j = add_point(p)
            segs.append((ia, j))
            codes.append(code)
            tubes.append(0)
            thetas.append((0.0, 0.0))
            ia = j

    def arc(i, circ, th0, th1, end):
        ia = len(pts) - 1
        n = max(2, math.ceil(abs(th1 - th0) * circ.radius / g.boundary_h - 1e-9))
        cx, cy = circ.center
        prev = th0
        for k in range(1, n + 1):
            th = th0 + (th1 - th0) * k / n
            if k == n:
                p = end
            else:
                p = (cx + circ.radius * math.cos(th), cy + circ.radius * math.sin(th))
            j = add_point(p)
            segs.append((ia, j))
            codes.append(TUBE_BASE + i)
            tubes.append(i)
            thetas.append((prev, th))
            prev = th
            ia = j

    # bottom edge, left to right
    add_point((0.0, 0.0))
    for i, c in sorted(bottom, key=lambda t: t[1].center[0]):
        cx = c.center[0]
        straight(None, (cx - c.radius, 0.0), SYMMETRY)
        arc(i, c, math.pi, 0.0, (cx + c.radius, 0.0))
    straight(None, (L, 0.0), SYMMETRY)
    straight(None, (L, W), OUTLET)
    # top edge, right to left
    for i, c in sorted(top, key=lambda t: -t[1].center[0]):
        cx = c.center[0]
        straight(None, (cx + c.radius, W), SYMMETRY)
        arc(i, c, 0.0, -math.pi, (cx - c.radius, W))
    straight(None, (0.0, W), SYMMETRY)
    # inlet, top to bottom; closes the loop on point 0
    ia = len(pts) - 1
    n = max(1, math.ceil(W / _edge_size(g, np.array([0.0, W]), np.array([0.0, 0.0])) - 1e-9))
    for k in range(1, n + 1):
        j = 0 if k == n else add_point((0.0, W - W * k / n))
        segs.append((ia, j))
        codes.append(INLET)
        tubes.append(0)
        thetas.append((0.0, 0.0))
        ia = j

    return PSLG(np.array(pts), np.array(segs, dtype=np.int64), np.array(codes, dtype=np.int64),
                np.array(tubes, dtype=np.int64), np.array(thetas), circles)


def _edge_size(g, pa, pb):
    samples = pa + np.linspace(0, 1, 9)[:, None] * (pb - pa)
    return float(g.size_at(samples).min())


# ----------------------------------------------------------------------------
# refinement

def _circumcircles(P, tri):
    a, b, c = P[tri[:, 0]], P[tri[:, 1]], P[tri[:, 2]]
    ba, ca = b - a, c - a
    d = 2.0 * (ba[:, 0] * ca[:, 1] - ba[:, 1] * ca[:, 0])
    bb, cc = (ba ** 2).sum(1), (ca ** 2).sum(1)
    ux = (ca[:, 1] * bb - ba[:, 1] * cc) / d
    uy = (ba[:, 0] * cc - ca[:, 0] * bb) / d
    center = a + np.column_stack([ux, uy])
    radius = np.hypot(ux, uy)
    lmin = np.sqrt(np.minimum(np.minimum(bb, cc), ((c - b) ** 2).sum(1)))
    return center, radius, lmin


class _Refiner:
    def __init__(self, pslg: PSLG, g: BundleGeometry, seed: int = 0):
        self.g = g
        self.circles = pslg.circles
        self.P = [tuple(p) for p in pslg.points]
        self.point_tube = [0] * len(self.P)
        for (a, b), t in zip(pslg.segments, pslg.arc_tube):
            if t:
                self.point_tube[a] = self.point_tube[b] = int(t)
        self.seg = [tuple(map(int, s)) for s in pslg.segments]
        self.code = pslg.codes.tolist()
        self.tube = pslg.arc_tube.tolist()
        self.theta = [tuple(t) for t in pslg.arc_theta]
        self.rng = np.random.default_rng(seed)
        self.rounds = 0

    # -- segments ---------------------------------------------------------
    def split_segment(self, k):
        a, b = self.seg[k]
        t = self.tube[k]
        if t:
            th0, th1 = self.theta[k]
            th = 0.5 * (th0 + th1)
            c = self.circles[t]
            p = (c.center[0] + c.radius * math.cos(th), c.center[1] + c.radius * math.sin(th))
            theta_a, theta_b = (th0, th), (th, th1)
        else:
            pa, pb = self.P[a], self.P[b]
            p = (0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1]))
            # keep points on axis-aligned edges exactly on the edge
            if pa[0] == pb[0]:
                p = (pa[0], p[1])
            if pa[1] == pb[1]:
                p = (p[0], pa[1])
            theta_a = theta_b = (0.0, 0.0)
        j = len(self.P)
        self.P.append(p)
        self.point_tube.append(t)
        self.seg[k] = (a, j)
        self.theta[k] = theta_a
        self.seg.append((j, b))
        self.code.append(self.code[k])
        self.tube.append(t)
        self.theta.append(theta_b)

    def segment_arrays(self):
        P = np.asarray(self.P)
        S = np.asarray(self.seg)
        mid = 0.5 * (P[S[:, 0]] + P[S[:, 1]])
        half = 0.5 * np.linalg.norm(P[S[:, 1]] - P[S[:, 0]], axis=1)
        return S, mid, half

    def encroached_by_points(self, S, mid, half, pts, exclude_endpoints=True):
        """Map segment index -> True for segments with a point strictly inside
        their diametral circle."""
        tree = cKDTree(pts)
        hits = tree.query_ball_point(mid, half * (1 - 1e-9))
        out = []
        for k, cand in enumerate(hits):
            if not cand:
                continue
            if exclude_endpoints:
                cand = [c for c in cand if c != S[k, 0] and c != S[k, 1]]
            if cand:
                out.append(k)
        return out

    # -- main loop ---------------------------------------------------------
    def triangulate(self):
        P = np.asarray(self.P)
        d = Delaunay(P)
        if len(d.coplanar):
            raise GeometryError(f"Qhull dropped {len(d.coplanar)} points")
        tri = d.simplices.astype(np.int64)
        a, b, c = P[tri[:, 0]], P[tri[:, 1]], P[tri[:, 2]]
        area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        tri[area < 0] = tri[area < 0][:, [0, 2, 1]]
        pt = np.asarray(self.point_tube)
        t0 = pt[tri[:, 0]]
        notch = (t0 > 0) & (t0 == pt[tri[:, 1]]) & (t0 == pt[tri[:, 2]])
        return tri[~notch]

    def run(self):
        g = self.g
        while True:
            self.rounds += 1
            if len(self.P) > g.max_vertices:
                raise BudgetError(f"refinement exceeded {g.max_vertices} vertices")
            S, mid, half = self.segment_arrays()
            P = np.asarray(self.P)
            enc = self.encroached_by_points(S, mid, half, P)
            if enc:
                for k in enc:
                    self.split_segment(k)
                continue
            tri = self.triangulate()
            center, R, lmin = _circumcircles(P, tri)
            h = g.size_at(P[tri].mean(axis=1))
            ratio = R / lmin
            size_bad = R > h / math.sqrt(3.0)
            shape_bad = ratio > RATIO_BOUND * (1 + 1e-9)
            bad = np.flatnonzero(size_bad | shape_bad)
            if len(bad) == 0:
                return P, tri
            prio = np.maximum(R[bad] * math.sqrt(3.0) / h[bad], ratio[bad] / RATIO_BOUND)
            order = np.lexsort((self.rng.permutation(len(bad)), -prio))
            bad = bad[order]
            cand = center[bad]
            # candidates encroaching a subsegment trigger a split instead
            seg_tree = cKDTree(mid)
            near = seg_tree.query_ball_point(cand, half.max())
            to_split = set()
            ok = np.ones(len(bad), dtype=bool)
            for i, ks in enumerate(near):
                for k in ks:
                    if np.sum((cand[i] - mid[k]) ** 2) < half[k] ** 2:
                        to_split.add(k)
                        ok[i] = False
                        break
            # spacing filter among the remaining candidates
            keep = []
            idx = np.flatnonzero(ok)
            if len(idx):
                ctree = cKDTree(cand[idx])
                rad = 0.6 * R[bad[idx]]
                neigh = ctree.query_ball_point(cand[idx], rad)
                blocked = np.zeros(len(idx), dtype=bool)
                for j in range(len(idx)):
                    if blocked[j]:
                        continue
                    keep.append(idx[j])
                    blocked[neigh[j]] = True
            for k in sorted(to_split):
                self.split_segment(k)
            for i in keep:
                self.P.append((float(cand[i, 0]), float(cand[i, 1])))
                self.point_tube.append(0)
            if not keep and not to_split:
                raise GeometryError("refinement stalled")

    def to_mesh(self, P, tri) -> Mesh:
        S = np.asarray(self.seg)
        return build_mesh(P, tri, S, np.asarray(self.code), tubes=self.circles)


def triangulate(pslg: PSLG, g: BundleGeometry, seed: int = 0) -> Mesh:
    """Quality triangulation of ``pslg``: circumradius-to-shortest-edge ratio
    at most sqrt(2) and circumradius at most ``size/sqrt(3)`` everywhere."""
    r = _Refiner(pslg, g, seed)
    P, tri = r.run()
    log.info("triangulated %d vertices / %d cells in %d rounds", len(P), len(tri), r.rounds)
    return r.to_mesh(P, tri)


def generate(g: BundleGeometry, seed: int = 0) -> Mesh:
    return triangulate(build_geometry(g), g, seed)


# Size presets, calibrated to these target vertex counts (in-line / staggered):
# coarse 8370 / 8362, basic 23493 / 23511, fine 71326 / 71246.
GRID_PRESETS = {
    "coarse": dict(boundary_h=0.059, interior_h=0.078),
    "basic": dict(boundary_h=0.035, interior_h=0.0465),
    "fine": dict(boundary_h=0.0198, interior_h=0.0265),
}


def preset_geometry(arrangement="inline", preset="basic", **overrides) -> BundleGeometry:
    kw = dict(GRID_PRESETS[preset])
    kw.update(overrides)
    return BundleGeometry(arrangement=Arrangement(arrangement), **kw)


def grid_suite(g: BundleGeometry, seed: int = 0) -> dict[str, Mesh]:
    return {name: generate(replace(g, **sizes), seed) for name, sizes in GRID_PRESETS.items()}
