"""Triangle mesh data model, MSH 2.2 ingestion and quadratic node enrichment.

All coordinates are dimensionless (tube diameter 1). ``x1`` is the
streamwise coordinate (inlet at the smallest ``x1``), ``x2`` the transverse
one.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    EmptySelectionError,
    GeometryError,
    ParseError,
    TagError,
    TopologyError,
)

log = logging.getLogger(__name__)

TUBE_RADIUS = 0.5
INLET, OUTLET, SYMMETRY = 1, 2, 3
TUBE_BASE = 10


@dataclass(frozen=True, order=True)
class BoundaryTag:
    """One of Inlet, Outlet, Symmetry or TubeWall(i) with 1-based ``i``.

    The integer ``code`` doubles as the default MSH physical tag.
    """

    code: int

    def __post_init__(self):
        if self.code not in (INLET, OUTLET, SYMMETRY) and self.code <= TUBE_BASE:
            raise TagError(f"invalid boundary tag code {self.code}")

    @classmethod
    def inlet(cls):
        return cls(INLET)

    @classmethod
    def outlet(cls):
        return cls(OUTLET)

    @classmethod
    def symmetry(cls):
        return cls(SYMMETRY)

    @classmethod
    def tube_wall(cls, i: int):
        if i < 1:
            raise TagError(f"tube index must be >= 1, got {i}")
        return cls(TUBE_BASE + i)

    @classmethod
    def parse(cls, text: str) -> "BoundaryTag":
        """Inverse of ``str``: 'Inlet', 'Outlet', 'Symmetry', 'TubeWall(3)'."""
        text = text.strip()
        names = {"inlet": INLET, "outlet": OUTLET, "symmetry": SYMMETRY}
        if text.lower() in names:
            return cls(names[text.lower()])
        m = re.fullmatch(r"(?i)tubewall\((\d+)\)", text)
        if m:
            return cls.tube_wall(int(m.group(1)))
        raise TagError(f"cannot parse boundary tag {text!r}")

    @property
    def is_tube(self) -> bool:
        return self.code > TUBE_BASE

    @property
    def tube_index(self) -> int:
        return self.code - TUBE_BASE if self.is_tube else 0

    def __str__(self):
        if self.is_tube:
            return f"TubeWall({self.tube_index})"
        return {INLET: "Inlet", OUTLET: "Outlet", SYMMETRY: "Symmetry"}[self.code]

    __repr__ = __str__


def default_tag_map(physical: int) -> BoundaryTag:
    """{1: Inlet, 2: Outlet, 3: Symmetry, 10+i: TubeWall(i)}."""
    try:
        return BoundaryTag(physical)
    except TagError:
        raise TagError(f"unknown physical tag {physical}") from None


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float = TUBE_RADIUS

    def project(self, pts: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        d = pts - c
        return c + self.radius * d / np.linalg.norm(d, axis=-1, keepdims=True)

    def angle(self, pts: np.ndarray) -> np.ndarray:
        d = np.asarray(pts) - np.asarray(self.center)
        return np.arctan2(d[..., 1], d[..., 0])


def _signed_areas(vertices, triangles):
    p0, p1, p2 = (vertices[triangles[:, k]] for k in range(3))
    e1, e2 = p1 - p0, p2 - p0
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


@dataclass(frozen=True, eq=False)
class Mesh:
    """Straight-sided triangulation of the fluid region.

    ``boundary_edges`` are stored in the counterclockwise orientation of the
    triangle that owns them (fluid on the left), ``boundary_codes`` holds one
    ``BoundaryTag.code`` per edge and ``tubes`` maps tube index to its circle.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_codes: np.ndarray
    tubes: Mapping[int, Circle] = field(default_factory=dict)

    def __post_init__(self):
        for name, dtype in (("vertices", float), ("triangles", np.int64),
                            ("boundary_edges", np.int64), ("boundary_codes", np.int64)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "tubes", dict(self.tubes))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)

    @property
    def tags(self) -> list[BoundaryTag]:
        return [BoundaryTag(int(c)) for c in np.unique(self.boundary_codes)]

    def edges_with(self, tag) -> np.ndarray:
        """Indices of boundary edges carrying ``tag`` (a tag or iterable of tags)."""
        codes = _codes(tag)
        return np.flatnonzero(np.isin(self.boundary_codes, codes))

    @property
    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _codes(tag) -> list[int]:
    if isinstance(tag, BoundaryTag):
        return [tag.code]
    return [t.code for t in tag]


@dataclass(frozen=True, eq=False)
class P2Mesh:
    """Mesh plus one node per undirected edge.

    Global node numbering: vertices first, then edges in sorted
    vertex-pair order. ``cell_nodes`` lists per triangle the vertices
    ``v0, v1, v2`` followed by the edge nodes of ``(v0,v1), (v1,v2), (v2,v0)``.
    """

    base: Mesh
    edges: np.ndarray
    edge_nodes: np.ndarray
    cell_edges: np.ndarray
    boundary_edge_ids: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.base.n_vertices + len(self.edges)

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.vstack([self.base.vertices, self.edge_nodes])

    @cached_property
    def cell_nodes(self) -> np.ndarray:
        return np.hstack([self.base.triangles, self.base.n_vertices + self.cell_edges])

    def boundary_p2_nodes(self, tag) -> np.ndarray:
        """All P2 node indices (vertices and edge nodes) on edges with ``tag``."""
        ids = self.base.edges_with(tag)
        verts = self.base.boundary_edges[ids].ravel()
        mids = self.base.n_vertices + self.boundary_edge_ids[ids]
        return np.unique(np.concatenate([verts, mids]))


# ----------------------------------------------------------------------------
# MSH 2.2 reader

_SECTION = re.compile(r"^\$(\w+)$")


def parse_msh(text, tag_map=default_tag_map) -> Mesh:
    """Read an ASCII MSH 2.2 file given as a string or an iterable of lines.

    ``tag_map`` turns the physical tag of a line element into a
    ``BoundaryTag``; it may be a callable or a mapping.
    """
    if isinstance(text, str):
        lines = text.splitlines()
    else:
        lines = [ln.rstrip("\n") for ln in text]
    if isinstance(tag_map, Mapping):
        mapping = dict(tag_map)

        def tag_map(phys):
            if phys not in mapping:
                raise TagError(f"unknown physical tag {phys}")
            tag = mapping[phys]
            return tag if isinstance(tag, BoundaryTag) else BoundaryTag.parse(str(tag))

    node_ids: dict[int, int] = {}
    coords: list[tuple[float, float]] = []
    tri_rows: list[tuple[int, int, int]] = []
    line_rows: list[tuple[int, int, int, int]] = []  # (a, b, physical, lineno)
    seen_format = False

    i = 0
    n = len(lines)

    def next_line():
        nonlocal i
        while i < n and not lines[i].strip():
            i += 1
        if i >= n:
            raise ParseError("unexpected end of file", i)
        i += 1
        return i, lines[i - 1].strip()

    while i < n:
        if not lines[i].strip():
            i += 1
            continue
        lineno, head = next_line()
        m = _SECTION.match(head)
        if not m or m.group(1).startswith("End"):
            raise ParseError(f"expected section header, got {head!r}", lineno)
        name = m.group(1)
        end = f"$End{name}"
        if name == "MeshFormat":
            lineno, body = next_line()
            parts = body.split()
            if len(parts) < 3 or not parts[0].startswith("2."):
                raise ParseError(f"unsupported mesh format {body!r}", lineno)
            if parts[1] != "0":
                raise ParseError("binary MSH is not supported", lineno)
            seen_format = True
        elif name == "Nodes":
            count = _int(*next_line())
            for _ in range(count):
                lineno, body = next_line()
                parts = body.split()
                if len(parts) < 4:
                    raise ParseError(f"malformed node record {body!r}", lineno)
                try:
                    nid = int(parts[0])
                    x, y = float(parts[1]), float(parts[2])
                except ValueError:
                    raise ParseError(f"malformed node record {body!r}", lineno) from None
                node_ids[nid] = len(coords)
                coords.append((x, y))
        elif name == "Elements":
            count = _int(*next_line())
            for _ in range(count):
                lineno, body = next_line()
                try:
                    parts = [int(p) for p in body.split()]
                    etype, ntags = parts[1], parts[2]
                except (ValueError, IndexError):
                    raise ParseError(f"malformed element record {body!r}", lineno) from None
                tags = parts[3:3 + ntags]
                conn = parts[3 + ntags:]
                expected = {1: 2, 2: 3}.get(etype)
                if expected is None:
                    log.warning("skipping element of type %d at line %d", etype, lineno)
                    continue
                if len(conn) != expected:
                    raise ParseError(f"element needs {expected} nodes: {body!r}", lineno)
                try:
                    idx = [node_ids[c] for c in conn]
                except KeyError as exc:
                    raise ParseError(f"element references unknown node {exc.args[0]}", lineno) from None
                if etype == 2:
                    tri_rows.append(tuple(idx))
                else:
                    phys = tags[0] if tags else 0
                    line_rows.append((idx[0], idx[1], phys, lineno))
        else:
            # $PhysicalNames and unknown sections are skipped wholesale
            while True:
                lineno, body = next_line()
                if body.startswith("$"):
                    break
            if body != end:
                raise ParseError(f"expected {end}, got {body!r}", lineno)
            continue
        lineno, body = next_line()
        if body != end:
            raise ParseError(f"expected {end}, got {body!r}", lineno)

    if not seen_format:
        raise ParseError("missing $MeshFormat section", 1)
    if not tri_rows:
        raise ParseError("no triangle elements found", n)

    triangles = np.array(tri_rows, dtype=np.int64)
    used = np.unique(triangles)
    renumber = -np.ones(len(coords), dtype=np.int64)
    renumber[used] = np.arange(len(used))
    vertices = np.array(coords, dtype=float)[used]
    triangles = renumber[triangles]

    codes, edges = [], []
    for a, b, phys, lineno in line_rows:
        tag = tag_map(phys)
        if renumber[a] < 0 or renumber[b] < 0:
            raise TopologyError(f"line element at line {lineno} is not attached to any triangle")
        edges.append((renumber[a], renumber[b]))
        codes.append(tag.code)

    return build_mesh(vertices, triangles, np.array(edges, dtype=np.int64).reshape(-1, 2),
                      np.array(codes, dtype=np.int64), tubes=None)


def _int(lineno, body):
    try:
        return int(body)
    except ValueError:
        raise ParseError(f"expected an integer count, got {body!r}", lineno) from None


def build_mesh(vertices, triangles, boundary_edges, boundary_codes, tubes=None) -> Mesh:
    """Normalise orientation, orient boundary edges and validate.

    When ``tubes`` is None the circle of each tube is recovered by a
    least-squares fit through its wall vertices.
    """
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.array(triangles, dtype=np.int64)
    area = _signed_areas(vertices, triangles)
    flip = area < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    boundary_edges = np.asarray(boundary_edges, dtype=np.int64).reshape(-1, 2)
    boundary_codes = np.asarray(boundary_codes, dtype=np.int64)
    owner = _edge_owner_orientation(triangles)
    oriented = []
    for a, b in boundary_edges:
        key = (min(a, b), max(a, b))
        if key not in owner:
            raise TopologyError(f"boundary edge ({a}, {b}) is not an edge of any triangle")
        oriented.append(owner[key])
    boundary_edges = np.array(oriented, dtype=np.int64).reshape(-1, 2)

    if tubes is None:
        tubes = {}
        for code in np.unique(boundary_codes):
            if code > TUBE_BASE:
                pts = vertices[np.unique(boundary_edges[boundary_codes == code])]
                tubes[int(code - TUBE_BASE)] = _fit_circle(pts)
    mesh = Mesh(vertices, triangles, boundary_edges, boundary_codes, tubes)
    report = validate(mesh)
    if report.failures:
        raise TopologyError("invalid mesh: " + "; ".join(report.failures[:5]))
    return mesh


def _edge_owner_orientation(triangles):
    owner = {}
    for tri in triangles:
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            owner[(min(a, b), max(a, b))] = (a, b)
    return owner


def _fit_circle(pts) -> Circle:
    # algebraic (Kasa) fit, exact for points on a circle
    A = np.column_stack([2 * pts[:, 0], 2 * pts[:, 1], np.ones(len(pts))])
    rhs = (pts ** 2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    cx, cy = sol[0], sol[1]
    r = math.sqrt(sol[2] + cx * cx + cy * cy)
    # snap the center to a clean value when the fit is exact to rounding
    center = tuple(float(np.round(v, 9)) if abs(v - np.round(v, 9)) < 1e-11 else float(v)
                   for v in (cx, cy))
    if abs(r - TUBE_RADIUS) < 1e-9:
        r = TUBE_RADIUS
    return Circle(center, r)


# ----------------------------------------------------------------------------
# validation

@dataclass
class ValidationReport:
    n_vertices: int
    n_triangles: int
    area_range: tuple[float, float]
    min_angle_deg: float
    boundary_loops: int
    tag_counts: dict[str, int]
    failures: list[str] = field(default_factory=list)
    bad_triangles: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def as_dict(self):
        return {
            "n_vertices": self.n_vertices,
            "n_triangles": self.n_triangles,
            "area_min": self.area_range[0],
            "area_max": self.area_range[1],
            "min_angle_deg": self.min_angle_deg,
            "boundary_loops": self.boundary_loops,
            "tag_counts": self.tag_counts,
            "failures": self.failures,
        }


def triangle_angles(vertices, triangles) -> np.ndarray:
    """Interior angles in degrees, shape (n_triangles, 3)."""
    p = vertices[triangles]
    out = np.empty(triangles.shape)
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cross = np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
        out[:, k] = np.degrees(np.arctan2(cross, (a * b).sum(axis=1)))
    return out


def validate(mesh: Mesh, n_tubes: int | None = None) -> ValidationReport:
    failures: list[str] = []
    area = mesh.areas
    bad = np.flatnonzero(area <= 0).tolist()
    if bad:
        failures.append(f"non-positive area in triangles {bad[:10]}")
    with np.errstate(invalid="ignore", divide="ignore"):
        angles = triangle_angles(mesh.vertices, mesh.triangles)
    min_angle = float(np.nanmin(angles)) if len(angles) else 0.0

    # free edges (used by a single triangle) must coincide with tagged edges
    tri = mesh.triangles
    all_edges = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(all_edges, axis=0, return_counts=True)
    if np.any(counts > 2):
        failures.append(f"{int(np.sum(counts > 2))} non-manifold edges")
    free = {tuple(e) for e in uniq[counts == 1]}
    bsorted = [tuple(sorted(map(int, e))) for e in mesh.boundary_edges]
    bset = set(bsorted)
    if len(bset) != len(bsorted):
        failures.append("duplicate boundary edges (an edge carries more than one tag)")
    if bset - free:
        failures.append(f"{len(bset - free)} tagged edges are not on the boundary")
    if free - bset:
        failures.append(f"{len(free - bset)} boundary edges carry no tag")

    # loops: each boundary vertex must have exactly one outgoing and one incoming edge
    loops = 0
    if len(mesh.boundary_edges):
        succ: dict[int, int] = {}
        indeg: dict[int, int] = {}
        for a, b in mesh.boundary_edges:
            a, b = int(a), int(b)
            if a in succ:
                failures.append(f"boundary vertex {a} has two outgoing edges")
            succ[a] = b
            indeg[b] = indeg.get(b, 0) + 1
        if any(v != 1 for v in indeg.values()) or set(indeg) != set(succ):
            failures.append("boundary edges do not form closed loops")
        else:
            seen = set()
            for start in succ:
                if start in seen:
                    continue
                loops += 1
                v = start
                while v not in seen:
                    seen.add(v)
                    v = succ[v]

    tag_counts: dict[str, int] = {}
    for code in mesh.boundary_codes:
        key = str(BoundaryTag(int(code)))
        tag_counts[key] = tag_counts.get(key, 0) + 1

    limit = n_tubes if n_tubes is not None else (max(mesh.tubes) if mesh.tubes else 0)
    for code in np.unique(mesh.boundary_codes):
        tag = BoundaryTag(int(code))
        if not tag.is_tube:
            continue
        i = tag.tube_index
        if i > limit or i not in mesh.tubes:
            failures.append(f"{tag} exceeds the configured tube count {limit}")
            continue
        circ = mesh.tubes[i]
        pts = mesh.vertices[np.unique(mesh.boundary_edges[mesh.boundary_codes == code])]
        dev = np.abs(np.linalg.norm(pts - np.asarray(circ.center), axis=1) - TUBE_RADIUS)
        if dev.max() > 1e-10:
            failures.append(f"{tag} vertices deviate {dev.max():.2e} from radius {TUBE_RADIUS}")

    return ValidationReport(
        n_vertices=mesh.n_vertices,
        n_triangles=mesh.n_triangles,
        area_range=(float(area.min()), float(area.max())) if len(area) else (0.0, 0.0),
        min_angle_deg=min_angle,
        boundary_loops=loops,
        tag_counts=tag_counts,
        failures=failures,
        bad_triangles=bad,
    )


# ----------------------------------------------------------------------------
# P2 enrichment

def unique_edges(triangles):
    """Sorted unique vertex pairs and the (n_triangles, 3) local edge map.

    Local edge k joins local vertices k and k+1 (mod 3).
    """
    local = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    local = np.sort(local, axis=1)
    edges, inverse = np.unique(local, axis=0, return_inverse=True)
    cell_edges = inverse.reshape(3, len(triangles)).T
    return edges, np.ascontiguousarray(cell_edges)


def enrich_p2(mesh: Mesh) -> P2Mesh:
    edges, cell_edges = unique_edges(mesh.triangles)
    V = mesh.vertices
    mid = 0.5 * (V[edges[:, 0]] + V[edges[:, 1]])

    # position of each boundary edge in the sorted edge list
    bsorted = np.sort(mesh.boundary_edges, axis=1)
    key = edges[:, 0] * (len(V) + 1) + edges[:, 1]
    bkey = bsorted[:, 0] * (len(V) + 1) + bsorted[:, 1]
    bids = np.searchsorted(key, bkey)
    if len(bids) and not np.array_equal(key[bids], bkey):
        raise TopologyError("boundary edge missing from the triangulation")

    for code in np.unique(mesh.boundary_codes):
        tag = BoundaryTag(int(code))
        if not tag.is_tube:
            continue
        circ = mesh.tubes.get(tag.tube_index)
        if circ is None:
            raise GeometryError(f"no circle registered for {tag}")
        sel = bids[mesh.boundary_codes == code]
        ends = V[edges[sel]]
        r = np.linalg.norm(ends - np.asarray(circ.center), axis=2)
        off = np.abs(r - circ.radius) > 1e-8
        if np.any(off):
            raise GeometryError(f"{tag} edge has an endpoint off its circle (cannot project)")
        mid[sel] = circ.project(mid[sel])
    return P2Mesh(mesh, edges, mid, cell_edges, bids)


# ----------------------------------------------------------------------------
# boundary traces

@dataclass(frozen=True)
class BoundarySelection:
    """Boundary vertices in walking order with lumped arc-length weights."""

    nodes: np.ndarray
    weights: np.ndarray
    chains: list[np.ndarray]

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def boundary_nodes(mesh, tag) -> BoundarySelection:
    """Vertices of the edges carrying ``tag`` ordered along the boundary.

    ``tag`` may be a single tag or an iterable of tags. Each weight is half
    the summed length of the adjacent segments; tube-wall segments use the
    true arc length between their endpoints.
    """
    base = mesh.base if isinstance(mesh, P2Mesh) else mesh
    ids = base.edges_with(tag)
    if len(ids) == 0:
        raise EmptySelectionError(f"no boundary edges tagged {tag}")
    edges = base.boundary_edges[ids]
    codes = base.boundary_codes[ids]
    lengths = segment_lengths(base, edges, codes)

    succ = {int(a): (int(b), k) for k, (a, b) in enumerate(edges)}
    incoming = {int(b) for _, b in edges}
    starts = [int(a) for a, _ in edges if int(a) not in incoming]
    chains = []
    weights: dict[int, float] = {}
    visited_edges = set()
    order: list[int] = []

    def walk(start):
        chain = [start]
        v = start
        while v in succ:
            nxt, k = succ[v]
            if k in visited_edges:
                break
            visited_edges.add(k)
            weights[v] = weights.get(v, 0.0) + 0.5 * lengths[k]
            weights[nxt] = weights.get(nxt, 0.0) + 0.5 * lengths[k]
            v = nxt
            if v == start:
                break
            chain.append(v)
        return chain

    for s in sorted(starts):
        chains.append(walk(s))
    for k in range(len(edges)):
        if k not in visited_edges:
            chains.append(walk(int(edges[k, 0])))
    for ch in chains:
        order.extend(ch)
    nodes = np.array(order, dtype=np.int64)
    return BoundarySelection(nodes, np.array([weights[v] for v in order]),
                             [np.array(c, dtype=np.int64) for c in chains])


def segment_lengths(mesh: Mesh, edges, codes) -> np.ndarray:
    V = mesh.vertices
    lengths = np.linalg.norm(V[edges[:, 1]] - V[edges[:, 0]], axis=1)
    for code in np.unique(codes):
        if code <= TUBE_BASE:
            continue
        circ = mesh.tubes[int(code - TUBE_BASE)]
        sel = codes == code
        chord = lengths[sel]
        lengths[sel] = 2 * circ.radius * np.arcsin(np.clip(chord / (2 * circ.radius), 0, 1))
    return lengths


def tube_tags(mesh: Mesh) -> list[BoundaryTag]:
    return [t for t in mesh.tags if t.is_tube]


def ensure_tags(mesh: Mesh, tags: Iterable[BoundaryTag]):
    missing = [t for t in tags if t.code not in set(mesh.boundary_codes.tolist())]
    if missing:
        raise EmptySelectionError(f"mesh has no edges tagged {missing}")
