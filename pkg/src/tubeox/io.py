"""File writers: MSH 2.2, legacy VTK and CSV."""

from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path

import numpy as np

from .errors import OutputError
from .mesh import Mesh, P2Mesh


def _open(path, mode="w"):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, mode, newline="", encoding="ascii")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from None


def _num(x) -> str:
    """Shortest round-tripping decimal form; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def format_msh(mesh: Mesh, physical=None) -> str:
    """MSH 2.2 ASCII text of ``mesh``; ``physical`` maps tag codes to physical ids."""
    physical = physical or (lambda code: int(code))
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$Nodes", str(mesh.n_vertices)]
    out += [f"{i + 1} {x:.17g} {y:.17g} 0" for i, (x, y) in enumerate(mesh.vertices)]
    out += ["$EndNodes", "$Elements", str(len(mesh.boundary_edges) + mesh.n_triangles)]
    k = 1
    for (a, b), code in zip(mesh.boundary_edges, mesh.boundary_codes):
        p = physical(code)
        out.append(f"{k} 1 2 {p} {p} {a + 1} {b + 1}")
        k += 1
    for a, b, c in mesh.triangles:
        out.append(f"{k} 2 2 0 1 {a + 1} {b + 1} {c + 1}")
        k += 1
    out.append("$EndElements")
    return "\n".join(out) + "\n"


def write_msh(mesh: Mesh, path, physical=None) -> Path:
    with _open(path) as fh:
        fh.write(format_msh(mesh, physical))
    return Path(path)


def write_vtk(path, mesh, point_data=None, cell_data=None, title="tubeox") -> Path:
    """Legacy ASCII VTK 3.0 unstructured grid of the linear triangles.

    ``point_data`` maps names to arrays on the vertices (scalars) or arrays
    of shape (n, 2) (written as 3-component vectors). P2 node arrays are
    restricted to the vertices.
    """
    base = mesh.base if isinstance(mesh, P2Mesh) else mesh
    nv, nt = base.n_vertices, base.n_triangles
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {nv} double"]
    lines += [f"{_num(x)} {_num(y)} 0" for x, y in base.vertices]
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in base.triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt

    def block(data, n):
        body = []
        for name, arr in data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 1:
                body += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                body += [_num(v) for v in arr[:n]]
            else:
                body.append(f"VECTORS {name} double")
                body += [f"{_num(a)} {_num(b)} 0" for a, b in arr[:n, :2]]
        return body

    if point_data:
        lines.append(f"POINT_DATA {nv}")
        lines += block(point_data, nv)
    if cell_data:
        lines.append(f"CELL_DATA {nt}")
        lines += block(cell_data, nt)
    with _open(path) as fh:
        fh.write("\n".join(lines) + "\n")
    return Path(path)


def write_csv(path, header, rows) -> Path:
    """CSV with a header row; floats in shortest round-trip form, NaN/None as empty."""
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if v is None or isinstance(v, (int, float, np.number)) else v for v in row])
    return Path(path)


def write_jsonl(path, records) -> Path:
    with _open(path) as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return Path(path)


def read_text(path) -> str:
    try:
        with open(path, encoding="ascii", errors="replace") as fh:
            return fh.read()
    except OSError as exc:
        raise OutputError(f"cannot read {os.fspath(path)}: {exc.strerror}") from None
