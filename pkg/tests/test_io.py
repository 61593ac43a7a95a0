import numpy as np
import pytest

from _support import SQUARE_MSH, rect_mesh
from tubeox.errors import OutputError
from tubeox.io import format_msh, read_text, write_csv, write_jsonl, write_msh, write_vtk
from tubeox.mesh import parse_msh


def test_msh_roundtrip_square(tmp_path):
    m = parse_msh(SQUARE_MSH)
    path = write_msh(m, tmp_path / "sq.msh")
    m2 = parse_msh(read_text(path))
    np.testing.assert_array_equal(m2.vertices, m.vertices)
    np.testing.assert_array_equal(m2.triangles, m.triangles)
    np.testing.assert_array_equal(m2.boundary_edges, m.boundary_edges)
    np.testing.assert_array_equal(m2.boundary_codes, m.boundary_codes)
    assert format_msh(m2) == format_msh(m)


def test_vtk_constant_field(tmp_path):
    m = rect_mesh(3, 2)
    path = write_vtk(tmp_path / "c.vtk", m, point_data={"c": np.full(m.n_vertices, 0.25),
                                                         "u": np.ones((m.n_vertices, 2))},
                     cell_data={"area": m.areas})
    lines = path.read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2:4] == ["ASCII", "DATASET UNSTRUCTURED_GRID"]
    assert f"POINT_DATA {m.n_vertices}" in lines
    i = lines.index("SCALARS c double 1")
    assert lines[i + 2:i + 2 + m.n_vertices] == ["0.25"] * m.n_vertices
    j = lines.index("VECTORS u double")
    assert lines[j + 1] == "1.0 1.0 0"
    assert f"CELL_DATA {m.n_triangles}" in lines
    assert lines.count("5") == m.n_triangles


def test_csv_format(tmp_path):
    path = write_csv(tmp_path / "s.csv", ["t", "c_out"], [(0.0, 0.0), (0.1, 1 / 3), (0.2, float("nan")), (3, None)])
    assert path.read_bytes() == b"t,c_out\n0.0,0.0\n0.1,0.3333333333333333\n0.2,\n3,\n"


def test_jsonl(tmp_path):
    path = write_jsonl(tmp_path / "r.jsonl", [{"b": 1, "a": 2}])
    assert path.read_text() == '{"a": 2, "b": 1}\n'


def test_output_errors_name_the_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OutputError, match="file"):
        write_csv(blocker / "sub" / "a.csv", ["t"], [])
    with pytest.raises(OutputError, match="missing"):
        read_text(tmp_path / "missing.msh")
    assert OutputError.exit_code == 4
