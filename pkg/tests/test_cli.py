import json
import os
import subprocess
import sys

import pytest

from tubeox.cli import FIGURES, main
from tubeox.io import read_text
from tubeox.mesh import parse_msh

SMALL = """\
grid = "custom"
n_tubes = 3
upstream_margin = 2.0
downstream_margin = 3.0
boundary_h = 0.15
interior_h = 0.2
re = 10.0
tau = 0.1
t_end = 0.5
snapshot_times = [0.2]
film_tubes = [2]
mass_tubes = [1, 2, 3]
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_mesh_command(tmp_path, config, capsys):
    code, out, _ = run(capsys, "mesh", "--config", str(config), "--out", str(tmp_path / "o"))
    assert code == 0
    summary = json.loads(out)["summary"]
    m = parse_msh(read_text(tmp_path / "o" / "mesh.msh"))
    assert m.n_vertices == summary["vertices"]
    rep = json.loads((tmp_path / "o" / "mesh_quality.jsonl").read_text())
    assert rep["min_angle_deg"] >= 20.7 and rep["failures"] == []


def test_flow_command(tmp_path, config, capsys):
    code, out, _ = run(capsys, "flow", "--config", str(config), "--out", str(tmp_path / "o"))
    assert code == 0
    assert json.loads(out)["summary"]["mass_imbalance"] <= 1e-8
    lines = (tmp_path / "o" / "newton.csv").read_text().splitlines()
    assert lines[0] == "configuration,re,iteration,absolute_residual,relative_residual"
    assert lines[1].startswith("inline,10.0,1,")
    assert (tmp_path / "o" / "flow.vtk").read_text().startswith("# vtk DataFile Version 3.0")
    assert (tmp_path / "o" / "flow_midline.csv").read_text().startswith("x1,u1,u2,p\n")


def test_oxidize_zero_horizon(tmp_path, config, capsys):
    code, out, _ = run(capsys, "oxidize", "--config", str(config), "--out", str(tmp_path / "o"), "--t-end", "0")
    assert code == 0
    assert json.loads(out)["summary"]["steps"] == 0
    assert (tmp_path / "o" / "oxidize_c_out.csv").read_text() == "t,c_out\n0.0,0.0\n"
    assert (tmp_path / "o" / "snapshots" / "c_t0.vtk").exists()


def test_oxidize_outputs_are_deterministic(tmp_path, config, capsys):
    outs = []
    for name in ("a", "b"):
        code, _, _ = run(capsys, "oxidize", "--config", str(config), "--out", str(tmp_path / name))
        assert code == 0
        outs.append(tmp_path / name)
    for rel in ("oxidize_c_out.csv", "oxidize_mass.csv", "oxidize_steps.csv", "film/tube2_t0.2.csv",
                "film/tube2_t0.5.csv"):
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()
    c_out = (outs[0] / "oxidize_c_out.csv").read_text().splitlines()
    assert c_out[0] == "t,c_out" and c_out[1] == "0.0,0.0" and len(c_out) == 7
    assert (outs[0] / "oxidize_mass.csv").read_text().startswith("t,m1,m2,m3\n")
    # post reuses the cached flow and the stored final state
    code, out, _ = run(capsys, "post", "--config", str(config), "--out", str(outs[0]))
    assert code == 0
    assert "c_out" in json.loads(out)["summary"]


def test_env_overrides_output_dir(tmp_path, config, capsys, monkeypatch):
    monkeypatch.setenv("TUBEOX_OUT", str(tmp_path / "env"))
    code, out, _ = run(capsys, "mesh", "--config", str(config), "--out", str(tmp_path / "flag"))
    assert code == 0
    assert (tmp_path / "env" / "mesh.msh").exists() and not (tmp_path / "flag").exists()


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("re = -3\n")
    code, out, err = run(capsys, "flow", "--config", str(bad), "--out", str(tmp_path))
    assert code == 2 and out == ""
    msg = json.loads(err)
    assert msg["error"] == "ConfigError" and msg["exit_code"] == 2 and "re" in msg["message"]


def test_unknown_figure(tmp_path, config, capsys):
    code, _, err = run(capsys, "reproduce", "fig99", "--config", str(config), "--out", str(tmp_path))
    assert code == 2 and "fig99" in json.loads(err)["message"]


def test_missing_mesh_file_is_io_error(tmp_path, config, capsys):
    code, _, err = run(capsys, "mesh", "--config", str(config), "--mesh", str(tmp_path / "none.msh"),
                       "--out", str(tmp_path))
    assert code == 4 and json.loads(err)["error"] == "OutputError"


def test_mesh_roundtrip_through_cli(tmp_path, config, capsys):
    assert run(capsys, "mesh", "--config", str(config), "--out", str(tmp_path / "a"))[0] == 0
    code, out, _ = run(capsys, "mesh", "--config", str(config), "--mesh", str(tmp_path / "a" / "mesh.msh"),
                       "--out", str(tmp_path / "b"))
    assert code == 0
    assert (tmp_path / "a" / "mesh.msh").read_bytes() == (tmp_path / "b" / "mesh.msh").read_bytes()


def test_figure_registry():
    assert {"table1", "fig7", "fig9", "fig11", "fig15", "fig17", "fig18", "fig20", "fig24", "fig26"} <= set(FIGURES)


def test_reproduce_fig20_small(tmp_path, config, capsys):
    code, out, _ = run(capsys, "reproduce", "fig20", "--config", str(config), "--out", str(tmp_path))
    assert code == 0
    summary = json.loads(out)["summary"]
    assert set(summary) == {"inline", "staggered"}
    for arr in ("inline", "staggered"):
        text = (tmp_path / f"{arr}_linear_film_tube2_t0.5.csv").read_text()
        assert text.startswith("theta,d\n0.0,")


def test_console_script(tmp_path, config):
    env = dict(os.environ, TUBEOX_OUT=str(tmp_path / "cs"))
    res = subprocess.run([sys.executable, "-m", "tubeox.cli", "mesh", "--config", str(config)],
                         capture_output=True, text=True, env=env)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["command"] == "mesh"
