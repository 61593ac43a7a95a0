import pytest

from tubeox.config import DimensionalInputs, SimConfig, config_from_dict, load_config, nondimensionalize
from tubeox.errors import ConfigError


def inputs(**kw):
    base = dict(rho=1.0, mu=1.0, l=1.0, u=1.0, c=1.0, D=1.0, D0=1.0, k=1.0, rho0=1.0)
    base.update(kw)
    return DimensionalInputs(**base)


def test_nondimensionalize_examples():
    assert nondimensionalize(inputs()).re == pytest.approx(1.0)
    assert nondimensionalize(inputs(D=0.1)).pe == pytest.approx(10.0)
    assert nondimensionalize(inputs(k=1e-3)).sh1 == pytest.approx(1e-3)
    g = nondimensionalize(inputs(D=2.0, c=3.0, rho0=4.0, u=0.5, D0=0.1, l=2.0))
    d_ref = 2.0 * 3.0 / (4.0 * 0.5)
    assert g.d_ref == pytest.approx(d_ref)
    assert 1 / g.sh2_inv == pytest.approx((2.0 / 2.0) * (0.1 / d_ref))


def test_dimensional_inputs_positive():
    with pytest.raises(ConfigError):
        inputs(mu=0.0)


def test_defaults_are_the_reference_preset():
    cfg = SimConfig()
    assert (cfg.re, cfg.pe, cfg.sh1, cfg.sh2_inv, cfg.tau, cfg.t_end) == (50.0, 10.0, 0.001, 0.0, 0.1, 50.0)
    assert cfg.geometry.length == pytest.approx(27.0)
    assert cfg.kinetics.sh1 == 0.001


def test_load_config(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('arrangement = "staggered"\nre = 10\nsh2_inv = 1e5\nsnapshot_times = [1.0, 2.0]\n'
                 'n_tubes = 3\nt_end = 2.0\n')
    cfg = load_config(p)
    assert cfg.arrangement == "staggered" and cfg.re == 10.0 and isinstance(cfg.re, float)
    assert cfg.snapshot_times == (1.0, 2.0)
    assert cfg.geometry.n_tubes == 3


@pytest.mark.parametrize("text", [
    "re = -1\n", "re = \"x\"\n", "bogus = 1\n", "tau = 0.3\nt_end = 1.0\n", "[flow]\nre = 1\n",
    "arrangement = \"diagonal\"\n", "grid = \"huge\"\n", "re = \n", "startup_steps = 1.5\n",
])
def test_config_errors(tmp_path, text):
    p = tmp_path / "bad.toml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.toml")
    assert ConfigError.exit_code == 2


def test_custom_sizes_without_preset():
    cfg = config_from_dict({"grid": "custom", "boundary_h": 0.2, "interior_h": 0.3})
    assert cfg.geometry.boundary_h == 0.2
