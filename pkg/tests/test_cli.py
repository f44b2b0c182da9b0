"""End-to-end checks for the command-line interface and its artifacts."""

import copy
import json

import numpy as np
import pytest

from kamforge import cli
from kamforge.oscillator import compute_period
from kamforge.util import config_hash, fmt_float

# A forcing-free network keeps the whole pipeline exact and fast: the
# normal form and KAM stages see a zero remainder, so the exported torus
# must be the flat one and every artifact is cheap to regenerate.
FLAT = {
    "system": {"terms": []},
    "dc": {"scan_grid": 5, "K_check": 60},
    "torus": {"n_phi": 8, "n_t": 4},
    "verify": {"T_check": 5.0, "n_samples": 2, "T_long": 50.0, "sample_every": 4},
}


def dump_config(path, overrides):
    with open(path, "w") as fh:
        json.dump(overrides, fh)
    return str(path)


@pytest.fixture(scope="module")
def flat_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("flat")
    cfg_path = dump_config(root / "config.json", FLAT)
    out = root / "a"
    assert cli.main(["pipeline", "--config", cfg_path, "--out", str(out)]) == 0
    return cfg_path, out


def test_load_config_merges_file_over_defaults(tmp_path):
    path = dump_config(tmp_path / "c.json", {"dc": {"gamma": 5e-3}, "seed": 3})
    cfg = cli.load_config(path)
    assert cfg["dc"]["gamma"] == 5e-3
    assert cfg["dc"]["K_split"] == cli.DEFAULT_CONFIG["dc"]["K_split"]
    assert cfg["seed"] == 3
    # the defaults themselves must stay untouched
    assert cli.DEFAULT_CONFIG["seed"] == 0
    assert cli.DEFAULT_CONFIG["dc"]["gamma"] == 2e-3


def test_load_config_rejects_small_amplitude(tmp_path):
    path = dump_config(tmp_path / "c.json", {"system": {"amplitude": 1.0}})
    with pytest.raises(ValueError):
        cli.load_config(path)


def test_eps_flag_sets_amplitude():
    args = cli._build_parser().parse_args(["pipeline", "--eps", "0.05"])
    over = cli._overrides_from_args(args)
    assert over["system"]["amplitude"] == pytest.approx(20.0)


def test_flag_overrides_route_to_sections():
    args = cli._build_parser().parse_args(
        ["verify", "--gamma", "1e-3", "--horizon", "500",
         "--t-check", "7", "--seed", "5"])
    over = cli._overrides_from_args(args)
    assert over == {"seed": 5, "dc": {"gamma": 1e-3},
                    "verify": {"T_long": 500.0, "T_check": 7.0}}


def test_period_prints_reference_value(capsys):
    assert cli.main(["period"]) == 0
    out = capsys.readouterr().out.strip()
    assert out == fmt_float(compute_period(1))
    assert float(out) == pytest.approx(7.4162987092054875, abs=1e-13)


def test_period_exponent_flag(capsys):
    assert cli.main(["period", "--n", "3"]) == 0
    assert capsys.readouterr().out.strip() == fmt_float(compute_period(3))


def test_dc_scan_writes_margins_and_report(tmp_path):
    cfg_path = dump_config(tmp_path / "c.json", FLAT)
    out = tmp_path / "o"
    assert cli.main(["dc-scan", "--config", cfg_path, "--out", str(out)]) == 0
    cfg = cli.load_config(cfg_path)
    lines = (out / "dc_margins.csv").read_text().splitlines()
    assert lines[0] == f"# config {config_hash(cfg)}"
    assert len(lines) == 2 + cfg["dc"]["scan_grid"] ** 2
    with open(out / "dc_point.json") as fh:
        rep = json.load(fh)
    assert rep["ok"] is True
    assert float(rep["margin"]) >= 1.0
    assert 0.0 <= float(rep["excluded_fraction"]) < 1.0


def test_dc_scan_rejects_large_gamma(tmp_path, capsys):
    cfg_path = dump_config(tmp_path / "c.json", FLAT)
    rc = cli.main(["dc-scan", "--config", cfg_path,
                   "--out", str(tmp_path / "o"), "--gamma", "0.8"])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_invalid_config_exits_1(tmp_path, capsys):
    cfg_path = dump_config(tmp_path / "c.json", {"system": {"amplitude": 0.5}})
    rc = cli.main(["dc-scan", "--config", cfg_path, "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_pipeline_writes_artifacts(flat_run):
    cfg_path, out = flat_run
    for name in ["config.json", "dc_margins.csv", "dc_point.json",
                 "nf_diagnostics.csv", "kam_diagnostics.csv",
                 "torus.json", "summary.json"]:
        assert (out / name).exists(), name
    cfg = cli.load_config(cfg_path)
    with open(out / "config.json") as fh:
        stored = json.load(fh)
    assert stored["config_hash"] == config_hash(cfg)
    with open(out / "summary.json") as fh:
        summary = json.load(fh)
    assert summary["config_hash"] == config_hash(cfg)
    assert summary["kam_steps"] == 0
    assert float(summary["kam_low_norm"]) <= 1e-12


def test_flat_system_gives_flat_torus(flat_run):
    _, out = flat_run
    torus = cli.load_torus(out / "torus.json")
    phi = np.linspace(0.0, 2 * np.pi, 7)[:-1]
    pts = np.stack([phi, 0.5 * phi], axis=1)
    tt = np.linspace(0.0, 2 * np.pi, 6)
    ang = torus.angles(pts, tt)
    act = torus.actions(pts, tt)
    np.testing.assert_allclose(ang, pts, atol=1e-10)
    np.testing.assert_allclose(act - act[0], 0.0, atol=1e-10)


def test_pipeline_reruns_byte_identical(flat_run, tmp_path):
    cfg_path, out = flat_run
    out2 = tmp_path / "b"
    assert cli.main(["pipeline", "--config", cfg_path, "--out", str(out2)]) == 0
    for name in ["config.json", "dc_margins.csv", "dc_point.json",
                 "nf_diagnostics.csv", "kam_diagnostics.csv", "torus.json"]:
        assert (out / name).read_bytes() == (out2 / name).read_bytes(), name


def test_verify_flat_torus(flat_run):
    cfg_path, out = flat_run
    assert cli.main(["verify", "--config", cfg_path, "--out", str(out)]) == 0
    with open(out / "verify.json") as fh:
        rep = json.load(fh)
    assert float(rep["defect"]) < 1e-6
    assert float(rep["action_variation"]) < 1e-3
    assert float(rep["rotation_rel_err"]) < 1e-3
    assert rep["escaped"] is False
    lines = (out / "orbit.csv").read_text().splitlines()
    assert lines[0].startswith("# config ")
    assert lines[1].split(",")[0] == "t"


def test_verify_escape_exits_4(flat_run, tmp_path, capsys):
    _, out = flat_run
    over = copy.deepcopy(FLAT)
    over["verify"]["escape"] = 0.5
    cfg_path = dump_config(tmp_path / "esc.json", over)
    rc = cli.main(["verify", "--config", cfg_path, "--out", str(tmp_path / "o"),
                   "--torus", str(out / "torus.json")])
    assert rc == 4
    assert "escape" in capsys.readouterr().err


def test_verify_missing_torus_exits_1(tmp_path, capsys):
    cfg_path = dump_config(tmp_path / "c.json", FLAT)
    rc = cli.main(["verify", "--config", cfg_path, "--out", str(tmp_path / "empty")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_measure_is_deterministic(tmp_path):
    cfg_path = dump_config(tmp_path / "c.json",
                           {"measure": {"halvings": 1, "n_samples": 1000,
                                        "K_split": 8, "K_check": 24}})
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["measure", "--config", cfg_path, "--out", str(a)]) == 0
    assert cli.main(["measure", "--config", cfg_path, "--out", str(b)]) == 0
    data = (a / "measure.csv").read_bytes()
    assert data == (b / "measure.csv").read_bytes()
    lines = data.decode().splitlines()
    cfg = cli.load_config(cfg_path)
    assert lines[0] == f"# config {config_hash(cfg)}"
    assert lines[1].split(",")[:2] == ["gamma", "fraction"]
    assert len(lines) == 4
    first, second = (float(ln.split(",")[1]) for ln in lines[2:])
    assert second <= first
