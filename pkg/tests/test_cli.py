import json
import os
import subprocess
import sys

import pytest

from surftrap.cli import main

SIDEBANDS = "t_s,red_p,blue_p,red_n,blue_n\n0,{:.12f},0.5,,\n0.002,{:.12f},0.5,,\n0.004,{:.12f},0.5,,\n".format(
    *(0.5 * n / (1 + n) for n in (0.10, 0.54, 0.98))
)
LIFETIMES = "duration_s,censored\n90,0\n90,1\n"
SURVIVAL = "dark_time_s,kept,total\n1,98,100\n2,97,100\n5,90,100\n8,86,100\n12,34,100\n15,30,100\n"


@pytest.fixture
def inputs(tmp_path):
    paths = {}
    for name, text in (("sb.csv", SIDEBANDS), ("life.csv", LIFETIMES), ("surv.csv", SURVIVAL)):
        p = tmp_path / name
        p.write_text(text)
        paths[name] = str(p)
    return paths


MIT = ["--builtin", "150", "--model", "analytic", "--species", "88Sr+", "--rf", "155V@40.6MHz", "--voltages", "mit"]


def _commands(inputs):
    return {
        "layout": ["layout", "--builtin", "150"],
        "solve": ["solve", "--builtin", "150", "--model", "analytic", "--resolution", "2", "2", "2"],
        "characterize": ["characterize", *MIT, "--label", "MIT I"],
        "compensate": ["compensate", *MIT, "--stray", "1000", "0", "0"],
        "shuttle": ["shuttle", "--builtin", "150", "--model", "analytic", "--species", "88Sr+", "--rf", "155V@40.6MHz",
                    "--start", "3", "--end", "4", "--frames", "3", "--axial", "0.5"],  # fmt: skip
        "modes": ["modes", "--ions", "3", "--radial", "0.6", "2.0"],
        "dynamics": ["dynamics", *MIT, "--periods", "4"],
        "thermometry": ["thermometry", "--sidebands", inputs["sb.csv"]],
        "lifetime": ["lifetime", "--lifetimes", inputs["life.csv"], "--survival", inputs["surv.csv"]],
        "report": ["report", "--noise", "NIST II:7000:3000:1.6"],
    }


def test_no_subcommand_prints_usage(capsys):
    assert main([]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "subcommand is required" in err


def test_unknown_flag_is_error(capsys):
    assert main(["modes", "--bogus"]) != 0


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "surftrap.cli"], capture_output=True, text=True)
    assert out.returncode == 2 and "usage:" in out.stderr


@pytest.mark.parametrize(
    "name", ["layout", "solve", "characterize", "compensate", "shuttle", "modes", "dynamics", "thermometry", "lifetime", "report"]
)
def test_dry_run_writes_nothing(name, inputs, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(_commands(inputs)[name] + ["--dry-run", "--out", str(out)]) == 0
    assert "dry run" in capsys.readouterr().out
    assert not out.exists()


def test_thermometry_prints_rate(inputs, tmp_path, capsys):
    assert main(["thermometry", "--sidebands", inputs["sb.csv"], "--out", str(tmp_path)]) == 0
    assert "heating rate 220 " in capsys.readouterr().out
    assert json.loads((tmp_path / "thermometry.json").read_text())["heating_rate_per_s"] == pytest.approx(220.0)


def test_characterize_mit_writes_report(tmp_path, capsys):
    assert main(["characterize", *MIT, "--label", "MIT I", "--no-depth", "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.startswith("characterize: MIT I f = (")
    doc = json.loads((tmp_path / "secular.json").read_text())
    assert set(doc["secular"]["frequencies_mhz"]) == {"x'", "y'", "z"}
    rows = json.loads((tmp_path / "report.json").read_text())["records"][0]["rows"]
    assert any(r["quantity"] == "secular w_z/2pi" and r["reference"] == 0.54 for r in rows)
    assert "MIT I" in (tmp_path / "report.txt").read_text()


def test_lifetime_and_modes_outputs(inputs, tmp_path):
    assert main(["lifetime", "--lifetimes", inputs["life.csv"], "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "lifetime.json").read_text())["exponential"]["tau_s"] == 180.0
    assert main(["modes", "--ions", "2", "--radial", "0.5", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "modes.json").read_text())
    assert doc["axial_modes"]["frequencies_rel"][1] == pytest.approx(3**0.5)
    assert doc["radial_modes"][0]["stable"] is False


def test_module_error_is_structured(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("t_s,red_p,blue_p,red_n,blue_n\n0,0.6,0.5,,\n0.001,0.1,0.5,,\n")
    with pytest.warns(RuntimeWarning, match="exceeds blue"):
        assert main(["thermometry", "--sidebands", str(bad), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error [analysis] in thermometry: NonThermalError")


def _snapshot(d):
    return {f: open(os.path.join(d, f), "rb").read() for f in sorted(os.listdir(d))}


@pytest.mark.parametrize("name", ["thermometry", "lifetime", "modes", "characterize", "report", "solve"])
def test_reruns_are_byte_identical(name, inputs, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cmd = _commands(inputs)[name]
    if name == "characterize":
        cmd = cmd + ["--no-depth"]
    assert main(cmd + ["--out", str(a)]) == 0
    assert main(cmd + ["--out", str(b)]) == 0
    snap = _snapshot(a)
    assert snap and snap == _snapshot(b)


def test_config_file_defaults(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"ions": 2, "axial": 1.0}))
    assert main(["--config", str(cfg), "modes", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "modes.json").read_text())["n_ions"] == 2
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert main(["--config", str(cfg), "modes", "--out", str(tmp_path)]) == 2
