import json
import subprocess
import sys

import numpy as np
import pytest

from bhplab import report
from bhplab.errors import ConfigError, DegenerateRegression, NumericalError, ScaleTooFine
from bhplab.geometry import build_grid, preset
from bhplab.runner import exit_code, load_config, main, parse_config

CAPACITY = """\
[run]
experiment = capacity
domain = slit_square
coefficients = drift
h = 1/16
seed = 3
out = out/cap

[params]
x = 0.5 0.25   ; one point: two numbers
R = 0.25
radii = 1/8 1/16
"""


@pytest.fixture(autouse=True)
def _no_env(monkeypatch):
    monkeypatch.delenv("BHPLAB_OUT", raising=False)


def _write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_run_is_deterministic(tmp_path):
    cfg = _write(tmp_path, CAPACITY)
    assert main(["run", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", str(cfg), "--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "capacity.csv" in files and "summary.txt" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    head, rows = report.read_csv(tmp_path / "a" / "capacity.csv")
    assert head["seed"] == "3" and len(head["config_hash"]) == 16
    assert [r["r"] for r in rows] == [1 / 8, 1 / 16]
    assert all(r["cap"] > 0 and r["rho"] == pytest.approx(r["cap"] * r["integral"]) for r in rows)


def test_out_resolution_and_hash(tmp_path, monkeypatch):
    cfg = load_config(_write(tmp_path, CAPACITY))
    assert cfg.out == tmp_path / "out" / "cap"
    assert load_config(_write(tmp_path, CAPACITY), seed=9).config_hash() == cfg.config_hash()
    monkeypatch.setenv("BHPLAB_OUT", str(tmp_path / "env"))
    assert load_config(_write(tmp_path, CAPACITY)).out == tmp_path / "env"
    changed = parse_config(CAPACITY.replace("R = 0.25", "R = 0.3"), tmp_path)
    assert changed.config_hash() != cfg.config_hash()


def test_unknown_kind_exits_2(tmp_path, capsys):
    cfg = _write(tmp_path, CAPACITY.replace("capacity", "nonsense", 1))
    assert main(["run", str(cfg)]) == 2
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["status"] == "error" and rec["type"] == "ConfigError" and rec["exit_code"] == 2


@pytest.mark.parametrize("text", [
    "[run]\ndomain = square\nh = 0.1\n",
    "[run]\nexperiment = capacity\ndomain = square\nh = -1\n",
    "[run]\nexperiment = capacity\ndomain = square\nh = 0.1\nbogus = 1\n",
    "[run]\nexperiment = capacity\ndomain = square\nh = 1/0\n",
    "no sections here",
])
def test_malformed_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_unknown_param_is_rejected(tmp_path):
    cfg = _write(tmp_path, CAPACITY + "typo_key = 1\n")
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_numerical_failure_exits_3(tmp_path, capsys):
    text = """\
[run]
experiment = decay
domain = square
h = 1/32
out = res

[params]
thickness = 3/64
width = 1/32
x = 0.5 1/64, 0.25 1/64   ; point list: pairs separated by commas
radii = 0.2
"""
    cfg = _write(tmp_path, text)
    assert main(["run", str(cfg)]) == 3
    rec = json.loads((tmp_path / "res" / "error.json").read_text())
    assert rec["type"] == "DegenerateRegression" and rec["exit_code"] == 3
    assert "DegenerateRegression" in capsys.readouterr().err


def test_exit_code_mapping():
    assert exit_code(DegenerateRegression("x")) == 3
    assert issubclass(DegenerateRegression, NumericalError)
    assert exit_code(ScaleTooFine("x")) == 2
    assert exit_code(ConfigError("x")) == 2
    assert exit_code(RuntimeError("x")) == 1


def test_validate(tmp_path, capsys):
    assert main(["validate", str(_write(tmp_path, CAPACITY))]) == 0
    assert capsys.readouterr().out == ""
    coarse = _write(tmp_path, CAPACITY.replace("h = 1/16", "h = 0.75"), "coarse.ini")
    assert main(["validate", str(coarse)]) == 0
    assert "exceeds slit length" in capsys.readouterr().out
    bad = _write(tmp_path, CAPACITY.replace("slit_square", "missing_domain.txt"), "bad.ini")
    assert main(["validate", str(bad)]) == 2


def test_list_domains_subprocess():
    out = subprocess.run([sys.executable, "-m", "bhplab", "list-domains"], capture_output=True, text=True,
                         check=True).stdout
    names = [line.split("\t")[0] for line in out.strip().splitlines()]
    assert len(names) >= 5 and "slit_square" in names and "square" in names


def test_csv_round_trip(tmp_path):
    rows = [{"a": 1, "b": 0.1 + 0.2, "c": True, "d": "txt"}, {"a": -2, "b": 1e-300, "c": False, "d": "z"}]
    path = report.write_csv(tmp_path / "t.csv", ("a", "b", "c", "d"), rows, "abc", 7)
    head, back = report.read_csv(path)
    assert head == {"config_hash": "abc", "seed": "7"}
    assert back[0] == {"a": 1, "b": 0.1 + 0.2, "c": 1, "d": "txt"}
    assert back[1]["b"] == 1e-300


def test_field_csv_schema(tmp_path):
    g = build_grid(preset("slit_square"), 1 / 8)
    vals = np.arange(g.n, dtype=float) / 3
    head, rows = report.read_csv(report.write_field_csv(tmp_path / "f.csv", g, vals, "h", 0))
    assert tuple(rows[0]) == report.FIELD_COLUMNS
    assert [r["node_id"] for r in rows] == list(range(g.n))
    assert all(r["value"] == v and (r["x"], r["y"]) == tuple(g.xy[k]) for k, (r, v) in enumerate(zip(rows, vals)))


def test_svg_and_summary():
    svg = report.svg_line_plot({"rho": ([0.1, 0.2], [1.0, 2.0])}, "t", logx=True, comment="c")
    assert svg.startswith("<svg") and "polyline" in svg and "<!-- c -->" in svg
    txt = report.summary_text({"s": {"k": 1.5, "flag": True}}, "h", 2)
    assert txt.splitlines() == ["# config_hash=h seed=2", "[s]", "k = 1.5", "flag = 1"]
