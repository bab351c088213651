"""Command line behaviour and exit codes."""

from __future__ import annotations

import json

import pytest

from deobflab.cli import main
from deobflab.ir import parse_program

from conftest import corpus_source


@pytest.fixture
def gcd(tmp_path):
    path = tmp_path / "gcd.asm"
    path.write_text(corpus_source("gcd"))
    return path


def test_obfuscate_then_check(gcd, tmp_path, capsys):
    out, truth = tmp_path / "o.asm", tmp_path / "gt.json"
    assert main(["obfuscate", str(gcd), "-o", str(out), "--ground-truth", str(truth), "--split-num", "2"]) == 0
    assert "dispatch" in out.read_text()
    assert "gcd" in json.loads(truth.read_text())["functions"]
    capsys.readouterr()
    assert main(["iocheck", str(gcd), str(out), "--n", "90"]) == 0
    assert capsys.readouterr().out.strip() == "100.0"


def test_passes_and_seed_flags(gcd, tmp_path):
    a, b = tmp_path / "a.asm", tmp_path / "b.asm"
    assert main(["obfuscate", str(gcd), "-o", str(a), "--passes", "inssub", "--seed", "0x10"]) == 0
    assert main(["obfuscate", str(gcd), "-o", str(b), "--passes", "inssub", "--seed", "16"]) == 0
    assert a.read_text() == b.read_text()
    assert "dispatch" not in a.read_text()
    assert main(["obfuscate", str(gcd), "--passes", "unroll"]) == 2


def test_compare_with_itself(gcd, capsys):
    assert main(["compare", str(gcd), str(gcd)]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["value"] == 1.0 and "mapping" not in data
    assert main(["compare", str(gcd), str(gcd), "--metric", "euclid"]) == 0
    assert json.loads(capsys.readouterr().out)["value"] == 0.0
    assert main(["compare", str(gcd), str(gcd), "--mapping"]) == 0
    assert "mapping" in json.loads(capsys.readouterr().out)


def test_deobfuscate_round_trip(gcd, tmp_path, capsys):
    obf, clean, report, dot = (tmp_path / n for n in ("o.asm", "d.asm", "r.json", "g.dot"))
    main(["obfuscate", str(gcd), "-o", str(obf)])
    rc = main(["deobfuscate", str(obf), "-o", str(clean), "--report", str(report), "--cfg", str(dot)])
    assert rc == 0
    rep = json.loads(report.read_text())[0]
    assert rep["detected"]["cff"] and rep["stages"]["cff"]["restored_fraction"] == 1.0
    assert dot.read_text().startswith("digraph")
    parse_program(clean.read_text())
    capsys.readouterr()
    assert main(["iocheck", str(gcd), str(clean)]) == 0
    assert capsys.readouterr().out.strip() == "100.0"


def test_deobfuscate_clean_input(gcd, tmp_path):
    report = tmp_path / "r.json"
    assert main(["deobfuscate", str(gcd), "-o", str(tmp_path / "d.asm"), "--report", str(report)]) == 0
    rep = json.loads(report.read_text())[0]
    assert not any(rep["detected"][k] for k in ("inssub", "bcf", "cff"))
    assert rep["stages"]["cff"] is None


def test_detect_and_dot(gcd, capsys):
    assert main(["detect", str(gcd)]) == 0
    assert json.loads(capsys.readouterr().out)["gcd"]["cff"] is False
    assert main(["dot", str(gcd), "--fn", "gcd"]) == 0
    assert capsys.readouterr().out.startswith('digraph "gcd"')


def test_config_file_supplies_defaults(gcd, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"passes": "cff", "seed": 3}))
    a, b = tmp_path / "a.asm", tmp_path / "b.asm"
    assert main(["--config", str(cfg), "obfuscate", str(gcd), "-o", str(a)]) == 0
    assert main(["obfuscate", str(gcd), "-o", str(b), "--passes", "cff", "--seed", "3"]) == 0
    assert a.read_text() == b.read_text()


def test_exit_codes(gcd, tmp_path, capsys):
    assert main(["frobnicate"]) == 2
    assert main([]) == 2
    assert main(["detect", str(tmp_path / "missing.asm")]) == 1
    bad = tmp_path / "bad.asm"
    bad.write_text("func f(0):\ne:\n    FOO R0\n")
    assert main(["detect", str(bad)]) == 1
    assert main(["compare", str(gcd), str(gcd), "--fn", "nope"]) == 1
    assert main(["iocheck", str(gcd), str(gcd), "--n", "1"]) == 2
    capsys.readouterr()
