import csv
import hashlib
import json
import subprocess
import sys

import pytest

from qcollapse.cli import fixture_path, run

FAST = {
    "trajectories": ["--n", "200"],
    "master": [],
    "dyson": [],
    "genfun": ["--n", "300"],
    "dilation": ["--n-traj", "20", "--n-survival", "300"],
    "diffusion": ["--n", "64", "--dt", "1e-3"],
    "zeno": ["--n", "100", "--lambdas", "10,100"],
    "verify": ["--n", "500"],
}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.mark.parametrize("command", sorted(FAST))
def test_subcommands_succeed(tmp_path, command):
    out = tmp_path / command
    assert run([command, "--outdir", str(out)] + FAST[command]) == 0
    manifest = json.loads((out / "run-manifest.json").read_text())
    assert manifest["command"] == command and manifest["exit_code"] == 0
    for name, digest in manifest["outputs"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_zeno_table(tmp_path):
    assert run(["zeno", "--outdir", str(tmp_path), "--n", "100", "--lambdas", "10,100,1000"]) == 0
    rows = _rows(tmp_path / "zeno.csv")
    assert rows[0][0] == "lambda"
    assert len(rows) == 5
    assert rows[-1][0] == "inf"


def test_missing_model_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert run(["master", "--outdir", str(tmp_path), "--model", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_bad_entry_names_json_path(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dim": 2, "H": [[1, 0], [0, "x"]], "lambda": 1,
                               "C": [[1, 0], [0, 1]]}))
    assert run(["master", "--outdir", str(tmp_path), "--model", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "$.H[1][1]" in err and str(bad) in err


def test_usage_errors_exit_one(tmp_path):
    assert run(["transmogrify"]) == 1
    assert run([]) == 1
    assert run(["master", "--outdir", str(tmp_path), "--t-max", "soon"]) == 1


def test_inputs_are_not_mutated(tmp_path):
    model = tmp_path / "m.json"
    model.write_bytes(fixture_path("d2_model.json").read_bytes())
    before = model.read_bytes()
    assert run(["dyson", "--outdir", str(tmp_path / "o"), "--model", str(model)]) == 0
    assert model.read_bytes() == before


def test_replay_is_bit_identical(tmp_path):
    out = tmp_path / "run"
    assert run(["trajectories", "--outdir", str(out), "--n", "300", "--seed", "9"]) == 0
    assert run(["--replay", str(out / "run-manifest.json")]) == 0
    original = json.loads((out / "run-manifest.json").read_text())["outputs"]
    for name in original:
        assert (out / "replay" / name).read_bytes() == (out / name).read_bytes()


def test_replay_detects_changed_outputs(tmp_path):
    out = tmp_path / "run"
    assert run(["dyson", "--outdir", str(out)]) == 0
    path = out / "run-manifest.json"
    doc = json.loads(path.read_text())
    doc["outputs"] = {k: "0" * 64 for k in doc["outputs"]}
    path.write_text(json.dumps(doc))
    assert run(["--replay", str(path)]) == 2


def test_worker_count_does_not_change_outputs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["trajectories", "--outdir", str(a), "--n", "400", "--workers", "1"]) == 0
    assert run(["trajectories", "--outdir", str(b), "--n", "400", "--workers", "3"]) == 0
    assert (a / "ensemble.csv").read_bytes() == (b / "ensemble.csv").read_bytes()


def test_environment_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("QCOLLAPSE_OUTDIR", str(tmp_path / "env"))
    monkeypatch.setenv("QCOLLAPSE_WORKERS", "2")
    assert run(["dyson"]) == 0
    manifest = json.loads((tmp_path / "env" / "run-manifest.json").read_text())
    assert manifest["config"]["workers"] == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "qcollapse", "dyson", "--outdir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "dyson.json").exists()
