import csv
import json

import numpy as np
import pytest

from eqkd.cli import EXIT_CONFIG, EXIT_OK, EXIT_SECURITY, main
from eqkd.config import parse_config
from eqkd.protocol import read_tag_file


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.mark.parametrize("argv, kind", [
    (["model-skr", "--set", "source.nope=1"], "UnknownKey"),
    (["model-skr", "--mu", "lots"], "TypeMismatch"),
    (["model-skr", "--set", "coherence.tau_delay_ps=0"], "EqOneViolation"),
    (["model-skr", "--set", "novalue"], "ValueError"),
])
def test_config_errors_exit_2(argv, kind, capsys):
    assert main(argv + ["--quiet"]) == EXIT_CONFIG
    err = _error(capsys)
    assert err == {"error": kind, "exit": 2, "message": err["message"]}


def test_missing_config_file(tmp_path, capsys):
    assert main(["model-skr", "--config", str(tmp_path / "none.toml"), "--quiet"]) == EXIT_CONFIG
    assert _error(capsys)["exit"] == 2


def test_provenance_printed(tmp_path, capsys):
    path = tmp_path / "c.toml"
    path.write_text("[source]\nvisibility = 0.99\n")
    out = tmp_path / "scan.csv"
    assert main(["model-skr", "--config", str(path), "--mu", "1e-4", "--points", "5", "--out", str(out)]) == EXIT_OK
    err = capsys.readouterr().err
    line = {l.split()[0]: l for l in err.splitlines()}
    assert line["source.visibility"].endswith("[file]")
    assert line["source.mu"].endswith("[flag]")
    assert line["source.window_ps"].endswith("[default]")


def test_model_skr_csv(tmp_path, capsys):
    out = tmp_path / "scan.csv"
    assert main(["model-skr", "--out", str(out), "--points", "50", "--quiet"]) == EXIT_OK
    lines = out.read_text().splitlines()
    cfg, _ = parse_config()
    assert lines[0] == f"# config_hash={cfg.config_hash()} seed=0"
    rows = list(csv.DictReader(lines[1:]))
    skr = np.array([float(r["skr"]) for r in rows])
    k = int(np.argmax(skr))
    assert len(rows) == 50 and 0 < k < 49
    assert np.all(np.diff(skr[: k + 1]) >= 0) and np.all(np.diff(skr[k:]) <= 0)
    assert "mu*=" in capsys.readouterr().out


def test_simulate_writes_headers(tmp_path):
    assert main(["simulate", "--duration", "0.3", "--out-dir", str(tmp_path), "--seed", "5", "--quiet",
                 "--mu", "1e-3"]) == EXIT_OK
    cfg, _ = parse_config(overrides={"seed": "5", "mu": "1e-3"})
    for side in ("alice", "bob"):
        header, t, c = read_tag_file(tmp_path / f"{side}.tags")
        assert header["config_hash"] == cfg.config_hash() and header["seed"] == 5 and header["side"] == side
        assert len(t) > 0 and np.all(np.diff(t) >= 0) and c.max() <= 7
    truth = (tmp_path / "truth.csv").read_text().splitlines()
    assert truth[0] == f"# config_hash={cfg.config_hash()} seed=5"
    assert truth[1] == "t_s,offset_ps,skew_ps_per_s" and len(truth) == 2 + 31


@pytest.mark.slow
def test_run_loopback_key_files_identical(tmp_path, capsys):
    argv = ["run-loopback", "--duration", "6", "--k", "5", "--mu", "0.04", "--out-dir", str(tmp_path), "--quiet"]
    assert main(argv) == EXIT_OK
    a = (tmp_path / "alice.keys").read_bytes()
    assert a and a == (tmp_path / "bob.keys").read_bytes()
    assert "keys identical: True" in capsys.readouterr().out
    header = json.loads((tmp_path / "metrics.jsonl").read_text().splitlines()[0])
    assert header["kind"] == "header" and "config_hash" in header


@pytest.mark.slow
def test_zero_length_key_exits_4(tmp_path, capsys):
    argv = ["run-loopback", "--duration", "3", "--k", "1", "--visibility", "0.7", "--out-dir", str(tmp_path),
            "--quiet"]
    assert main(argv) == EXIT_SECURITY
    assert _error(capsys)["error"] == "SecurityAbort"


def test_bench_correlate(tmp_path, capsys):
    h = tmp_path / "h.csv"
    assert main(["bench-correlate", "--tags", "200000", "--repeats", "1", "--histogram-csv", str(h), "--quiet"]) == 0
    out = capsys.readouterr().out
    assert "tags/s/side" in out
    assert h.read_text().startswith("# config_hash=")
