import json
import re
import subprocess
import sys

import numpy as np
import pytest

from stvae import cli, fields, vae

ERROR_LINE = re.compile(r"^stvae: error: [a-z]+: \S.*$")


def run(args, capsys):
    code = cli.main([str(a) for a in args])
    return code, capsys.readouterr().err


def _files(d):
    return sorted(p.name for p in d.iterdir())


def test_simulate_is_byte_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, _ = run(["simulate", "--kind", "st", "--n", 3, "--t", 3, "--seed", 4, "--out", tmp_path / f"{name}.jsonl"], capsys)
        assert code == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    man = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
    assert man["command"] == "simulate"
    assert len(fields.load_dataset(tmp_path / "a.jsonl")) == 3


def test_missing_flag_exits_2_without_files(tmp_path, capsys):
    code, err = run(["simulate", "--kind", "st", "--n", 3, "--out", tmp_path / "x.jsonl"], capsys)
    assert code == 2
    assert err.strip().splitlines()[-1].startswith("stvae: error: usage:")
    assert _files(tmp_path) == []


@pytest.mark.parametrize("args", [["bogus"], ["simulate", "--kind", "st", "--n", "1", "--t", "3", "--out", "x", "--nope", "1"]])
def test_unknown_command_or_flag(args, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, err = run(args, capsys)
    assert code == 2
    assert _files(tmp_path) == []


def test_missing_input_is_single_line_error(tmp_path, capsys):
    code, err = run(["fit-pw", "--data", tmp_path / "nope.jsonl", "--out", tmp_path / "o.csv"], capsys)
    assert code == 1
    lines = err.strip().splitlines()
    assert len(lines) == 1 and ERROR_LINE.match(lines[0])
    assert lines[0].startswith("stvae: error: io:")
    assert _files(tmp_path) == []


def test_corrupt_dataset_is_format_error(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format_version": 1}\nnot json\n')
    code, err = run(["fit-pw", "--data", bad, "--out", tmp_path / "o.csv"], capsys)
    assert code == 1
    assert err.strip().startswith("stvae: error: format:")
    assert _files(tmp_path) == ["bad.jsonl"]


def test_encode_decode_round_trip(tmp_path, capsys, small_model):
    m, data = small_model
    vae.save_model(m, tmp_path / "m.mdl")
    fields.save_dataset(data.subset(data.series[:3]), tmp_path / "d.jsonl")
    assert run(["encode", "--model", tmp_path / "m.mdl", "--in", tmp_path / "d.jsonl", "--out", tmp_path / "z.csv"], capsys)[0] == 0
    head = (tmp_path / "z.csv").read_text().splitlines()[0]
    assert head == "series_id,visit_index,time," + ",".join(f"z{k}" for k in range(1, 9))
    assert run(["decode", "--model", tmp_path / "m.mdl", "--in", tmp_path / "z.csv", "--out", tmp_path / "r.jsonl"], capsys)[0] == 0
    back = fields.load_dataset(tmp_path / "r.jsonl")
    ref = vae.decode_values(m, vae.encode_values(m, data.series[0].values))
    np.testing.assert_allclose(back.series[0].values, ref, atol=1e-9)
    assert [s.series_id for s in back] == [s.series_id for s in data.series[:3]]


def test_fit_pw_and_predict(tmp_path, capsys):
    d = tmp_path / "d.jsonl"
    run(["simulate", "--kind", "pw", "--n", 2, "--t", 4, "--out", d], capsys)
    assert run(["fit-pw", "--data", d, "--out", tmp_path / "pw.csv"], capsys)[0] == 0
    assert run(["predict", "--method", "pw", "--data", d, "--horizons", "1,2", "--out", tmp_path / "p.csv"], capsys)[0] == 0
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "series_id,horizon_time,location_id,predicted_value,method"
    assert len(rows) == 1 + 2 * 2 * 52
    code, err = run(["predict", "--method", "vae", "--data", d, "--horizons", "1", "--out", tmp_path / "q.csv"], capsys)
    assert code != 0 and not (tmp_path / "q.csv").exists()


def test_tiny_study_sim_writes_report(tmp_path, capsys):
    cfg = {
        "generators": ["pw"], "n_visits": [3], "n_test": 2, "train_sizes": [20], "methods": ["st", "pw", "vae"],
        "vae": {"epochs": 1, "batch_size": 10}, "mcmc": {"iterations": 60, "burn_in": 20},
    }
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    out = tmp_path / "rep"
    assert run(["study-sim", "--config", tmp_path / "c.json", "--report-dir", out, "--workers", 1], capsys)[0] == 0
    names = _files(out)
    for n in ("sim_results.csv", "sim_summary.csv", "sim_rse.svg", "sim_mae.svg", "manifest.json"):
        assert n in names
    assert not any(n.endswith(".partial") for n in names)
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["outputs"]) >= {"sim_results.csv", "sim_summary.csv"}


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "stvae.cli", "bogus"], capture_output=True, text=True)
    assert r.returncode == 2
    assert r.stderr.strip().splitlines()[-1].startswith("stvae: error: usage:")
