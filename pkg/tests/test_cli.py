import json

import pytest

from gcsim.cli import main

SPEC = """
seed = 11
duration = 4.0
stall_grace = 4.0
smr.process.0 = n:1:2
smr.process.1 = n:1:2
smr.process.2 = n:1:2
workload.arrival_rate = 15
workload.clients = 1
"""


@pytest.fixture()
def spec_file(tmp_path):
    path = tmp_path / "exp.conf"
    path.write_text(SPEC)
    return str(path)


def test_validate_ok(spec_file, capsys):
    assert main(["validate", spec_file]) == 0
    assert "OK" in capsys.readouterr().out


def test_validate_bad_spec(tmp_path, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("nonsense.key = 1\n")
    assert main(["validate", str(bad)]) == 2
    assert "CONFIG_INVALID" in capsys.readouterr().err


def test_run_writes_reports_and_exits_zero(spec_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", spec_file, "--report-dir", str(out)]) == 0
    assert "COMPLETED" in capsys.readouterr().out
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "COMPLETED"
    assert (out / "figures" / "latency_hist.png").exists()


def test_run_stalled_exit_code(tmp_path, capsys):
    stalled = tmp_path / "stall.conf"
    stalled.write_text(SPEC + "faults.schedule = 1.0:0:CRASH, 1.1:1:CRASH\n")
    assert main(["run", str(stalled)]) == 3
    assert "STALLED" in capsys.readouterr().out


def test_sweep_table_and_artifacts(spec_file, tmp_path, capsys):
    out = tmp_path / "sweep"
    code = main(["sweep", spec_file, "--axis", "smr.batch_size",
                 "--values", "1024,65507", "--report-dir", str(out)])
    assert code == 0
    assert (out / "sweep.csv").exists()
    assert (out / "sweep.png").exists()
    table = capsys.readouterr().out
    assert "smr.batch_size" in table and "COMPLETED" in table


def test_sweep_unknown_axis(spec_file, capsys):
    assert main(["sweep", spec_file, "--axis", "nope.nothing",
                 "--values", "1"]) == 2


def test_list_params_category_filter(capsys):
    assert main(["list-params", "--category", "COMPRESSION"]) == 0
    out = capsys.readouterr().out
    assert "layer.compress.compression_level" in out
    assert "smr.batch_size" not in out


def test_list_params_unknown_category(capsys):
    assert main(["list-params", "--category", "NOT_A_CATEGORY"]) == 2
