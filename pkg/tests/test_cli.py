import csv
import subprocess
import sys
from pathlib import Path

import pytest

from metacat.cli import main, parse_range

SCENARIOS = Path(__file__).parent.parent / "scenarios"


def test_client_ping(capsys):
    assert main(["client", "-c", "PING"]) == 0
    assert capsys.readouterr().out == "OK\n"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "metacat", "client", "-c", "PING"],
                         capture_output=True, text=True, check=True)
    assert out.stdout == "OK\n"


def test_client_reports_errors(capsys):
    code = main(["client", "-c", "CREATEDIR /a n:INT", "-c", "GETATTR /a/none", "-c", "PING"])
    out = capsys.readouterr().out.splitlines()
    assert code == 1 and out == ["OK", "ERR 404 not found: /a/none", "OK"]


def test_client_reads_stdin(monkeypatch, capsys):
    import io

    monkeypatch.setattr(sys, "stdin", io.StringIO("CREATEDIR /a n:INT\n\nADDENTRY /a/x 4\nGETATTR /a/x\nQUIT\nPING\n"))
    assert main(["client"]) == 0
    assert capsys.readouterr().out == "OK\nOK\nOK\nn 4\nOK\n"


def test_store_persists_between_invocations(tmp_path, capsys):
    db = str(tmp_path / "db")
    assert main(["client", "--store", db, "-c", "CREATEDIR /a n:INT", "-c", "ADDENTRY /a/x 4"]) == 0
    assert main(["client", "--store", db, "-c", "FIND /a"]) == 0
    assert capsys.readouterr().out.splitlines()[-2:] == ["OK", "x"]


def test_dump_and_restore(tmp_path, capsys):
    src, dst, snap = str(tmp_path / "src"), str(tmp_path / "dst"), tmp_path / "snap.txt"
    main(["client", "--store", src, "-c", "CREATEDIR /a n:INT", "-c", "CREATEDIR /a/b s:STRING",
          "-c", 'ADDENTRY /a/b/e "two words"'])
    assert main(["dump", "/a", "--store", src, "-o", str(snap)]) == 0
    assert snap.read_text().splitlines() == ["CREATEDIR /a n:INT", "CREATEDIR /a/b s:STRING",
                                            'ADDENTRY /a/b/e "two words"']
    assert main(["restore", str(snap), "--store", dst]) == 0
    capsys.readouterr()
    assert main(["dump", "--store", dst]) == 0
    assert capsys.readouterr().out == snap.read_text()


def test_bench_csv_has_one_row_per_slave_count(tmp_path, capsys):
    out = tmp_path / "out.csv"
    assert main(["bench", "--slaves", "0..4", "--entries", "2000", "--rate", "200", "--csv", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["slaves", "entries", "rate", "lag_ms_p50", "lag_ms_max", "work_units", "wall_ms"]
    assert len(rows) == 1 + 5
    assert [int(r[5]) for r in rows[1:]] == [2000 * (1 + n) for n in range(5)]
    assert "work units ~" in capsys.readouterr().out


def test_sim_traces_are_byte_identical(tmp_path):
    scn = str(SCENARIOS / "partition.scn")
    a, b = tmp_path / "a.trace", tmp_path / "b.trace"
    assert main(["sim", scn, "--seed", "7", "--trace", str(a)]) == 0
    assert main(["sim", scn, "--seed", "7", "--trace", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes() and a.stat().st_size > 0


def test_sim_failures_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.scn"
    bad.write_text("NODE M\nCHECK err M 404 PING\n")
    assert main(["sim", str(bad)]) == 1
    assert "error assertion line 2" in capsys.readouterr().err
    bad.write_text("NODE M\nTELEPORT M\n")
    assert main(["sim", str(bad)]) == 1
    assert capsys.readouterr().err.startswith("error 400 scenario malformed")
    assert main(["sim", str(tmp_path / "missing.scn")]) == 1
    assert capsys.readouterr().err.startswith("error 404")


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["bench", "--slaves", "-1"]) == 1
    assert capsys.readouterr().err.splitlines()[-1].startswith("error 400")
    assert main(["client", "--connect", "127.0.0.1:1", "-c", "PING"]) == 1
    assert capsys.readouterr().err.startswith("error 503")


@pytest.mark.parametrize("text, expect", [("3", [3]), ("0..4", [0, 1, 2, 3, 4]), ("1,2,5", [1, 2, 5]),
                                          ("0..1,7", [0, 1, 7])])
def test_parse_range(text, expect):
    assert parse_range(text) == expect
