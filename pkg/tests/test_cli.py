import csv
import json
import subprocess
import sys

import pytest

from extract_lab import cli
from extract_lab import graphcore as gc

SMALL_SURROGATE = ["--hidden", "16", "--out-dim", "16", "--ssl-epochs", "2", "--e2e-epochs", "5"]
SMALL_VICTIM = ["--victim-hidden", "16", "--victim-epochs", "20"]


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "sbm"
    code = cli.main(["gen-data", "--out", str(out), "--classes", "3", "--nodes-per-class", "40",
                     "--p-in", "0.2", "--p-out", "0.01", "--feature-dim", "6", "--feature-shift", "2.0",
                     "--seed", "1"])
    assert code == 0
    return out


def test_gen_data_writes_loadable_directory(dataset):
    g = gc.load_dataset(dataset)
    assert (g.n, g.d, g.num_classes) == (120, 6, 3)


def test_train_victim_then_attack_appends_rows(tmp_path, dataset, capsys):
    model = tmp_path / "victim.json"
    assert cli.main(["train-victim", "--dataset", str(dataset), "--out", str(model), *SMALL_VICTIM]) == 0
    report = tmp_path / "r.csv"
    argv = ["attack", "--dataset", str(dataset), "--victim", str(model), "--encoder", "ssl",
            "--strategy", "kmeans", "--qn", "6", "--seeds", "1,2,3", "--out", str(report), "--jobs", "1",
            *SMALL_SURROGATE]
    assert cli.main(argv) == 0
    rows = list(csv.reader(report.open()))
    assert rows[0] == list(cli.read_report.__globals__["HEADER"])
    assert [r[0] for r in rows[1:]].count("agg") == 1 and len(rows) == 5
    first_run = rows[1:4]
    assert cli.main(argv) == 0  # same config again: rows are appended, values repeat exactly
    rows = list(csv.reader(report.open()))
    runs = [r for r in rows[1:] if r[0] != "agg"]
    assert len(runs) == 6
    strip = lambda r: r[:11] + r[12:]  # noqa: E731  (wall-clock seconds may differ)
    assert [strip(r) for r in runs[3:]] == [strip(r) for r in first_run]
    out = capsys.readouterr().out
    assert out.strip().splitlines()[-1].startswith("agg,sbm,transductive,ssl+kmeans,6,3,")


def test_attack_grid_with_alias_encoders(tmp_path, dataset, capsys):
    report = tmp_path / "grid.csv"
    argv = ["attack", "--dataset", str(dataset), "--encoder", "ssl,e2e", "--strategy", "kmeans,random",
            "--qn", "5", "--seeds", "0", "--out", str(report), "--jobs", "2", *SMALL_SURROGATE, *SMALL_VICTIM]
    assert cli.main(argv) == 0
    tags = {r[3] for r in csv.reader(report.open()) if r[0] == "agg"}
    assert tags == {"ssl+kmeans", "ssl+random", "e2e+kmeans", "e2e+random"}


def test_parallel_and_serial_grids_identical(tmp_path, dataset):
    paths = []
    for jobs in ("1", "3"):
        path = tmp_path / f"j{jobs}.csv"
        argv = ["attack", "--dataset", str(dataset), "--setting", "inductive", "--encoder", "rinit",
                "--strategy", "kmeans,random", "--qn", "4,8", "--seeds", "0,1", "--out", str(path),
                "--jobs", jobs, "--depth", "2", *SMALL_SURROGATE, *SMALL_VICTIM, "--victim-depth", "2"]
        assert cli.main(argv) == 0
        paths.append(path)
    a, b = (list(csv.reader(p.open())) for p in paths)
    seconds = cli.read_report.__globals__["HEADER"].index("seconds")
    drop = lambda rows: [r[:seconds] + r[seconds + 1:] for r in rows if r[0] != "agg"]  # noqa: E731
    assert drop(a) == drop(b)


def test_config_file_and_flag_override(tmp_path, dataset, monkeypatch):
    conf = tmp_path / "exp.toml"
    conf.write_text(f"""
dataset = "{dataset}"
setting = "transductive"
output = "{tmp_path / 'from_config.csv'}"
[victim]
hidden = 16
epochs = 10
[attack]
encoder = "random_init"
strategy = "random"
q_n = 4
seeds = [3]
hidden = 16
out_dim = 16
""")
    assert cli.main(["attack", "--config", str(conf), "--jobs", "1"]) == 0
    rows = [r for r in csv.reader((tmp_path / "from_config.csv").open())][1:]
    assert rows[0][3:6] == ["rinit+random", "4", "3"]
    assert cli.main(["attack", "--config", str(conf), "--qn", "6", "--out", str(tmp_path / "o.csv"),
                     "--jobs", "1"]) == 0
    rows = [r for r in csv.reader((tmp_path / "o.csv").open())][1:]
    assert rows[0][4] == "6"


def test_seed_environment_fallback(tmp_path, dataset, monkeypatch):
    monkeypatch.setenv("EXTRACT_LAB_SEED", "5")
    path = tmp_path / "env.csv"
    assert cli.main(["attack", "--dataset", str(dataset), "--encoder", "rinit", "--strategy", "random",
                     "--qn", "4", "--out", str(path), "--jobs", "1", *SMALL_SURROGATE, *SMALL_VICTIM]) == 0
    row = list(csv.reader(path.open()))[1]
    assert row[5] == "5"


def test_eval_recomputes_aggregates(tmp_path, dataset, capsys):
    path = tmp_path / "e.csv"
    cli.main(["attack", "--dataset", str(dataset), "--encoder", "rinit", "--strategy", "kmeans", "--qn", "4",
              "--seeds", "0,1", "--out", str(path), "--jobs", "1", *SMALL_SURROGATE, *SMALL_VICTIM])
    capsys.readouterr()
    assert cli.main(["eval", "--report", str(path), "--out", str(tmp_path / "again.csv")]) == 0
    agg = capsys.readouterr().out.strip().splitlines()
    assert agg == [",".join(r) for r in csv.reader(path.open()) if r[0] == "agg"]
    assert (tmp_path / "again.csv").read_text() == path.read_text()


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["attack", "--strategy", "psychic", "--out", str(tmp_path / "x.csv")]) == 1
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["attack", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "x.csv")]) == 2
    assert cli.main(["eval", "--report", str(tmp_path / "missing.csv")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("this is = = not toml")
    assert cli.main(["attack", "--config", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "configuration error" in err and "error" in err


def test_console_script_help():
    done = subprocess.run([sys.executable, "-m", "extract_lab.cli", "serve", "--help"], capture_output=True,
                          text=True, timeout=60)
    assert done.returncode == 0 and "--flip-p" in done.stdout


def test_serve_subcommand_answers_meta(tmp_path, dataset):
    model = tmp_path / "victim.json"
    assert cli.main(["train-victim", "--dataset", str(dataset), "--out", str(model), *SMALL_VICTIM]) == 0
    proc = subprocess.Popen([sys.executable, "-m", "extract_lab.cli", "serve", "--model", str(model),
                             "--qn", "100", "--flip-p", "0.1", "--port", "0"], stdout=subprocess.PIPE, text=True)
    try:
        line = json.loads(proc.stdout.readline())
        import requests

        doc = requests.get(line["url"] + "/v1/meta", timeout=10).json()
        assert doc == {"num_classes": 3, "depth": 2, "budget_remaining": 100}
    finally:
        proc.terminate()
        proc.wait(timeout=10)
