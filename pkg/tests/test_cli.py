import json

import pytest

from lorsu.cli import main

SMALL_MODEL = ["--width", "16", "--heads", "8", "--layers", "1", "--d-ff", "32", "--embed-dim", "16"]


@pytest.fixture
def datasets(tmp_path):
    target, control = tmp_path / "target.lsds", tmp_path / "control.lsds"
    assert main(["generate", "--classes", "10", "--shots", "5", "--test-per-class", "3", "--image-size", "8",
                 "--seed", "1", "--out", str(target)]) == 0
    assert main(["generate", "--classes", "4", "--first-class", "20", "--shots", "2", "--test-per-class", "2",
                 "--image-size", "8", "--seed", "2", "--out", str(control)]) == 0
    return target, control


def run(out, target, control, *extra):
    return main(["run", "--data", str(target), "--control", str(control), "--shots", "5", "--sessions", "5",
                 "--epochs", "2", "--batch", "8", "--lr", "1e-3", "--out", str(out), *SMALL_MODEL, *extra])


def test_generate_is_deterministic(tmp_path):
    a, b = tmp_path / "a.lsds", tmp_path / "b.lsds"
    for p in (a, b):
        assert main(["generate", "--classes", "10", "--seed", "1", "--image-size", "8", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_generate_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["generate", "--classes", "3"])
    assert e.value.code == 2
    assert main(["generate", "--classes", "60", "--out", str(tmp_path / "x.lsds")]) == 2
    assert "exceed" in capsys.readouterr().err


def test_inspect_dataset_and_checkpoint(datasets, tmp_path, capsys):
    target, control = datasets
    assert main(["inspect", str(target)]) == 0
    out = capsys.readouterr().out
    assert "samples=80 classes=10" in out and "red square" in out
    bad = tmp_path / "bad.lsds"
    bad.write_bytes(b"JUNK" + target.read_bytes()[4:])
    assert main(["inspect", str(bad)]) == 2
    assert "bad magic" in capsys.readouterr().err
    assert main(["inspect", str(tmp_path / "missing")]) == 2
    assert run(tmp_path / "r", target, control, "--sessions", "2", "--epochs", "1") == 0
    capsys.readouterr()
    assert main(["inspect", str(tmp_path / "r" / "seed0.lsck")]) == 0
    out = capsys.readouterr().out
    assert "vision parameters" in out and "selection plan: top_k=2" in out


def test_lorsu_run_emits_metrics_and_files(datasets, tmp_path, capsys):
    target, control = datasets
    assert run(tmp_path / "r", target, control) == 0
    doc = json.loads((tmp_path / "r" / "results.json").read_text())
    for m in ("TI", "CC", "ACC", "BWT"):
        assert isinstance(doc[m], float)
    assert len(doc["R"]) == 5 and doc["trainable_count"] > 0
    for name in ("results.txt", "accuracy_matrix.png", "loss.png", "base.lsck", "seed0_train.jsonl",
                 "seed0_plans.txt"):
        assert (tmp_path / "r" / name).stat().st_size > 0
    assert "lorsu" in capsys.readouterr().out


def test_frozen_run_has_zero_ti(datasets, tmp_path):
    target, control = datasets
    assert run(tmp_path / "f", target, control, "--strategy", "frozen") == 0
    doc = json.loads((tmp_path / "f" / "results.json").read_text())
    assert doc["TI"] == 0.0 and doc["CC"] == 0.0 and doc["trainable_count"] == 0


def test_run_is_byte_identical(datasets, tmp_path):
    target, control = datasets
    for d in ("a", "b"):
        assert run(tmp_path / d, target, control, "--sessions", "2", "--seeds", "0,1") == 0
    assert (tmp_path / "a" / "results.json").read_bytes() == (tmp_path / "b" / "results.json").read_bytes()


def test_run_config_file_and_errors(datasets, tmp_path, capsys):
    target, control = datasets
    conf = tmp_path / "run.conf"
    conf.write_text(f"# desk run\nstrategy = spu\ndata = {target}\ncontrol = {control}\nsessions = 2\n"
                    f"epochs = 1\nshots = 2\nwidth = 16\nheads = 8\nlayers = 1\nd_ff = 32\nembed_dim = 16\n"
                    f"out = {tmp_path / 'c'}\n")
    assert main(["run", "--config", str(conf)]) == 0
    assert json.loads((tmp_path / "c" / "results.json").read_text())["strategy"]["strategy"] == "spu"
    capsys.readouterr()
    assert main(["run", "--config", str(conf), "--strategy", "adalora"]) == 2
    assert "strategy" in capsys.readouterr().err
    assert main(["run", "--config", str(conf), "--top-k-heads", "9"]) == 2
    assert main(["run", "--config", str(conf), "--epochs", "many"]) == 2
    assert main(["run", "--config", str(conf), "--data", str(tmp_path / "nope.lsds")]) == 2
    assert main(["run", "--config", str(conf), "--shots", "9"]) == 2  # more shots than samples per class
    conf.write_text("stratgy = lorsu\n")
    assert main(["run", "--config", str(conf)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(datasets, tmp_path, capsys):
    target, control = datasets
    assert run(tmp_path / "n", target, control, "--strategy", "fft", "--lr", "1e300", "--sessions", "2") == 3
    assert "numeric failure" in capsys.readouterr().err


def test_report(datasets, tmp_path, capsys):
    target, control = datasets
    for strat in ("spu", "frozen"):
        assert run(tmp_path / strat, target, control, "--strategy", strat, "--sessions", "2", "--epochs", "1") == 0
    capsys.readouterr()
    single = str(tmp_path / "spu" / "results.json")
    assert main(["report", single]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and lines[2].startswith("spu")
    assert main(["report", single, str(tmp_path / "frozen" / "results.json"), "--out", str(tmp_path / "rep")]) == 0
    rows = (tmp_path / "rep" / "report.tsv").read_text().splitlines()
    assert [r.split("\t")[0] for r in rows] == ["method", "frozen", "spu"]
    assert (tmp_path / "rep" / "report.png").stat().st_size > 0
    doc = json.loads((tmp_path / "spu" / "results.json").read_text())
    doc["TI"] += 1.0
    (tmp_path / "tampered.json").write_text(json.dumps(doc))
    capsys.readouterr()
    assert main(["report", str(tmp_path / "tampered.json")]) == 2
    assert "disagrees" in capsys.readouterr().err
    (tmp_path / "junk.json").write_text("{}")
    assert main(["report", str(tmp_path / "junk.json")]) == 2
