import json
from pathlib import Path

import pytest

from metaevo.assembler import ancestor_data, build_ancestor, build_genome
from metaevo.cli import main
from metaevo.world import World, bootstrap, snapshot


@pytest.fixture
def ancestor(tmp_path: Path) -> Path:
    path = tmp_path / "ancestor.rpw"
    path.write_bytes(build_ancestor().to_bytes())
    return path


def flipped(raw: bytes, *offsets: int) -> bytes:
    out = bytearray(raw)
    for offset in offsets:
        out[offset] ^= 0x01
    return bytes(out)


@pytest.fixture
def population(tmp_path: Path, ancestor: Path) -> Path:
    raw = ancestor.read_bytes()
    pop = tmp_path / "pop"
    pop.mkdir()
    (pop / "a.rpw").write_bytes(flipped(raw, 100, 5000))
    (pop / "b.rpw").write_bytes(flipped(raw, 100))
    (pop / "c.rpw").write_bytes(flipped(raw, 100, 5000, 5001))
    return pop


@pytest.mark.cli
def test_asm_then_disasm(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    source = tmp_path / "prog.asm"
    source.write_text("getDO\naddnumber 2\nret\n")
    genome = tmp_path / "prog.rpw"
    assert main(["asm", str(source), "-o", str(genome)]) == 0
    assert main(["disasm", str(genome)]) == 0
    assert capsys.readouterr().out == "getDO\nadd0001\nadd0001\nret\n"


@pytest.mark.cli
def test_asm_raw_and_ancestor_data(tmp_path: Path) -> None:
    source = tmp_path / "prog.asm"
    source.write_text("ret\n")
    assert main(["asm", str(source), "-o", str(tmp_path / "c.bin"), "--raw"]) == 0
    assert len((tmp_path / "c.bin").read_bytes()) == 1
    out = tmp_path / "g.rpw"
    assert main(["asm", str(source), "-o", str(out), "--ancestor-data", "5"]) == 0
    assert out.read_bytes() == build_genome("ret", ancestor_data(5)).to_bytes()


@pytest.mark.cli
def test_asm_bad_mnemonic(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    source = tmp_path / "bad.asm"
    source.write_text("ret\nfrobnicate\n")
    assert main(["asm", str(source), "-o", str(tmp_path / "x.rpw")]) == 2
    assert "line 2" in capsys.readouterr().err
    assert not (tmp_path / "x.rpw").exists()


@pytest.mark.cli
def test_run_ancestor(ancestor: Path, capsys: pytest.CaptureFixture) -> None:
    assert main(["run", str(ancestor)]) == 0
    out = capsys.readouterr().out
    assert "outcome: exited" in out
    assert "offspring: 5 (" in out
    assert "CopyFile=5" in out
    assert "RandomNumber: 0x" in out


@pytest.mark.cli
def test_run_fault_and_trace(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    genome = tmp_path / "pop.rpw"
    genome.write_bytes(build_genome("pop\npop").to_bytes())
    assert main(["run", str(genome), "--budget", "100"]) == 1
    assert "fault: " in capsys.readouterr().out
    exit = tmp_path / "ret.rpw"
    exit.write_bytes(build_genome("ret").to_bytes())
    assert main(["run", str(exit), "--trace", "--budget", "100"]) == 0
    assert len(capsys.readouterr().out.splitlines()) > 2


@pytest.mark.cli
@pytest.mark.parametrize("content", [b"", b"garbage"])
def test_run_rejects_bad_genome(tmp_path: Path, content: bytes) -> None:
    genome = tmp_path / "bad.rpw"
    genome.write_bytes(content)
    assert main(["run", str(genome)]) == 2
    assert main(["run", str(tmp_path / "missing.rpw")]) == 2


@pytest.mark.cli
def test_evolve_is_reproducible(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    args = ["evolve", "--seed", "4", "--ticks", "300", "--bootstrap", "2"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    first = capsys.readouterr().out
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert capsys.readouterr().out == first
    assert first.startswith("ticks: 300\n")
    events_a = (tmp_path / "a" / "events.jsonl").read_text()
    assert events_a == (tmp_path / "b" / "events.jsonl").read_text()
    assert '"spawn"' in events_a
    assert (tmp_path / "a" / "snapshots" / "tick_0000000300" / "manifest.json").exists()
    assert list((tmp_path / "a" / "population").glob("*.rpw"))


@pytest.mark.cli
def test_evolve_zero_ticks(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    assert main(["evolve", "--seed", "1", "--ticks", "0", "--bootstrap", "3", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "files: 3" in out
    assert "processes: 0" in out
    manifest = json.loads((tmp_path / "snapshots" / "tick_0000000000" / "manifest.json").read_text())
    assert len(manifest["files"]) == 3


@pytest.mark.cli
def test_evolve_resume(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    out = tmp_path / "run"
    base = ["evolve", "--seed", "2", "--bootstrap", "2", "--out", str(out)]
    assert main([*base, "--ticks", "150"]) == 0
    snap = out / "snapshots" / "tick_0000000150"
    assert main([*base, "--ticks", "50", "--resume", str(snap)]) == 0
    assert "ticks: 200" in capsys.readouterr().out.splitlines()[-4]


@pytest.mark.cli
def test_evolve_require_seed(tmp_path: Path) -> None:
    assert main(["evolve", "--require-seed", "--ticks", "1", "--out", str(tmp_path)]) == 2
    assert not (tmp_path / "events.jsonl").exists()


@pytest.mark.cli
def test_scan_padding(ancestor: Path, tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    report = tmp_path / "scan.csv"
    argv = ["scan", str(ancestor), "--region", "padding", "--sample", "16", "--budget", "20000"]
    assert main([*argv, "--out", str(report)]) == 0
    assert "R(padding) = 1.0000 over 16 mutants" in capsys.readouterr().out
    assert len(report.read_text().splitlines()) == 17
    assert main(["scan", str(ancestor), "--region", "stack"]) == 2


@pytest.mark.cli
def test_analyze_reports(
    population: Path, ancestor: Path, tmp_path: Path, capsys: pytest.CaptureFixture
) -> None:
    common = ["--population", str(population), "--ancestor", str(ancestor)]
    assert main(["analyze", "dist", *common]) == 0
    assert capsys.readouterr().out == "64: 3\n1388: 2\n1389: 1\n"

    assert main(["analyze", "dist", *common, "--min-count", "2"]) == 0
    assert capsys.readouterr().out == "64: 3\n"

    assert main(["analyze", "hamming", *common]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "name,a.rpw,b.rpw,c.rpw,ancestor"
    assert lines[1] == "a.rpw,0,1,1,2"

    assert main(["analyze", "density", *common]) == 0
    density = json.loads(capsys.readouterr().out)
    assert density["meta-code"] == pytest.approx(1 / 2100)

    out = tmp_path / "r.json"
    assert main(["analyze", "robustness", *common, "-o", str(out)]) == 0
    assert json.loads(out.read_text())["padding"] == 1.0


@pytest.mark.cli
def test_analyze_trend(ancestor: Path, tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    world = World()
    bootstrap(world, ancestor.read_bytes(), 2)
    snapshot(world, tmp_path / "snaps" / "s0")
    assert main(["analyze", "trend", "--snapshots", str(tmp_path / "snaps"), "--ancestor", str(ancestor)]) == 0
    assert capsys.readouterr().out == "tick,population,mean,sd\n0,2,0.0000,0.0000\n"


@pytest.mark.cli
def test_analyze_needs_arguments(population: Path) -> None:
    assert main(["analyze", "dist", "--population", str(population)]) == 2
    assert main(["analyze", "hamming"]) == 2
    assert main(["analyze", "trend", "--snapshots", "x"]) == 2


@pytest.mark.cli
def test_alphabet(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    assert main(["alphabet", "--table"]) == 0
    table = capsys.readouterr().out
    assert "getEIP" in table
    assert "JnzUp" in table
    assert main(["alphabet", "-o", str(tmp_path / "alpha.bin")]) == 0
    assert len((tmp_path / "alpha.bin").read_bytes()) == 2048
    assert main(["alphabet"]) == 2


@pytest.mark.cli
def test_log_level_from_environment(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture
) -> None:
    source = tmp_path / "prog.asm"
    source.write_text("ret\n")
    monkeypatch.setenv("RPW_LOG", "info")
    assert main(["asm", str(source), "-o", str(tmp_path / "p.rpw")]) == 0
    assert "wrote" in capsys.readouterr().err
    monkeypatch.setenv("RPW_LOG", "warning")
    assert main(["asm", str(source), "-o", str(tmp_path / "p.rpw")]) == 0
    assert capsys.readouterr().err == ""


def events_after(path: Path, tick: int) -> list:
    lines = path.read_text().splitlines()
    return [line for line in lines if json.loads(line)["tick"] > tick]


def population_of(out: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted((out / "population").glob("*"))}


@pytest.mark.slow
@pytest.mark.cli
def test_long_evolve_is_reproducible_and_resumable(tmp_path: Path) -> None:
    config = tmp_path / "guards.cfg"
    config.write_text("max_processes = 8\nquantum = 250\n")
    args = ["evolve", "--seed", "11", "--config", str(config), "--bootstrap", "2"]
    ticks = ["--ticks", "100000", "--snapshot-every", "50000"]
    assert main([*args, *ticks, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, *ticks, "--out", str(tmp_path / "b")]) == 0
    events = (tmp_path / "a" / "events.jsonl").read_bytes()
    assert events == (tmp_path / "b" / "events.jsonl").read_bytes()

    half = tmp_path / "a" / "snapshots" / "tick_0000050000"
    resumed = ["--ticks", "50000", "--resume", str(half), "--out", str(tmp_path / "c")]
    assert main([*args, *resumed]) == 0
    tail = (tmp_path / "c" / "events.jsonl").read_text().splitlines()
    assert tail == events_after(tmp_path / "a" / "events.jsonl", 50_000)
    assert population_of(tmp_path / "c") == population_of(tmp_path / "a")
