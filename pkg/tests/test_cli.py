import csv
import json
import math
import shutil
import subprocess

import pytest

from breathsync.cli import DEFAULT_SCENARIO, config_hash, main
from breathsync.relay import replay_log


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out-dir", str(out)]) == 0
    return out


def test_simulate_outputs(sim_dir):
    names = {p.name for p in sim_dir.iterdir()}
    assert names == {"leader.csv", "follower.csv", "relay.log", "report.json"}
    report = json.loads((sim_dir / "report.json").read_text())
    assert report["pearson_r"] >= 0.75
    assert report["section"] is not None
    assert report["config_hash"] == config_hash(report["config"])
    assert report["seeds"] == {"leader": 1, "follower": 2}
    assert report["frames_logged"] == len(list(replay_log(sim_dir / "relay.log")))
    with open(sim_dir / "leader.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t_ms", "az_raw", "az_filt"] and len(rows) == 9001


def test_simulate_deterministic(sim_dir, tmp_path):
    assert main(["simulate", "--out-dir", str(tmp_path)]) == 0
    for name in ("leader.csv", "follower.csv", "relay.log", "report.json"):
        assert (tmp_path / name).read_bytes() == (sim_dir / name).read_bytes()


def test_simulate_seed_changes_output(sim_dir, tmp_path):
    assert main(["simulate", "--out-dir", str(tmp_path), "--leader-seed", "5", "--duration-ms", "90000"]) == 0
    assert (tmp_path / "leader.csv").read_bytes() != (sim_dir / "leader.csv").read_bytes()
    assert json.loads((tmp_path / "report.json").read_text())["seeds"]["leader"] == 5


def test_analyze_simulated_traces(sim_dir, tmp_path, capsys):
    rc = main(["analyze", str(sim_dir / "leader.csv"), str(sim_dir / "follower.csv"),
               "--out-dir", str(tmp_path), "--tail-ms", "60000"])
    assert rc == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["pearson_r"] >= 0.75
    assert (tmp_path / "windows.csv").exists()
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["pearson_r"] == printed["pearson_r"]


def test_config_file_and_unknown_key(tmp_path):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"duration_ms": 20000, "follower": {"coupling_gain": 0.0}}))
    assert main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "a")]) == 0
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["config"]["follower"]["coupling_gain"] == 0.0
    assert report["config"]["leader"] == DEFAULT_SCENARIO["leader"]
    cfg.write_text(json.dumps({"durration_ms": 5}))
    assert main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "b")]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2


@pytest.mark.parametrize("flags", [["--pattern", "pulsed"], ["--coupling", "-1"], ["--duration-ms", "0"]])
def test_simulate_bad_config(flags, tmp_path):
    assert main(["simulate", "--out-dir", str(tmp_path), *flags]) == 2
    assert not (tmp_path / "report.json").exists()


def test_ingest_roundtrip(sim_dir, tmp_path):
    imu = tmp_path / "imu.csv"
    with open(imu, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_ms", "ax_f", "ay_f", "az_f", "ax_b", "ay_b", "az_b"])
        for i in range(3000):
            t = i * 10
            sway = 0.1 * math.sin(2 * math.pi * 1.7 * t / 1000)
            w.writerow([t, 0, 0, 0.3 * math.sin(2 * math.pi * t / 4000) + sway, 0, 0, sway])
    out = tmp_path / "out"
    assert main(["ingest", str(imu), "--out-dir", str(out)]) == 0
    events = [json.loads(line) for line in (out / "events.jsonl").read_text().splitlines()]
    assert len(events) >= 12
    assert {e["kind"] for e in events} == {"InspirationOnset", "ExpirationOnset"}
    assert len((out / "respiration.csv").read_text().splitlines()) == 3001


def test_ingest_bad_row_exit_3(tmp_path, caplog):
    imu = tmp_path / "imu.csv"
    imu.write_text("t_ms,ax_f,ay_f,az_f,ax_b,ay_b,az_b\n0,0,0,1,0,0,1\n10,0,0,x,0,0,1\n")
    assert main(["ingest", str(imu), "--out-dir", str(tmp_path / "o")]) == 3
    assert "line 3" in caplog.text
    assert main(["ingest", str(tmp_path / "nope.csv")]) == 3


def test_envelope_dump(tmp_path):
    assert main(["envelope", "--pattern", "inversed", "--T-ms", "1000", "--depth", "0.5",
                 "--out-dir", str(tmp_path), "--waveform", "--mask", "0b0101"]) == 0
    with open(tmp_path / "envelope.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    levels = [float(r["level"]) for r in rows]
    assert max(levels) == pytest.approx(50.0) and levels[0] == pytest.approx(50.0)
    with open(tmp_path / "waveform.csv", newline="") as fh:
        wave = list(csv.reader(fh))
    assert len(wave[0]) == 5
    assert all(float(r[1]) == 0 and float(r[3]) == 0 for r in wave[1:])


@pytest.mark.parametrize("flags", [["--pattern", "sawtooth"], ["--T-ms", "0"], ["--depth", "2"], ["--waveform", "--mask", "16"]])
def test_envelope_bad_args(flags, tmp_path):
    assert main(["envelope", "--out-dir", str(tmp_path), *flags]) == 2


def test_analyze_no_overlap(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    a.write_text("t_ms,az_raw,az_filt\n0,0,0\n10,1,1\n")
    b.write_text("t_ms,az_raw,az_filt\n100,0,0\n110,1,1\n")
    assert main(["analyze", str(a), str(b), "--out-dir", str(tmp_path / "o")]) == 3


def test_console_script_installed():
    exe = shutil.which("breathsync")
    assert exe is not None
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("simulate", "relay", "ingest", "envelope", "analyze"):
        assert cmd in proc.stdout
