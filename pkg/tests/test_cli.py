import subprocess
import sys

import numpy as np
import pytest

from layoutreg.cli import main
from layoutreg.io import load_dataset, read_layout, read_trajectory

SMALL_ROOM = """
seed = 2

[synth]
width = 3.0
depth = 2.5
height = 2.2
fragment_count = 4
points_per_m2 = 250.0
noise_sigma = 0.003
drift_trans_sigma = 0.01
drift_rot_deg = 0.2

[registration]
outer_iters = 3

[output]
dir = "out"
figures = false
"""


@pytest.fixture
def room(tmp_path):
    cfg = tmp_path / "room.toml"
    cfg.write_text(SMALL_ROOM)
    return cfg


def _rows(text):
    return [line.split("\t") for line in text.splitlines() if line]


def test_synth_round_trip(room, tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["synth", "--spec", str(room), "--out", str(out)]) == 0
    rows = dict((r[0], r[1]) for r in _rows(capsys.readouterr().out))
    ds = load_dataset(out)
    assert int(rows["fragments"]) == len(ds.fragments) == 4
    assert int(rows["points"]) == sum(len(f) for f in ds.fragments)
    # the seed flag changes the data; the same seed reproduces it
    assert main(["synth", "--config", str(room), "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    assert (out / "fragment_000.ply").read_bytes() == (tmp_path / "b" / "fragment_000.ply").read_bytes()
    assert main(["synth", "--config", str(room), "--out", str(tmp_path / "c"), "--seed", "3"]) == 0
    assert (out / "fragment_000.ply").read_bytes() != (tmp_path / "c" / "fragment_000.ply").read_bytes()


def test_missing_dataset_is_an_io_error(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[dataset]\npath = "absent"\n')
    assert main(["run", "--config", str(cfg)]) == 3
    err = capsys.readouterr().err.strip().split("\t")
    assert err[:2] == ["error", "io"]


@pytest.mark.parametrize("text", [
    "[icp]\nfoo = 1\n",
    "not = [toml",
    "seed = -1\n",
    '[eval]\nalignment = "sim3"\n',
])
def test_bad_config_exits_2(tmp_path, capsys, text):
    cfg = tmp_path / "c.toml"
    cfg.write_text(text)
    assert main(["run", "--config", str(cfg)]) == 2
    assert capsys.readouterr().err.startswith("error\tconfig\t")


def test_missing_config_file_and_negative_seed(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "none.toml")]) == 3
    assert main(["run", "--config", str(tmp_path / "none.toml"), "--seed", "-4"]) == 2
    assert main(["eval"]) == 2


def test_run_eval_layout(room, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(room), "--out", str(out), "--trace"]) == 0
    text = capsys.readouterr().out
    arts = {r[1]: r[2] for r in _rows(text) if r[0] == "artifact"}
    for name in ("trajectory", "layout", "cloud", "edges", "metrics"):
        assert name in arts
    assert "iter e_layout e_frag e_pair total n_layout_planes" in text
    metrics = {r[0]: float(r[1]) for r in _rows(text) if r[0] in ("trajectory_rmse", "odometry_rmse")}
    assert metrics["trajectory_rmse"] < metrics["odometry_rmse"]
    assert len(read_trajectory(out / "trajectory.txt")) == 4
    roles = [r for r, _ in read_layout(out / "layout.txt")]
    assert roles.count("wall") == 4

    assert main(["eval", "--config", str(room), "--out", str(out)]) == 0
    rows = {r[0]: r[1] for r in _rows(capsys.readouterr().out)}
    assert float(rows["trajectory_rmse"]) == pytest.approx(metrics["trajectory_rmse"])

    lay = tmp_path / "lay"
    assert main(["layout", "--config", str(room), "--out", str(lay),
                 "--trajectory", str(out / "trajectory.txt")]) == 0
    rows = _rows(capsys.readouterr().out)
    assert rows[0] == ["role", "nx", "ny", "nz", "offset"]
    assert [r[0] for r in rows[1:]].count("wall") == 4
    assert (lay / "occupancy.pgm").read_bytes().startswith(b"P5\n")
    n = np.array([float(x) for x in rows[1][1:4]])
    assert np.linalg.norm(n) == pytest.approx(1.0)


def test_console_entry_point(room, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "layoutreg.cli", "synth", "--spec", str(room),
                           "--out", str(tmp_path / "d")], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("fragments\t4")
