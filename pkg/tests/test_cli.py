import csv
import json
import math
import os
import subprocess
import sys

import pytest

from gnm.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_run_bottleneck_writes_metrics(tmp_path):
    out = tmp_path / "bn"
    assert main(["run", "--preset", "bottleneck", "--width", "1.0", "--seed", "7", "--out", str(out)]) == EXIT_OK
    flow = read_csv(out / "flow.csv")
    assert flow[0] == ["t_cross", "id"]
    assert len(flow) - 1 == 180
    for name in ("density_speed.csv", "collisions.csv", "speed_stats.csv", "run.json", "flow.gp"):
        assert (out / name).exists()
    assert read_csv(out / "density_speed.csv")[0] == ["t", "id", "rho", "v"]
    assert read_csv(out / "collisions.csv")[0] == ["t", "id_a", "id_b", "dist"]
    manifest = json.loads((out / "run.json").read_text())
    assert manifest["seed"] == 7 and manifest["manifest_version"] == 1
    assert manifest["summary"]["crossings"] == 180
    assert {"gnm", "numpy", "scipy", "python"} <= set(manifest["versions"])
    assert manifest["wall_clock"] > 0


def test_manifest_reproduces_run(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["run", "--preset", "bottleneck", "--width", "1.4", "--seed", "3", "--duration", "15"]
    assert main(args + ["--out", str(a), "--param", "kappa=0.65"]) == EXIT_OK
    assert main(["run", "--scenario", str(a / "run.json"), "--out", str(b)]) == EXIT_OK
    for name in ("flow.csv", "density_speed.csv", "collisions.csv", "speed_stats.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma, mb = (json.loads((d / "run.json").read_text()) for d in (a, b))
    assert ma["config"] == mb["config"] and ma["config"]["model"]["kappa"] == 0.65


def test_stop_and_go_speed_stats_row(tmp_path):
    out = tmp_path / "sg"
    assert main(["run", "--preset", "stop-and-go", "--rho", "4.0", "--duration", "2", "--warmup", "0.5",
                 "--out", str(out)]) == EXIT_OK
    rows = read_csv(out / "speed_stats.csv")
    assert rows[0] == ["rho_global", "mu_norm", "sigma_norm", "mu_filt", "sigma_filt"]
    assert len(rows) == 2 and float(rows[1][0]) == 4.0


@pytest.mark.parametrize("argv", [
    ["run", "--preset", "bottleneck", "--width", "-1"],
    ["run", "--preset", "bottleneck", "--width", "9"],
    ["run"],
    ["run", "--preset", "bottleneck", "--param", "bogus=1"],
    ["run", "--preset", "bottleneck", "--param", "kappa"],
    ["run", "--preset", "lanes", "--width", "1.0"],
    ["sweep", "--preset", "bottleneck", "--widths", "", "--seeds", "0"],
    ["sweep", "--preset", "stop-and-go", "--rhos", "1,2", "--seeds", ""],
])
def test_config_errors_exit_2(tmp_path, argv):
    assert main(argv + ["--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_bad_scenario_file_exit_codes(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["run", "--scenario", str(broken), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["run", "--scenario", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_console_script_reports_exit_code(tmp_path):
    env = dict(os.environ, GNM_OUT_DIR=str(tmp_path))
    r = subprocess.run([sys.executable, "-m", "gnm.cli", "run", "--preset", "bottleneck", "--width", "-1"],
                       capture_output=True, text=True, env=env)
    assert r.returncode == EXIT_CONFIG
    assert "width" in r.stderr


def test_sweep_bottleneck_rows(tmp_path):
    out = tmp_path / "sw"
    argv = ["sweep", "--preset", "bottleneck", "--seeds", "0,1,2", "--duration", "0.2", "--out", str(out)]
    assert main(argv) == EXIT_OK
    rows = read_csv(out / "sweep.csv")
    assert rows[0] == ["width", "seed", "J", "crossings", "min_distance"]
    assert len(rows) - 1 == 18
    # deterministic order: widths outer, seeds inner
    assert [(float(r[0]), int(r[1])) for r in rows[1:4]] == [(0.8, 0), (0.8, 1), (0.8, 2)]


def test_sweep_parallel_matches_serial(tmp_path):
    base = ["sweep", "--preset", "bottleneck", "--widths", "1.0,1.6", "--seeds", "4", "--duration", "3"]
    assert main(base + ["--out", str(tmp_path / "s")]) == EXIT_OK
    assert main(base + ["--parallel", "2", "--out", str(tmp_path / "p")]) == EXIT_OK
    assert (tmp_path / "s" / "sweep.csv").read_bytes() == (tmp_path / "p" / "sweep.csv").read_bytes()


def test_sweep_density_ladder_rows(tmp_path):
    out = tmp_path / "ladder"
    argv = ["sweep", "--preset", "stop-and-go", "--rhos", "0.5:6.0:0.5", "--seeds", "0",
            "--duration", "0.6", "--warmup", "0", "--out", str(out)]
    assert main(argv) == EXIT_OK
    rows = read_csv(out / "speed_stats.csv")
    assert len(rows) - 1 == 12
    assert [float(r[0]) for r in rows[1:]] == [0.5 * k for k in range(1, 13)]


def test_field_dump_and_missing_target(tmp_path, capsys):
    path = tmp_path / "field.csv"
    assert main(["field", "--preset", "bottleneck", "--width", "1.0", "--out", str(path)]) == EXIT_OK
    rows = read_csv(path)
    assert rows[0] == ["x", "y", "sigma", "gx", "gy"]
    # the field flows towards the exit: downstream of the gap sigma is small
    by_xy = {(float(r[0]), float(r[1])): r for r in rows[1:]}
    assert float(by_xy[(17.0, 5.0)][2]) < float(by_xy[(2.0, 5.0)][2])
    capsys.readouterr()
    assert main(["field", "--preset", "bottleneck", "--target", "9", "--out", str(path)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "9" in err and "1" in err


def test_gnm_out_dir_default(tmp_path, monkeypatch):
    monkeypatch.setenv("GNM_OUT_DIR", str(tmp_path))
    assert main(["calibrate", "--out", str(tmp_path / "cal.json")]) == EXIT_OK
    cal = json.loads((tmp_path / "cal.json").read_text())
    assert cal["p_p"] == pytest.approx(3.7234, abs=1e-3)
    assert main(["run", "--preset", "standoff", "--duration", "0.5"]) == EXIT_OK
    assert (tmp_path / "standoff" / "run.json").exists()
