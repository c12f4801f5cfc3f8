import json
import math
import os

import numpy as np
import pytest

from bayesadmm.cli import main


PROP2_INI = """
[experiment]
method = bayes_admm
family = full
rounds = 3
seed = 0

[data]
kind = ridge
n = 80
d = 10
noise_sd = 0.3
seed = 5

[split]
kind = homogeneous
k = 2
seed = 1

[hyper]
rho = 0.5
delta = 1.0

[inner]
solver = conjugate
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_run_prop2_reaches_tolerance_in_one_round(tmp_path, capsys):
    cfg = write(tmp_path, "prop2.ini", PROP2_INI)
    out = tmp_path / "out"
    code = main(["run", "--config", cfg, "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["rounds_to_tol"] == 1
    assert not summary["diverged"]
    assert (out / "trace.jsonl").exists()
    assert (out / "checkpoint.json").exists()


def test_run_traces_are_byte_identical(tmp_path):
    cfg = write(tmp_path, "prop2.ini", PROP2_INI)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["run", "--config", cfg, "--out", str(out2)]) == 0
    assert (out1 / "trace.jsonl").read_bytes() == (out2 / "trace.jsonl").read_bytes()


def test_run_divergence_exits_two(tmp_path):
    # undamped full-step duals with a weak prior on near-separable data
    diverging = """
[experiment]
method = pvi
family = full
rounds = 8
seed = 0

[data]
kind = blobs
n_per_class = 100
classes = 10
d = 2
spread = 0.45
radius = 6.0
center = 12.0
test_seed = 12
test_n = 20

[split]
kind = class_partition
assignments = 0,1|2,3|4,5|6,7|8,9

[hyper]
rho = 1.0
delta = 0.03
damping = 1.0

[inner]
solver = von
estimator = delta
steps = 200
"""
    cfg = write(tmp_path, "div.ini", diverging)
    out = tmp_path / "out"
    code = main(["run", "--config", cfg, "--out", str(out)])
    assert code == 2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["diverged"] and summary["event"]["type"] == "divergence"


def test_unknown_config_key_rejected(tmp_path, capsys):
    bad = PROP2_INI.replace("rho = 0.5", "rho = 0.5\nwombat = 3")
    cfg = write(tmp_path, "bad.ini", bad)
    code = main(["run", "--config", cfg])
    assert code == 1
    assert "wombat" in capsys.readouterr().err


def test_sweep_single_cell_matches_run(tmp_path):
    cfg = write(tmp_path, "prop2.ini", PROP2_INI + "\n[sweep]\nrho = 0.5\ntau = 1.0\n")
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(rows) == 2  # header + one cell
    header = rows[0].split(",")
    cell = dict(zip(header, rows[1].split(",")))
    assert cell["converged"] == "True"
    assert float(cell["alpha"]) == pytest.approx(0.5)  # 1/(1+0.5*2)
    assert float(cell["dist_to_oracle"]) < 1e-8


def test_sweep_grid_has_a_row_per_rho(tmp_path):
    cfg = write(tmp_path, "grid.ini", PROP2_INI + "\n[sweep]\nrho = 0.25,0.5,1.0\n")
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(rows) == 4
    for row in rows[1:]:
        cell = dict(zip(rows[0].split(","), row.split(",")))
        rho = float(cell["rho"])
        assert float(cell["alpha"]) == pytest.approx(1.0 / (1.0 + rho * 2))
        assert cell["converged"] in ("True", "False")


def test_verify_checkpoint_paths(tmp_path):
    cfg = write(tmp_path, "prop2.ini", PROP2_INI)
    out = tmp_path / "out"
    main(["run", "--config", cfg, "--out", str(out)])
    ck = str(out / "checkpoint.json")
    assert main(["verify", ck]) == 0
    assert main(["verify", ck, "--tol", "inf"]) == 0
    assert main(["verify", ck, "--tol", "1e-300"]) == 3


def test_verify_fresh_state_fails(tmp_path):
    cfg = write(tmp_path, "fresh.ini", PROP2_INI.replace("rounds = 3", "rounds = 0"))
    out = tmp_path / "out"
    main(["run", "--config", cfg, "--out", str(out)])
    assert main(["verify", str(out / "checkpoint.json")]) == 3


def test_verify_corrupt_checkpoint_is_an_error(tmp_path, capsys):
    bad = tmp_path / "broken.json"
    bad.write_text("{ not json")
    assert main(["verify", str(bad)]) == 1
    assert "checkpoint" in capsys.readouterr().err.lower()


def test_oracle_subcommand_prints_solution(tmp_path, capsys):
    cfg = write(tmp_path, "prop2.ini", PROP2_INI)
    assert main(["oracle", "--config", cfg]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["kind"] == "conjugate"
    assert len(out["mean"]) == 10
    prec = np.array(out["precision"])
    assert np.allclose(prec, prec.T)


def test_svg_output(tmp_path):
    cfg = write(tmp_path, "prop2.ini", PROP2_INI)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out), "--svg"]) == 0
    svg = (out / "chart.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg


def test_run_outlier_toy_scenario(tmp_path):
    toy_ini = """
[experiment]
method = admm
rounds = 5
seed = 0

[data]
kind = outlier_toy

[hyper]
rho = 0.2
delta = 0.2
"""
    cfg = write(tmp_path, "toy.ini", toy_ini)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    rows = [json.loads(line) for line in (out / "trace.jsonl").read_text().splitlines()]
    assert rows[0]["type"] == "header"
    assert all("acc_mean" in r for r in rows[1:])


def test_flag_overrides_config(tmp_path):
    cfg = write(tmp_path, "prop2.ini", PROP2_INI)
    out = tmp_path / "out"
    # rho far from 1/K breaks the one-round property
    assert main(["run", "--config", cfg, "--out", str(out), "--rho", "4.0"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["rounds_to_tol"] != 1


def test_mnist_kind_reads_idx_from_data_dir(tmp_path, monkeypatch):
    import struct

    rng = np.random.default_rng(0)
    n, rows, cols = 24, 2, 2
    pixels = rng.integers(0, 256, size=(n, rows * cols), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    with open(tmp_path / "train-images-idx3-ubyte", "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(tmp_path / "train-labels-idx1-ubyte", "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(labels.tobytes())
    monkeypatch.setenv("BAYES_ADMM_DATA", str(tmp_path))
    ini = """
[experiment]
method = fedavg
rounds = 2
seed = 0

[data]
kind = mnist
limit = 20

[split]
kind = homogeneous
k = 2

[hyper]
rho = 1.0

[inner]
local_steps = 3
lr = 0.05
"""
    cfg = write(tmp_path, "mnist.ini", ini)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["rounds_completed"] == 2
