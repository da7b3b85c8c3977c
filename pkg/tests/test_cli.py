import json

import numpy as np
import pytest

from helpers import make_random_net
from sampfa.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from sampfa.grid import Branch, Bus, BusKind, Network, save_case


def _run(capsys, *argv):
    rc = main(list(argv))
    out = capsys.readouterr()
    return rc, out.out, out.err


def _resolved(stdout):
    return json.loads(stdout.splitlines()[0])


def test_version(capsys):
    rc, _, _ = _run(capsys, "--version")
    assert rc == EXIT_OK


def test_missing_command_is_config_error(capsys):
    rc, _, _ = _run(capsys)
    assert rc == EXIT_CONFIG


def test_unknown_flag_is_config_error(capsys):
    rc, _, _ = _run(capsys, "solve", "--frobnicate")
    assert rc == EXIT_CONFIG


def test_solve_builtin_case(capsys, tmp_path):
    out = tmp_path / "sol.json"
    rc, stdout, _ = _run(capsys, "solve", "--out", str(out))
    assert rc == EXIT_OK
    head = _resolved(stdout)
    assert head["command"] == "solve"
    assert head["seed"] == 0
    doc = json.loads(out.read_text())
    assert doc["report"]["converged"]
    assert doc["report"]["max_mismatch"] < 1e-8
    assert len(doc["solution"]["v"]) == 39


def test_solve_missing_case_file(capsys):
    rc, _, err = _run(capsys, "solve", "--case", "/nonexistent/case.json")
    assert rc == EXIT_CONFIG
    assert err


def test_solve_disconnected_is_numeric_error(capsys, tmp_path):
    net = Network(100.0,
                  (Bus(1, BusKind.Slack), Bus(2, BusKind.PQ),
                   Bus(3, BusKind.PQ, p_set=-0.1)),
                  (Branch(1, 2, 0.0, 0.1), Branch(2, 3, 0.0, 0.1, status=False)))
    path = tmp_path / "disc.json"
    save_case(net, path)
    rc, _, err = _run(capsys, "solve", "--case", str(path))
    assert rc == EXIT_NUMERIC
    assert err


def test_stats_stdout(capsys):
    rc, stdout, _ = _run(capsys, "stats")
    assert rc == EXIT_OK
    lines = stdout.splitlines()
    assert lines[1].split(",")[0] == "case"
    row = lines[2].split(",")
    assert row[0] == "ieee39"
    assert int(row[1]) == 39
    assert row[5] == "1"


def test_config_file_and_flag_override(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "newton": {"tol": 1e-10}}))
    rc, stdout, _ = _run(capsys, "stats", "--config", str(cfg))
    assert rc == EXIT_OK
    head = _resolved(stdout)
    assert head["seed"] == 5
    assert head["config"]["newton"]["tol"] == 1e-10
    rc, stdout, _ = _run(capsys, "stats", "--config", str(cfg), "--seed", "9")
    assert _resolved(stdout)["seed"] == 9


def test_bad_config_file(capsys, tmp_path):
    cfg = tmp_path / "broken.json"
    cfg.write_text("{not json")
    rc, _, err = _run(capsys, "stats", "--config", str(cfg))
    assert rc == EXIT_CONFIG
    assert "config" in err


def test_dataset_requires_out(capsys):
    rc, _, err = _run(capsys, "dataset")
    assert rc == EXIT_CONFIG
    assert "--out" in err


def test_dataset_deterministic(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dataset": {"sizes": [8], "samples_per_size": 3}}))
    p1 = tmp_path / "a.jsonl"
    p2 = tmp_path / "b.jsonl"
    rc1, _, _ = _run(capsys, "dataset", "--config", str(cfg), "--out", str(p1),
                     "--seed", "3")
    rc2, _, _ = _run(capsys, "dataset", "--config", str(cfg), "--out", str(p2),
                     "--seed", "3")
    assert rc1 == EXIT_OK and rc2 == EXIT_OK
    assert p1.read_bytes() == p2.read_bytes()


def test_recover_from_solution(capsys, tmp_path):
    sol_path = tmp_path / "sol.json"
    rc, _, _ = _run(capsys, "solve", "--out", str(sol_path))
    assert rc == EXIT_OK
    out = tmp_path / "angles.json"
    rc, _, _ = _run(capsys, "recover", "--dataset", str(sol_path),
                    "--out", str(out))
    assert rc == EXIT_OK
    doc = json.loads(out.read_text())
    truth = json.loads(sol_path.read_text())["solution"]["theta"]
    assert not doc["unassigned"]
    assert np.max(np.abs(np.array(doc["theta"]) - np.array(truth))) < 1e-9
    assert abs(doc["cycle_residual"]) < 1e-9


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Small dataset + trained checkpoint shared by the pipeline commands."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({
        "dataset": {"sizes": [8, 10], "samples_per_size": 3},
        "model": {"n_max": 12, "d_d": 16, "m_layers": 1, "k_heads": 2,
                  "gat_heads": 2, "ffn_width": 32},
        "schedule": {"stage1_epochs": 2, "stage2_epochs": 1},
        "train": {"lr": 1e-3, "batch_size": 4},
    }))
    data = root / "data.jsonl"
    ckpt = root / "model.bin"
    assert main(["dataset", "--config", str(cfg), "--out", str(data)]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--dataset", str(data),
                 "--checkpoint", str(ckpt)]) == EXIT_OK
    return cfg, data, ckpt, root


def test_train_requires_paths(capsys):
    rc, _, err = _run(capsys, "train")
    assert rc == EXIT_CONFIG
    assert "required" in err


def test_train_writes_log_and_checkpoint(pipeline):
    cfg, data, ckpt, root = pipeline
    assert ckpt.exists()
    assert (root / "model.bin.json").exists()
    log = root / "model.bin.log.csv"
    assert log.exists()
    lines = log.read_text().splitlines()
    assert lines[0].startswith("epoch,stage,total")
    assert len(lines) == 4     # header + 3 epochs


def test_infer(capsys, pipeline, tmp_path):
    cfg, data, ckpt, _ = pipeline
    out = tmp_path / "pred.json"
    rc, _, _ = _run(capsys, "infer", "--dataset", str(data),
                    "--checkpoint", str(ckpt), "--out", str(out))
    assert rc == EXIT_OK
    doc = json.loads(out.read_text())
    assert len(doc) == 6
    assert len(doc[0]["x_out"][0]) == 3
    assert len(doc[0]["h_out"][0]) == 2


def test_eval(capsys, pipeline, tmp_path):
    cfg, data, ckpt, _ = pipeline
    out = tmp_path / "report.json"
    rc, _, _ = _run(capsys, "eval", "--dataset", str(data),
                    "--checkpoint", str(ckpt), "--out", str(out))
    assert rc == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["samples"] == 6
    assert 0.0 <= doc["acc"] <= 1.0
    assert doc["mean_e_v"] >= 0.0
    csv_lines = (tmp_path / "report.json.samples.csv").read_text().splitlines()
    assert csv_lines[0] == "sample_index,e_v,e_theta,e_sl,e_ds"
    assert len(csv_lines) == 7


def test_warmstart_bench(capsys, pipeline, tmp_path):
    cfg, data, ckpt, _ = pipeline
    out = tmp_path / "bench.json"
    rc, _, _ = _run(capsys, "warmstart-bench", "--dataset", str(data),
                    "--checkpoint", str(ckpt), "--out", str(out))
    assert rc == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["cases"] == 6
    assert "flat" in doc and "init" in doc
    assert doc["flat"]["convergence_rate"] > 0.0
