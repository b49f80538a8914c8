import json

import numpy as np
import pytest

from flowik import cnf
from flowik.cli import main, manifest_path_for
from flowik.iksolver import targets_csv
from flowik.kinematics import forward_kinematics, load_robot, sample_joints
from flowik.odeint import SolverConfig
from flowik.trainer import evaluate, evaluation_targets

from conftest import random_flow


@pytest.fixture
def model_file(tmp_path, planar3r):
    model = random_flow(planar3r, (8,), seed=2)
    model.infer_solver = SolverConfig("rk4", steps=8)
    path = tmp_path / "model.json"
    cnf.save_checkpoint(model, path)
    return path


@pytest.fixture
def target_file(tmp_path, planar3r):
    pos, quat = planar3r.fk_batch(sample_joints(planar3r, 4, 0))
    path = tmp_path / "targets.csv"
    path.write_text(targets_csv(pos, quat))
    return path


def write_config(tmp_path, **kw):
    cfg = dict(batch_size=8, iterations=4, eval_every=2, hidden_widths=[8], eval_targets=2, eval_samples=2,
               train_solver={"method": "rk4", "steps": 4}, infer_solver={"method": "rk4", "steps": 4})
    cfg.update(kw)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


# -- fk --------------------------------------------------------------------------------------

def test_fk_planar2r_zero(capsys):
    assert main(["fk", "--robot", "planar2r", "--q", "0,0"]) == 0
    assert capsys.readouterr().out == "2.000000000 0.000000000 0.000000000  1 0 0 0\n"


def test_fk_matches_library(capsys):
    q = [0.3, -1.1, 0.25, 2.0, -0.4, 0.9]
    assert main(["fk", "--robot", "spatial6r", "--q", ",".join(map(repr, q))]) == 0
    pose = forward_kinematics(load_robot("spatial6r"), np.array(q))[0]
    vals = [float(v) for v in capsys.readouterr().out.split()]
    np.testing.assert_allclose(vals[:3], pose.position, atol=5e-10)
    np.testing.assert_allclose(vals[3:], pose.orientation, rtol=1e-8, atol=1e-9)


def test_fk_dual_branch_prints_one_line_per_effector(capsys):
    assert main(["fk", "--robot", "dualbranch7", "--q", "0,0,0,0,0,0,0"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2


@pytest.mark.parametrize("argv", [
    ["fk", "--robot", "planar2r", "--q", "0,0,0"],
    ["fk", "--robot", "planar2r", "--q", "a,b"],
    ["fk", "--robot", "/no/such/robot.json", "--q", "0,0"],
])
def test_fk_input_errors(argv, capsys):
    assert main(argv) == 2
    assert "error:" in capsys.readouterr().err


# -- train -----------------------------------------------------------------------------------

def test_train_missing_robot_names_the_path(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "--robot", str(tmp_path / "nope.json"), "--config", str(cfg),
                 "--out", str(tmp_path / "m.json")]) == 2
    assert str(tmp_path / "nope.json") in capsys.readouterr().err


def test_train_bad_config(tmp_path):
    cfg = write_config(tmp_path, batch_size=0)
    assert main(["train", "--robot", "planar2r", "--config", str(cfg), "--out", str(tmp_path / "m.json")]) == 2
    cfg.write_text('{"learning_rte": 1}')
    assert main(["train", "--robot", "planar2r", "--config", str(cfg), "--out", str(tmp_path / "m.json")]) == 2


def test_train_zero_iterations(tmp_path):
    cfg = write_config(tmp_path, iterations=0)
    out = tmp_path / "m.json"
    assert main(["train", "--robot", "planar2r", "--config", str(cfg), "--out", str(out)]) == 0
    assert cnf.load_checkpoint(out).parameter_count > 0
    manifest = json.loads(manifest_path_for(out).read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 0
    assert set(manifest["config_hashes"]) == {"config"}


def test_train_is_byte_reproducible(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "m.json"
    argv = ["train", "--robot", "planar2r", "--config", str(cfg), "--out", str(out)]
    runs = []
    for _ in range(2):
        assert main(argv) == 0
        metrics = [line.split(",")[:-1] for line in tmp_path.joinpath("m.metrics.csv").read_text().splitlines()]
        runs.append((out.read_bytes(), manifest_path_for(out).read_bytes(), metrics))
    assert runs[0] == runs[1]
    assert len(runs[0][2]) == 3


def test_train_resume(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "m.json"
    assert main(["train", "--robot", "planar2r", "--config", str(cfg), "--out", str(out)]) == 0
    cfg2 = write_config(tmp_path, iterations=6)
    assert main(["train", "--robot", "planar2r", "--config", str(cfg2), "--out", str(tmp_path / "r.json"),
                 "--resume", str(out)]) == 0
    assert cnf.load_checkpoint(tmp_path / "r.json").train_state["iteration"] == 6
    assert main(["train", "--robot", "planar3r", "--config", str(cfg2), "--out", str(tmp_path / "x.json"),
                 "--resume", str(out)]) == 2


def test_train_abort_exit_code(tmp_path, monkeypatch):
    def broken(*a, **k):
        raise cnf.FlowError("non-finite density for sample index 0")

    monkeypatch.setattr(cnf, "loss_and_grad", broken)
    cfg = write_config(tmp_path)
    assert main(["train", "--robot", "planar2r", "--config", str(cfg), "--out", str(tmp_path / "m.json")]) == 3


def test_manifest_warns_on_changed_inputs(tmp_path, capsys):
    cfg = write_config(tmp_path, iterations=0)
    out = tmp_path / "m.json"
    argv = ["train", "--robot", "planar2r", "--config", str(cfg), "--out", str(out)]
    assert main(argv) == 0
    assert main(argv) == 0
    assert "warning" not in capsys.readouterr().err
    write_config(tmp_path, iterations=0, rng_seed=5)
    assert main(argv) == 0
    assert "inputs differ" in capsys.readouterr().err


# -- solve -----------------------------------------------------------------------------------

def test_solve_row_count_and_columns(tmp_path, model_file, capsys, planar3r):
    one = tmp_path / "one.csv"
    pos, quat = planar3r.fk_batch(sample_joints(planar3r, 1, 0))
    one.write_text(targets_csv(pos, quat))
    assert main(["solve", "--model", str(model_file), "--robot", "planar3r", "--targets", str(one),
                 "--samples", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "target,sample,q0,q1,q2,pos_err_0,ori_err_0,failed"
    assert len(lines) == 1 + 3


def test_solve_is_byte_reproducible(tmp_path, model_file, target_file):
    outs = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for out in outs:
        assert main(["solve", "--model", str(model_file), "--robot", "planar3r", "--targets",
                     str(target_file), "--samples", "5", "--seed", "7", "--out", str(out)]) == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert manifest_path_for(outs[0]).exists()


def test_solve_summary_matches_evaluate(tmp_path, model_file, planar3r, capsys):
    model = cnf.load_checkpoint(model_file)
    _, pos, quat = evaluation_targets(planar3r, 6, 4)
    targets = tmp_path / "eval.csv"
    targets.write_text(targets_csv(pos, quat))
    assert main(["solve", "--model", str(model_file), "--robot", "planar3r", "--targets", str(targets),
                 "--samples", "5", "--seed", "4", "--out", str(tmp_path / "s.csv")]) == 0
    err = capsys.readouterr().err
    reported = float(err.split("mean position error ")[1].split(" m")[0])
    expected = evaluate(model, planar3r, 6, 5, seed=4).pos_err_mean
    assert abs(reported - expected) < 1e-12


def test_solve_malformed_csv_reports_row(tmp_path, model_file, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("px,py,pz,qw,qx,qy,qz\n1,0,0,1,0,0,0\n1,0,0,1,0\n")
    assert main(["solve", "--model", str(model_file), "--robot", "planar3r", "--targets", str(bad)]) == 2
    assert "row 3" in capsys.readouterr().err


def test_solve_wrong_robot(model_file, target_file):
    assert main(["solve", "--model", str(model_file), "--robot", "planar2r", "--targets",
                 str(target_file)]) == 2


# -- path ------------------------------------------------------------------------------------

def constant_path(tmp_path, planar3r, k=6):
    pos, quat = planar3r.fk_batch(sample_joints(planar3r, 1, 3))
    path = tmp_path / "const.csv"
    path.write_text(targets_csv(np.repeat(pos, k, axis=0), np.repeat(quat, k, axis=0)))
    return path


def test_path_constant_is_continuous(tmp_path, model_file, planar3r):
    out = tmp_path / "report.json"
    assert main(["path", "--model", str(model_file), "--robot", "planar3r",
                 "--path", str(constant_path(tmp_path, planar3r)), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["continuity"] == "continuous" and report["max_joint_step"] < 1e-6
    joints = (tmp_path / "report.joints.csv").read_text().splitlines()
    assert joints[0] == "waypoint,q0,q1,q2" and len(joints) == 7


def test_path_no_continuous_attempt_exits_4(tmp_path, model_file, planar3r):
    pos, quat = planar3r.fk_batch(sample_joints(planar3r, 5, 8))
    path = tmp_path / "jumpy.csv"
    path.write_text(targets_csv(pos, quat))
    out = tmp_path / "r.json"
    assert main(["path", "--model", str(model_file), "--robot", "planar3r", "--path", str(path),
                 "--retries", "2", "--step-threshold", "0", "--out", str(out)]) == 4
    assert json.loads(out.read_text())["continuity"] == "discontinuous"
    assert (tmp_path / "r.joints.csv").exists()


def test_path_is_byte_reproducible(tmp_path, model_file, planar3r):
    src = constant_path(tmp_path, planar3r)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.json"
        main(["path", "--model", str(model_file), "--robot", "planar3r", "--path", str(src),
              "--seed", "3", "--out", str(out)])
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert (tmp_path / "a.joints.csv").read_bytes() == (tmp_path / "b.joints.csv").read_bytes()


@pytest.mark.parametrize("extra", [["--retries", "0"], ["--step-threshold", "-1"]])
def test_path_invalid_flags(tmp_path, model_file, planar3r, extra):
    assert main(["path", "--model", str(model_file), "--robot", "planar3r",
                 "--path", str(constant_path(tmp_path, planar3r))] + extra) == 2


# -- evaluate / bench --------------------------------------------------------------------------

def test_evaluate_json(tmp_path, model_file):
    out = tmp_path / "eval.json"
    assert main(["evaluate", "--model", str(model_file), "--robot", "planar3r", "--targets", "3",
                 "--samples", "2", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["targets"] == 3 and report["pos_err_mean"] > 0


def test_bench_reference_architecture_count(capsys):
    assert main(["bench", "--arch", "7:1024,1024,1024,1024:8"]) == 0
    header, row = capsys.readouterr().out.splitlines()
    values = dict(zip(header.split(","), row.split(",")))
    assert values["parameters"] == values["closed_form"] == "3237888"


def test_bench_zero_model_with_baseline(tmp_path, planar3r, capsys):
    model = cnf.FlowModel.create(planar3r, (8,), infer_solver=SolverConfig("rk4", steps=2))
    path = tmp_path / "zero.json"
    cnf.save_checkpoint(model, path)
    out = tmp_path / "bench.csv"
    assert main(["bench", "--model", str(path), "--robot", "planar3r", "--targets", "4", "--samples", "3",
                 "--baseline", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 3
    flow = dict(zip(lines[0].split(","), lines[1].split(",")))
    assert int(flow["parameters"]) == model.parameter_count
    assert float(flow["pos_err_mean_mm"]) > 0
    assert "solutions/s" in capsys.readouterr().err


def test_bench_bad_input():
    assert main(["bench", "--arch", "7:abc:8"]) == 2
    assert main(["bench"]) == 2
