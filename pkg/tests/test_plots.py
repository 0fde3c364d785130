import os

import pandas as pd

from rapidmotor import plots


def _write(path, rows):
    pd.DataFrame(rows).to_csv(path, index=False)
    return str(path)


def test_training_and_adaptation_figures(tmp_path):
    iterations = _write(tmp_path / "iterations.csv", [
        {"iteration": i, "mean_reward": 0.1 * i, "task_reward": 0.2 * i, "penalty": -0.1 * i} for i in range(4)])
    phase2 = _write(tmp_path / "phase2.csv", [
        {"iteration": 0, "train_mse": 0.5, "val_mse": 0.6},
        {"iteration": 1, "train_mse": 0.2, "val_mse": None},
        {"iteration": 2, "train_mse": 0.1, "val_mse": 0.15},
    ])
    svg = plots.plot_training(iterations, str(tmp_path / "training.svg"))
    assert "<svg" in open(svg, encoding="utf-8").read()
    assert plots.plot_adaptation(phase2, str(tmp_path / "adaptation.svg")).endswith("adaptation.svg")


def test_plot_run_picks_up_present_logs(tmp_path):
    rows = [{"t": t, "leg_length": 0.3, "contact": t % 2, "torque_hip": 0.1, "torque_leg": 1.0, "z0": 0.01 * t,
             "z1": -0.01 * t} for t in range(12)]
    _write(tmp_path / "trace.csv", rows)
    _write(tmp_path / "extrinsics.csv", [{"t": r["t"], "z0": r["z0"], "z0_filtered": 0.0} for r in rows])
    _write(tmp_path / "sweep.csv", [
        {"kind": "rma", "parameter": "friction", "value": v, "success_rate": 1.0 - v / 10} for v in (0.1, 1.0, 2.0)])

    written = plots.plot_run(str(tmp_path))
    assert sorted(os.path.basename(p) for p in written) == ["sweep.svg", "trace.svg"]


def test_plot_run_on_empty_directory(tmp_path):
    assert plots.plot_run(str(tmp_path)) == []
