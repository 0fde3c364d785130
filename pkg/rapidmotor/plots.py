"""
SVG figures rebuilt from the CSV logs a run leaves behind.
"""

import logging
import os

import pandas as pd


logger = logging.getLogger(__name__)

COLORS = {"total": "#FC4C02", "task": "#2E7D32", "penalty": "#5A8FC4"}


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path):
    plt = _pyplot()
    fig.tight_layout()
    fig.savefig(path, format="svg", bbox_inches="tight", facecolor="white")
    plt.close(fig)
    logger.info(f"[PLOT] Saved {path}")
    return path


def plot_training(csv_path, save_path):
    """Total, task and penalty reward per phase-1 iteration."""
    plt = _pyplot()
    frame = pd.read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(9, 5))
    ax.plot(frame["iteration"], frame["mean_reward"], color=COLORS["total"], label="total")
    ax.plot(frame["iteration"], frame["task_reward"], color=COLORS["task"], label="task")
    ax.plot(frame["iteration"], frame["penalty"], color=COLORS["penalty"], label="penalty (x k)")
    ax.axhline(0.0, color="#999999", linewidth=0.5)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean reward per step")
    ax.legend(loc="best")
    ax.grid(alpha=0.3)
    return _save(fig, save_path)


def plot_adaptation(csv_path, save_path):
    """Phase-2 regression curves."""
    plt = _pyplot()
    frame = pd.read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(9, 5))
    ax.semilogy(frame["iteration"], frame["train_mse"], color=COLORS["total"], label="train")
    valid = frame.dropna(subset=["val_mse"])
    ax.semilogy(valid["iteration"], valid["val_mse"], "o-", color=COLORS["penalty"], label="validation")
    ax.set_xlabel("iteration")
    ax.set_ylabel("MSE")
    ax.legend(loc="best")
    ax.grid(alpha=0.3)
    return _save(fig, save_path)


def plot_trace(csv_path, save_path, components=(0, 1), extrinsics_path=None):
    """Gait (leg length, contact), torques and estimate components over one deployment episode."""
    plt = _pyplot()
    frame = pd.read_csv(csv_path)
    if extrinsics_path and os.path.exists(extrinsics_path):
        filtered = pd.read_csv(extrinsics_path)
        for column in filtered.columns:
            if column.endswith("_filtered"):
                frame[column] = filtered[column].to_numpy()
    fig, axes = plt.subplots(3, 1, figsize=(10, 8), sharex=True)

    axes[0].plot(frame["t"], frame["leg_length"], color=COLORS["total"], label="leg length")
    axes[0].fill_between(frame["t"], 0, frame["contact"] * frame["leg_length"].max(), step="mid",
                         color="#B8D4E8", alpha=0.5, label="contact")
    axes[0].set_ylabel("m")
    axes[0].legend(loc="upper right")

    axes[1].plot(frame["t"], frame["torque_hip"], color=COLORS["task"], label="hip")
    axes[1].plot(frame["t"], frame["torque_leg"], color=COLORS["penalty"], label="leg")
    axes[1].set_ylabel("torque")
    axes[1].legend(loc="upper right")

    for index in components:
        column = f"z{index}"
        if column in frame:
            axes[2].plot(frame["t"], frame[column], linewidth=0.8, label=column)
        filtered = f"{column}_filtered"
        if filtered in frame:
            axes[2].plot(frame["t"], frame[filtered], linewidth=1.5, label=filtered)
    axes[2].set_ylabel("estimate")
    axes[2].set_xlabel("control step")
    axes[2].legend(loc="upper right")
    for ax in axes:
        ax.grid(alpha=0.3)
    return _save(fig, save_path)


def plot_sweep(csv_path, save_path, metric="success_rate"):
    """One line per baseline over the swept parameter."""
    plt = _pyplot()
    frame = pd.read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(8, 5))
    for kind, group in frame.groupby("kind", sort=False):
        group = group.sort_values("value")
        ax.plot(group["value"], group[metric], "o-", label=kind)
    ax.set_xlabel(frame["parameter"].iloc[0] if len(frame) else "value")
    ax.set_ylabel(metric)
    ax.legend(loc="best")
    ax.grid(alpha=0.3)
    return _save(fig, save_path)


def plot_run(run_dir):
    """Render every figure whose source CSV exists in run_dir; returns the written paths."""
    sources = (
        ("iterations.csv", "training.svg", plot_training),
        ("phase2.csv", "adaptation.svg", plot_adaptation),
        ("trace.csv", "trace.svg",
         lambda csv, svg: plot_trace(csv, svg, extrinsics_path=os.path.join(run_dir, "extrinsics.csv"))),
        ("sweep.csv", "sweep.svg", plot_sweep),
    )
    written = []
    for csv_name, svg_name, plot in sources:
        csv_path = os.path.join(run_dir, csv_name)
        if os.path.exists(csv_path):
            written.append(plot(csv_path, os.path.join(run_dir, svg_name)))
    if not written:
        logger.warning(f"[PLOT] No plottable CSVs in {run_dir}")
    return written
