"""Figure rendering for run directories: curves, sample predictions, study bars.

Figures land as PNG files next to the CSV tables they visualize.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path as FsPath

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import read_dataset, split_dataset
from .losses import oracle_path_values
from .model import BatchData, forward_batch
from .autodiff import Tape
from .train import load_checkpoint, read_curves


def render_curves(run_dir, out_path=None) -> FsPath:
    """Loss curves plus relative difference and evaluation metric vs epoch."""
    run_dir = FsPath(run_dir)
    rows = read_curves(run_dir / "curves.csv")
    out_path = FsPath(out_path) if out_path else run_dir / "curves.png"
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    if rows:
        epochs = [r["epoch"] for r in rows]
        axes[0].plot(epochs, [r["train_loss"] for r in rows], label="train loss")
        axes[0].plot(epochs, [r["test_loss"] for r in rows], label="test loss")
        axes[0].plot(epochs, [r["oracle_loss"] for r in rows], "k--", label="oracle loss")
        axes[0].set_yscale("log")
        axes[1].plot(epochs, [r["relative_difference"] for r in rows],
                     label="relative difference")
        axes[1].plot(epochs, [r["eval_metric"] for r in rows], label="evaluation metric")
        axes[1].set_yscale("log")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend()
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_predictions(run_dir, data_dir, n_paths: int = 4, out_path=None) -> FsPath:
    """Test-sample panels: true path, observations, model output, oracle."""
    run_dir = FsPath(run_dir)
    with open(run_dir / "config.json", encoding="utf-8") as fh:
        config = json.load(fh)
    model = load_checkpoint(run_dir)
    dataset = read_dataset(data_dir)
    _, test_ds = split_dataset(dataset, config["config"]["train_frac"], config["split_seed"])
    paths = sorted(test_ds.paths, key=lambda p: p.path_id)[:n_paths]
    grid = dataset.grid
    times = grid.times()
    batch = BatchData(paths, grid)
    tape = Tape(record_ops=False)
    trace = forward_batch(model, tape, batch, params=model.bind(tape), record_grid=True)
    d_x = dataset.d_x
    fig, axes = plt.subplots(len(paths), d_x, figsize=(6 * d_x, 2.6 * len(paths)),
                             squeeze=False)
    for j, p in enumerate(paths):
        oracle = oracle_path_values(dataset.model, p, grid)
        for c in range(d_x):
            ax = axes[j][c]
            ax.plot(times, p.values[c], color="0.7", lw=1, label="true path")
            ax.plot(times, trace.y_grid[j, :, c], color="tab:blue", lw=1.5,
                    label="model")
            ax.plot(times, oracle[:, c], color="tab:red", ls="--", lw=1.2,
                    label="conditional expectation")
            obs_idx = [gi for gi, m in zip(p.schedule.indices, p.schedule.masks) if m[c]]
            ax.plot(times[obs_idx], p.values[c, obs_idx], "kx", ms=5,
                    label="observations")
            ax.set_title(f"path {p.path_id}, coord {c}", fontsize=9)
            if j == 0 and c == 0:
                ax.legend(fontsize=7)
    fig.tight_layout()
    out_path = FsPath(out_path) if out_path else run_dir / "predictions.png"
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_study(run_dir, out_path=None) -> FsPath:
    """Mean +/- std bars of the minimal evaluation metric over repeats."""
    run_dir = FsPath(run_dir)
    with open(run_dir / "study.csv", newline="", encoding="utf-8") as fh:
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    n1s = sorted({int(r["n1"]) for r in rows})
    ms = sorted({int(r["m"]) for r in rows})

    def stats(filtered):
        vals = np.array([r["min_metric"] for r in filtered])
        return vals.mean(), vals.std(ddof=1) if len(vals) > 1 else 0.0

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    m_ref = ms[-1]
    by_n1 = [stats([r for r in rows if int(r["m"]) == m_ref and int(r["n1"]) == n1])
             for n1 in n1s]
    axes[0].bar(range(len(n1s)), [s[0] for s in by_n1],
                yerr=[s[1] for s in by_n1], capsize=4, color="tab:blue")
    axes[0].set_xticks(range(len(n1s)), [str(v) for v in n1s])
    axes[0].set_xlabel("training samples")
    axes[0].set_title(f"network width {m_ref}")
    n1_ref = n1s[-1]
    by_m = [stats([r for r in rows if int(r["n1"]) == n1_ref and int(r["m"]) == m])
            for m in ms]
    axes[1].bar(range(len(ms)), [s[0] for s in by_m],
                yerr=[s[1] for s in by_m], capsize=4, color="tab:orange")
    axes[1].set_xticks(range(len(ms)), [str(v) for v in ms])
    axes[1].set_xlabel("network width")
    axes[1].set_title(f"{n1_ref} training samples")
    for ax in axes:
        ax.set_ylabel("evaluation metric (min over epochs)")
        ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    out_path = FsPath(out_path) if out_path else run_dir / "study.png"
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_run(run_dir, data_dir=None, n_paths: int = 4) -> list[FsPath]:
    """Render every figure the run directory has data for."""
    run_dir = FsPath(run_dir)
    written = []
    if (run_dir / "curves.csv").exists():
        written.append(render_curves(run_dir))
    if data_dir is not None and (run_dir / "checkpoint.json").exists():
        written.append(render_predictions(run_dir, data_dir, n_paths=n_paths))
    if (run_dir / "study.csv").exists():
        written.append(render_study(run_dir))
    return written
