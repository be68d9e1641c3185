"""Matplotlib renderings written next to the delimited report files.

Every reporting CLI path ends with one or more of these; they are plain
functions taking the already-computed report objects so the numeric
pipeline stays importable without a display (Agg backend).
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .cam import Cycle, RelativeProfile, DEFAULT_PROFILE, cycle_motion
from .experiments import BatchReport, DedupStudyRow, Landscape, SweepResult
from .forward import MetricReport, TrainedModel
from .inversion import InversionResult
from .plant import CycleRecord


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    return path


def training_history_figure(model: TrainedModel, path: str | Path) -> Path:
    epochs = [m.epoch for m in model.history]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, (train_key, val_key, label) in zip(
        axes,
        [
            ("train_mae_weight", "val_mae_weight", "weight MAE [g]"),
            ("train_mae_length", "val_mae_length", "length MAE [mm]"),
        ],
    ):
        ax.plot(epochs, [getattr(m, train_key) for m in model.history], label="train")
        ax.plot(epochs, [getattr(m, val_key) for m in model.history], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel(label)
        ax.set_yscale("log")
        ax.legend()
        ax.grid(alpha=0.3)
    fig.suptitle("Training history")
    return _save(fig, path)


def per_class_figure(report: MetricReport, path: str | Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for ax, classes, label in (
        (axes[0], report.weight_classes, "weight class [g]"),
        (axes[1], report.length_classes, "length class [mm]"),
    ):
        if not classes:
            continue
        centers = [(c.class_low + c.class_high) / 2 for c in classes]
        counts = [c.count for c in classes]
        maes = [c.mae for c in classes]
        ax2 = ax.twinx()
        ax2.bar(centers, counts, width=[(c.class_high - c.class_low) for c in classes],
                alpha=0.25, color="grey", label="count")
        ax.plot(centers, maes, "o-", color="tab:red", label="MAE")
        ax.set_xlabel(label)
        ax.set_ylabel("MAE")
        ax2.set_ylabel("samples")
        ax.grid(alpha=0.3)
    fig.suptitle("Reconstruction error by measurement class")
    return _save(fig, path)


def history_overview_figure(records: list[CycleRecord], path: str | Path) -> Path:
    weights, lengths = [], []
    for rec in records:
        for m in rec.measurements:
            if not m.dirty:
                weights.append(m.weight)
                lengths.append(m.length)
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.hist2d(weights, lengths, bins=60, cmap="viridis")
    ax.set_xlabel("gob weight [g]")
    ax.set_ylabel("gob length [mm]")
    ax.set_title("Working points of the generated history")
    return _save(fig, path)


def convergence_figure(result: InversionResult, path: str | Path, section: int | None = None) -> Path:
    steps = result.trace.steps
    t = [s.step for s in steps]
    fig, axes = plt.subplots(1, 3, figsize=(14, 4))
    axes[0].plot(t, [s.loss for s in steps])
    axes[0].set_yscale("log")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss (normalized)")
    axes[0].grid(alpha=0.3)
    n = result.predictions.shape[0]
    sections = range(n) if section is None else [section]
    for i in sections:
        axes[1].plot(t, [s.predictions[i, 0] for s in steps], label=f"s{i}")
        axes[2].plot(t, [s.predictions[i, 1] for s in steps], label=f"s{i}")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("predicted dW [g]")
    axes[2].set_xlabel("step")
    axes[2].set_ylabel("predicted dL [mm]")
    axes[1].grid(alpha=0.3)
    axes[2].grid(alpha=0.3)
    if n <= 8:
        axes[1].legend(ncol=2, fontsize=8)
    fig.suptitle(f"Inversion convergence ({result.trace.verdict})")
    return _save(fig, path)


def batch_report_figure(report: BatchReport, path: str | Path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(14, 4))
    resid_w = [e.plant_residual_w for e in report.entries]
    resid_l = [e.plant_residual_l for e in report.entries]
    axes[0].hist(resid_w, bins=40, alpha=0.7, label="weight [g]")
    axes[0].hist(resid_l, bins=40, alpha=0.7, label="length [mm]")
    axes[0].set_xlabel("worst plant residual")
    axes[0].set_ylabel("requests")
    axes[0].legend()
    uppers = [e.upper_error_mm for e in report.entries if e.upper_error_mm is not None]
    junctions = [e.junction_error_mm for e in report.entries if e.junction_error_mm is not None]
    if uppers:
        axes[1].hist(uppers, bins=40, alpha=0.7, label="upper deadpoint")
        axes[1].hist(junctions, bins=40, alpha=0.7, label="junction")
        axes[1].set_xlabel("reconstruction error [mm]")
        axes[1].legend()
    axes[2].hist([e.wall_time_s for e in report.entries], bins=30)
    axes[2].set_xlabel("wall time per inversion [s]")
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.suptitle(
        f"Batch inversion: {report.n} requests, "
        f"{100 * report.convergence_rate:.1f}% converged"
    )
    return _save(fig, path)


def sweep_figure(result: SweepResult, path: str | Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(11, 4.5))
    for ax, axis_name, unit in ((axes[0], "weight", "g"), (axes[1], "length", "mm")):
        points = result.axis_points[axis_name]
        ok = [p for p in points if p.verdict == "converged"]
        bad = [p for p in points if p.verdict != "converged"]
        for attr, label in (("dsp_mm", "dSP"), ("dlp_mm", "dLP"), ("dup_mm", "dUP")):
            ax.plot([p.requested for p in ok], [getattr(p, attr) for p in ok], "o-",
                    markersize=3, label=label)
        for p in bad:
            ax.axvline(p.requested, color="red", alpha=0.15)
        ax.set_xlabel(f"requested d{'W' if axis_name == 'weight' else 'L'} [{unit}]")
        ax.set_ylabel("deadpoint correction [mm]")
        ax.grid(alpha=0.3)
        ax.legend()
    fig.suptitle(
        f"Section {result.section} corrections vs request "
        "(red bands: infeasible)"
    )
    return _save(fig, path)


def landscape_figure(landscape: Landscape, path: str | Path) -> Path:
    loss = landscape.loss
    if loss.ndim == 2:
        fig = plt.figure(figsize=(12, 5))
        ax1 = fig.add_subplot(1, 2, 1, projection="3d")
        x, y = np.meshgrid(landscape.axes[0].values, landscape.axes[1].values, indexing="ij")
        ax1.plot_surface(x, y, loss, cmap="viridis", alpha=0.9)
        ax1.set_xlabel(landscape.axes[0].label)
        ax1.set_ylabel(landscape.axes[1].label)
        ax1.set_zlabel("loss")
        ax2 = fig.add_subplot(1, 2, 2)
        c = ax2.contourf(x, y, loss, levels=30, cmap="viridis")
        fig.colorbar(c, ax=ax2)
        if landscape.optimizer_path is not None:
            ax2.plot(landscape.optimizer_path[:, 0], landscape.optimizer_path[:, 1],
                     "k--", linewidth=1.2, label="optimizer")
            ax2.legend()
        ax2.set_xlabel(landscape.axes[0].label)
        ax2.set_ylabel(landscape.axes[1].label)
    else:
        # 4D grid: contour slices of the first cam over a lattice of the second
        n3, n4 = loss.shape[2], loss.shape[3]
        picks = [0, n3 // 2, n3 - 1]
        fig, axes2 = plt.subplots(len(picks), len(picks), figsize=(12, 11),
                                  sharex=True, sharey=True)
        x, y = np.meshgrid(landscape.axes[0].values, landscape.axes[1].values, indexing="ij")
        for r, i3 in enumerate(picks):
            for c_, i4 in enumerate(picks):
                ax = axes2[r][c_]
                ax.contourf(x, y, loss[:, :, i3, i4], levels=25, cmap="viridis")
                ax.set_title(
                    f"{landscape.axes[2].label}={landscape.axes[2].values[i3]:.1f}, "
                    f"{landscape.axes[3].label}={landscape.axes[3].values[i4]:.1f}",
                    fontsize=8,
                )
        for ax in axes2[-1]:
            ax.set_xlabel(landscape.axes[0].label)
        for row in axes2:
            row[0].set_ylabel(landscape.axes[1].label)
        fig.suptitle("Loss landscape slices")
    return _save(fig, path)


def dedup_study_figure(baseline: DedupStudyRow, rows: list[DedupStudyRow], path: str | Path) -> Path:
    scales = [r.scale for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax2 = ax.twinx()
    ax2.bar(range(len(rows)), [r.train_size for r in rows], alpha=0.25, color="grey")
    ax.plot(range(len(rows)), [r.val_mae_weight for r in rows], "o-", label="weight MAE [g]")
    ax.plot(range(len(rows)), [r.val_mae_length for r in rows], "s-", label="length MAE [mm]")
    ax.axhline(baseline.val_mae_weight, color="tab:blue", linestyle=":", alpha=0.7)
    ax.axhline(baseline.val_mae_length, color="tab:orange", linestyle=":", alpha=0.7)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([f"{s:g}x" for s in scales])
    ax.set_xlabel("bin width scale")
    ax.set_ylabel("validation MAE")
    ax2.set_ylabel("training samples kept")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.suptitle("Duplicate-removal granularity vs model accuracy")
    return _save(fig, path)


def cam_profile_figure(cycle: Cycle, path: str | Path,
                       profile: RelativeProfile = DEFAULT_PROFILE) -> Path:
    curves = cycle_motion(cycle, profile)
    fig, ax = plt.subplots(figsize=(10, 4))
    for i, curve in enumerate(curves):
        ax.plot(curve.times, curve.heights, label=f"section {i}")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("plunger height [mm]")
    ax.grid(alpha=0.3)
    if cycle.n_sections <= 8:
        ax.legend(ncol=4, fontsize=8)
    ax.set_title("Cycle plunger motion")
    return _save(fig, path)
