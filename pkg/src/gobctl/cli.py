"""Command-line surface for the feeder control toolkit.

Every subcommand takes --seed and --config and is deterministic given both;
report-producing commands write delimited outputs plus rendered figures
(suppress with --no-figures).
"""
from __future__ import annotations

import csv
import json
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import experiments, figures, pipeline
from .cam import Cycle
from .config import AppConfig, load_config, save_config
from .forward import (
    build_network,
    evaluate,
    hyper_search,
    load_model,
    replace_spec_dropout,
    save_model,
    train,
)
from .inversion import InversionParams, InversionRequest, invert
from .pipeline import (
    build_differential_samples,
    clean,
    dedup_histogram,
    read_dataset_csv,
    temporal_split,
    write_dataset_csv,
)
from .plant import generate_history, read_history_csv, rows_to_records, write_history_csv


@click.group()
def main():
    """Gob feeder control toolkit: simulate, learn, invert, serve."""


def _config_options(fn):
    fn = click.option("--seed", type=int, default=None, help="Override the config seed.")(fn)
    fn = click.option(
        "--config", "config_path", type=click.Path(exists=True, dir_okay=False),
        default=None, help="JSON config file.",
    )(fn)
    return fn


def _load(config_path, seed) -> AppConfig:
    config = load_config(config_path)
    if seed is not None:
        config = AppConfig(
            plant=replace(config.plant, seed=seed),
            bins=config.bins,
            network=config.network,
            training=replace(config.training, seed=seed),
            inversion=replace(config.inversion, seed=seed),
        )
    return config


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


@main.command("init-config")
@click.option("--out", type=click.Path(dir_okay=False), default="config.json", show_default=True)
def init_config(out):
    """Write the default configuration to a JSON file."""
    save_config(AppConfig(), out)
    click.echo(f"wrote {out}")


@main.command()
@click.option("--cycles", type=int, required=True, help="Number of machine cycles.")
@click.option("--out", type=click.Path(dir_okay=False), default="history.csv", show_default=True)
@click.option("--figures/--no-figures", "render", default=True, show_default=True)
@_config_options
def simulate(cycles, out, render, config_path, seed):
    """Generate a synthetic production history CSV."""
    config = _load(config_path, seed)
    records = generate_history(config.plant, cycles)
    write_history_csv(records, out)
    click.echo(f"wrote {out}: {cycles} cycles, {cycles * config.plant.n_sections} records")
    if render:
        fig = figures.history_overview_figure(records, Path(out).with_suffix(".png"))
        click.echo(f"wrote {fig}")


@main.command("build-dataset")
@click.option("--history", "history_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default="dataset.csv", show_default=True)
@click.option("--dedup/--no-dedup", default=True, show_default=True)
@click.option("--bin-scale", type=float, default=1.0, show_default=True)
@click.option("--max-per-bin", type=int, default=1, show_default=True)
@click.option("--val-fraction", type=float, default=0.25, show_default=True)
@click.option("--reference-policy", type=click.Choice(["first", "random"]), default="first",
              show_default=True)
@_config_options
def build_dataset(history_path, out, dedup, bin_scale, max_per_bin, val_fraction,
                  reference_policy, config_path, seed):
    """Clean, difference, dedup and split a history into a training dataset."""
    config = _load(config_path, seed)
    run_seed = config.training.seed
    rows = read_history_csv(history_path)
    kept_rows, clean_report = clean(rows)
    samples, skip_log = build_differential_samples(
        kept_rows, reference_policy=reference_policy, seed=run_seed
    )
    out = Path(out)
    report = {
        "n_records": clean_report.n_input,
        "rejected_static": clean_report.n_static,
        "rejected_outliers": clean_report.n_outliers,
        "n_samples": len(samples),
        "skipped_cycles": len(skip_log),
    }
    if dedup:
        bins = config.bins.scaled(bin_scale) if bin_scale != 1.0 else config.bins
        samples, dedup_report = dedup_histogram(samples, bins, max_per_bin, seed=run_seed)
        report["dedup"] = {
            "kept": dedup_report.n_kept,
            "removal_fraction": dedup_report.removal_fraction,
            "duplicate_fraction": dedup_report.duplicate_fraction,
            **dedup_report.occupancy_summary(),
        }
    write_dataset_csv(samples, out)
    train_set, val_set = temporal_split(samples, val_fraction)
    write_dataset_csv(train_set, out.with_suffix(".train.csv"))
    write_dataset_csv(val_set, out.with_suffix(".val.csv"))
    report["train_samples"] = len(train_set)
    report["val_samples"] = len(val_set)
    _write_json(report, out.with_suffix(".report.json"))
    click.echo(json.dumps(report))


@main.command(name="train")
@click.option("--train-set", "train_path", type=click.Path(exists=True), required=True)
@click.option("--val-set", "val_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default="model.json", show_default=True)
@click.option("--search-budget", type=int, default=0, show_default=True,
              help="Random hyperparameter search trials before the final fit.")
@click.option("--figures/--no-figures", "render", default=True, show_default=True)
@_config_options
def train_cmd(train_path, val_path, out, search_budget, render, config_path, seed):
    """Fit the forward model and persist it with its training history."""
    config = _load(config_path, seed)
    train_set = read_dataset_csv(train_path)
    val_set = read_dataset_csv(val_path)
    spec = config.network
    train_config = config.training
    if search_budget > 0:
        best, board = hyper_search(
            train_set, val_set, spec, budget=search_budget,
            seed=train_config.seed, base_config=train_config,
        )
        click.echo(f"search winner: trial {best.index}, val MAE "
                   f"{best.val_mae_weight:.3f} g / {best.val_mae_length:.3f} mm")
        _write_json(
            [
                {"trial": t.index, "val_mae_weight": t.val_mae_weight,
                 "val_mae_length": t.val_mae_length, "dropout": t.dropout,
                 **t.config.to_dict()}
                for t in board
            ],
            Path(out).with_suffix(".search.json"),
        )
        train_config = best.config
        spec = replace_spec_dropout(spec, best.dropout)
    net = build_network(spec, seed=train_config.seed)
    model = train(net, train_set, val_set, train_config)
    save_model(model, out)
    best_epoch = min(model.history, key=lambda m: m.val_mae_weight + m.val_mae_length)
    click.echo(
        f"wrote {out}: {net.parameter_count()} parameters, best val MAE "
        f"{best_epoch.val_mae_weight:.3f} g / {best_epoch.val_mae_length:.3f} mm"
    )
    if render and model.history:
        fig = figures.training_history_figure(model, Path(out).with_suffix(".png"))
        click.echo(f"wrote {fig}")


@main.command(name="evaluate")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), required=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default="evaluation", show_default=True)
@click.option("--figures/--no-figures", "render", default=True, show_default=True)
@_config_options
def evaluate_cmd(model_path, dataset_path, out_dir, render, config_path, seed):
    """Regression error suite (MAE, RMSE, R2, MedAE, EVS + per-class MAE)."""
    config = _load(config_path, seed)
    model = load_model(model_path)
    samples = read_dataset_csv(dataset_path)
    report = evaluate(model, samples, config.bins)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(report.to_dict(), out / "metrics.json")
    with (out / "metrics.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "mae", "rmse", "r2", "medae", "evs"])
        for name, metrics in (("weight", report.weight), ("length", report.length)):
            writer.writerow([name, repr(metrics.mae), repr(metrics.rmse),
                             repr(metrics.r2) if metrics.r2 is not None else "",
                             repr(metrics.medae),
                             repr(metrics.evs) if metrics.evs is not None else ""])
    with (out / "per_class.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "class_low", "class_high", "count", "mae"])
        for name, classes in (("weight", report.weight_classes), ("length", report.length_classes)):
            for c in classes:
                writer.writerow([name, repr(c.class_low), repr(c.class_high), c.count, repr(c.mae)])
    click.echo(json.dumps({"weight": report.weight.to_dict(), "length": report.length.to_dict()}))
    if render:
        fig = figures.per_class_figure(report, out / "per_class.png")
        click.echo(f"wrote {fig}")


@main.command(name="invert")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--request", "request_path", type=click.Path(exists=True), required=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default="inversion", show_default=True)
@click.option("--figures/--no-figures", "render", default=True, show_default=True)
@_config_options
def invert_cmd(model_path, request_path, out_dir, render, config_path, seed):
    """Solve one inversion request file; write solution cycle and trace."""
    config = _load(config_path, seed)
    model = load_model(model_path)
    doc = json.loads(Path(request_path).read_text())
    cycle = Cycle.from_dict(doc["initial_cycle"])
    params = (
        InversionParams.from_dict({**config.inversion.to_dict(), **doc.get("params", {})})
    )
    request = InversionRequest(
        machine_state=cycle.machine_state,
        initial_cycle=cycle,
        targets=np.array(doc["targets"], dtype=float),
        params=params,
    )
    request.validate()
    result = invert(request, model)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(
        {
            "verdict": result.trace.verdict,
            "cycle": result.cycle.to_dict(),
            "free_deltas": result.free_deltas.tolist(),
            "predictions": result.predictions.tolist(),
            "residuals": result.residuals.tolist(),
        },
        out / "solution.json",
    )
    _write_json(result.trace.to_dict(), out / "trace.json")
    click.echo(f"{result.trace.verdict} in {len(result.trace.steps) - 1} steps")
    if render:
        fig = figures.convergence_figure(result, out / "convergence.png")
        cam_fig = figures.cam_profile_figure(result.cycle, out / "solution_cams.png")
        click.echo(f"wrote {fig}, {cam_fig}")


@main.command(name="batch-eval")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--history", "history_path", type=click.Path(exists=True), required=True)
@click.option("--requests", "n_requests", type=int, default=1000, show_default=True)
@click.option("--holdout-fraction", type=float, default=0.25, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default="batch_eval", show_default=True)
@click.option("--figures/--no-figures", "render", default=True, show_default=True)
@_config_options
def batch_eval(model_path, history_path, n_requests, holdout_fraction, out_dir, render,
               config_path, seed):
    """Reconstruction study over held-out cycles with planted transformations."""
    config = _load(config_path, seed)
    run_seed = config.inversion.seed
    model = load_model(model_path)
    rows = read_history_csv(history_path)
    records = rows_to_records(rows)
    cutoff = np.quantile([r.cycle_id for r in records], 1 - holdout_fraction)
    holdout = [r for r in records if r.cycle_id >= cutoff]
    chosen = experiments.select_distinct_cycles(holdout, n_requests, config.bins, seed=run_seed)
    rng = np.random.default_rng(np.random.SeedSequence([run_seed, 0xBA7C]))
    planted = [
        experiments.plant_single_section_request(rec.cycle, rng, config.inversion)
        for rec in chosen
    ]
    report = experiments.batch_evaluate(planted, model)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    entries = doc.pop("entries")
    _write_json(doc, out / "summary.json")
    with (out / "entries.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(entries[0].keys()) if entries else [])
        for e in entries:
            writer.writerow(list(e.values()))
    click.echo(json.dumps(doc))
    if render:
        fig = figures.batch_report_figure(report, out / "batch_eval.png")
        click.echo(f"wrote {fig}")


@main.command(name="sweep")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--cycle", "cycle_path", type=click.Path(exists=True), required=True,
              help="JSON cycle file (the base production cycle).")
@click.option("--section", type=int, default=0, show_default=True)
@click.option("--weight-range", type=(float, float), default=(-50.0, 50.0), show_default=True)
@click.option("--length-range", type=(float, float), default=(-50.0, 50.0), show_default=True)
@click.option("--points", type=int, default=21, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default="sweep", show_default=True)
@click.option("--figures/--no-figures", "render", default=True, show_default=True)
@_config_options
def sweep_cmd(model_path, cycle_path, section, weight_range, length_range, points, out_dir,
              render, config_path, seed):
    """Stability sweep: corrections vs progressively larger requests."""
    config = _load(config_path, seed)
    model = load_model(model_path)
    cycle = Cycle.from_dict(json.loads(Path(cycle_path).read_text()))
    result = experiments.stability_sweep(
        cycle, section, model, weight_range, length_range, points, config.inversion
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "requested", "verdict", "dsp_mm", "dlp_mm", "dup_mm", "loss"])
        for axis, points_ in result.axis_points.items():
            for p in points_:
                writer.writerow([axis, repr(p.requested), p.verdict, repr(p.dsp_mm),
                                 repr(p.dlp_mm), repr(p.dup_mm), repr(p.loss)])
    click.echo(f"wrote {out / 'sweep.csv'}")
    if render:
        fig = figures.sweep_figure(result, out / "sweep.png")
        click.echo(f"wrote {fig}")


@main.command(name="landscape")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--request", "request_path", type=click.Path(exists=True), required=True)
@click.option("--grid", "grid_spec", type=str, default="30x30", show_default=True,
              help="Points per axis, e.g. 30x30 or 30x30x30x30.")
@click.option("--span", type=float, default=20.0, show_default=True,
              help="Half-width of each axis in mm.")
@click.option("--sections", type=str, default="0", show_default=True,
              help="Comma-separated section indices (1 for 2D, 2 for 4D).")
@click.option("--out-dir", type=click.Path(file_okay=False), default="landscape", show_default=True)
@click.option("--figures/--no-figures", "render", default=True, show_default=True)
@_config_options
def landscape_cmd(model_path, request_path, grid_spec, span, sections, out_dir, render,
                  config_path, seed):
    """Dense loss grid over one or two cams, with minima enumeration."""
    config = _load(config_path, seed)
    model = load_model(model_path)
    doc = json.loads(Path(request_path).read_text())
    cycle = Cycle.from_dict(doc["initial_cycle"])
    params = InversionParams.from_dict({**config.inversion.to_dict(), **doc.get("params", {})})
    request = InversionRequest(
        machine_state=cycle.machine_state,
        initial_cycle=cycle,
        targets=np.array(doc["targets"], dtype=float),
        params=params,
    )
    request.validate()
    points = [int(p) for p in grid_spec.lower().split("x")]
    section_list = [int(s) for s in sections.split(",")]
    if len(points) not in (2, 4) or len(set(points)) != 1:
        raise click.UsageError("grid must be NxN or NxNxNxN")
    if len(points) != 2 * len(section_list):
        raise click.UsageError("grid dimensionality must be twice the section count")
    axes = experiments.landscape_axes_for_sections(
        cycle, section_list, [(-span, span)] * len(points), points[0]
    )
    result = invert(
        request, model,
        free_mask=experiments.mask_for_axes(axes, cycle.n_sections),
    )
    landscape = experiments.loss_landscape(request, model, axes, optimizer_result=result)
    minima, nearest = experiments.enumerate_minima(landscape)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "landscape.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([ax.label for ax in axes] + ["loss"])
        mesh = np.meshgrid(*[ax.values for ax in axes], indexing="ij")
        coords = np.stack([m.ravel() for m in mesh], axis=1)
        flat = landscape.loss.ravel()
        for i in range(len(flat)):
            writer.writerow([repr(c) for c in coords[i]] + [repr(float(flat[i]))])
    _write_json(
        {
            "n_minima": len(minima),
            "minima": [
                {"coords": list(m.coords), "loss": m.loss, "indices": list(m.indices)}
                for m in minima
            ],
            "origin_nearest": (
                {"coords": list(nearest.coords), "loss": nearest.loss} if nearest else None
            ),
            "optimizer": {
                "verdict": result.trace.verdict,
                "free_deltas": result.free_deltas.tolist(),
                "coincides_with_origin_nearest": (
                    experiments.within_one_cell(landscape, result.free_deltas, nearest)
                    if nearest else False
                ),
            },
        },
        out / "minima.json",
    )
    with (out / "optimizer_path.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + [ax.label for ax in axes] + ["loss"])
        for step, coords in zip(result.trace.steps, landscape.optimizer_path):
            writer.writerow([step.step] + [repr(float(c)) for c in coords]
                            + [repr(step.loss)])
    click.echo(f"wrote {out / 'landscape.csv'} ({landscape.loss.size} cells, "
               f"{len(minima)} minima)")
    if render:
        fig = figures.landscape_figure(landscape, out / "landscape.png")
        click.echo(f"wrote {fig}")


@main.command(name="dedup-study")
@click.option("--history", "history_path", type=click.Path(exists=True), required=True)
@click.option("--scales", type=str, default="0.5,1,2,4,8", show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default="dedup_study", show_default=True)
@click.option("--figures/--no-figures", "render", default=True, show_default=True)
@_config_options
def dedup_study(history_path, scales, out_dir, render, config_path, seed):
    """Retrain under coarser dedup bins; validation MAE vs training size."""
    config = _load(config_path, seed)
    run_seed = config.training.seed
    rows = read_history_csv(history_path)
    kept_rows, _ = clean(rows)
    samples, _ = build_differential_samples(kept_rows, seed=run_seed)
    train_set, val_set = temporal_split(samples, 0.25)
    scale_list = [float(s) for s in scales.split(",")]
    baseline, study_rows = experiments.dedup_granularity_study(
        train_set, val_set, scale_list, config.network, config.training, config.bins,
        seed=run_seed,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "study.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scale", "train_size", "kept_fraction", "val_mae_weight", "val_mae_length"])
        for row in [baseline, *study_rows]:
            writer.writerow([repr(row.scale), row.train_size, repr(row.kept_fraction),
                             repr(row.val_mae_weight), repr(row.val_mae_length)])
    click.echo(f"wrote {out / 'study.csv'}")
    if render:
        fig = figures.dedup_study_figure(baseline, study_rows, out / "study.png")
        click.echo(f"wrote {fig}")


@main.command(name="serve")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8321, show_default=True)
@_config_options
def serve_cmd(model_path, host, port, config_path, seed):
    """Start the closed-loop control service (plant simulator + inversion)."""
    import uvicorn

    from .service import create_app

    config = _load(config_path, seed)
    app = create_app(load_model(model_path), config)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
