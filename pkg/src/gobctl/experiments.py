"""Evaluation experiments around the inversion engine.

Covers the batch reconstruction study (run the optimizer over held-out
cycles with known ground-truth corrections), stability sweeps of single-cam
transformations, dense loss-landscape grids with local-minima enumeration,
and the dedup-granularity retraining study.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cam import Cycle, to_free_parameters
from .forward import TrainConfig, TrainedModel, build_network, evaluate, train
from .inversion import (
    InversionParams,
    InversionRequest,
    InversionResult,
    Objective,
    invert,
    invert_gradient,
    section_deltas_from_free,
)
from .nn import NetworkSpec
from .pipeline import BinSpec, DifferentialSample, dedup_histogram
from .plant import CycleRecord, surrogate_response_batch


# ---------------------------------------------------------------------------
# Ground-truth transformation requests


@dataclass
class PlantedRequest:
    """An inversion request whose true free-parameter correction is known."""

    request: InversionRequest
    true_free_deltas: np.ndarray
    section: int


@dataclass(frozen=True)
class TargetRanges:
    weight_g: float = 40.0
    length_mm: float = 20.0


def surrogate_targets(cycle: Cycle, free_deltas: np.ndarray) -> np.ndarray:
    """Exact per-section (dW, dL) the synthetic plant assigns to a correction."""
    n = cycle.n_sections
    deltas = section_deltas_from_free(np.asarray(free_deltas, dtype=float), n)
    state = cycle.machine_state
    return surrogate_response_batch(
        np.full(n, state.temperature), np.full(n, state.master_speed), deltas
    )


def plant_single_section_request(
    cycle: Cycle,
    rng: np.random.Generator,
    params: InversionParams,
    ranges: TargetRanges = TargetRanges(),
    max_draws: int = 200,
) -> PlantedRequest:
    """Plant a random single-cam correction and derive its exact targets.

    One section's junction, preceding junction and upper deadpoint move (the
    way an operator retunes one cam); targets for every section, including
    the side effects on the neighbours, come from the closed-form plant, so
    the request is feasible by construction and the correction that produced
    it is known exactly.
    """
    n = cycle.n_sections
    base = to_free_parameters(cycle)
    for _ in range(max_draws):
        k = int(rng.integers(0, n))
        truth = np.zeros(2 * n)
        truth[(k - 1) % n] = rng.uniform(-1.0, 1.0)
        truth[k] = rng.uniform(-3.0, 3.0)
        truth[n + k] = rng.uniform(-14.0, 14.0)
        if np.any(base + truth < 0):
            continue
        targets = surrogate_targets(cycle, truth)
        if abs(targets[k, 0]) > ranges.weight_g or abs(targets[k, 1]) > ranges.length_mm:
            continue
        request = InversionRequest(
            machine_state=cycle.machine_state,
            initial_cycle=cycle,
            targets=targets,
            params=params,
        )
        return PlantedRequest(request=request, true_free_deltas=truth, section=k)
    raise RuntimeError("could not plant a feasible transformation in range")


def select_distinct_cycles(
    records: Sequence[CycleRecord],
    n: int,
    bins: BinSpec | None = None,
    seed: int = 0,
) -> list[CycleRecord]:
    """Pick up to ``n`` cycles spread over distinct operating regions.

    Cycles are bucketed by their machine-state histogram cell (same widths
    as the dedup histogram) and drawn round-robin across buckets, so long
    stable runs do not dominate the evaluation set.
    """
    bins = bins or BinSpec()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E7]))
    buckets: dict[tuple, list[CycleRecord]] = {}
    for rec in records:
        state = rec.cycle.machine_state
        key = (
            int(np.floor(state.temperature / bins.temperature)),
            int(np.floor(state.master_speed / bins.machine_speed)),
            int(np.floor(state.tube_rotation_speed / bins.tube_rotation)),
            int(np.floor(state.shear_plunger_phase / bins.shear_plunger_phase)),
            tuple(np.floor(to_free_parameters(rec.cycle) / bins.deadpoints).astype(int)),
        )
        buckets.setdefault(key, []).append(rec)
    pools = [buckets[k] for k in sorted(buckets)]
    for pool in pools:
        rng.shuffle(pool)
    chosen: list[CycleRecord] = []
    round_idx = 0
    while len(chosen) < n and any(round_idx < len(p) for p in pools):
        for pool in pools:
            if round_idx < len(pool) and len(chosen) < n:
                chosen.append(pool[round_idx])
        round_idx += 1
    return chosen


# ---------------------------------------------------------------------------
# Batch evaluation


@dataclass
class BatchEntry:
    section: int
    verdict: str
    n_steps: int
    wall_time_s: float
    model_residual_w: float  # worst per-section |prediction - target|
    model_residual_l: float
    plant_residual_w: float  # worst residual when applied to the true plant
    plant_residual_l: float
    upper_error_mm: float | None  # vs the planted correction
    junction_error_mm: float | None


@dataclass
class BatchReport:
    entries: list[BatchEntry]
    params: InversionParams
    cycles: list[Cycle] = field(default_factory=list)  # solution cycles, when collected

    @property
    def n(self) -> int:
        return len(self.entries)

    @property
    def convergence_rate(self) -> float:
        return sum(e.verdict == "converged" for e in self.entries) / max(self.n, 1)

    def plant_hit_rate(self, factor: float = 3.0) -> float:
        """Fraction landing within factor x tolerance on the true plant."""
        p = self.params
        hits = sum(
            e.plant_residual_w <= factor * p.tol_weight_g
            and e.plant_residual_l <= factor * p.tol_length_mm
            for e in self.entries
        )
        return hits / max(self.n, 1)

    def median_upper_error(self) -> float:
        vals = [e.upper_error_mm for e in self.entries if e.upper_error_mm is not None]
        return float(np.median(vals)) if vals else float("nan")

    def median_junction_error(self) -> float:
        vals = [e.junction_error_mm for e in self.entries if e.junction_error_mm is not None]
        return float(np.median(vals)) if vals else float("nan")

    def wall_time_stats(self) -> dict:
        times = np.array([e.wall_time_s for e in self.entries]) if self.entries else np.zeros(1)
        return {
            "mean_s": float(times.mean()),
            "median_s": float(np.median(times)),
            "max_s": float(times.max()),
        }

    def to_dict(self) -> dict:
        return {
            "n_requests": self.n,
            "convergence_rate": self.convergence_rate,
            "plant_hit_rate_3x": self.plant_hit_rate(3.0),
            "median_upper_error_mm": self.median_upper_error(),
            "median_junction_error_mm": self.median_junction_error(),
            "wall_time": self.wall_time_stats(),
            "entries": [vars(e) for e in self.entries],
        }


def batch_evaluate(
    planted: Sequence[PlantedRequest],
    model: TrainedModel,
    collect_cycles: bool = False,
) -> BatchReport:
    """Run the optimizer over planted requests and score the solutions.

    Reports model-space residuals (how well the optimizer met its targets
    under the forward model), plant-space residuals (what the noise-free
    plant would actually produce for the proposed cams), deadpoint
    reconstruction errors against the planted ground truth, and timing.
    """
    entries = []
    cycles = []
    for item in planted:
        result = invert(item.request, model)
        if collect_cycles:
            cycles.append(result.cycle)
        achieved = surrogate_targets(item.request.initial_cycle, result.free_deltas)
        plant_residual = np.abs(achieved - item.request.targets)
        model_residual = np.abs(result.residuals)
        n = item.request.initial_cycle.n_sections
        k = item.section
        sol = result.free_deltas
        truth = item.true_free_deltas
        upper_err = abs(sol[n + k] - truth[n + k])
        junction_err = max(
            abs(sol[(k - 1) % n] - truth[(k - 1) % n]), abs(sol[k] - truth[k])
        )
        entries.append(
            BatchEntry(
                section=k,
                verdict=result.trace.verdict,
                n_steps=len(result.trace.steps) - 1,
                wall_time_s=result.trace.wall_time_s,
                model_residual_w=float(model_residual[:, 0].max()),
                model_residual_l=float(model_residual[:, 1].max()),
                plant_residual_w=float(plant_residual[:, 0].max()),
                plant_residual_l=float(plant_residual[:, 1].max()),
                upper_error_mm=upper_err,
                junction_error_mm=junction_err,
            )
        )
    params = planted[0].request.params if planted else InversionParams()
    return BatchReport(entries=entries, params=params, cycles=cycles)


# ---------------------------------------------------------------------------
# Stability sweeps


@dataclass
class SweepPoint:
    requested: float
    verdict: str
    dsp_mm: float
    dlp_mm: float
    dup_mm: float
    loss: float


@dataclass
class SweepResult:
    section: int
    axis_points: dict[str, list[SweepPoint]]  # "weight" and "length"

    def truncated(self, axis: str) -> bool:
        return any(p.verdict != "converged" for p in self.axis_points[axis])


def stability_sweep(
    cycle: Cycle,
    section: int,
    model: TrainedModel,
    weight_range: tuple[float, float] = (-50.0, 50.0),
    length_range: tuple[float, float] = (-50.0, 50.0),
    n_points: int = 21,
    params: InversionParams | None = None,
) -> SweepResult:
    """Response of the optimizer to progressively larger requests on one cam.

    Sweeps the weight target (length fixed at zero) and the length target
    (weight fixed at zero) for the chosen section while all other sections
    request no change. Curves truncate where the verdict turns infeasible.
    """
    params = params or InversionParams()
    n = cycle.n_sections
    result: dict[str, list[SweepPoint]] = {"weight": [], "length": []}
    for axis, (lo, hi) in (("weight", weight_range), ("length", length_range)):
        for value in np.linspace(lo, hi, n_points):
            targets = np.zeros((n, 2))
            targets[section, 0 if axis == "weight" else 1] = value
            request = InversionRequest(
                machine_state=cycle.machine_state,
                initial_cycle=cycle,
                targets=targets,
                params=params,
            )
            res = invert_gradient(request, model)
            deltas = section_deltas_from_free(res.free_deltas, n)[section]
            result[axis].append(
                SweepPoint(
                    requested=float(value),
                    verdict=res.trace.verdict,
                    dsp_mm=float(deltas[0]),
                    dlp_mm=float(deltas[1]),
                    dup_mm=float(deltas[2]),
                    loss=float(res.trace.steps[-1].loss),
                )
            )
    return SweepResult(section=section, axis_points=result)


# ---------------------------------------------------------------------------
# Loss landscapes


MAX_GRID_EVALUATIONS = 10_000_000
MAX_POINTS_PER_AXIS = 50


@dataclass
class GridAxis:
    free_index: int  # index into the free-parameter delta vector
    label: str
    values: np.ndarray


@dataclass
class Landscape:
    axes: list[GridAxis]
    loss: np.ndarray  # shape = tuple(len(axis.values) for each axis)
    request: InversionRequest
    optimizer_path: np.ndarray | None = None  # (steps, n_axes)

    def origin_indices(self) -> tuple[int, ...]:
        return tuple(int(np.argmin(np.abs(ax.values))) for ax in self.axes)


def landscape_axes_for_sections(
    cycle: Cycle, sections: Sequence[int], spans: Sequence[tuple[float, float]], n_points: int
) -> list[GridAxis]:
    """(dSP, dUP) axes for each chosen section, as free-parameter indices.

    A section's starting point is the previous section's junction, so the
    pair (dSP_k, dUP_k) maps to free indices ((k-1) mod N, N+k).
    """
    n = cycle.n_sections
    axes = []
    for k, (sp_span, up_span) in zip(sections, zip(spans[0::2], spans[1::2])):
        axes.append(
            GridAxis(
                free_index=(k - 1) % n,
                label=f"dSP[{k}]",
                values=np.linspace(sp_span[0], sp_span[1], n_points),
            )
        )
        axes.append(
            GridAxis(
                free_index=n + k,
                label=f"dUP[{k}]",
                values=np.linspace(up_span[0], up_span[1], n_points),
            )
        )
    return axes


def mask_for_axes(axes: Sequence[GridAxis], n_sections: int) -> np.ndarray:
    """Free-parameter mask restricting an optimizer to the grid's axes."""
    mask = np.zeros(2 * n_sections)
    for ax in axes:
        mask[ax.free_index] = 1.0
    return mask


def loss_landscape(
    request: InversionRequest,
    model: TrainedModel,
    axes: list[GridAxis],
    optimizer_result: InversionResult | None = None,
    chunk_rows: int = 65536,
) -> Landscape:
    """Evaluate the inversion objective on a dense grid of free-parameter deltas.

    Grid dimensionality is 2 (one cam) or 4 (two cams); the evaluation is
    batched through the model. All non-grid free parameters stay at zero.
    """
    if len(axes) not in (2, 4):
        raise ValueError("landscape grids are 2- or 4-dimensional")
    shape = tuple(len(ax.values) for ax in axes)
    if any(s > MAX_POINTS_PER_AXIS for s in shape):
        raise ValueError(f"at most {MAX_POINTS_PER_AXIS} points per axis")
    n_cells = int(np.prod(shape))
    objective = Objective(request, model)
    n = objective.n
    if n_cells * n > MAX_GRID_EVALUATIONS:
        raise ValueError(
            f"grid needs {n_cells * n} model evaluations "
            f"(limit {MAX_GRID_EVALUATIONS}); reduce points per axis"
        )

    mesh = np.meshgrid(*[ax.values for ax in axes], indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=1)  # (cells, n_axes)
    free = np.zeros((n_cells, 2 * n))
    for j, ax in enumerate(axes):
        free[:, ax.free_index] = coords[:, j]

    # per-section deltas for every cell: (cells, N, 3)
    junctions, uppers = free[:, :n], free[:, n:]
    deltas = np.stack([np.roll(junctions, 1, axis=1), junctions, uppers], axis=2)
    features = np.concatenate(
        [np.broadcast_to(objective.globals, (n_cells, n, 4)), deltas], axis=2
    ).reshape(n_cells * n, 7)

    preds = np.empty((n_cells * n, 2))
    for start in range(0, len(features), chunk_rows):
        preds[start : start + chunk_rows] = model.predict(features[start : start + chunk_rows])
    preds = preds.reshape(n_cells, n, 2)
    residual = (preds - request.targets) / objective.scales
    loss = (residual**2).sum(axis=(1, 2)) + objective.penalties_batch(free)

    path = None
    if optimizer_result is not None:
        path = np.stack(
            [
                [step.free_deltas[ax.free_index] for ax in axes]
                for step in optimizer_result.trace.steps
            ]
        )
    return Landscape(axes=axes, loss=loss.reshape(shape), request=request, optimizer_path=path)


@dataclass
class GridMinimum:
    indices: tuple[int, ...]
    coords: tuple[float, ...]
    loss: float


def enumerate_minima(landscape: Landscape) -> tuple[list[GridMinimum], GridMinimum | None]:
    """Strict axis-neighbour local minima, sorted by loss.

    Also returns the minimum nearest to the zero-delta origin (Euclidean
    distance with each axis normalized by its span), which is where the
    zero-initialized optimizer is expected to land.
    """
    loss = landscape.loss
    mask = np.ones(loss.shape, dtype=bool)
    for axis in range(loss.ndim):
        padded = np.pad(loss, [(1, 1) if a == axis else (0, 0) for a in range(loss.ndim)],
                        constant_values=np.inf)
        forward = np.take(padded, range(2, loss.shape[axis] + 2), axis=axis)
        backward = np.take(padded, range(0, loss.shape[axis]), axis=axis)
        mask &= (loss < forward) & (loss < backward)
    minima = []
    for idx in np.argwhere(mask):
        indices = tuple(int(i) for i in idx)
        coords = tuple(float(ax.values[i]) for ax, i in zip(landscape.axes, indices))
        minima.append(GridMinimum(indices, coords, float(loss[indices])))
    minima.sort(key=lambda m: m.loss)
    if not minima:
        return [], None
    spans = [
        max(float(ax.values[-1] - ax.values[0]), 1e-12) for ax in landscape.axes
    ]
    nearest = min(
        minima,
        key=lambda m: sum((c / s) ** 2 for c, s in zip(m.coords, spans)),
    )
    return minima, nearest


def within_one_cell(landscape: Landscape, point: np.ndarray, minimum: GridMinimum) -> bool:
    """Is ``point`` (free-parameter deltas) within one grid cell of the minimum?"""
    for ax, coord in zip(landscape.axes, minimum.coords):
        step = abs(float(ax.values[1] - ax.values[0])) if len(ax.values) > 1 else np.inf
        if abs(point[ax.free_index] - coord) > step:
            return False
    return True


# ---------------------------------------------------------------------------
# Dedup granularity study


@dataclass
class DedupStudyRow:
    scale: float
    train_size: int
    kept_fraction: float
    val_mae_weight: float
    val_mae_length: float


def dedup_granularity_study(
    train_samples: Sequence[DifferentialSample],
    val_samples: Sequence[DifferentialSample],
    scales: Sequence[float],
    spec: NetworkSpec | None = None,
    config: TrainConfig | None = None,
    bins: BinSpec | None = None,
    seed: int = 0,
) -> tuple[DedupStudyRow, list[DedupStudyRow]]:
    """Retrain under increasingly coarse dedup bins; validation set fixed.

    Returns (baseline row trained on the uncut set, one row per scale).
    """
    spec = spec or NetworkSpec()
    config = config or TrainConfig()
    bins = bins or BinSpec()
    baseline_model = train(
        build_network(spec, seed=seed), train_samples, val_samples, config
    )
    baseline_report = evaluate(baseline_model, val_samples, bins)
    baseline = DedupStudyRow(
        scale=0.0,
        train_size=len(train_samples),
        kept_fraction=1.0,
        val_mae_weight=baseline_report.weight.mae,
        val_mae_length=baseline_report.length.mae,
    )
    rows = []
    for scale in scales:
        deduped, report = dedup_histogram(train_samples, bins.scaled(scale), seed=seed)
        model = train(build_network(spec, seed=seed), deduped, val_samples, config)
        metrics = evaluate(model, val_samples, bins)
        rows.append(
            DedupStudyRow(
                scale=float(scale),
                train_size=len(deduped),
                kept_fraction=1.0 - report.removal_fraction,
                val_mae_weight=metrics.weight.mae,
                val_mae_length=metrics.length.mae,
            )
        )
    return baseline, rows
