"""Synthetic ground-truth plant for the feeder control loop.

Real production data is proprietary, so this module provides a stand-in: a
smooth closed-form response mapping machine state and per-section deadpoint
deltas to gob weight/length variations, wrapped in a generator that emits
multi-month histories (stable runs around working points, production
change-overs, single-cam operator tweaks, dirty sensor records) and a live
plant object the control service steps in closed loop.

The response constants are invented but shaped to be physically plausible:
hotter glass (lower viscosity) amplifies the effect of a stroke change,
higher master speed leaves less flow per cut, and a small bilinear term makes
the inverse problem genuinely non-injective.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cam import (
    CamDeadpoints,
    Cycle,
    CycleValidationError,
    MachineState,
    from_free_parameters,
    validate_cycle,
)

# Viscosity gain: g(T) = exp(BETA * (T - T_REF) / 100)
BETA = 0.35
T_REF_C = 1150.0
# Flow-per-cut factor: s(MS) = MS_REF / MS
MS_REF = 7.0
# Weight response (g per mm)
A1, A2, A3 = 2.5, 1.4, 0.03
# Length response (mm per mm)
B1, B2, B3 = 1.1, 0.7, 0.02

TEMPERATURE_RANGE_C = (1000.0, 1350.0)
MASTER_SPEED_RANGE = (5.0, 10.0)
SECTION_RANGE = (6, 12)

HISTORY_COLUMNS = [
    "cycle_id",
    "timestamp",
    "section",
    "sp_mm",
    "lp_mm",
    "up_mm",
    "temperature_c",
    "master_speed",
    "tube_rotation",
    "phase_deg",
    "tube_height_mm",
    "weight_g",
    "length_mm",
    "dirty_flag",
]

#: Weight picked up per mm of feeder tube height (working-point gain).
TUBE_HEIGHT_GAIN_G_PER_MM = 1.5


def viscosity_gain(temperature_c: float) -> float:
    return math.exp(BETA * (temperature_c - T_REF_C) / 100.0)


def speed_factor(master_speed: float) -> float:
    return MS_REF / master_speed


def surrogate_response(
    state: MachineState, deltas: Sequence[float]
) -> tuple[float, float]:
    """Deterministic (dW g, dL mm) for one section's (dSP, dLP, dUP) in mm."""
    dsp, dlp, dup = float(deltas[0]), float(deltas[1]), float(deltas[2])
    g = viscosity_gain(state.temperature)
    s = speed_factor(state.master_speed)
    dw = s * g * (A1 * dlp + A2 * (dup - dlp)) + A3 * dlp * dup
    dl = g * (B1 * dup + B2 * (dlp - dsp)) + B3 * dup * dsp
    return dw, dl


def surrogate_response_batch(
    temperature_c: np.ndarray,
    master_speed: np.ndarray,
    deltas: np.ndarray,
) -> np.ndarray:
    """Vectorized closed form: deltas (n, 3) -> (n, 2) of (dW, dL)."""
    deltas = np.asarray(deltas, dtype=float)
    dsp, dlp, dup = deltas[:, 0], deltas[:, 1], deltas[:, 2]
    g = np.exp(BETA * (np.asarray(temperature_c, dtype=float) - T_REF_C) / 100.0)
    s = MS_REF / np.asarray(master_speed, dtype=float)
    dw = s * g * (A1 * dlp + A2 * (dup - dlp)) + A3 * dlp * dup
    dl = g * (B1 * dup + B2 * (dlp - dsp)) + B3 * dup * dsp
    return np.stack([dw, dl], axis=1)


@dataclass(frozen=True)
class GobMeasurement:
    """One sensor reading: weight/length of the gob cut for one section."""

    weight: float  # g; NaN when the record is dirty-missing
    length: float  # mm
    section_index: int
    cycle_id: int
    timestamp: float  # s since epoch
    dirty: bool = False


@dataclass(frozen=True)
class WorkingPoint:
    weight_g: float
    length_mm: float
    dwell: float  # fraction of production time spent at this point


@dataclass(frozen=True)
class PlantConfig:
    """Generator configuration. Serializable to/from JSON."""

    line_id: str = "SYN-1"
    working_points: tuple[WorkingPoint, ...] = (
        WorkingPoint(120.0, 180.0, 0.35),
        WorkingPoint(95.0, 150.0, 0.30),
        WorkingPoint(160.0, 215.0, 0.20),
        WorkingPoint(210.0, 260.0, 0.15),
    )
    noise_sigma_weight: float = 1.5  # g
    noise_sigma_length: float = 1.0  # mm
    dirty_fraction: float = 0.01
    seed: int = 0
    # Sensor reporting resolution; stable production therefore yields exact
    # duplicate readings, which is what the histogram dedup step exploits.
    sensor_resolution_weight_g: float = 0.2
    sensor_resolution_length_mm: float = 0.2
    # Historian refresh: recorded noise offsets are held for this many cycles
    # in generated histories (live measurements are always fresh draws).
    sensor_hold_cycles: int = 50
    n_sections: int = 8
    mean_run_cycles: int = 400
    min_run_cycles: int = 60
    multiweight_fraction: float = 0.5
    single_section_tweak_fraction: float = 0.25
    junction_offset_mm: float = 3.0
    upper_offset_mm: float = 14.0
    offset_grid_mm: float = 0.25
    start_timestamp: float = 1_700_000_000.0

    def validate(self) -> None:
        if not self.working_points:
            raise ValueError("at least one working point required")
        dwell = sum(wp.dwell for wp in self.working_points)
        if abs(dwell - 1.0) > 1e-9:
            raise ValueError(f"dwell fractions must sum to 1 (got {dwell})")
        if self.noise_sigma_weight < 0 or self.noise_sigma_length < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0.0 <= self.dirty_fraction <= 0.1:
            raise ValueError("dirty_fraction must be in [0, 0.1]")
        if not SECTION_RANGE[0] <= self.n_sections <= SECTION_RANGE[1]:
            raise ValueError(f"n_sections must be within {SECTION_RANGE}")

    def to_dict(self) -> dict:
        return {
            "line_id": self.line_id,
            "working_points": [
                {"weight_g": wp.weight_g, "length_mm": wp.length_mm, "dwell": wp.dwell}
                for wp in self.working_points
            ],
            "noise_sigma_weight": self.noise_sigma_weight,
            "noise_sigma_length": self.noise_sigma_length,
            "dirty_fraction": self.dirty_fraction,
            "seed": self.seed,
            "sensor_resolution_weight_g": self.sensor_resolution_weight_g,
            "sensor_resolution_length_mm": self.sensor_resolution_length_mm,
            "sensor_hold_cycles": self.sensor_hold_cycles,
            "n_sections": self.n_sections,
            "mean_run_cycles": self.mean_run_cycles,
            "min_run_cycles": self.min_run_cycles,
            "multiweight_fraction": self.multiweight_fraction,
            "single_section_tweak_fraction": self.single_section_tweak_fraction,
            "junction_offset_mm": self.junction_offset_mm,
            "upper_offset_mm": self.upper_offset_mm,
            "offset_grid_mm": self.offset_grid_mm,
            "start_timestamp": self.start_timestamp,
        }

    @staticmethod
    def from_dict(d: dict) -> "PlantConfig":
        kwargs = dict(d)
        if "working_points" in kwargs:
            kwargs["working_points"] = tuple(
                WorkingPoint(float(w["weight_g"]), float(w["length_mm"]), float(w["dwell"]))
                for w in kwargs["working_points"]
            )
        cfg = PlantConfig(**kwargs)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class Recipe:
    """Fixed operating settings for one working point on one line."""

    working_point: WorkingPoint
    machine_state: MachineState
    base_free_params: tuple[float, ...]  # nominal single-weight cam

    def base_cycle(self) -> Cycle:
        return from_free_parameters(np.array(self.base_free_params), self.machine_state)


@dataclass
class CycleRecord:
    cycle_id: int
    cycle: Cycle
    measurements: list[GobMeasurement]
    run_index: int
    working_point_index: int


def _quantize(values: np.ndarray, resolution: float) -> np.ndarray:
    if resolution <= 0:
        return values
    return np.round(np.round(values / resolution) * resolution, 10)


def _grid_uniform(rng: np.random.Generator, lo: float, hi: float, grid: float, size) -> np.ndarray:
    """Uniform draw on a discrete grid (operators adjust setpoints in steps)."""
    if grid <= 0:
        return rng.uniform(lo, hi, size)
    n_lo, n_hi = round(lo / grid), round(hi / grid)
    return rng.integers(n_lo, n_hi + 1, size) * grid


def build_recipes(config: PlantConfig) -> list[Recipe]:
    """Deterministic per-line settings for each working point."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xE11]))
    speeds = [6.0, 6.5, 7.0, 7.5, 8.0]
    recipes = []
    for idx, wp in enumerate(config.working_points):
        temperature = 1100.0 + 22.0 * idx + float(rng.integers(-4, 5)) * 0.5
        state = MachineState(
            temperature=temperature,
            master_speed=speeds[idx % len(speeds)],
            tube_rotation_speed=float(30 + 5 * (idx % 4) + rng.integers(-1, 2)),
            shear_plunger_phase=float(90 + 10 * (idx % 6)),
            tube_height=round(wp.weight_g / TUBE_HEIGHT_GAIN_G_PER_MM, 1),
            firing_order=tuple(rng.permutation(config.n_sections).tolist()),
            n_sections=config.n_sections,
        )
        # Single-weight production runs one cam shape on every section; the
        # per-section response anchors to this common nominal cam, so weight
        # differences between sections are explained by cam differences alone.
        junction = float(_grid_uniform(rng, 8.0, 16.0, 0.5, None))
        stroke = float(_grid_uniform(rng, 25.0, 45.0, 0.5, None))
        junctions = np.full(config.n_sections, junction)
        params = np.concatenate([junctions, junctions + stroke])
        recipes.append(Recipe(wp, state, tuple(params.tolist())))
    return recipes


def _working_point_weight(recipe: Recipe, tube_height: float) -> float:
    """Mean gob weight; linear in tube height around the recipe setting."""
    base = recipe.working_point.weight_g
    return base + TUBE_HEIGHT_GAIN_G_PER_MM * (tube_height - recipe.machine_state.tube_height)


def section_measurement_means(
    recipe: Recipe, cycle: Cycle
) -> np.ndarray:
    """Noise-free (weight, length) per section for a cycle under a recipe."""
    base = recipe.base_cycle().deadpoint_matrix()
    deltas = cycle.deadpoint_matrix() - base
    state = cycle.machine_state
    resp = surrogate_response_batch(
        np.full(len(deltas), state.temperature),
        np.full(len(deltas), state.master_speed),
        deltas,
    )
    w0 = _working_point_weight(recipe, state.tube_height)
    l0 = recipe.working_point.length_mm
    return resp + np.array([w0, l0])


def _assemble_measurements(
    weights: np.ndarray,
    lengths: np.ndarray,
    dirty: np.ndarray,
    config: PlantConfig,
    rng: np.random.Generator,
    cycle_id: int,
    timestamp: float,
) -> list[GobMeasurement]:
    out = []
    for i in range(len(weights)):
        w, l = float(weights[i]), float(lengths[i])
        if dirty[i]:
            mode = int(rng.integers(0, 4))
            if mode == 0:
                w = -abs(w)
            elif mode == 1:
                l = -abs(l)
            elif mode == 2:
                w = float("nan")
            else:
                l = float("nan")
        out.append(
            GobMeasurement(
                weight=w,
                length=l,
                section_index=i,
                cycle_id=cycle_id,
                timestamp=timestamp,
                dirty=bool(dirty[i]),
            )
        )
    return out


def _measure_cycle(
    recipe: Recipe,
    cycle: Cycle,
    config: PlantConfig,
    rng: np.random.Generator,
    cycle_id: int,
    timestamp: float,
) -> list[GobMeasurement]:
    """One cycle of fresh sensor readings (live-plant path)."""
    means = section_measurement_means(recipe, cycle)
    n = cycle.n_sections
    weights = means[:, 0] + rng.normal(0.0, config.noise_sigma_weight, n)
    lengths = means[:, 1] + rng.normal(0.0, config.noise_sigma_length, n)
    weights = _quantize(weights, config.sensor_resolution_weight_g)
    lengths = _quantize(lengths, config.sensor_resolution_length_mm)
    dirty = rng.random(n) < config.dirty_fraction
    return _assemble_measurements(weights, lengths, dirty, config, rng, cycle_id, timestamp)


def _measure_run(
    recipe: Recipe,
    cycle: Cycle,
    config: PlantConfig,
    rng: np.random.Generator,
    run_len: int,
    start_cycle_id: int,
    start_timestamp: float,
) -> list[list[GobMeasurement]]:
    """Historian readings for a stable run: noise held for sensor_hold_cycles.

    The recorded stream refreshes its per-section offset only every
    ``sensor_hold_cycles`` cycles, which is what makes long stable runs
    duplicate-heavy; the marginal distribution of each reading is still
    N(truth, sigma).
    """
    means = section_measurement_means(recipe, cycle)
    n = cycle.n_sections
    hold = max(1, config.sensor_hold_cycles)
    n_epochs = -(-run_len // hold)
    w_noise = rng.normal(0.0, config.noise_sigma_weight, (n_epochs, n))
    l_noise = rng.normal(0.0, config.noise_sigma_length, (n_epochs, n))
    epoch = np.repeat(np.arange(n_epochs), hold)[:run_len]
    weights = _quantize(means[:, 0] + w_noise[epoch], config.sensor_resolution_weight_g)
    lengths = _quantize(means[:, 1] + l_noise[epoch], config.sensor_resolution_length_mm)
    dirty = rng.random((run_len, n)) < config.dirty_fraction
    dt = recipe.machine_state.cycle_seconds()
    return [
        _assemble_measurements(
            weights[j], lengths[j], dirty[j], config, rng,
            start_cycle_id + j, start_timestamp + j * dt,
        )
        for j in range(run_len)
    ]


def generate_history(config: PlantConfig, n_cycles: int) -> list[CycleRecord]:
    """Synthesize a production history of ``n_cycles`` machine cycles.

    Structure: long stable runs at one working point (single-weight or
    multi-weight cams, fixed within the run), separated by change-overs to
    another working point or by single-section cam tweaks. Exactly
    reproducible from (config, seed).
    """
    config.validate()
    if n_cycles < 1:
        raise ValueError("n_cycles must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x415]))
    recipes = build_recipes(config)
    dwell = np.array([wp.dwell for wp in config.working_points])
    current_params: list[np.ndarray] = [np.array(r.base_free_params) for r in recipes]

    records: list[CycleRecord] = []
    timestamp = config.start_timestamp
    cycle_id = 0
    run_index = 0
    wp_idx = int(rng.choice(len(recipes), p=dwell))

    while cycle_id < n_cycles:
        recipe = recipes[wp_idx]
        n = config.n_sections
        run_len = int(
            min(
                n_cycles - cycle_id,
                max(config.min_run_cycles, rng.geometric(1.0 / config.mean_run_cycles)),
            )
        )
        params = current_params[wp_idx].copy()
        if rng.random() < config.multiweight_fraction:
            params[:n] += _grid_uniform(
                rng, -config.junction_offset_mm, config.junction_offset_mm,
                config.offset_grid_mm, n,
            )
            params[n:] += _grid_uniform(
                rng, -config.upper_offset_mm, config.upper_offset_mm,
                config.offset_grid_mm, n,
            )
            # Keep cams physical: non-negative junctions, positive strokes.
            params[:n] = np.maximum(params[:n], 0.0)
            params[n:] = np.maximum(params[n:], params[:n] + 8.0)
        cycle = from_free_parameters(params, recipe.machine_state)
        dt = recipe.machine_state.cycle_seconds()
        run = _measure_run(recipe, cycle, config, rng, run_len, cycle_id, timestamp)
        for measurements in run:
            records.append(CycleRecord(cycle_id, cycle, measurements, run_index, wp_idx))
            cycle_id += 1
            timestamp += dt
        run_index += 1

        # Transition: operator tweak of one cam at the same working point,
        # or a change-over to another working point.
        if rng.random() < config.single_section_tweak_fraction:
            tweak = current_params[wp_idx].copy()
            k = int(rng.integers(0, n))
            tweak[k] += _grid_uniform(rng, -1.5, 1.5, config.offset_grid_mm, None)
            tweak[n + k] += _grid_uniform(rng, -6.0, 6.0, config.offset_grid_mm, None)
            tweak[k] = max(tweak[k], 0.0)
            tweak[n + k] = max(tweak[n + k], tweak[k] + 8.0)
            current_params[wp_idx] = tweak
        else:
            current_params[wp_idx] = np.array(recipes[wp_idx].base_free_params)
            wp_idx = int(rng.choice(len(recipes), p=dwell))
    return records


class SimulatedPlant:
    """Live plant: owns the current cam cycle, measures gobs, advances time.

    Single-owner mutable state; callers sharing an instance must serialize
    access (the HTTP service wraps it in a lock).
    """

    def __init__(self, config: PlantConfig, working_point_index: int = 0, seed: int | None = None):
        config.validate()
        self.config = config
        self.recipes = build_recipes(config)
        if not 0 <= working_point_index < len(self.recipes):
            raise ValueError("working_point_index out of range")
        self.recipe = self.recipes[working_point_index]
        self._rng = np.random.default_rng(
            np.random.SeedSequence([config.seed if seed is None else seed, 0x57E9])
        )
        self.cycle = self.recipe.base_cycle()
        self.cycle_id = 0
        self.timestamp = config.start_timestamp

    @property
    def machine_state(self) -> MachineState:
        return self.recipe.machine_state

    def step(self, applied_cycle: Cycle) -> list[GobMeasurement]:
        """Replace the plant cam with ``applied_cycle`` and run one cycle."""
        violations = validate_cycle(applied_cycle)
        if violations:
            raise CycleValidationError(violations)
        if applied_cycle.n_sections != self.config.n_sections:
            raise ValueError("cycle section count does not match the plant")
        self.cycle = applied_cycle
        return self._advance_one()

    def advance(self, n_cycles: int = 1) -> list[list[GobMeasurement]]:
        """Run ``n_cycles`` with the current cam unchanged."""
        return [self._advance_one() for _ in range(n_cycles)]

    def _advance_one(self) -> list[GobMeasurement]:
        measurements = _measure_cycle(
            self.recipe, self.cycle, self.config, self._rng, self.cycle_id, self.timestamp
        )
        self.cycle_id += 1
        self.timestamp += self.recipe.machine_state.cycle_seconds()
        return measurements

    def true_response(self, cycle: Cycle) -> np.ndarray:
        """Noise-free per-section (weight, length) the plant would produce."""
        return section_measurement_means(self.recipe, cycle)


def _fmt(value: float) -> str:
    if isinstance(value, float) and math.isnan(value):
        return ""
    return repr(float(value))


def write_history_csv(records: Iterable[CycleRecord], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for rec in records:
            state = rec.cycle.machine_state
            for cam, m in zip(rec.cycle.sections, rec.measurements):
                writer.writerow(
                    [
                        rec.cycle_id,
                        _fmt(m.timestamp),
                        m.section_index,
                        _fmt(cam.starting_point),
                        _fmt(cam.lower_deadpoint),
                        _fmt(cam.upper_deadpoint),
                        _fmt(state.temperature),
                        _fmt(state.master_speed),
                        _fmt(state.tube_rotation_speed),
                        _fmt(state.shear_plunger_phase),
                        _fmt(state.tube_height),
                        _fmt(m.weight),
                        _fmt(m.length),
                        int(m.dirty),
                    ]
                )


@dataclass(frozen=True)
class HistoryRow:
    """One section-level record parsed back from the history CSV."""

    cycle_id: int
    timestamp: float
    section: int
    sp_mm: float
    lp_mm: float
    up_mm: float
    temperature_c: float
    master_speed: float
    tube_rotation: float
    phase_deg: float
    tube_height_mm: float
    weight_g: float
    length_mm: float
    dirty_flag: int


def read_history_csv(path: str | Path) -> list[HistoryRow]:
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(HISTORY_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"history CSV missing columns: {sorted(missing)}")
        for r in reader:
            rows.append(
                HistoryRow(
                    cycle_id=int(r["cycle_id"]),
                    timestamp=float(r["timestamp"]),
                    section=int(r["section"]),
                    sp_mm=float(r["sp_mm"]),
                    lp_mm=float(r["lp_mm"]),
                    up_mm=float(r["up_mm"]),
                    temperature_c=float(r["temperature_c"]),
                    master_speed=float(r["master_speed"]),
                    tube_rotation=float(r["tube_rotation"]),
                    phase_deg=float(r["phase_deg"]),
                    tube_height_mm=float(r["tube_height_mm"]),
                    weight_g=float(r["weight_g"]) if r["weight_g"] else float("nan"),
                    length_mm=float(r["length_mm"]) if r["length_mm"] else float("nan"),
                    dirty_flag=int(r["dirty_flag"]),
                )
            )
    return rows


def records_to_rows(records: Iterable[CycleRecord]) -> list[HistoryRow]:
    """In-memory equivalent of a CSV round trip."""
    rows = []
    for rec in records:
        state = rec.cycle.machine_state
        for cam, m in zip(rec.cycle.sections, rec.measurements):
            rows.append(
                HistoryRow(
                    cycle_id=rec.cycle_id,
                    timestamp=m.timestamp,
                    section=m.section_index,
                    sp_mm=cam.starting_point,
                    lp_mm=cam.lower_deadpoint,
                    up_mm=cam.upper_deadpoint,
                    temperature_c=state.temperature,
                    master_speed=state.master_speed,
                    tube_rotation=state.tube_rotation_speed,
                    phase_deg=state.shear_plunger_phase,
                    tube_height_mm=state.tube_height,
                    weight_g=m.weight,
                    length_mm=m.length,
                    dirty_flag=int(m.dirty),
                )
            )
    return rows


def rows_to_records(rows: Sequence[HistoryRow]) -> list[CycleRecord]:
    """Rebuild cycle records from history rows (inverse of records_to_rows).

    The firing order is not persisted in the CSV schema; reconstructed
    states carry the identity order (it does not influence the response).
    """
    by_cycle: dict[int, list[HistoryRow]] = {}
    order: list[int] = []
    for row in rows:
        if row.cycle_id not in by_cycle:
            order.append(row.cycle_id)
        by_cycle.setdefault(row.cycle_id, []).append(row)
    records = []
    for cycle_id in order:
        group = sorted(by_cycle[cycle_id], key=lambda r: r.section)
        n = len(group)
        if n < 2:
            continue
        first = group[0]
        state = MachineState(
            temperature=first.temperature_c,
            master_speed=first.master_speed,
            tube_rotation_speed=first.tube_rotation,
            shear_plunger_phase=first.phase_deg,
            tube_height=first.tube_height_mm,
            firing_order=tuple(range(n)),
            n_sections=n,
        )
        cycle = Cycle(
            sections=tuple(
                CamDeadpoints(r.sp_mm, r.lp_mm, r.up_mm) for r in group
            ),
            machine_state=state,
        )
        measurements = [
            GobMeasurement(
                weight=r.weight_g,
                length=r.length_mm,
                section_index=r.section,
                cycle_id=r.cycle_id,
                timestamp=r.timestamp,
                dirty=bool(r.dirty_flag),
            )
            for r in group
        ]
        records.append(CycleRecord(cycle_id, cycle, measurements, -1, -1))
    return records


def save_plant_config(config: PlantConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def load_plant_config(path: str | Path) -> PlantConfig:
    return PlantConfig.from_dict(json.loads(Path(path).read_text()))
