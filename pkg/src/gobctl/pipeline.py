"""From raw plant history to the differential training dataset.

Stages: static cleaning (missing / non-physical / out-of-range records),
dynamic within-run outlier removal, reference-vs-other section differencing,
n-dimensional histogram deduplication, and a leakage-free temporal split.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .plant import (
    HistoryRow,
    MASTER_SPEED_RANGE,
    TEMPERATURE_RANGE_C,
    surrogate_response_batch,
)

DATASET_COLUMNS = [
    "temperature_c",
    "master_speed",
    "tube_rotation",
    "phase_deg",
    "dsp_mm",
    "dlp_mm",
    "dup_mm",
    "dw_g",
    "dl_mm",
    "cycle_id",
    "timestamp",
    # reference-section absolutes, carried for class binning and per-class metrics
    "ref_w_g",
    "ref_l_mm",
]

GLOBAL_FEATURES = ["temperature_c", "master_speed", "tube_rotation", "phase_deg"]
DELTA_FEATURES = ["dsp_mm", "dlp_mm", "dup_mm"]
TARGETS = ["dw_g", "dl_mm"]


@dataclass(frozen=True)
class DifferentialSample:
    """One training row: machine state + deadpoint deltas -> gob deltas."""

    temperature_c: float
    master_speed: float
    tube_rotation: float
    phase_deg: float
    dsp_mm: float
    dlp_mm: float
    dup_mm: float
    dw_g: float
    dl_mm: float
    cycle_id: int
    timestamp: float
    ref_w_g: float
    ref_l_mm: float
    reference_section: int
    other_section: int

    def features(self) -> tuple[float, ...]:
        return (
            self.temperature_c,
            self.master_speed,
            self.tube_rotation,
            self.phase_deg,
            self.dsp_mm,
            self.dlp_mm,
            self.dup_mm,
        )

    def targets(self) -> tuple[float, float]:
        return (self.dw_g, self.dl_mm)


def samples_to_arrays(
    samples: Sequence[DifferentialSample],
) -> tuple[np.ndarray, np.ndarray]:
    """(X, Y): features (n, 7) and targets (n, 2)."""
    x = np.array([s.features() for s in samples], dtype=float)
    y = np.array([s.targets() for s in samples], dtype=float)
    return x, y


# ---------------------------------------------------------------------------
# Cleaning


@dataclass
class Rejection:
    cycle_id: int
    section: int
    reason: str


@dataclass
class CleanReport:
    n_input: int = 0
    n_missing: int = 0
    n_nonphysical: int = 0
    n_out_of_range: int = 0
    n_outliers: int = 0
    rejections: list[Rejection] = None  # populated in clean()

    @property
    def n_static(self) -> int:
        return self.n_missing + self.n_nonphysical + self.n_out_of_range

    @property
    def n_rejected(self) -> int:
        return self.n_static + self.n_outliers


OUTLIER_MIN_RUN = 50
OUTLIER_ROBUST_SDS = 4.0
MAD_TO_SD = 1.4826


def _static_reason(row: HistoryRow) -> str | None:
    if math.isnan(row.weight_g) or math.isnan(row.length_mm):
        return "missing value"
    if row.weight_g <= 0:
        return "non-physical weight"
    if row.length_mm <= 0:
        return "non-physical length"
    if not TEMPERATURE_RANGE_C[0] <= row.temperature_c <= TEMPERATURE_RANGE_C[1]:
        return "temperature out of range"
    if not MASTER_SPEED_RANGE[0] <= row.master_speed <= MASTER_SPEED_RANGE[1]:
        return "master speed out of range"
    return None


def _run_signature(row: HistoryRow) -> tuple:
    return (
        row.section,
        row.sp_mm,
        row.lp_mm,
        row.up_mm,
        row.temperature_c,
        row.master_speed,
        row.tube_rotation,
        row.phase_deg,
        row.tube_height_mm,
    )


def clean(rows: Sequence[HistoryRow]) -> tuple[list[HistoryRow], CleanReport]:
    """Static filtering plus within-run robust outlier removal.

    A run is a maximal block of consecutive records of one section whose cam
    and machine state do not change. In runs of at least ``OUTLIER_MIN_RUN``
    records, measurements farther than 4 robust standard deviations
    (median absolute deviation * 1.4826) from the run median are dropped.
    Rejections are logged, never fatal.
    """
    report = CleanReport(n_input=len(rows), rejections=[])
    survivors: list[HistoryRow] = []
    for row in rows:
        reason = _static_reason(row)
        if reason is None:
            survivors.append(row)
            continue
        if reason == "missing value":
            report.n_missing += 1
        elif reason.startswith("non-physical"):
            report.n_nonphysical += 1
        else:
            report.n_out_of_range += 1
        report.rejections.append(Rejection(row.cycle_id, row.section, reason))

    # Group each section's record stream into constant-cam runs.
    by_section: dict[int, list[int]] = {}
    for idx, row in enumerate(survivors):
        by_section.setdefault(row.section, []).append(idx)

    drop: set[int] = set()
    for section, indices in by_section.items():
        indices.sort(key=lambda i: (survivors[i].cycle_id, i))
        run: list[int] = []
        sig = None
        for i in indices + [None]:
            row_sig = _run_signature(survivors[i]) if i is not None else None
            if row_sig != sig:
                _mark_run_outliers(survivors, run, drop, report)
                run, sig = [], row_sig
            if i is not None:
                run.append(i)

    kept = [row for idx, row in enumerate(survivors) if idx not in drop]
    return kept, report


def _mark_run_outliers(
    rows: Sequence[HistoryRow], run: list[int], drop: set[int], report: CleanReport
) -> None:
    if len(run) < OUTLIER_MIN_RUN:
        return
    for attr in ("weight_g", "length_mm"):
        values = np.array([getattr(rows[i], attr) for i in run])
        median = np.median(values)
        mad = np.median(np.abs(values - median))
        if mad == 0:  # quantized stable run; nothing to judge against
            continue
        limit = OUTLIER_ROBUST_SDS * MAD_TO_SD * mad
        for i, v in zip(run, values):
            if abs(v - median) > limit and i not in drop:
                drop.add(i)
                report.n_outliers += 1
                report.rejections.append(
                    Rejection(rows[i].cycle_id, rows[i].section, f"run outlier ({attr})")
                )


# ---------------------------------------------------------------------------
# Differencing


def build_differential_samples(
    rows: Sequence[HistoryRow],
    reference_policy: str = "first",
    seed: int = 0,
    all_pairs: bool = False,
) -> tuple[list[DifferentialSample], list[str]]:
    """Per-cycle (other - reference) samples.

    ``reference_policy`` is "first" (lowest surviving section index) or
    "random". By default one sample per cycle is emitted (one random other
    section); ``all_pairs`` emits every ordered pair against the reference.
    Deterministic given the seed: each cycle derives its own RNG stream.
    """
    if reference_policy not in ("first", "random"):
        raise ValueError(f"unknown reference policy: {reference_policy}")
    by_cycle: dict[int, list[HistoryRow]] = {}
    order: list[int] = []
    for row in rows:
        if row.cycle_id not in by_cycle:
            order.append(row.cycle_id)
        by_cycle.setdefault(row.cycle_id, []).append(row)

    samples: list[DifferentialSample] = []
    log: list[str] = []
    for cycle_id in order:
        group = sorted(by_cycle[cycle_id], key=lambda r: r.section)
        if len(group) < 2:
            log.append(f"cycle {cycle_id}: fewer than 2 sections after cleaning, skipped")
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, cycle_id]))
        if reference_policy == "first":
            ref = group[0]
        else:
            ref = group[int(rng.integers(0, len(group)))]
        others = [r for r in group if r.section != ref.section]
        if not all_pairs:
            others = [others[int(rng.integers(0, len(others)))]]
        for other in others:
            samples.append(_difference(ref, other))
    return samples, log


def _difference(ref: HistoryRow, other: HistoryRow) -> DifferentialSample:
    return DifferentialSample(
        temperature_c=ref.temperature_c,
        master_speed=ref.master_speed,
        tube_rotation=ref.tube_rotation,
        phase_deg=ref.phase_deg,
        dsp_mm=other.sp_mm - ref.sp_mm,
        dlp_mm=other.lp_mm - ref.lp_mm,
        dup_mm=other.up_mm - ref.up_mm,
        dw_g=other.weight_g - ref.weight_g,
        dl_mm=other.length_mm - ref.length_mm,
        cycle_id=ref.cycle_id,
        timestamp=ref.timestamp,
        ref_w_g=ref.weight_g,
        ref_l_mm=ref.length_mm,
        reference_section=ref.section,
        other_section=other.section,
    )


# ---------------------------------------------------------------------------
# Histogram deduplication


@dataclass(frozen=True)
class BinSpec:
    """Per-variable histogram bin widths.

    Weight/length *class* bins are relative (geometric edges at
    ``(1 + ratio)^k``) and the weight/length *variation* widths are relative
    ratios of the working scale, so bin precision follows the sensor's
    relative precision; temperature, machine speed, deadpoint deltas, tube
    rotation and phase use absolute widths. ``deadpoints`` applies to each
    of the three deadpoint delta axes.
    """

    weight_class: float = 0.0025  # relative ratio
    length_class: float = 0.008  # relative ratio
    temperature: float = 2.0
    machine_speed: float = 0.5
    deadpoints: float = 0.05
    weight_variation: float = 0.0015
    length_variation: float = 0.0015
    tube_rotation: float = 1.0
    shear_plunger_phase: float = 1.0

    def validate(self) -> None:
        for name, value in self.to_dict().items():
            if not value > 0:
                raise ValueError(f"bin width {name} must be > 0 (got {value})")

    def scaled(self, factor: float) -> "BinSpec":
        if factor <= 0:
            raise ValueError("scale factor must be > 0")
        return BinSpec(**{k: v * factor for k, v in self.to_dict().items()})

    def to_dict(self) -> dict:
        return {
            "weight_class": self.weight_class,
            "length_class": self.length_class,
            "temperature": self.temperature,
            "machine_speed": self.machine_speed,
            "deadpoints": self.deadpoints,
            "weight_variation": self.weight_variation,
            "length_variation": self.length_variation,
            "tube_rotation": self.tube_rotation,
            "shear_plunger_phase": self.shear_plunger_phase,
        }

    @staticmethod
    def from_dict(d: dict) -> "BinSpec":
        spec = BinSpec(**d)
        spec.validate()
        return spec


def class_index(value: float, ratio: float) -> int:
    """Geometric class bin of a positive measurement."""
    if value <= 0:
        raise ValueError("class bins are defined for positive values only")
    return int(math.floor(math.log(value) / math.log1p(ratio)))


def class_edges(index: int, ratio: float) -> tuple[float, float]:
    return ((1 + ratio) ** index, (1 + ratio) ** (index + 1))


WORKING_SCALE_RATIO = 0.1


def working_scale(value: float) -> float:
    """Stable magnitude anchor: the value's 10% geometric class lower edge."""
    if value <= 0:
        raise ValueError("working scale needs a positive reference value")
    return (1 + WORKING_SCALE_RATIO) ** math.floor(
        math.log(value) / math.log1p(WORKING_SCALE_RATIO)
    )


def dedup_key(sample: DifferentialSample, bins: BinSpec) -> tuple[int, ...]:
    """Histogram cell over the model's input and output variables.

    Variation widths are relative: e.g. a weight_variation ratio of 0.0015
    on a ~120 g working point gives ~0.17 g cells, tracking the sensor's
    relative precision. The anchor is the reference section's working scale
    so cell edges are stable across a production run.
    """
    w_width = bins.weight_variation * working_scale(sample.ref_w_g)
    l_width = bins.length_variation * working_scale(sample.ref_l_mm)
    return (
        int(np.floor(sample.temperature_c / bins.temperature)),
        int(np.floor(sample.master_speed / bins.machine_speed)),
        int(np.floor(sample.tube_rotation / bins.tube_rotation)),
        int(np.floor(sample.phase_deg / bins.shear_plunger_phase)),
        int(np.floor(sample.dsp_mm / bins.deadpoints)),
        int(np.floor(sample.dlp_mm / bins.deadpoints)),
        int(np.floor(sample.dup_mm / bins.deadpoints)),
        int(np.floor(sample.dw_g / w_width)),
        int(np.floor(sample.dl_mm / l_width)),
    )


@dataclass
class DedupReport:
    n_input: int
    n_kept: int
    occupancy: dict[tuple[int, ...], int]
    max_per_bin: int

    @property
    def removal_fraction(self) -> float:
        return 0.0 if self.n_input == 0 else 1.0 - self.n_kept / self.n_input

    @property
    def duplicate_fraction(self) -> float:
        """Fraction of samples landing in an already-occupied cell."""
        if self.n_input == 0:
            return 0.0
        return 1.0 - len(self.occupancy) / self.n_input

    def occupancy_summary(self) -> dict:
        counts = np.array(list(self.occupancy.values())) if self.occupancy else np.array([0])
        return {
            "n_bins": len(self.occupancy),
            "max_occupancy": int(counts.max()),
            "mean_occupancy": float(counts.mean()),
        }


def dedup_histogram(
    samples: Sequence[DifferentialSample],
    bins: BinSpec,
    max_per_bin: int = 1,
    seed: int = 0,
) -> tuple[list[DifferentialSample], DedupReport]:
    """Prune overrepresented histogram cells down to ``max_per_bin`` samples.

    Which samples survive within a cell is a seeded random choice; output
    preserves the input ordering. Idempotent for a fixed (bins, max_per_bin).
    """
    bins.validate()
    if max_per_bin < 1:
        raise ValueError("max_per_bin must be >= 1")
    cells: dict[tuple[int, ...], list[int]] = {}
    for idx, sample in enumerate(samples):
        cells.setdefault(dedup_key(sample, bins), []).append(idx)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDED]))
    keep: list[int] = []
    # Sorted cell traversal keeps the RNG consumption order deterministic.
    for key in sorted(cells):
        members = cells[key]
        if len(members) <= max_per_bin:
            keep.extend(members)
        else:
            chosen = rng.choice(len(members), size=max_per_bin, replace=False)
            keep.extend(members[i] for i in sorted(chosen))
    keep.sort()
    report = DedupReport(
        n_input=len(samples),
        n_kept=len(keep),
        occupancy={k: len(v) for k, v in cells.items()},
        max_per_bin=max_per_bin,
    )
    return [samples[i] for i in keep], report


# ---------------------------------------------------------------------------
# Temporal split


def temporal_split(
    samples: Sequence[DifferentialSample], validation_fraction: float = 0.25
) -> tuple[list[DifferentialSample], list[DifferentialSample]]:
    """Train on the past, validate on the most recent fraction.

    The split point is a timestamp index after a stable sort, so
    ``max(train timestamps) <= min(validation timestamps)`` always holds.
    """
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError("validation_fraction must be in (0, 1)")
    n = len(samples)
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    stamps = [s.timestamp for s in samples]
    if min(stamps) == max(stamps):
        raise ValueError("all samples share one timestamp; temporal split undefined")
    order = sorted(range(n), key=lambda i: (stamps[i], i))
    n_val = min(n - 1, max(1, round(n * validation_fraction)))
    train_idx, val_idx = order[: n - n_val], order[n - n_val:]
    return [samples[i] for i in train_idx], [samples[i] for i in val_idx]


# ---------------------------------------------------------------------------
# Direct surrogate sampling (noise-free oracle datasets)


@dataclass(frozen=True)
class SurrogateSamplerRanges:
    temperature_c: tuple[float, float] = (1080.0, 1220.0)
    master_speed: tuple[float, float] = (6.0, 8.0)
    tube_rotation: tuple[float, float] = (25.0, 50.0)
    phase_deg: tuple[float, float] = (80.0, 150.0)
    dsp_mm: tuple[float, float] = (-5.0, 5.0)
    dlp_mm: tuple[float, float] = (-5.0, 5.0)
    dup_mm: tuple[float, float] = (-18.0, 18.0)


def make_surrogate_dataset(
    n: int,
    seed: int = 0,
    ranges: SurrogateSamplerRanges = SurrogateSamplerRanges(),
) -> list[DifferentialSample]:
    """Noise-free samples labelled directly by the closed-form response."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A3]))
    cols = {}
    for name in (
        "temperature_c",
        "master_speed",
        "tube_rotation",
        "phase_deg",
        "dsp_mm",
        "dlp_mm",
        "dup_mm",
    ):
        lo, hi = getattr(ranges, name)
        cols[name] = rng.uniform(lo, hi, n)
    deltas = np.stack([cols["dsp_mm"], cols["dlp_mm"], cols["dup_mm"]], axis=1)
    response = surrogate_response_batch(cols["temperature_c"], cols["master_speed"], deltas)
    samples = []
    for i in range(n):
        samples.append(
            DifferentialSample(
                temperature_c=float(cols["temperature_c"][i]),
                master_speed=float(cols["master_speed"][i]),
                tube_rotation=float(cols["tube_rotation"][i]),
                phase_deg=float(cols["phase_deg"][i]),
                dsp_mm=float(deltas[i, 0]),
                dlp_mm=float(deltas[i, 1]),
                dup_mm=float(deltas[i, 2]),
                dw_g=float(response[i, 0]),
                dl_mm=float(response[i, 1]),
                cycle_id=i,
                timestamp=float(i),
                ref_w_g=120.0,
                ref_l_mm=180.0,
                reference_section=0,
                other_section=1,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# Dataset file I/O


def write_dataset_csv(samples: Iterable[DifferentialSample], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DATASET_COLUMNS)
        for s in samples:
            writer.writerow(
                [
                    repr(s.temperature_c),
                    repr(s.master_speed),
                    repr(s.tube_rotation),
                    repr(s.phase_deg),
                    repr(s.dsp_mm),
                    repr(s.dlp_mm),
                    repr(s.dup_mm),
                    repr(s.dw_g),
                    repr(s.dl_mm),
                    s.cycle_id,
                    repr(s.timestamp),
                    repr(s.ref_w_g),
                    repr(s.ref_l_mm),
                ]
            )


def read_dataset_csv(path: str | Path) -> list[DifferentialSample]:
    samples = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(DATASET_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"dataset CSV missing columns: {sorted(missing)}")
        for r in reader:
            samples.append(
                DifferentialSample(
                    temperature_c=float(r["temperature_c"]),
                    master_speed=float(r["master_speed"]),
                    tube_rotation=float(r["tube_rotation"]),
                    phase_deg=float(r["phase_deg"]),
                    dsp_mm=float(r["dsp_mm"]),
                    dlp_mm=float(r["dlp_mm"]),
                    dup_mm=float(r["dup_mm"]),
                    dw_g=float(r["dw_g"]),
                    dl_mm=float(r["dl_mm"]),
                    cycle_id=int(r["cycle_id"]),
                    timestamp=float(r["timestamp"]),
                    ref_w_g=float(r["ref_w_g"]),
                    ref_l_mm=float(r["ref_l_mm"]),
                    reference_section=0,
                    other_section=1,
                )
            )
    return samples


def save_bin_spec(bins: BinSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bins.to_dict(), indent=2) + "\n")


def load_bin_spec(path: str | Path) -> BinSpec:
    return BinSpec.from_dict(json.loads(Path(path).read_text()))
