"""Cam deadpoint geometry for the gob feeder plunger cycle.

Each machine section drives its plunger through one cam: a nominal relative
motion profile stretched between three deadpoints (starting point, lower
deadpoint, upper deadpoint). Sections run back to back, so a section's
starting point must equal the previous section's lower deadpoint; the shared
height is called a junction. For an N-section cycle the N junction
constraints leave 2N free parameters (N junctions + N upper deadpoints),
which is the search space the inversion engine optimizes over.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

CONTINUITY_TOL_MM = 1e-9


class CycleValidationError(ValueError):
    """Raised when an operation requires a valid cycle but validation fails."""

    def __init__(self, violations: list["Violation"]):
        self.violations = violations
        super().__init__("invalid cycle: " + "; ".join(str(v) for v in violations))


@dataclass(frozen=True)
class CamDeadpoints:
    """Three defining heights of one section's cam, in mm.

    ``upper > lower`` and non-negativity are *checked* by ``validate_cycle``,
    not enforced at construction, so that candidate cycles produced mid-search
    can be represented and then rejected with a report.
    """

    starting_point: float
    lower_deadpoint: float
    upper_deadpoint: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.starting_point, self.lower_deadpoint, self.upper_deadpoint)


@dataclass(frozen=True)
class MachineState:
    """Global operating conditions of the forming line."""

    temperature: float  # molten glass temperature, degC
    master_speed: float  # cuts per section per minute
    tube_rotation_speed: float
    shear_plunger_phase: float  # deg
    tube_height: float  # mm
    firing_order: tuple[int, ...]
    n_sections: int

    def global_features(self) -> np.ndarray:
        """The four state variables the forward model conditions on."""
        return np.array(
            [
                self.temperature,
                self.master_speed,
                self.tube_rotation_speed,
                self.shear_plunger_phase,
            ]
        )

    def cycle_seconds(self) -> float:
        # MS cuts per section per minute -> each section fires once per 60/MS s,
        # which is the duration of one full machine cycle.
        return 60.0 / self.master_speed

    def section_motion_seconds(self) -> float:
        return self.cycle_seconds() / self.n_sections

    def to_dict(self) -> dict:
        return {
            "temperature_c": self.temperature,
            "master_speed": self.master_speed,
            "tube_rotation": self.tube_rotation_speed,
            "phase_deg": self.shear_plunger_phase,
            "tube_height_mm": self.tube_height,
            "firing_order": list(self.firing_order),
            "n_sections": self.n_sections,
        }

    @staticmethod
    def from_dict(d: dict) -> "MachineState":
        return MachineState(
            temperature=float(d["temperature_c"]),
            master_speed=float(d["master_speed"]),
            tube_rotation_speed=float(d["tube_rotation"]),
            shear_plunger_phase=float(d["phase_deg"]),
            tube_height=float(d["tube_height_mm"]),
            firing_order=tuple(int(i) for i in d["firing_order"]),
            n_sections=int(d["n_sections"]),
        )


@dataclass(frozen=True)
class Cycle:
    """One machine cycle: ordered per-section cams plus the machine state."""

    sections: tuple[CamDeadpoints, ...]
    machine_state: MachineState

    def __post_init__(self):
        if len(self.sections) < 2:
            raise ValueError("a cycle needs at least 2 sections")

    @property
    def n_sections(self) -> int:
        return len(self.sections)

    def deadpoint_matrix(self) -> np.ndarray:
        """(N, 3) array of (sp, lp, up) rows."""
        return np.array([s.as_tuple() for s in self.sections])

    def to_dict(self) -> dict:
        return {
            "machine_state": self.machine_state.to_dict(),
            "sections": [
                {"sp": s.starting_point, "lp": s.lower_deadpoint, "up": s.upper_deadpoint}
                for s in self.sections
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "Cycle":
        return Cycle(
            sections=tuple(
                CamDeadpoints(float(s["sp"]), float(s["lp"]), float(s["up"]))
                for s in d["sections"]
            ),
            machine_state=MachineState.from_dict(d["machine_state"]),
        )


@dataclass(frozen=True)
class Violation:
    kind: str  # "continuity" | "non_positive_stroke" | "negative_deadpoint"
    section: int
    magnitude: float
    message: str

    def __str__(self) -> str:
        return self.message


@dataclass(frozen=True)
class RelativeProfile:
    """Nominal cam shape: (phase in [0,1], normalized height in [0,1]) knots.

    Height 0 maps to the lower deadpoint and 1 to the upper deadpoint once
    the profile is stretched onto a concrete cam.
    """

    knots: tuple[tuple[float, float], ...]
    name: str = "profile"

    def __post_init__(self):
        phases = [p for p, _ in self.knots]
        heights = [h for _, h in self.knots]
        if len(self.knots) < 2:
            raise ValueError("profile needs at least 2 knots")
        if phases[0] != 0.0 or phases[-1] != 1.0:
            raise ValueError("profile phases must start at 0 and end at 1")
        if any(b <= a for a, b in zip(phases, phases[1:])):
            raise ValueError("profile phases must be strictly increasing")
        if min(heights) != 0.0 or max(heights) != 1.0:
            raise ValueError("profile must attain 0 and 1 at least once each")

    def to_json_obj(self) -> list[list[float]]:
        return [[p, h] for p, h in self.knots]

    @staticmethod
    def from_json_obj(obj: Sequence[Sequence[float]], name: str = "profile") -> "RelativeProfile":
        return RelativeProfile(tuple((float(p), float(h)) for p, h in obj), name=name)


#: Default nominal profile: dip to the lower deadpoint (suction), pump up to
#: the upper deadpoint, return to the junction for hand-off to the next section.
DEFAULT_PROFILE = RelativeProfile(
    knots=((0.0, 0.2), (0.35, 0.0), (0.75, 1.0), (1.0, 0.0)),
    name="dip-pump-return",
)


@dataclass(frozen=True)
class MotionCurve:
    """Sampled plunger trajectory: (time s, height mm) pairs."""

    times: tuple[float, ...]
    heights: tuple[float, ...]

    def min_height(self) -> float:
        return min(self.heights)

    def max_height(self) -> float:
        return max(self.heights)


def validate_cycle(cycle: Cycle) -> list[Violation]:
    """Check continuity, stroke positivity and non-negativity.

    Violations are data, not exceptions: every breach is reported with its
    section index and magnitude, and an empty list means the cycle is valid.
    Continuity is circular: section 0's starting point must equal the last
    section's lower deadpoint.
    """
    violations: list[Violation] = []
    n = cycle.n_sections
    for i, cam in enumerate(cycle.sections):
        prev = cycle.sections[(i - 1) % n]
        gap = cam.starting_point - prev.lower_deadpoint
        if abs(gap) > CONTINUITY_TOL_MM:
            violations.append(
                Violation(
                    kind="continuity",
                    section=i,
                    magnitude=abs(gap),
                    message=(
                        f"section {i}: starting point {cam.starting_point:.6f} != "
                        f"lower deadpoint {prev.lower_deadpoint:.6f} of section {(i - 1) % n} "
                        f"(gap {gap:+.6f} mm)"
                    ),
                )
            )
        stroke = cam.upper_deadpoint - cam.lower_deadpoint
        if stroke <= 0:
            violations.append(
                Violation(
                    kind="non_positive_stroke",
                    section=i,
                    magnitude=-stroke,
                    message=f"section {i}: upper deadpoint must exceed lower (stroke {stroke:.6f} mm)",
                )
            )
        for name, value in (
            ("starting point", cam.starting_point),
            ("lower deadpoint", cam.lower_deadpoint),
            ("upper deadpoint", cam.upper_deadpoint),
        ):
            if value < 0:
                violations.append(
                    Violation(
                        kind="negative_deadpoint",
                        section=i,
                        magnitude=-value,
                        message=f"section {i}: {name} is negative ({value:.6f} mm)",
                    )
                )
    return violations


def to_free_parameters(cycle: Cycle) -> np.ndarray:
    """Map a valid N-section cycle to its 2N free parameters.

    Layout: ``[junction_0 .. junction_{N-1}, upper_0 .. upper_{N-1}]`` where
    junction i is section i's lower deadpoint (= section i+1's starting
    point, circularly). Exact inverse of :func:`from_free_parameters`.
    """
    violations = validate_cycle(cycle)
    if violations:
        raise CycleValidationError(violations)
    junctions = [s.lower_deadpoint for s in cycle.sections]
    uppers = [s.upper_deadpoint for s in cycle.sections]
    return np.array(junctions + uppers)


def from_free_parameters(
    params: np.ndarray | Sequence[float], machine_state: MachineState
) -> Cycle:
    """Rebuild a cycle from 2N free parameters; continuity holds by construction.

    No validation is performed: parameter vectors with non-positive strokes or
    negative heights still produce a cycle, which ``validate_cycle`` will then
    report on (candidate solutions are screened this way).
    """
    params = np.asarray(params, dtype=float)
    n = machine_state.n_sections
    if params.shape != (2 * n,):
        raise ValueError(f"expected {2 * n} free parameters for {n} sections, got {params.shape}")
    junctions, uppers = params[:n], params[n:]
    sections = tuple(
        CamDeadpoints(
            starting_point=float(junctions[(i - 1) % n]),
            lower_deadpoint=float(junctions[i]),
            upper_deadpoint=float(uppers[i]),
        )
        for i in range(n)
    )
    return Cycle(sections=sections, machine_state=machine_state)


def section_deltas(new: Cycle, base: Cycle) -> np.ndarray:
    """(N, 3) per-section (dSP, dLP, dUP) between two cycles of equal layout."""
    if new.n_sections != base.n_sections:
        raise ValueError("cycles have different section counts")
    return new.deadpoint_matrix() - base.deadpoint_matrix()


def interpolate_profile(
    profile: RelativeProfile,
    cam: CamDeadpoints,
    cycle_time: float,
    n_samples: int,
) -> MotionCurve:
    """Stretch the nominal profile onto one cam and sample the motion.

    Monotone piecewise-cubic interpolation between knots keeps the curve
    inside the knot envelope, so the lower/upper deadpoints bound the motion
    exactly. The first knot is overridden so the curve starts at the starting
    point, and the last so it ends at the lower deadpoint, the junction height
    handed to the next section; concatenated sections of a valid cycle are
    therefore continuous by construction.
    """
    if cycle_time <= 0:
        raise ValueError("cycle_time must be positive")
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    stroke = cam.upper_deadpoint - cam.lower_deadpoint
    if stroke <= 0:
        raise ValueError("degenerate cam: upper deadpoint must exceed lower")

    phases = np.array([p for p, _ in profile.knots])
    heights = np.array([h for _, h in profile.knots], dtype=float)
    heights[0] = (cam.starting_point - cam.lower_deadpoint) / stroke
    heights[-1] = 0.0

    interp = PchipInterpolator(phases, heights)
    # Sampling grid always includes the knot phases so the extreme heights
    # (and hence the deadpoints) are attained exactly.
    grid = np.unique(np.concatenate([np.linspace(0.0, 1.0, n_samples), phases]))
    values = cam.lower_deadpoint + interp(grid) * stroke
    return MotionCurve(
        times=tuple(float(t) for t in grid * cycle_time),
        heights=tuple(float(h) for h in values),
    )


def cycle_motion(
    cycle: Cycle,
    profile: RelativeProfile = DEFAULT_PROFILE,
    n_samples_per_section: int = 50,
) -> list[MotionCurve]:
    """Motion curves for every section, with times offset to the cycle clock."""
    dt = cycle.machine_state.section_motion_seconds()
    curves = []
    for i, cam in enumerate(cycle.sections):
        curve = interpolate_profile(profile, cam, dt, n_samples_per_section)
        curves.append(
            MotionCurve(
                times=tuple(t + i * dt for t in curve.times),
                heights=curve.heights,
            )
        )
    return curves
