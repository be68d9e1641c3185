import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gobctl.cam import (
    CamDeadpoints,
    Cycle,
    CycleValidationError,
    DEFAULT_PROFILE,
    MachineState,
    RelativeProfile,
    cycle_motion,
    from_free_parameters,
    interpolate_profile,
    to_free_parameters,
    validate_cycle,
)


def make_state(n_sections: int) -> MachineState:
    return MachineState(
        temperature=1150.0,
        master_speed=7.0,
        tube_rotation_speed=40.0,
        shear_plunger_phase=120.0,
        tube_height=90.0,
        firing_order=tuple(range(n_sections)),
        n_sections=n_sections,
    )


def two_section_cycle() -> Cycle:
    # SP1 = LP0 and SP0 = LP1: circular continuity holds by construction.
    return Cycle(
        sections=(
            CamDeadpoints(starting_point=10.0, lower_deadpoint=8.0, upper_deadpoint=40.0),
            CamDeadpoints(starting_point=8.0, lower_deadpoint=10.0, upper_deadpoint=38.0),
        ),
        machine_state=make_state(2),
    )


def random_valid_cycle(rng: np.random.Generator, n_sections: int) -> Cycle:
    junctions = rng.uniform(2.0, 20.0, n_sections)
    uppers = junctions + rng.uniform(5.0, 50.0, n_sections)
    params = np.concatenate([junctions, uppers])
    return from_free_parameters(params, make_state(n_sections))


class TestValidateCycle:
    def test_valid_two_section_cycle_has_empty_report(self):
        assert validate_cycle(two_section_cycle()) == []

    def test_continuity_breach_reported_with_magnitude(self):
        cycle = Cycle(
            sections=(
                CamDeadpoints(10.0, 8.0, 40.0),
                CamDeadpoints(8.5, 10.0, 38.0),  # SP1 = LP0 + 0.5
            ),
            machine_state=make_state(2),
        )
        report = validate_cycle(cycle)
        assert len(report) == 1
        v = report[0]
        assert v.kind == "continuity"
        assert v.section == 1
        assert v.magnitude == pytest.approx(0.5)

    def test_non_positive_stroke_reported(self):
        rng = np.random.default_rng(3)
        cycle = random_valid_cycle(rng, 8)
        sections = list(cycle.sections)
        bad = sections[3]
        sections[3] = CamDeadpoints(bad.starting_point, bad.lower_deadpoint, bad.lower_deadpoint)
        report = validate_cycle(Cycle(tuple(sections), cycle.machine_state))
        strokes = [v for v in report if v.kind == "non_positive_stroke"]
        assert len(strokes) == 1
        assert strokes[0].section == 3

    def test_negative_deadpoint_reported(self):
        cycle = Cycle(
            sections=(
                CamDeadpoints(-1.0, 8.0, 40.0),
                CamDeadpoints(8.0, -1.0, 38.0),
            ),
            machine_state=make_state(2),
        )
        kinds = {v.kind for v in validate_cycle(cycle)}
        assert "negative_deadpoint" in kinds


class TestFreeParameters:
    def test_n8_cycle_gives_16_parameters(self):
        cycle = random_valid_cycle(np.random.default_rng(0), 8)
        assert to_free_parameters(cycle).shape == (16,)

    def test_two_section_unrolled_definition(self):
        # junctions (LP0, LP1) then uppers (UP0, UP1)
        params = to_free_parameters(two_section_cycle())
        assert params.tolist() == [8.0, 10.0, 40.0, 38.0]

    def test_from_free_parameters_inverse_of_definition(self):
        cycle = from_free_parameters([8.0, 10.0, 40.0, 38.0], make_state(2))
        assert cycle == two_section_cycle()

    def test_zero_junctions_positive_uppers_is_valid(self):
        cycle = from_free_parameters([0.0, 0.0, 0.0, 5.0, 5.0, 5.0], make_state(3))
        assert validate_cycle(cycle) == []
        assert all(s.starting_point == 0.0 and s.lower_deadpoint == 0.0 for s in cycle.sections)

    def test_bad_stroke_params_emit_cycle_but_fail_validation(self):
        cycle = from_free_parameters([8.0, 10.0, 7.0, 38.0], make_state(2))
        kinds = {v.kind for v in validate_cycle(cycle)}
        assert kinds == {"non_positive_stroke"}

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            from_free_parameters([1.0, 2.0, 3.0], make_state(2))

    def test_invalid_cycle_rejected_with_report(self):
        cycle = Cycle(
            sections=(CamDeadpoints(9.0, 8.0, 40.0), CamDeadpoints(8.5, 9.0, 38.0)),
            machine_state=make_state(2),
        )
        with pytest.raises(CycleValidationError) as exc:
            to_free_parameters(cycle)
        assert exc.value.violations

    def test_round_trip_100_random_cycles_exact(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            n = int(rng.integers(2, 13))
            cycle = random_valid_cycle(rng, n)
            again = from_free_parameters(to_free_parameters(cycle), cycle.machine_state)
            assert again == cycle

    @given(st.integers(min_value=2, max_value=12), st.integers(min_value=0, max_value=2**31))
    @settings(max_examples=50, deadline=None)
    def test_vector_round_trip_exact(self, n, seed):
        rng = np.random.default_rng(seed)
        junctions = rng.uniform(0.0, 30.0, n)
        uppers = junctions + rng.uniform(1.0, 60.0, n)
        params = np.concatenate([junctions, uppers])
        out = to_free_parameters(from_free_parameters(params, make_state(n)))
        assert np.array_equal(out, params)

    @given(st.integers(min_value=2, max_value=12), st.integers(min_value=0, max_value=2**31))
    @settings(max_examples=50, deadline=None)
    def test_constructed_cycles_have_zero_continuity_residual(self, n, seed):
        rng = np.random.default_rng(seed)
        junctions = rng.uniform(0.0, 30.0, n)
        uppers = junctions + rng.uniform(1.0, 60.0, n)
        cycle = from_free_parameters(np.concatenate([junctions, uppers]), make_state(n))
        for i in range(n):
            assert (
                cycle.sections[i].starting_point
                == cycle.sections[(i - 1) % n].lower_deadpoint
            )


class TestInterpolateProfile:
    # Oracle: affine map h = LP + v*(UP-LP) evaluated at knots, with the first
    # knot forced to v0 = (SP-LP)/(UP-LP) and the last to 0 (the junction).
    def test_spec_profile_bounds_and_start(self):
        profile = RelativeProfile(((0.0, 0.2), (0.3, 0.0), (0.7, 1.0), (1.0, 0.25)))
        cam = CamDeadpoints(starting_point=10.0, lower_deadpoint=8.0, upper_deadpoint=40.0)
        curve = interpolate_profile(profile, cam, cycle_time=1.5, n_samples=100)
        assert curve.heights[0] == pytest.approx(10.0, abs=1e-9)
        assert curve.min_height() == pytest.approx(8.0, abs=1e-9)
        assert curve.max_height() == pytest.approx(40.0, abs=1e-9)
        assert curve.heights[-1] == pytest.approx(8.0, abs=1e-9)

    def test_identity_scaling_unit_cam(self):
        profile = RelativeProfile(((0.0, 0.2), (0.3, 0.0), (0.7, 1.0), (1.0, 0.0)))
        cam = CamDeadpoints(starting_point=0.2, lower_deadpoint=0.0, upper_deadpoint=1.0)
        curve = interpolate_profile(profile, cam, cycle_time=1.0, n_samples=5)
        by_time = dict(zip(curve.times, curve.heights))
        for phase, height in profile.knots:
            assert by_time[phase] == pytest.approx(height, abs=1e-12)

    def test_times_strictly_increasing(self):
        curve = interpolate_profile(
            DEFAULT_PROFILE, CamDeadpoints(10.0, 8.0, 40.0), cycle_time=2.0, n_samples=33
        )
        diffs = np.diff(curve.times)
        assert np.all(diffs > 0)

    def test_degenerate_cam_rejected(self):
        with pytest.raises(ValueError):
            interpolate_profile(
                DEFAULT_PROFILE, CamDeadpoints(5.0, 5.0, 5.0), cycle_time=1.0, n_samples=10
            )

    def test_consecutive_sections_are_continuous(self):
        cycle = two_section_cycle()
        curves = cycle_motion(cycle, n_samples_per_section=40)
        assert curves[0].heights[-1] == pytest.approx(curves[1].heights[0], abs=1e-9)
        # Circular: last section hands off to the first.
        assert curves[1].heights[-1] == pytest.approx(curves[0].heights[0], abs=1e-9)

    @given(st.integers(min_value=0, max_value=2**31), st.integers(min_value=2, max_value=10))
    @settings(max_examples=30, deadline=None)
    def test_concatenated_cycle_has_no_jumps(self, seed, n):
        rng = np.random.default_rng(seed)
        cycle = random_valid_cycle(rng, n)
        curves = cycle_motion(cycle, n_samples_per_section=15)
        for i in range(n):
            end = curves[i].heights[-1]
            start = curves[(i + 1) % n].heights[0]
            assert abs(end - start) <= 1e-9

    @given(st.integers(min_value=0, max_value=2**31))
    @settings(max_examples=30, deadline=None)
    def test_curve_bounded_by_deadpoints(self, seed):
        rng = np.random.default_rng(seed)
        lp = rng.uniform(0.0, 20.0)
        up = lp + rng.uniform(1.0, 50.0)
        sp = rng.uniform(lp, up)
        cam = CamDeadpoints(sp, lp, up)
        curve = interpolate_profile(DEFAULT_PROFILE, cam, 1.0, int(rng.integers(2, 200)))
        assert curve.min_height() == pytest.approx(lp, abs=1e-9)
        assert curve.max_height() == pytest.approx(up, abs=1e-9)


class TestCycleSerialization:
    def test_round_trip(self):
        cycle = two_section_cycle()
        assert Cycle.from_dict(cycle.to_dict()) == cycle

    def test_json_field_names(self):
        d = two_section_cycle().to_dict()
        assert set(d) == {"machine_state", "sections"}
        assert set(d["sections"][0]) == {"sp", "lp", "up"}


class TestTiming:
    def test_cycle_duration_matches_master_speed(self):
        # 6 cuts per section per minute -> one full machine cycle every 10 s.
        state = MachineState(1150.0, 6.0, 40.0, 120.0, 90.0, tuple(range(8)), 8)
        assert state.cycle_seconds() == pytest.approx(10.0)
        assert state.section_motion_seconds() == pytest.approx(1.25)
