import numpy as np
import pytest

from gobctl.cam import MachineState, from_free_parameters
from gobctl.experiments import (
    GridAxis,
    Landscape,
    TargetRanges,
    batch_evaluate,
    dedup_granularity_study,
    enumerate_minima,
    landscape_axes_for_sections,
    loss_landscape,
    mask_for_axes,
    plant_single_section_request,
    select_distinct_cycles,
    stability_sweep,
    surrogate_targets,
    within_one_cell,
)
from gobctl.forward import TrainConfig, TrainedModel, Normalization, build_network
from gobctl.inversion import InversionParams, InversionRequest, invert_gradient
from gobctl.nn import NetworkSpec
from gobctl.pipeline import make_surrogate_dataset, temporal_split
from gobctl.plant import PlantConfig, generate_history, surrogate_response


def make_cycle(n=8, junction=12.0, upper=50.0, temperature=1150.0, master_speed=7.0):
    state = MachineState(temperature, master_speed, 40.0, 120.0, 80.0, tuple(range(n)), n)
    return from_free_parameters(
        np.concatenate([np.full(n, junction), np.full(n, upper)]), state
    )


class TestPlantedRequests:
    def test_targets_are_exact_surrogate_responses(self, surrogate_model):
        rng = np.random.default_rng(0)
        cycle = make_cycle()
        planted = plant_single_section_request(cycle, rng, InversionParams())
        expected = surrogate_targets(cycle, planted.true_free_deltas)
        assert np.allclose(planted.request.targets, expected, atol=1e-12)

    def test_targets_within_declared_ranges(self):
        rng = np.random.default_rng(1)
        cycle = make_cycle()
        ranges = TargetRanges(weight_g=40.0, length_mm=20.0)
        for _ in range(50):
            planted = plant_single_section_request(cycle, rng, InversionParams(), ranges)
            k = planted.section
            assert abs(planted.request.targets[k, 0]) <= 40.0
            assert abs(planted.request.targets[k, 1]) <= 20.0

    def test_planted_cycles_stay_feasible(self):
        rng = np.random.default_rng(2)
        cycle = make_cycle(junction=4.0)  # close to the floor
        for _ in range(25):
            planted = plant_single_section_request(cycle, rng, InversionParams())
            from gobctl.cam import to_free_parameters

            base = to_free_parameters(cycle)
            assert np.all(base + planted.true_free_deltas >= 0)


class TestBatchEvaluate:
    def test_empty_request_list_empty_report(self):
        report = batch_evaluate([], None)
        assert report.n == 0
        assert report.entries == []

    def test_small_batch_converges_and_reconstructs(self, surrogate_model):
        rng = np.random.default_rng(3)
        cycle = make_cycle()
        params = InversionParams(polish=True, stall_steps=150, stall_improvement=1e-8,
                                 max_steps=4000)
        planted = [
            plant_single_section_request(cycle, rng, params)
            for _ in range(10)
        ]
        report = batch_evaluate(planted, surrogate_model)
        assert report.n == 10
        assert report.convergence_rate >= 0.9
        assert report.plant_hit_rate(3.0) >= 0.8
        assert report.median_upper_error() <= 1.0
        assert report.median_junction_error() <= 0.5
        stats = report.wall_time_stats()
        assert stats["max_s"] < 10.0
        doc = report.to_dict()
        assert len(doc["entries"]) == 10


class TestSelectDistinctCycles:
    def test_round_robin_spreads_working_points(self):
        cfg = PlantConfig(seed=8, mean_run_cycles=50, min_run_cycles=20)
        records = generate_history(cfg, 1200)
        chosen = select_distinct_cycles(records, 12, seed=0)
        assert len(chosen) == 12
        temps = {rec.cycle.machine_state.temperature for rec in chosen}
        assert len(temps) > 1  # multiple recipes represented

    def test_caps_at_available(self):
        cfg = PlantConfig(seed=9)
        records = generate_history(cfg, 100)
        chosen = select_distinct_cycles(records, 10_000, seed=0)
        assert len(chosen) <= 100


class TestStabilitySweep:
    def test_zero_request_gives_zero_correction(self, surrogate_model):
        cycle = make_cycle()
        result = stability_sweep(
            cycle, 3, surrogate_model,
            weight_range=(-10.0, 10.0), length_range=(-5.0, 5.0), n_points=3,
        )
        mid = result.axis_points["weight"][1]
        assert mid.requested == 0.0
        assert abs(mid.dsp_mm) < 0.3 and abs(mid.dlp_mm) < 0.3 and abs(mid.dup_mm) < 0.3

    def test_upper_correction_monotone_in_weight_request(self, surrogate_model):
        cycle = make_cycle()
        result = stability_sweep(
            cycle, 2, surrogate_model,
            weight_range=(-20.0, 20.0), length_range=(-1.0, 1.0), n_points=7,
        )
        ups = [p.dup_mm for p in result.axis_points["weight"] if p.verdict == "converged"]
        assert len(ups) >= 5
        assert all(a < b for a, b in zip(ups, ups[1:]))

    def test_infeasible_range_truncates(self, surrogate_model):
        cycle = make_cycle()
        result = stability_sweep(
            cycle, 0, surrogate_model,
            weight_range=(-400.0, 400.0), length_range=(-1.0, 1.0), n_points=5,
        )
        assert result.truncated("weight")


def constant_model(n_features=7, value=0.0) -> TrainedModel:
    net = build_network(NetworkSpec(hidden=(4, 4), dropout_rate=0.0), seed=0)
    for w in net.weights:
        w[:] = 0.0
    for b in net.biases:
        b[:] = 0.0
    net.biases[-1][:] = value
    norm = Normalization(
        x_mean=np.zeros(n_features), x_scale=np.ones(n_features),
        y_mean=np.zeros(2), y_scale=np.ones(2),
    )
    return TrainedModel(net, norm)


class TestLandscape:
    def test_flat_model_gives_flat_grid(self):
        model = constant_model()
        cycle = make_cycle()
        params = InversionParams(upper_preference_weight=0.0, step_size_weight=0.0)
        request = InversionRequest(cycle.machine_state, cycle, np.zeros((8, 2)), params)
        axes = landscape_axes_for_sections(cycle, [0], [(-5.0, 5.0), (-5.0, 5.0)], 11)
        landscape = loss_landscape(request, model, axes)
        assert landscape.loss.min() == landscape.loss.max()
        minima, nearest = enumerate_minima(landscape)
        assert minima == [] and nearest is None

    def test_optimizer_lands_in_grid_minimum_2d(self, surrogate_model):
        # Optimizer restricted to the grid slice (the chosen cam's dSP/dUP);
        # its converged point must sit in the slice's origin-nearest minimum.
        cycle = make_cycle()
        targets = np.zeros((8, 2))
        targets[1, 0] = 15.0
        params = InversionParams(polish=True, stall_steps=250, stall_improvement=1e-9,
                                 max_steps=6000, tol_weight_g=3.0, tol_length_mm=3.0)
        request = InversionRequest(cycle.machine_state, cycle, targets, params)
        axes = landscape_axes_for_sections(cycle, [1], [(-12.0, 12.0), (-12.0, 12.0)], 30)
        result = invert_gradient(
            request, surrogate_model, free_mask=mask_for_axes(axes, cycle.n_sections)
        )
        landscape = loss_landscape(request, surrogate_model, axes, optimizer_result=result)
        minima, nearest = enumerate_minima(landscape)
        assert minima
        assert landscape.optimizer_path is not None
        assert within_one_cell(landscape, result.free_deltas, nearest)

    def test_grid_size_guard(self, surrogate_model):
        cycle = make_cycle()
        request = InversionRequest(
            cycle.machine_state, cycle, np.zeros((8, 2)), InversionParams()
        )
        with pytest.raises(ValueError):
            axes = landscape_axes_for_sections(
                cycle, [0, 1], [(-5.0, 5.0)] * 4, 45
            )
            loss_landscape(request, surrogate_model, axes)

    def test_axis_count_guard(self, surrogate_model):
        cycle = make_cycle()
        request = InversionRequest(
            cycle.machine_state, cycle, np.zeros((8, 2)), InversionParams()
        )
        axes = landscape_axes_for_sections(cycle, [0], [(-5.0, 5.0)] * 2, 5)
        with pytest.raises(ValueError):
            loss_landscape(request, surrogate_model, axes[:1])


class TestEnumerateMinima:
    def quadratic_landscape(self):
        values = np.linspace(-5, 5, 21)
        x, y = np.meshgrid(values, values, indexing="ij")
        loss = (x - 1.2) ** 2 + 2 * (y + 0.7) ** 2
        axes = [GridAxis(0, "a", values), GridAxis(1, "b", values)]
        cycle = make_cycle(2)
        request = InversionRequest(
            cycle.machine_state, cycle, np.zeros((2, 2)), InversionParams()
        )
        return Landscape(axes=axes, loss=loss, request=request)

    def test_convex_grid_has_exactly_one_minimum(self):
        minima, nearest = enumerate_minima(self.quadratic_landscape())
        assert len(minima) == 1
        assert minima[0].coords == (1.0, -0.5)
        assert nearest == minima[0]

    def test_constant_grid_has_no_strict_minima(self):
        landscape = self.quadratic_landscape()
        landscape.loss[:] = 3.0
        minima, nearest = enumerate_minima(landscape)
        assert minima == []

    def test_origin_nearest_selection(self):
        landscape = self.quadratic_landscape()
        # carve a second, deeper minimum far from the origin
        landscape.loss[18, 18] = -5.0
        minima, nearest = enumerate_minima(landscape)
        assert len(minima) == 2
        assert minima[0].loss == -5.0  # sorted by loss
        assert nearest.coords == (1.0, -0.5)  # but origin-nearest wins


class TestDedupStudy:
    def test_rows_and_baseline(self):
        samples = make_surrogate_dataset(1500, seed=5)
        train_set, val_set = temporal_split(samples, 0.25)
        baseline, rows = dedup_granularity_study(
            train_set, val_set, scales=[1.0, 8.0],
            spec=NetworkSpec(hidden=(16, 8), dropout_rate=0.0),
            config=TrainConfig(max_epochs=8, seed=0),
        )
        assert baseline.train_size == len(train_set)
        assert [r.scale for r in rows] == [1.0, 8.0]
        assert rows[0].train_size >= rows[1].train_size or rows[1].train_size > 0
        for row in rows:
            assert row.val_mae_weight > 0
