import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfcontrol.systems import (
    ActionMismatch,
    ControlGrid,
    DimensionMismatch,
    EmptyDataset,
    MalformedRow,
    SystemKind,
    SystemSpec,
    TimeKind,
    TrajectoryDataset,
    UnknownSystemKind,
    generate_dataset,
    integrate_flow,
    read_dataset,
    step_map,
    write_dataset,
)


def logistic(lam=2.3):
    return SystemSpec(
        kind=SystemKind.CUBIC_LOGISTIC,
        params={"lam": lam},
        state_dim=1,
        domain_lower=(-1.6,),
        domain_upper=(1.6,),
        time_kind=TimeKind.DISCRETE_MAP,
    )


def duffing():
    return SystemSpec(
        kind=SystemKind.DUFFING,
        params={"damping": 0.5},
        state_dim=2,
        domain_lower=(-2.0, -2.0),
        domain_upper=(2.0, 2.0),
        time_kind=TimeKind.CONTINUOUS_FLOW,
        dt=0.1,
    )


def double_well(a=0.5):
    return SystemSpec(
        kind=SystemKind.DOUBLE_WELL,
        params={"a": a},
        state_dim=2,
        domain_lower=(-2.0, -2.0),
        domain_upper=(2.0, 2.0),
        time_kind=TimeKind.CONTINUOUS_FLOW,
        dt=0.1,
    )


def standard_map(k=0.25):
    return SystemSpec(
        kind=SystemKind.STANDARD_MAP,
        params={"K": k},
        state_dim=2,
        domain_lower=(0.0, 0.0),
        domain_upper=(1.0, 1.0),
        time_kind=TimeKind.DISCRETE_MAP,
    )


class TestStepMap:
    def test_logistic_fixed_point_at_origin(self):
        assert step_map(logistic(), np.array([0.0]), np.array([0.0])) == 0.0

    def test_logistic_at_one(self):
        y = step_map(logistic(), np.array([1.0]), np.array([0.0]))
        assert y[0] == pytest.approx(1.3, abs=1e-15)

    def test_standard_map_zero_shear_point(self):
        y = step_map(standard_map(), np.array([0.25, 0.0]), np.array([0.0]))
        np.testing.assert_allclose(y, [0.25, 0.0], atol=1e-15)

    def test_standard_map_period_two_orbit(self):
        s = standard_map()
        p1 = np.array([0.25, 0.5])
        p2 = step_map(s, p1, np.array([0.0]))
        np.testing.assert_allclose(p2, [0.75, 0.5], atol=1e-15)
        np.testing.assert_allclose(step_map(s, p2, np.array([0.0])), p1, atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            step_map(logistic(), np.array([0.0, 1.0]), np.array([0.0]))

    def test_unknown_kind(self):
        spec = SystemSpec(
            kind=SystemKind.EXTERNAL_DATA,
            params={},
            state_dim=1,
            domain_lower=(-1.0,),
            domain_upper=(1.0,),
            time_kind=TimeKind.DISCRETE_MAP,
        )
        with pytest.raises(UnknownSystemKind):
            step_map(spec, np.array([0.0]), np.array([0.0]))

    @given(
        x=st.floats(-10, 10),
        y=st.floats(-10, 10),
        u=st.floats(-0.5, 0.5),
    )
    @settings(max_examples=50, deadline=None)
    def test_standard_map_wraps_first_coordinate(self, x, y, u):
        big = SystemSpec(
            kind=SystemKind.STANDARD_MAP,
            params={"K": 0.25},
            state_dim=2,
            domain_lower=(-100.0, -100.0),
            domain_upper=(100.0, 100.0),
            time_kind=TimeKind.DISCRETE_MAP,
        )
        out = step_map(big, np.array([x, y]), np.array([u]))
        assert 0.0 <= out[0] < 1.0


class TestIntegrateFlow:
    def test_duffing_origin_is_equilibrium(self):
        y = integrate_flow(duffing(), np.array([0.0, 0.0]), np.array([0.0]), 0.5, 20)
        np.testing.assert_allclose(y, [0.0, 0.0], atol=1e-15)

    def test_duffing_stable_points_are_equilibria(self):
        for x1 in (1.0, -1.0):
            y = integrate_flow(duffing(), np.array([x1, 0.0]), np.array([0.0]), 0.3, 10)
            np.testing.assert_allclose(y, [x1, 0.0], atol=1e-13)

    def test_double_well_unstable_point_is_equilibrium(self):
        y = integrate_flow(double_well(), np.array([0.5, 0.0]), np.array([0.0]), 0.1, 10)
        np.testing.assert_allclose(y, [0.5, 0.0], atol=1e-15)

    def test_double_well_stable_points_are_equilibria(self):
        for x1 in (1.0, -1.0):
            y = integrate_flow(double_well(), np.array([x1, 0.0]), np.array([0.0]), 0.2, 10)
            np.testing.assert_allclose(y, [x1, 0.0], atol=1e-13)

    def test_duffing_reference_agreement(self):
        coarse = integrate_flow(duffing(), np.array([1.0, 0.0]), np.array([0.0]), 0.1, 1)
        fine = integrate_flow(duffing(), np.array([1.0, 0.0]), np.array([0.0]), 0.1, 1000)
        assert np.max(np.abs(coarse - fine)) < 1e-6

    def test_fourth_order_convergence_slope(self):
        # error vs a substeps-doubled reference shrinks ~16x per doubling
        rng = np.random.default_rng(5)
        states = rng.uniform(-1.5, 1.5, size=(10, 2))
        spec = duffing()
        u = np.array([0.3])
        substep_counts = [1, 2, 4, 8]
        errs = []
        for s in substep_counts:
            worst = 0.0
            for x in states:
                ref = integrate_flow(spec, x, u, 0.5, 512)
                approx = integrate_flow(spec, x, u, 0.5, s)
                worst = max(worst, float(np.max(np.abs(approx - ref))))
            errs.append(worst)
        slope = np.polyfit(np.log([0.5 / s for s in substep_counts]), np.log(errs), 1)[0]
        assert 3.5 <= slope <= 4.5

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            integrate_flow(duffing(), np.array([0.0, 0.0]), np.array([0.0]), -0.1, 10)
        with pytest.raises(ValueError):
            integrate_flow(duffing(), np.array([0.0, 0.0]), np.array([0.0]), 0.1, 0)


class TestGenerateDataset:
    def test_one_step_yields_one_pair(self):
        grid = ControlGrid(values=((0.0,),))
        ds = generate_dataset(logistic(), grid, 1, 1, seed=0)
        assert len(ds) == 1
        assert ds[0].count == 1

    def test_pairs_satisfy_the_map(self):
        grid = ControlGrid.from_range(-0.2, 0.1, 0.2)
        for ds in generate_dataset(logistic(), grid, 20, 5, seed=3):
            u = grid.values[ds.action_index - 1][0]
            expected = 2.3 * ds.xs - ds.xs**3 + u
            np.testing.assert_array_equal(ds.ys, expected)

    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=15, deadline=None)
    def test_determinism(self, seed):
        grid = ControlGrid(values=((-0.1,), (0.0,), (0.1,)))
        a = generate_dataset(logistic(), grid, 5, 3, seed=seed)
        b = generate_dataset(logistic(), grid, 5, 3, seed=seed)
        assert a == b

    def test_different_seeds_differ(self):
        grid = ControlGrid(values=((0.0,),))
        a = generate_dataset(logistic(), grid, 5, 3, seed=1)
        b = generate_dataset(logistic(), grid, 5, 3, seed=2)
        assert a[0] != b[0]

    def test_escaping_pairs_are_dropped(self):
        # huge control pushes every image out of the domain in one step
        spec = SystemSpec(
            kind=SystemKind.CUBIC_LOGISTIC,
            params={"lam": 2.3},
            state_dim=1,
            domain_lower=(-1.6,),
            domain_upper=(1.6,),
            time_kind=TimeKind.DISCRETE_MAP,
        )
        grid = ControlGrid(values=((50.0,),))
        with pytest.raises(EmptyDataset):
            generate_dataset(spec, grid, 4, 3, seed=0)

    def test_drop_counter(self):
        # u=0.3 pushes only the worst-case images just past the boundary
        grid = ControlGrid(values=((0.0,), (0.3,)))
        ds = generate_dataset(logistic(), grid, 200, 4, seed=1)
        assert ds[0].n_dropped == 0  # uncontrolled logistic stays inside
        assert ds[1].n_dropped > 0
        assert ds[1].count > 0


class TestDatasetCsv:
    def test_round_trip(self, tmp_path):
        grid = ControlGrid(values=((0.0,), (0.1,)))
        ds = generate_dataset(duffing(), grid, 6, 4, seed=9)[1]
        path = tmp_path / "data_a2.csv"
        write_dataset(ds, path)
        back = read_dataset(path)
        assert back == ds

    def test_malformed_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("action,dim,x0,y0\n1,1,0.5\n")
        with pytest.raises(MalformedRow):
            read_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("action,dim,x0,y0\n")
        with pytest.raises(EmptyDataset):
            read_dataset(path)

    def test_action_mismatch(self, tmp_path):
        path = tmp_path / "mixed.csv"
        path.write_text("action,dim,x0,y0\n1,1,0.5,0.6\n2,1,0.1,0.2\n")
        with pytest.raises(ActionMismatch):
            read_dataset(path)


class TestSpecValidation:
    def test_domain_ordering(self):
        with pytest.raises(ValueError):
            SystemSpec(
                kind=SystemKind.CUBIC_LOGISTIC,
                params={"lam": 2.3},
                state_dim=1,
                domain_lower=(1.0,),
                domain_upper=(-1.0,),
                time_kind=TimeKind.DISCRETE_MAP,
            )

    def test_missing_param(self):
        with pytest.raises(ValueError):
            SystemSpec(
                kind=SystemKind.CUBIC_LOGISTIC,
                params={},
                state_dim=1,
                domain_lower=(-1.0,),
                domain_upper=(1.0,),
                time_kind=TimeKind.DISCRETE_MAP,
            )

    def test_flow_needs_dt(self):
        with pytest.raises(ValueError):
            SystemSpec(
                kind=SystemKind.DUFFING,
                params={"damping": 0.5},
                state_dim=2,
                domain_lower=(-2.0, -2.0),
                domain_upper=(2.0, 2.0),
                time_kind=TimeKind.CONTINUOUS_FLOW,
                dt=0.0,
            )

    def test_grid_must_increase(self):
        with pytest.raises(ValueError):
            ControlGrid(values=((0.1,), (0.0,)))
        with pytest.raises(ValueError):
            ControlGrid(values=((0.1,), (0.1,)))

    def test_grid_from_range_hits_endpoints(self):
        grid = ControlGrid.from_range(-0.2, 0.02, 0.2)
        assert len(grid) == 21
        assert (0.0,) in grid.values
        assert grid.values[0] == (-0.2,)
        assert grid.values[-1] == (0.2,)
