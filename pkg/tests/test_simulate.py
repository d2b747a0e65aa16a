import numpy as np
import pytest

from fuelgrid.controls import ConstantPolicy, TimeGrid
from fuelgrid.problem import load_problem
from fuelgrid.simulate import (
    NO_STOP,
    SimulationError,
    bundle_to_binary,
    bundle_to_csv,
    exit_time,
    generate_noise,
    path_generator,
    simulate_paths,
    variation_moment,
)
from fuelgrid.verify import ks_critical_value, ks_statistic


def make_spec(**over):
    cfg = {
        "horizon_T": 1.0, "start_t": 0.0,
        "dims": {"d": 1, "d_prime": 1, "l": 1},
        "drift": {"form": "zero"},
        "diffusion": {"form": "zero"},
        "running_gain": {"form": "zero"},
        "exit_gain": {"form": "zero"},
        "stop_gain": {"form": "zero"},
        "cost_plus": {"form": "constant", "value": [1.0]},
        "cost_minus": {"form": "constant", "value": [1.0]},
        "domain": {"form": "all"},
        "action_set": [[0.0]],
        "fuel": {"mode": "finite", "cap": 1.0},
        "payoff_floor": 0.0,
    }
    cfg.update(over)
    return load_problem(cfg)


class TestDynamics:
    def test_frozen_state_without_coefficients(self):
        spec = make_spec()
        g = TimeGrid(0.0, 1.0, 8)
        b = simulate_paths(spec, ConstantPolicy(d=1), [0.7], 0.0, g, 5, seed=0)
        assert np.allclose(b.states, 0.7)

    def test_pure_drift_ode(self):
        spec = make_spec(drift={"form": "constant", "value": [1.0]})
        g = TimeGrid(0.0, 1.0, 64)
        b = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0, g, 3, seed=0)
        assert np.allclose(b.states[:, -1, 0], 1.0, atol=1e-12)

    def test_brownian_terminal_variance(self):
        spec = make_spec(diffusion={"form": "constant", "value": [[1.0]]})
        g = TimeGrid(0.0, 1.0, 16)
        n = 100_000
        b = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0, g, n, seed=17)
        v = b.states[:, -1, 0].var(ddof=1)
        se = 1.0 * np.sqrt(2.0 / n)  # Var of sample variance of N(0,1), approx
        assert abs(v - 1.0) <= 3 * se

    def test_control_increment_enters_next_state(self):
        spec = make_spec()
        g = TimeGrid(0.0, 1.0, 4)
        pol = ConstantPolicy(d=1, inc_plus=np.array([0.25]))
        b = simulate_paths(spec, pol, [0.0], 0.0, g, 2, seed=0)
        # four quanta exhaust the budget exactly (admissible, all kept)
        assert np.allclose(b.states[0, :, 0], [0.0, 0.25, 0.5, 0.75, 1.0])
        assert np.allclose(b.fuel[0], [0, 0.25, 0.5, 0.75, 1.0])

    def test_budget_overshoot_dropped_and_frozen(self):
        spec = make_spec(fuel={"mode": "finite", "cap": 0.6})
        g = TimeGrid(0.0, 1.0, 4)
        pol = ConstantPolicy(d=1, inc_plus=np.array([0.25]))
        b = simulate_paths(spec, pol, [0.0], 0.0, g, 2, seed=0)
        # third increment would reach 0.75 > 0.6: dropped, and later ones too
        assert np.allclose(b.fuel[0], [0, 0.25, 0.5, 0.5, 0.5])

    def test_grid_must_start_at_problem_start(self):
        spec = make_spec(start_t=0.25)
        with pytest.raises(ValueError, match="starts at"):
            simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0,
                           TimeGrid(0.0, 1.0, 4), 1, seed=0)

    def test_fuel_out_of_range(self):
        spec = make_spec()
        with pytest.raises(ValueError):
            simulate_paths(spec, ConstantPolicy(d=1), [0.0], 1.5,
                           TimeGrid(0.0, 1.0, 4), 1, seed=0)

    def test_nonfinite_state_reported_with_location(self):
        spec = make_spec(drift={"form": "affine", "A": [[100.0]], "b": [1e300], "B": [[0.0]]})
        g = TimeGrid(0.0, 1.0, 8)
        with np.errstate(over="ignore"), pytest.raises(SimulationError, match="path 0, step"):
            simulate_paths(spec, ConstantPolicy(d=1), [1e300], 0.0, g, 2, seed=0)


class TestDeterminismAndStreams:
    def test_bitwise_reproducible(self):
        spec = make_spec(diffusion={"form": "constant", "value": [[0.5]]})
        g = TimeGrid(0.0, 1.0, 8)
        a = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0, g, 50, seed=3)
        b = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0, g, 50, seed=3)
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.noise, b.noise)

    def test_thread_count_invariance(self):
        spec = make_spec(diffusion={"form": "constant", "value": [[0.5]]})
        g = TimeGrid(0.0, 1.0, 8)
        a = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0, g, 97, seed=3, threads=1)
        b = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0, g, 97, seed=3, threads=5)
        assert np.array_equal(a.states, b.states)

    def test_per_path_substreams_prefix_stable(self):
        # the first paths of a larger run replicate a smaller run exactly
        spec = make_spec(diffusion={"form": "constant", "value": [[0.5]]})
        g = TimeGrid(0.0, 1.0, 8)
        small = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0, g, 10, seed=3)
        big = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0, g, 40, seed=3)
        assert np.array_equal(small.noise, big.noise[:10])

    def test_distinct_seeds_differ(self):
        g = TimeGrid(0.0, 1.0, 4)
        a = generate_noise(1, 5, g, 1)
        b = generate_noise(2, 5, g, 1)
        assert not np.allclose(a, b)

    def test_path_generator_is_stable(self):
        a = path_generator(9, 4).standard_normal(5)
        b = path_generator(9, 4).standard_normal(5)
        assert np.array_equal(a, b)

    def test_antithetic_pairs(self):
        g = TimeGrid(0.0, 1.0, 6)
        z = generate_noise(5, 8, g, 1, antithetic=True)
        for i in range(0, 8, 2):
            assert np.array_equal(z[i], -z[i + 1])

    def test_non_anticipativity(self):
        # perturbing noise from step k on leaves states up to k unchanged
        spec = make_spec(diffusion={"form": "constant", "value": [[0.5]]})
        g = TimeGrid(0.0, 1.0, 8)
        base = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0, g, 1, seed=3)

        from fuelgrid.simulate import _integrate_block
        noise = base.noise.copy()
        noise[:, 5:] *= -2.0
        states, fuel, actions, incp, incm, flip = _integrate_block(
            spec, ConstantPolicy(d=1), [0.0], 0.0, g, noise)
        assert np.array_equal(states[:, :6], base.states[:, :6])
        assert not np.allclose(states[:, 6:], base.states[:, 6:])


class TestBridgeConstruction:
    def test_needs_power_of_two(self):
        g = TimeGrid(0.0, 1.0, 6)
        with pytest.raises(ValueError, match="power-of-two"):
            generate_noise(0, 2, g, 1, construction="bridge")

    def test_same_law_as_increments(self):
        g = TimeGrid(0.0, 1.0, 8)
        n = 20_000
        a = generate_noise(1, n, g, 1, construction="increments")
        b = generate_noise(2, n, g, 1, construction="bridge")
        # per-step increments and terminal values agree in law
        crit = ks_critical_value(n, n, 0.01)
        assert ks_statistic(a[:, 3, 0], b[:, 3, 0]) < crit
        assert ks_statistic(a.sum(axis=1)[:, 0], b.sum(axis=1)[:, 0]) < crit
        assert abs(a[:, 5, 0].std() - np.sqrt(g.dt)) < 4 * np.sqrt(g.dt / n)


class TestExitTime:
    def test_whole_space_caps_at_horizon(self):
        spec = make_spec()
        g = TimeGrid(0.0, 1.0, 6)
        b = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0, g, 4, seed=0)
        assert np.all(b.rho_step == 6)

    def test_start_outside(self):
        spec = make_spec(domain={"form": "box", "x_lower": [-1.0], "x_upper": [1.0]})
        g = TimeGrid(0.0, 1.0, 6)
        b = simulate_paths(spec, ConstantPolicy(d=1), [2.0], 0.0, g, 2, seed=0)
        assert np.all(b.rho_step == 0)

    def test_deterministic_crossing(self):
        spec = make_spec(drift={"form": "constant", "value": [1.0]},
                         domain={"form": "box", "x_lower": [-10.0], "x_upper": [0.45]})
        g = TimeGrid(0.0, 1.0, 10)  # dt = 0.1; X[k] = 0.1 k; first k with X >= 0.45 is 5
        b = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0, g, 2, seed=0)
        assert np.all(b.rho_step == 5)
        assert np.array_equal(exit_time(b, spec), b.rho_step)

    def test_fuel_never_exceeds_cap(self):
        spec = make_spec(diffusion={"form": "constant", "value": [[0.4]]})
        g = TimeGrid(0.0, 1.0, 20)
        pol = ConstantPolicy(d=1, inc_plus=np.array([0.17]))
        b = simulate_paths(spec, pol, [0.0], 0.2, g, 50, seed=6)
        assert np.all(b.fuel <= 1.0 + 1e-12)


class TestBundle:
    def test_tau_step_and_views(self):
        spec = make_spec()
        g = TimeGrid(0.0, 1.0, 5)
        b = simulate_paths(spec, ConstantPolicy(d=1, stop_step=2), [0.0], 0.0, g, 3, seed=0)
        assert np.all(b.flip_index == 2)
        assert np.all(b.tau_step == 2)
        pv = b.path(1)
        assert pv.tau_step == 2
        assert pv.indicator().flip_index == 2
        never = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0, g, 1, seed=0)
        assert never.flip_index[0] == NO_STOP
        assert never.tau_step[0] == 5

    def test_immutable(self):
        spec = make_spec()
        b = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0,
                           TimeGrid(0.0, 1.0, 4), 2, seed=0)
        with pytest.raises(ValueError):
            b.states[0, 0, 0] = 9.0

    def test_variation_moment(self):
        spec = make_spec()
        g = TimeGrid(0.0, 1.0, 4)
        pol = ConstantPolicy(d=1, inc_plus=np.array([0.1]))
        b = simulate_paths(spec, pol, [0.0], 0.0, g, 8, seed=0)
        mean, se = variation_moment(b, 2.0)
        assert mean == pytest.approx(0.4 ** 2)
        assert se == 0.0

    def test_exports(self, tmp_path):
        spec = make_spec(diffusion={"form": "constant", "value": [[0.3]]})
        g = TimeGrid(0.0, 1.0, 4)
        b = simulate_paths(spec, ConstantPolicy(d=1), [0.0], 0.0, g, 3, seed=1)
        csv_path = tmp_path / "paths.csv"
        bin_path = tmp_path / "paths.bin"
        bundle_to_csv(b, csv_path)
        bundle_to_binary(b, bin_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("path,step,time")
        assert len(lines) == 1 + 3 * 5
        raw = bin_path.read_bytes()
        assert raw[:4] == b"FGPB"
        # header + five f8 arrays + three i8 arrays
        expected = 4 + 44 + 24 + 8 * (3 * 4 * 1 + 3 * 5 * 1 + 3 * 5 + 2 * 3 * 4 * 1) + 8 * (3 * 4 + 3 + 3)
        assert len(raw) == expected
