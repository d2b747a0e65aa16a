import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuelgrid.controls import (
    BVControlPath,
    CallablePolicy,
    ConstantPolicy,
    Decision,
    StopIndicatorPath,
    TimeGrid,
    TruncationMode,
    fuel_process,
    indicator_of_stop_step,
    replay_policy,
    stop_time_of,
    total_variation,
    truncate_control,
)
from fuelgrid.problem import load_problem


def grid(n=4, t0=0.0, tN=1.0):
    return TimeGrid(t0, tN, n)


def path_from(grid_, plus, minus=None):
    plus = np.asarray(plus, dtype=float).reshape(grid_.n_steps, -1)
    minus = np.zeros_like(plus) if minus is None else np.asarray(minus, dtype=float).reshape(plus.shape)
    return BVControlPath(grid_, plus, minus)


class TestTimeGrid:
    def test_times_and_dt(self):
        g = grid(4)
        assert g.dt == 0.25
        assert np.allclose(g.times, [0, 0.25, 0.5, 0.75, 1.0])

    def test_rejects_bad(self):
        with pytest.raises(ValueError):
            TimeGrid(1.0, 1.0, 4)
        with pytest.raises(ValueError):
            TimeGrid(0.0, 1.0, 0)


class TestVariationAndFuel:
    def test_single_increment(self):
        g = grid(4)
        p = path_from(g, [0, 0, 0, 2.0])
        assert total_variation(p, 0, 4) == 2.0

    def test_zero_path(self):
        g = grid(4)
        assert total_variation(BVControlPath.zero(g, 1)) == 0.0

    def test_jordan_parts_add(self):
        g = grid(4)
        p = path_from(g, [0, 1.0, 0, 0], [0, 0, 1.0, 0])
        assert total_variation(p) == 2.0

    def test_monotone_in_to_step(self):
        g = grid(8)
        rng = np.random.Generator(np.random.Philox(3))
        p = path_from(g, rng.random(8), rng.random(8))
        vals = [total_variation(p, 0, k) for k in range(9)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_window_additivity(self):
        g = grid(8)
        rng = np.random.Generator(np.random.Philox(4))
        p = path_from(g, rng.random(8), rng.random(8))
        for a, b, c in [(0, 3, 8), (1, 4, 6), (2, 2, 5)]:
            assert total_variation(p, a, c) == pytest.approx(
                total_variation(p, a, b) + total_variation(p, b, c), abs=1e-14)

    def test_out_of_range(self):
        g = grid(4)
        p = BVControlPath.zero(g, 1)
        with pytest.raises(IndexError):
            total_variation(p, 0, 5)
        with pytest.raises(IndexError):
            total_variation(p, 3, 2)

    def test_fuel_constant_on_zero_path(self):
        g = grid(4)
        z = fuel_process(BVControlPath.zero(g, 1), 0.7)
        assert np.allclose(z, 0.7)

    def test_fuel_left_continuous_indexing(self):
        g = grid(4)
        p = path_from(g, [1.0, 0, 0, 0])
        assert np.allclose(fuel_process(p, 0.0), [0, 1, 1, 1, 1])

    def test_fuel_counts_both_signs(self):
        g = grid(4)
        p = path_from(g, [1.0, 0, 0, 0], [0, 1.0, 0, 0])
        assert fuel_process(p, 0.0)[-1] == 2.0

    def test_negative_increments_rejected(self):
        g = grid(2)
        with pytest.raises(ValueError):
            BVControlPath(g, np.array([[-0.1], [0.0]]), np.zeros((2, 1)))


class TestStopIndicator:
    def test_never_flipped_caps_at_horizon(self):
        g = grid(4)
        assert stop_time_of(StopIndicatorPath(g, None)) == g.tN

    def test_flip_time(self):
        g = grid(4)
        assert stop_time_of(indicator_of_stop_step(2, g)) == 0.5

    def test_flip_at_last_step_never_observed(self):
        g = grid(4)
        e = indicator_of_stop_step(4, g)
        assert np.allclose(e.values(), 0.0)

    def test_flip_at_zero(self):
        g = grid(4)
        e = indicator_of_stop_step(0, g)
        assert np.allclose(e.values(), [0, 1, 1, 1, 1])
        assert np.allclose(e.right_limits(), [1, 1, 1, 1, 1])

    @given(st.integers(min_value=1, max_value=4096), st.data())
    @settings(max_examples=60, deadline=None)
    def test_round_trips(self, n, data):
        g = TimeGrid(0.0, 1.0, n)
        k = data.draw(st.integers(min_value=0, max_value=n))
        e = indicator_of_stop_step(k, g)
        assert stop_time_of(e) == g.times[k]
        # time -> step -> time is the identity on grid stopping times
        step = int(np.searchsorted(g.times, stop_time_of(e)))
        assert step == k

    def test_values_monotone_and_binary(self):
        g = grid(7)
        for k in range(8):
            v = indicator_of_stop_step(k, g).values()
            assert set(np.unique(v)) <= {0.0, 1.0}
            assert np.all(np.diff(v) >= 0)
            assert v[0] == 0.0


class TestTruncation:
    def test_budget_not_reached(self):
        g = grid(4)
        p = path_from(g, [1.0, 1.0, 1.0, 0.0])
        out = truncate_control(p, 0, 5.0)
        assert np.array_equal(out.inc_plus, p.inc_plus)

    def test_zero_budget_zeroes_everything(self):
        g = grid(4)
        p = path_from(g, [1.0, 1.0, 1.0, 1.0])
        out = truncate_control(p, 1, 0.0)
        assert np.allclose(out.inc_plus[1:], 0.0)
        assert out.inc_plus[0, 0] == 1.0  # before from_step untouched

    def test_strict_drops_boundary_increment(self):
        g = grid(4)
        p = path_from(g, [0, 1.0, 1.0, 0])
        out = truncate_control(p, 0, 1.5, TruncationMode.STRICT)
        assert np.allclose(out.inc_plus.ravel(), [0, 1, 0, 0])

    def test_clip_keeps_partial(self):
        g = grid(4)
        p = path_from(g, [0, 1.0, 1.0, 0])
        out = truncate_control(p, 0, 1.5, TruncationMode.CLIP)
        assert np.allclose(out.inc_plus.ravel(), [0, 1, 0.5, 0])

    def test_negative_budget_rejected(self):
        g = grid(4)
        with pytest.raises(ValueError):
            truncate_control(BVControlPath.zero(g, 1), 0, -1.0)

    @given(st.data())
    @settings(max_examples=120, deadline=None)
    def test_invariants_random(self, data):
        n = data.draw(st.integers(min_value=1, max_value=12))
        seed = data.draw(st.integers(min_value=0, max_value=2 ** 31))
        rng = np.random.Generator(np.random.Philox(seed))
        g = TimeGrid(0.0, 1.0, n)
        p = path_from(g, rng.random(n) * rng.integers(0, 2, n),
                      rng.random(n) * rng.integers(0, 2, n))
        from_step = data.draw(st.integers(min_value=0, max_value=n))
        budget = data.draw(st.floats(min_value=0.0, max_value=3.0,
                                     allow_nan=False, allow_infinity=False))
        strict = truncate_control(p, from_step, budget, TruncationMode.STRICT)
        clip = truncate_control(p, from_step, budget, TruncationMode.CLIP)
        original = total_variation(p, from_step, n)
        assert total_variation(strict, from_step, n) <= budget + 1e-12
        assert total_variation(clip, from_step, n) == pytest.approx(
            min(budget, original), abs=1e-12)
        # prefix untouched
        assert np.array_equal(strict.inc_plus[:from_step], p.inc_plus[:from_step])
        assert np.array_equal(clip.inc_minus[:from_step], p.inc_minus[:from_step])


def tracking_spec():
    return load_problem({
        "horizon_T": 1.0, "start_t": 0.0,
        "dims": {"d": 1, "d_prime": 1, "l": 1},
        "drift": {"form": "constant", "value": [0.5]},
        "diffusion": {"form": "constant", "value": [[0.3]]},
        "running_gain": {"form": "zero"},
        "exit_gain": {"form": "zero"},
        "stop_gain": {"form": "zero"},
        "cost_plus": {"form": "constant", "value": [1.0]},
        "cost_minus": {"form": "constant", "value": [1.0]},
        "domain": {"form": "all"},
        "action_set": [[0.0]],
        "fuel": {"mode": "finite", "cap": 1.0},
        "payoff_floor": 0.0,
    })


class TestReplay:
    def test_constant_policy_zero_controls(self):
        g = grid(6)
        noise = np.zeros((6, 1))
        xi, eta, actions = replay_policy(ConstantPolicy(d=1), noise, g)
        assert total_variation(xi) == 0.0
        assert eta.flip_index is None
        assert np.all(actions == 0)

    def test_unconditional_stop_ignores_noise(self):
        g = grid(6)
        rng = np.random.Generator(np.random.Philox(9))
        for _ in range(3):
            noise = rng.standard_normal((6, 1))
            _, eta, _ = replay_policy(ConstantPolicy(d=1, stop_step=2), noise, g)
            assert eta.flip_index == 2

    def test_replay_deterministic(self):
        g = grid(8)
        rng = np.random.Generator(np.random.Philox(10))
        noise = rng.standard_normal((8, 1)) * np.sqrt(g.dt)

        def rule(k, prefix, state):
            lvl = float(prefix.sum()) if len(prefix) else 0.0
            inc = np.array([0.25]) if lvl > 0 else np.zeros(1)
            return Decision(lvl < -1.0, 0, inc, np.zeros(1))

        pol = CallablePolicy(rule, d=1)
        a = replay_policy(pol, noise, g)
        b = replay_policy(pol, noise, g)
        assert np.array_equal(a[0].inc_plus, b[0].inc_plus)
        assert a[1].flip_index == b[1].flip_index
        assert np.array_equal(a[2], b[2])

    def test_non_anticipative_prefix_swap(self):
        g = grid(8)
        rng = np.random.Generator(np.random.Philox(11))
        base = rng.standard_normal((8, 1))
        other = base.copy()
        other[5:] = -3.0  # perturb only the tail

        def rule(k, prefix, state):
            lvl = float(prefix.sum()) if len(prefix) else 0.0
            return Decision(False, 0, np.array([max(lvl, 0.0)]), np.zeros(1))

        pol = CallablePolicy(rule, d=1)
        xi_a, _, _ = replay_policy(pol, base, g)
        xi_b, _, _ = replay_policy(pol, other, g)
        assert np.array_equal(xi_a.inc_plus[:6], xi_b.inc_plus[:6])

    def test_negative_increment_rejected(self):
        g = grid(4)
        pol = CallablePolicy(lambda k, p, s: Decision(False, 0, np.array([-1.0]), np.zeros(1)), d=1)
        with pytest.raises(ValueError, match="negative increment"):
            replay_policy(pol, np.zeros((4, 1)), g)

    def test_stop_freezes_actions_and_increments(self):
        g = grid(6)

        def rule(k, prefix, state):
            return Decision(k == 2, k, np.array([0.1]), np.zeros(1))

        xi, eta, actions = replay_policy(CallablePolicy(rule, d=1), np.zeros((6, 1)), g)
        assert eta.flip_index == 2
        assert np.allclose(xi.inc_plus[2:], 0.0)
        assert list(actions) == [0, 1, 2, 2, 2, 2]

    def test_finite_fuel_strict_enforcement(self):
        spec = tracking_spec()
        g = grid(8)
        pol = ConstantPolicy(d=1, inc_plus=np.array([0.3]))
        xi, _, _ = replay_policy(pol, np.zeros((8, 1)), g, state_track=(spec, [0.0], 0.0))
        # increments of 0.3 against a budget of 1.0: the fourth (cum 1.2 > 1) is dropped
        assert total_variation(xi) == pytest.approx(0.9)
        assert np.allclose(xi.inc_plus.ravel(), [0.3, 0.3, 0.3, 0, 0, 0, 0, 0])

    def test_exact_exhaustion_kept_at_replay(self):
        spec = tracking_spec()
        g = grid(8)
        pol = ConstantPolicy(d=1, inc_plus=np.array([0.25]))
        xi, _, _ = replay_policy(pol, np.zeros((8, 1)), g, state_track=(spec, [0.0], 0.0))
        # four quanta reach the budget exactly; admissible, so all are kept
        assert total_variation(xi) == pytest.approx(1.0)
        assert np.allclose(xi.inc_plus.ravel(), [0.25, 0.25, 0.25, 0.25, 0, 0, 0, 0])

    def test_path_csv_export(self, tmp_path):
        from fuelgrid.controls import control_path_to_csv

        g = grid(3)
        p = path_from(g, [0.5, 0.0, 0.25], [0.0, 0.1, 0.0])
        out = tmp_path / "path.csv"
        control_path_to_csv(p, indicator_of_stop_step(1, g), out)
        lines = out.read_text().splitlines()
        assert lines[0] == "time,inc_plus_0,inc_minus_0,eta"
        assert len(lines) == 4
        assert lines[1].startswith("0.0,0.5,0.0,0.0")
