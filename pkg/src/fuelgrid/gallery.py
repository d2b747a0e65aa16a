"""Built-in benchmark instances and the randomized oracle-instance generator.

Four named desk-scale benchmarks exercise the four features of the problem
class: pure discretionary stopping, a deterministic drift follower with fuel,
a stochastic mean-reverting follower with fuel, and an exit-domain instance.
``random_oracle_instance`` draws small instances whose feedback-map count is
enumerable, for oracle-vs-solver equivalence sweeps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import ProblemSpec, load_problem
from .solver import Lattice, TransitionModel, build_lattice

__all__ = [
    "BenchInstance",
    "stopping_only",
    "drift_follower",
    "fuel_follower",
    "exit_domain",
    "gallery",
    "random_oracle_instance",
]


@dataclass(frozen=True, eq=False)
class BenchInstance:
    name: str
    config: dict
    state_bounds: list
    state_points: list
    n_steps: int
    x0: list
    z0: float
    mc_paths: int = 10_000

    def spec(self) -> ProblemSpec:
        return load_problem(self.config)

    def build(self) -> tuple[ProblemSpec, Lattice, TransitionModel]:
        spec = self.spec()
        lat, tr = build_lattice(spec, self.state_bounds, self.state_points,
                                self.n_steps, x0=self.x0, z0=self.z0)
        return spec, lat, tr

    @property
    def stochastic(self) -> bool:
        return self.config["diffusion"]["form"] != "zero"


def stopping_only() -> BenchInstance:
    """Stop-or-wait tradeoff: the stop gain grows in x^2 but decays in time."""
    cfg = {
        "horizon_T": 1.0, "start_t": 0.0,
        "dims": {"d": 1, "d_prime": 1, "l": 1},
        "drift": {"form": "zero"},
        "diffusion": {"form": "constant", "value": [[0.35]]},
        "running_gain": {"form": "zero"},
        "exit_gain": {"form": "scaled_exp", "rate": -0.5,
                      "terms": [{"coef": 0.25, "x_powers": [2]}]},
        "stop_gain": {"form": "scaled_exp", "rate": -0.5,
                      "terms": [{"coef": 0.3, "x_powers": [2]}, {"coef": 0.02}]},
        "cost_plus": {"form": "constant", "value": [5.0]},
        "cost_minus": {"form": "constant", "value": [5.0]},
        "domain": {"form": "all"},
        "action_set": [[0.0]],
        "fuel": {"mode": "finite", "cap": 0.0},
        "payoff_floor": 0.0,
    }
    return BenchInstance("stopping_only", cfg, [(-2.0, 2.0)], [33], 32, [0.0], 0.0)


def drift_follower() -> BenchInstance:
    """Deterministic steering with fuel: drift +-2 by action, one-quantum pushes.

    Sized exactly 4 time steps x 7 states x 3 fuel levels x 2 actions with a
    one-successor stencil, so the brute-force oracle enumerates it quickly.
    """
    cfg = {
        "horizon_T": 1.0, "start_t": 0.0,
        "dims": {"d": 1, "d_prime": 1, "l": 1},
        "drift": {"form": "affine", "A": [[0.0]], "b": [2.0], "B": [[-4.0]]},
        "diffusion": {"form": "zero"},
        "running_gain": {"form": "polynomial", "terms": [{"coef": -1.0, "x_powers": [2]}]},
        "exit_gain": {"form": "polynomial",
                      "terms": [{"coef": -0.5, "x_powers": [2]}, {"coef": 1.0}]},
        "stop_gain": {"form": "polynomial",
                      "terms": [{"coef": -0.5, "x_powers": [2]}, {"coef": 0.8}]},
        "cost_plus": {"form": "constant", "value": [0.3]},
        "cost_minus": {"form": "constant", "value": [0.4]},
        "domain": {"form": "all"},
        "action_set": [[0.0], [1.0]],
        "fuel": {"mode": "finite", "cap": 1.0},
        "payoff_floor": 10.0,
    }
    return BenchInstance("drift_follower", cfg, [(-1.5, 1.5)], [7], 4, [0.0], 0.0)


def fuel_follower(level: int = 0) -> BenchInstance:
    """Mean-reverting target tracking with costly one-quantum pushes.

    ``level`` refines the grid: spacing halves and the step count quadruples
    per level (the fuel cap stays on the grid at every level).  This is the
    1-D Lipschitz benchmark used for the refinement study.
    """
    cfg = {
        "horizon_T": 0.5, "start_t": 0.0,
        "dims": {"d": 1, "d_prime": 1, "l": 1},
        "drift": {"form": "affine", "A": [[-0.5]], "b": [0.0], "B": [[0.0]]},
        "diffusion": {"form": "constant", "value": [[0.4]]},
        "running_gain": {"form": "polynomial",
                         "terms": [{"coef": -0.8, "x_powers": [2]},
                                   {"coef": 0.96, "x_powers": [1]},
                                   {"coef": -0.288}]},   # -0.8 (x - 0.6)^2
        "exit_gain": {"form": "polynomial",
                      "terms": [{"coef": -0.4, "x_powers": [2]},
                                {"coef": 0.48, "x_powers": [1]},
                                {"coef": 0.656}]},       # 0.8 - 0.4 (x - 0.6)^2
        "stop_gain": {"form": "polynomial",
                      "terms": [{"coef": -0.4, "x_powers": [2]},
                                {"coef": 0.48, "x_powers": [1]},
                                {"coef": 0.456}]},       # 0.6 - 0.4 (x - 0.6)^2
        "cost_plus": {"form": "constant", "value": [0.15]},
        "cost_minus": {"form": "constant", "value": [0.15]},
        "domain": {"form": "all"},
        "action_set": [[0.0]],
        "fuel": {"mode": "finite", "cap": 0.5},
        "payoff_floor": 5.0,
    }
    points = 33 * 2 ** level - (2 ** level - 1)  # spacing h = 0.125 / 2**level
    steps = 32 * 4 ** level
    return BenchInstance("fuel_follower", cfg, [(-2.0, 2.0)], [points], steps, [0.0], 0.0)


def exit_domain() -> BenchInstance:
    """Survival play on an interval: time alive pays, exiting pays nothing."""
    cfg = {
        "horizon_T": 0.5, "start_t": 0.0,
        "dims": {"d": 1, "d_prime": 1, "l": 1},
        "drift": {"form": "affine", "A": [[0.0]], "b": [-0.4], "B": [[0.8]]},
        "diffusion": {"form": "constant", "value": [[0.5]]},
        "running_gain": {"form": "constant", "value": 0.5},
        "exit_gain": {"form": "zero"},
        "stop_gain": {"form": "constant", "value": 0.1},
        "cost_plus": {"form": "constant", "value": [0.2]},
        "cost_minus": {"form": "constant", "value": [0.2]},
        "domain": {"form": "box", "x_lower": [-1.0], "x_upper": [1.0]},
        "action_set": [[0.0], [1.0]],
        "fuel": {"mode": "finite", "cap": 0.5},
        "payoff_floor": 0.0,
    }
    return BenchInstance("exit_domain", cfg, [(-1.25, 1.25)], [21], 16, [0.0], 0.0)


def gallery() -> list[BenchInstance]:
    return [stopping_only(), drift_follower(), fuel_follower(), exit_domain()]


def random_oracle_instance(seed: int):
    """Small randomized instance with an enumerable feedback-map space.

    Draws either a deterministic one-successor instance (drift lands exactly
    one spacing per step) over up to 4 steps, or a stochastic instance over 2
    steps; fuel mode, gains, costs, actions, and the domain are randomized.
    Returns (spec, lattice, transitions).
    """
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0xABCD], dtype=np.uint64)))
    deterministic = rng.random() < 0.55
    h = 0.5
    if deterministic:
        n_steps = int(rng.integers(3, 5))
        n_points = int(rng.integers(5, 8))
        T = float(n_steps * h / 2.0)          # dt = h / 2, so |mu| = 1 lands one node
        dt = T / n_steps
        sigma = 0.0
        mu_scale = h / dt
    else:
        n_steps = 2
        n_points = int(rng.integers(5, 8))
        T = 0.5
        dt = T / n_steps
        case = int(rng.integers(0, 3))
        if case == 0:      # binomial: diffusion takes the whole stencil budget
            sigma = float(np.sqrt(h * h / dt))
            mu_scale = 0.0
        elif case == 1:    # half diffusion, half upwind drift
            sigma = float(np.sqrt(h * h / (2 * dt)))
            mu_scale = h / (2 * dt)
        else:              # half diffusion, positive stay mass
            sigma = float(np.sqrt(h * h / (2 * dt)))
            mu_scale = 0.0
    n_actions = int(rng.integers(1, 3))
    if n_actions == 2:
        drift = {"form": "affine", "A": [[0.0]], "b": [mu_scale],
                 "B": [[-2.0 * mu_scale]]}   # actions 0 / 1 flip the drift sign
        actions = [[0.0], [1.0]]
    else:
        drift = {"form": "constant", "value": [mu_scale * float(rng.choice([-1.0, 1.0]))]}
        actions = [[0.0]]

    def rpoly(scale):
        return {"form": "polynomial", "terms": [
            {"coef": float(rng.uniform(-scale, scale)), "x_powers": [2]},
            {"coef": float(rng.uniform(-scale, scale)), "x_powers": [1]},
            {"coef": float(rng.uniform(-scale, scale))},
            {"coef": float(rng.uniform(-0.2, 0.2)), "z_power": 1},
        ]}

    finite = rng.random() < 0.75
    if finite:
        n_fuel_levels = int(rng.integers(2, 4))
        fuel = {"mode": "finite", "cap": float(h * (n_fuel_levels - 1))}
        cost_lo = 0.05
    else:
        fuel = {"mode": "infinite", "variation_exponent": 1.0}
        cost_lo = 0.25  # cyclic exertion must price to -inf: keep costs positive
    use_domain = rng.random() < 0.4
    half_width = h * (n_points - 1) / 2.0
    domain = ({"form": "box", "x_lower": [-half_width + h], "x_upper": [half_width - h]}
              if use_domain and n_points >= 7 else {"form": "all"})
    cfg = {
        "horizon_T": T, "start_t": 0.0,
        "dims": {"d": 1, "d_prime": 1, "l": 1},
        "drift": drift,
        "diffusion": {"form": "constant", "value": [[sigma]]},
        "running_gain": rpoly(0.8),
        "exit_gain": rpoly(0.6),
        "stop_gain": rpoly(0.6),
        "cost_plus": {"form": "constant", "value": [float(rng.uniform(cost_lo, 0.6))]},
        "cost_minus": {"form": "constant", "value": [float(rng.uniform(cost_lo, 0.6))]},
        "domain": domain,
        "action_set": actions,
        "fuel": fuel,
        "payoff_floor": 50.0,
    }
    spec = load_problem(cfg)
    lat, tr = build_lattice(spec, [(-half_width, half_width)], [n_points], n_steps,
                            x0=[0.0], z0=0.0)
    return spec, lat, tr
