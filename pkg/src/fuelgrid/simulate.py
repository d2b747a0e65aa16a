"""Noise generation and forward integration of the controlled state equation.

Paths are driven by independent per-path substreams keyed by (seed, path
index) through a counter-based bit generator, so results do not depend on how
work is chunked across threads.  The one-step scheme is Euler-Maruyama with
predictable (left-point) controls: the policy is queried on the noise prefix
and the current state before the step's noise increment enters the update,
and the control jump decided at a step lands in the next state value
(diffusion first, then jump).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .controls import BVControlPath, NoiseFunctionalPolicy, StopIndicatorPath, TimeGrid
from .problem import FiniteFuel, ProblemSpec, batched_spec

__all__ = [
    "PathBundle",
    "PathView",
    "SimulationError",
    "simulate_paths",
    "exit_time",
    "variation_moment",
    "bundle_to_csv",
    "bundle_to_binary",
    "path_generator",
    "generate_noise",
]

NO_STOP = -1  # flip_index sentinel: indicator never flips, stop time capped at T


class SimulationError(RuntimeError):
    pass


def path_generator(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based substream for one path, keyed by (seed, path index)."""
    key = np.array([np.uint64(seed), np.uint64(path_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def generate_noise(
    seed: int,
    n_paths: int,
    grid: TimeGrid,
    d_prime: int,
    antithetic: bool = False,
    construction: str = "increments",
) -> np.ndarray:
    """Brownian increments, shape (n_paths, n_steps, d_prime), scaled by sqrt(dt).

    ``construction="increments"`` draws the per-step increments directly;
    ``construction="bridge"`` builds each path by dyadic midpoint refinement of
    the terminal value (a different construction of the same law; requires a
    power-of-two step count).  Antithetic pairing maps path 2i+1 to the negated
    draw of the substream shared with path 2i.
    """
    n = grid.n_steps
    out = np.empty((n_paths, n, d_prime))
    if construction == "bridge" and (n & (n - 1)) != 0:
        raise ValueError("bridge construction needs a power-of-two number of steps")
    for p in range(n_paths):
        stream_idx = p // 2 if antithetic else p
        flip = antithetic and (p % 2 == 1)
        rng = path_generator(seed, stream_idx)
        if construction == "increments":
            z = rng.standard_normal((n, d_prime)) * np.sqrt(grid.dt)
        elif construction == "bridge":
            z = _bridge_increments(rng, n, d_prime, grid.tN - grid.t0)
        else:
            raise ValueError(f"unknown noise construction '{construction}'")
        out[p] = -z if flip else z
    return out


def _bridge_increments(rng: np.random.Generator, n: int, d_prime: int, span: float) -> np.ndarray:
    # Levy construction: terminal value first, then midpoints level by level.
    w = np.zeros((n + 1, d_prime))
    w[n] = rng.standard_normal(d_prime) * np.sqrt(span)
    step = n
    while step > 1:
        half = step // 2
        lefts = np.arange(0, n, step)
        mids = lefts + half
        var = half * (span / n) / 2.0  # Var[W_mid | W_left, W_right] for equal arms
        w[mids] = 0.5 * (w[lefts] + w[lefts + step]) + rng.standard_normal(
            (lefts.size, d_prime)) * np.sqrt(var)
        step = half
    return np.diff(w, axis=0)


class PathView(NamedTuple):
    """Read-only view of a single path of a bundle."""

    grid: TimeGrid
    noise: np.ndarray
    states: np.ndarray
    fuel: np.ndarray
    actions: np.ndarray
    inc_plus: np.ndarray
    inc_minus: np.ndarray
    flip_index: int
    rho_step: int

    @property
    def tau_step(self) -> int:
        return self.grid.n_steps if self.flip_index == NO_STOP else self.flip_index

    def control_path(self) -> BVControlPath:
        return BVControlPath(self.grid, self.inc_plus, self.inc_minus)

    def indicator(self) -> StopIndicatorPath:
        return StopIndicatorPath(self.grid, None if self.flip_index == NO_STOP else self.flip_index)


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Simulated trajectories: noise, states, fuel, controls, stop/exit steps."""

    grid: TimeGrid
    noise: np.ndarray       # (n_paths, n_steps, d_prime)
    states: np.ndarray      # (n_paths, n_steps + 1, d)
    fuel: np.ndarray        # (n_paths, n_steps + 1)
    actions: np.ndarray     # (n_paths, n_steps) int
    inc_plus: np.ndarray    # (n_paths, n_steps, d)
    inc_minus: np.ndarray   # (n_paths, n_steps, d)
    flip_index: np.ndarray  # (n_paths,) int, NO_STOP when never stopped
    rho_step: np.ndarray    # (n_paths,) int
    seed: int

    def __post_init__(self) -> None:
        for name in ("noise", "states", "fuel", "actions",
                     "inc_plus", "inc_minus", "flip_index", "rho_step"):
            arr = getattr(self, name)
            arr.flags.writeable = False

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    @property
    def tau_step(self) -> np.ndarray:
        return np.where(self.flip_index == NO_STOP, self.grid.n_steps, self.flip_index)

    def path(self, i: int) -> PathView:
        return PathView(self.grid, self.noise[i], self.states[i], self.fuel[i],
                        self.actions[i], self.inc_plus[i], self.inc_minus[i],
                        int(self.flip_index[i]), int(self.rho_step[i]))


def _first_exit_steps(spec: ProblemSpec, states: np.ndarray, fuel: np.ndarray) -> np.ndarray:
    spec_b = batched_spec(spec)
    inside = np.asarray(spec_b.domain_indicator(states, fuel), dtype=bool)
    outside = ~inside
    n_steps = states.shape[1] - 1
    any_out = outside.any(axis=1)
    first = np.argmax(outside, axis=1)
    return np.where(any_out, first, n_steps).astype(np.int64)


def simulate_paths(
    spec: ProblemSpec,
    policy: NoiseFunctionalPolicy,
    x0,
    z0: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    antithetic: bool = False,
    noise_construction: str = "increments",
    threads: int = 1,
) -> PathBundle:
    """Integrate the controlled state under a policy on fresh noise.

    Identical (seed, inputs) give a bit-identical bundle regardless of thread
    count: noise comes from per-path substreams and the dynamics are pure.
    """
    if abs(grid.t0 - spec.start_t) > 1e-12:
        raise ValueError(f"grid starts at {grid.t0}, problem starts at {spec.start_t}")
    if isinstance(spec.fuel_mode, FiniteFuel) and not 0.0 <= z0 <= spec.fuel_mode.cap + 1e-12:
        raise ValueError(f"z0={z0} outside [0, {spec.fuel_mode.cap}]")
    if z0 < 0:
        raise ValueError("z0 must be >= 0")

    noise = generate_noise(seed, n_paths, grid, spec.d_prime, antithetic, noise_construction)
    states, fuel, actions, incp, incm, flip = _integrate(
        spec, policy, x0, z0, grid, noise, threads)
    rho = _first_exit_steps(spec, states, fuel)
    return PathBundle(grid, noise, states, fuel, actions, incp, incm, flip, rho, seed)


def _integrate(spec, policy, x0, z0, grid, noise, threads=1):
    n_paths = noise.shape[0]
    if threads > 1 and n_paths > 1:
        from concurrent.futures import ThreadPoolExecutor

        chunks = np.array_split(np.arange(n_paths), min(threads, n_paths))
        parts = [None] * len(chunks)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futs = {pool.submit(_integrate_block, spec, policy, x0, z0, grid,
                                noise[c]): i for i, c in enumerate(chunks) if c.size}
            for fut, i in futs.items():
                parts[i] = fut.result()
        parts = [p for p in parts if p is not None]
        return tuple(np.concatenate([p[j] for p in parts], axis=0) for j in range(6))
    return _integrate_block(spec, policy, x0, z0, grid, noise)


def _integrate_block(spec, policy, x0, z0, grid, noise):
    spec_b = batched_spec(spec)
    n_paths, n, d_prime = noise.shape
    d = spec.d
    dt = grid.dt
    x0 = np.asarray(x0, dtype=float).reshape(d)

    states = np.empty((n_paths, n + 1, d))
    fuel = np.empty((n_paths, n + 1))
    actions = np.zeros((n_paths, n), dtype=np.int64)
    incp = np.zeros((n_paths, n, d))
    incm = np.zeros((n_paths, n, d))
    flip = np.full(n_paths, NO_STOP, dtype=np.int64)

    states[:, 0] = x0
    fuel[:, 0] = z0
    budget = spec.fuel_mode.cap - z0 if isinstance(spec.fuel_mode, FiniteFuel) else np.inf
    used = np.zeros(n_paths)
    exhausted = np.zeros(n_paths, dtype=bool)
    frozen_action = np.zeros(n_paths, dtype=np.int64)

    policy.begin(n_paths)
    for k in range(n):
        x = states[:, k]
        z = fuel[:, k]
        stop_k, act_k, dp, dm = policy.decide_many(k, noise[:, :k], x, z)
        dp = np.asarray(dp, dtype=float)
        dm = np.asarray(dm, dtype=float)
        if np.any(dp < 0) or np.any(dm < 0):
            bad = int(np.nonzero((dp < 0).any(axis=1) | (dm < 0).any(axis=1))[0][0])
            raise SimulationError(f"policy emitted a negative increment (path {bad}, step {k})")

        stopped = flip != NO_STOP
        newly = (~stopped) & np.asarray(stop_k, dtype=bool)
        flip[newly] = k
        frozen_action[newly] = act_k[newly]
        live = ~(stopped | newly)

        actions[:, k] = np.where(stopped | newly, frozen_action, act_k)
        vol = dp.sum(axis=1) + dm.sum(axis=1)
        if np.isfinite(budget):
            # only a strict overshoot is inadmissible; exact exhaustion stays
            exhausted |= live & (vol > 0) & (used + vol > budget * (1 + 1e-12) + 1e-15)
        apply = live & ~exhausted
        incp[apply, k] = dp[apply]
        incm[apply, k] = dm[apply]
        used[apply] += vol[apply]

        t_k = float(grid.times[k])
        a = spec.action_set[actions[:, k]]
        mu = np.asarray(spec_b.drift(t_k, x, a), dtype=float).reshape(n_paths, d)
        sig = np.asarray(spec_b.diffusion(t_k, x, a), dtype=float).reshape(n_paths, d, d_prime)
        nxt = x + mu * dt + np.einsum("pij,pj->pi", sig, noise[:, k]) + incp[:, k] - incm[:, k]
        if not np.all(np.isfinite(nxt)):
            bad = int(np.nonzero(~np.isfinite(nxt).all(axis=1))[0][0])
            raise SimulationError(
                f"non-finite state produced at path {bad}, step {k + 1}: check coefficients")
        states[:, k + 1] = nxt
        fuel[:, k + 1] = z + vol * apply

    return states, fuel, actions, incp, incm, flip


def exit_time(bundle: PathBundle, spec: ProblemSpec) -> np.ndarray:
    """First grid step outside the domain, capped at n_steps, per path."""
    return _first_exit_steps(spec, bundle.states, bundle.fuel)


def variation_moment(bundle: PathBundle, exponent: float) -> tuple[float, float]:
    """Monte Carlo estimate (mean, stderr) of the p-th moment of the total variation."""
    var = (bundle.inc_plus + bundle.inc_minus).sum(axis=(1, 2))
    vals = var ** exponent
    n = len(vals)
    se = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(vals.mean()), se


def bundle_to_csv(bundle: PathBundle, fname) -> None:
    """Long format: path, step, time, X..., Z, action, inc_plus..., inc_minus..., eta."""
    import csv

    n, k1, d = bundle.states.shape
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step", "time"]
                   + [f"x_{i}" for i in range(d)] + ["z", "action"]
                   + [f"inc_plus_{i}" for i in range(d)]
                   + [f"inc_minus_{i}" for i in range(d)] + ["eta"])
        for p in range(n):
            fi = bundle.flip_index[p]
            for s in range(k1):
                eta = 0.0 if fi == NO_STOP else float(s > fi)
                last = s == k1 - 1
                w.writerow(
                    [p, s, repr(float(bundle.grid.times[s]))]
                    + [repr(float(v)) for v in bundle.states[p, s]]
                    + [repr(float(bundle.fuel[p, s]))]
                    + [int(bundle.actions[p, s]) if not last else ""]
                    + ([repr(float(v)) for v in bundle.inc_plus[p, s]] if not last else [""] * d)
                    + ([repr(float(v)) for v in bundle.inc_minus[p, s]] if not last else [""] * d)
                    + [repr(eta)])


_MAGIC = b"FGPB"


def bundle_to_binary(bundle: PathBundle, fname) -> None:
    """Compact dump: header then little-endian float64 arrays (see docs/binary_format.md)."""
    n, k1, d = bundle.states.shape
    d_prime = bundle.noise.shape[2]
    with open(fname, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQQQQq", 1, n, k1 - 1, d, d_prime, bundle.seed))
        fh.write(struct.pack("<ddq", bundle.grid.t0, bundle.grid.tN, bundle.grid.n_steps))
        for arr in (bundle.noise, bundle.states, bundle.fuel,
                    bundle.inc_plus, bundle.inc_minus):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for arr in (bundle.actions, bundle.flip_index, bundle.rho_step):
            fh.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())
