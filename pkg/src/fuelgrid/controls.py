"""Discrete-time singular controls, stopping indicators, and their calculus.

A control path lives on a uniform time grid and is stored through the
increments of its two monotone (Jordan) components.  Stopping decisions are
stored as a 0/1 indicator path that flips once; the flip step and the
stopping time determine each other exactly on the grid.  Policies are
deterministic functionals of the observed noise (optionally of the induced
state) and are replayed step by step, never reading increments at or past
the current step.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "TimeGrid",
    "BVControlPath",
    "StopIndicatorPath",
    "Decision",
    "NoiseFunctionalPolicy",
    "ConstantPolicy",
    "CallablePolicy",
    "TruncationMode",
    "total_variation",
    "fuel_process",
    "stop_time_of",
    "indicator_of_stop_step",
    "truncate_control",
    "replay_policy",
    "control_path_to_csv",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [t0, tN] with n_steps intervals (n_steps + 1 times)."""

    t0: float
    tN: float
    n_steps: int

    def __post_init__(self) -> None:
        if not self.tN > self.t0:
            raise ValueError(f"tN={self.tN} must exceed t0={self.t0}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def dt(self) -> float:
        return (self.tN - self.t0) / self.n_steps

    @cached_property
    def times(self) -> np.ndarray:
        ts = np.linspace(self.t0, self.tN, self.n_steps + 1)
        ts.flags.writeable = False
        return ts


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class BVControlPath:
    """Grid-aligned bounded-variation control, stored as per-step increments.

    ``inc_plus[k]`` and ``inc_minus[k]`` (both >= 0 entrywise, shape
    ``(n_steps, d)``) are the jumps of the two monotone components applied at
    ``times[k]``.  The path value at a grid time excludes the increment
    scheduled at that time (left continuity), so the path starts at zero.
    """

    grid: TimeGrid
    inc_plus: np.ndarray
    inc_minus: np.ndarray

    def __post_init__(self) -> None:
        ip = np.atleast_2d(np.asarray(self.inc_plus, dtype=float))
        im = np.atleast_2d(np.asarray(self.inc_minus, dtype=float))
        if ip.shape != im.shape:
            raise ValueError(f"increment shapes differ: {ip.shape} vs {im.shape}")
        if ip.shape[0] != self.grid.n_steps:
            raise ValueError(
                f"expected {self.grid.n_steps} increment rows, got {ip.shape[0]}"
            )
        if np.any(ip < 0.0) or np.any(im < 0.0):
            raise ValueError("increments of the monotone components must be >= 0")
        object.__setattr__(self, "inc_plus", _readonly(ip))
        object.__setattr__(self, "inc_minus", _readonly(im))

    @property
    def d(self) -> int:
        return self.inc_plus.shape[1]

    def levels(self) -> np.ndarray:
        """Path values at the grid times, shape (n_steps + 1, d)."""
        net = self.inc_plus - self.inc_minus
        out = np.zeros((self.grid.n_steps + 1, self.d))
        np.cumsum(net, axis=0, out=out[1:])
        return out

    def step_variation(self) -> np.ndarray:
        """Variation contributed by each step, shape (n_steps,)."""
        return (self.inc_plus + self.inc_minus).sum(axis=1)

    @staticmethod
    def zero(grid: TimeGrid, d: int) -> "BVControlPath":
        z = np.zeros((grid.n_steps, d))
        return BVControlPath(grid, z, z)


@dataclass(frozen=True)
class StopIndicatorPath:
    """Left-continuous 0/1 stopping indicator with a single flip.

    The indicator equals 1 exactly after ``times[flip_index]``; with
    ``flip_index=None`` it stays 0 on the whole horizon (stop time capped at
    the horizon).
    """

    grid: TimeGrid
    flip_index: int | None

    def __post_init__(self) -> None:
        if self.flip_index is not None:
            fi = int(self.flip_index)
            if not 0 <= fi <= self.grid.n_steps:
                raise ValueError(f"flip_index {fi} outside [0, {self.grid.n_steps}]")
            object.__setattr__(self, "flip_index", fi)

    @property
    def stop_step(self) -> int:
        """Grid step of the stopping time (n_steps when never flipped)."""
        return self.grid.n_steps if self.flip_index is None else self.flip_index

    def values(self) -> np.ndarray:
        """Indicator at the grid times (left limits), shape (n_steps + 1,)."""
        idx = np.arange(self.grid.n_steps + 1)
        if self.flip_index is None:
            return np.zeros_like(idx, dtype=float)
        return (idx > self.flip_index).astype(float)

    def right_limits(self) -> np.ndarray:
        """Right limits of the indicator at the grid times."""
        idx = np.arange(self.grid.n_steps + 1)
        if self.flip_index is None:
            return np.zeros_like(idx, dtype=float)
        return (idx >= self.flip_index).astype(float)


def total_variation(path: BVControlPath, from_step: int = 0, to_step: int | None = None) -> float:
    """Total variation accumulated by steps in [from_step, to_step)."""
    n = path.grid.n_steps
    if to_step is None:
        to_step = n
    if not 0 <= from_step <= to_step <= n:
        raise IndexError(f"step window [{from_step}, {to_step}) outside [0, {n}]")
    return float(path.step_variation()[from_step:to_step].sum())


def fuel_process(path: BVControlPath, z0: float) -> np.ndarray:
    """Cumulated variation z0 + V[0, k) at every grid time, shape (n_steps + 1,).

    Left-continuous convention: the increment at step k shows up from index
    k + 1 on.
    """
    if z0 < 0:
        raise ValueError("initial fuel coordinate must be >= 0")
    out = np.empty(path.grid.n_steps + 1)
    out[0] = z0
    np.cumsum(path.step_variation(), out=out[1:])
    out[1:] += z0
    return out


def stop_time_of(indicator: StopIndicatorPath) -> float:
    """First time the indicator is 1, capped at the horizon."""
    if indicator.flip_index is None:
        return indicator.grid.tN
    return float(indicator.grid.times[indicator.flip_index])


def indicator_of_stop_step(stop_step: int, grid: TimeGrid) -> StopIndicatorPath:
    """Indicator path that flips just after times[stop_step]."""
    if not 0 <= stop_step <= grid.n_steps:
        raise IndexError(f"stop_step {stop_step} outside [0, {grid.n_steps}]")
    return StopIndicatorPath(grid, stop_step)


class TruncationMode(enum.Enum):
    STRICT = "strict"
    CLIP = "clip"


def truncate_control(
    path: BVControlPath,
    from_step: int,
    budget: float,
    mode: TruncationMode = TruncationMode.STRICT,
) -> BVControlPath:
    """Cut the control once its variation after ``from_step`` reaches the budget.

    STRICT zeroes every increment from the first step whose cumulative
    variation reaches >= budget, dropping the boundary increment itself (the
    left-continuous stopped path never includes the jump at the cut).  CLIP
    additionally keeps a scaled partial increment at the cut so the retained
    variation equals min(budget, original variation).
    """
    if budget < 0:
        raise ValueError("truncation budget must be >= 0")
    n = path.grid.n_steps
    if not 0 <= from_step <= n:
        raise IndexError(f"from_step {from_step} outside [0, {n}]")
    step_var = path.step_variation()
    cum = np.cumsum(step_var[from_step:])
    hit = np.nonzero(cum >= budget)[0]
    if hit.size == 0:
        return path
    cut = from_step + int(hit[0])
    ip = path.inc_plus.copy()
    im = path.inc_minus.copy()
    ip[cut:] = 0.0
    im[cut:] = 0.0
    if mode is TruncationMode.CLIP and step_var[cut] > 0.0:
        before = cum[hit[0]] - step_var[cut]
        scale = (budget - before) / step_var[cut]
        ip[cut] = path.inc_plus[cut] * scale
        im[cut] = path.inc_minus[cut] * scale
    return BVControlPath(path.grid, ip, im)


@dataclass(frozen=True, eq=False)
class Decision:
    """One-step output of a policy: stop flag, classical action, increments."""

    stop: bool
    action_index: int
    inc_plus: np.ndarray
    inc_minus: np.ndarray

    @staticmethod
    def hold(d: int, action_index: int = 0) -> "Decision":
        z = np.zeros(d)
        return Decision(False, action_index, z, z)


class NoiseFunctionalPolicy:
    """Deterministic decision rule driven by the observed noise history.

    ``decide(k, noise_prefix, state)`` is called once per step with the noise
    increments of indices < k (non-anticipativity is structural) and, when the
    caller tracks the state, the current (x, z).  Policies needing per-path
    memory may use ``begin(n_paths)``; outputs must be a pure function of the
    query sequence.  ``decide_many`` is an optional batched fast path used by
    the simulator; the default falls back to per-path scalar calls.
    """

    def begin(self, n_paths: int) -> None:
        pass

    def decide(self, k: int, noise_prefix: np.ndarray, state) -> Decision:
        raise NotImplementedError

    vectorized = False

    def decide_many(self, k, noise_block, x_block, z_block):
        """Batched decisions: returns (stop, action, inc_plus, inc_minus) arrays."""
        n = noise_block.shape[0]
        d = x_block.shape[1] if x_block is not None else self._d_hint()
        stop = np.zeros(n, dtype=bool)
        action = np.zeros(n, dtype=np.int64)
        incp = np.zeros((n, d))
        incm = np.zeros((n, d))
        for i in range(n):
            state = None
            if x_block is not None:
                state = (x_block[i], float(z_block[i]))
            dec = self.decide(k, noise_block[i], state)
            stop[i] = dec.stop
            action[i] = dec.action_index
            incp[i] = dec.inc_plus
            incm[i] = dec.inc_minus
        return stop, action, incp, incm

    def _d_hint(self) -> int:
        raise ValueError("open-loop batched replay needs a state dimension hint")


class ConstantPolicy(NoiseFunctionalPolicy):
    """Fixed action and fixed per-step increments, optionally stopping at a step."""

    vectorized = True

    def __init__(self, d: int, action_index: int = 0, inc_plus=None, inc_minus=None,
                 stop_step: int | None = None):
        self.d = d
        self.action_index = action_index
        self.inc_plus = np.zeros(d) if inc_plus is None else np.asarray(inc_plus, dtype=float)
        self.inc_minus = np.zeros(d) if inc_minus is None else np.asarray(inc_minus, dtype=float)
        self.stop_step = stop_step

    def decide(self, k, noise_prefix, state):
        if self.stop_step is not None and k == self.stop_step:
            return Decision(True, self.action_index, np.zeros(self.d), np.zeros(self.d))
        return Decision(False, self.action_index, self.inc_plus, self.inc_minus)

    def decide_many(self, k, noise_block, x_block, z_block):
        n = noise_block.shape[0]
        stop = np.full(n, self.stop_step is not None and k == self.stop_step)
        action = np.full(n, self.action_index, dtype=np.int64)
        if stop[0]:
            z = np.zeros((n, self.d))
            return stop, action, z, z
        return stop, action, np.tile(self.inc_plus, (n, 1)), np.tile(self.inc_minus, (n, 1))

    def _d_hint(self):
        return self.d


class CallablePolicy(NoiseFunctionalPolicy):
    """Wraps a plain function (k, noise_prefix, state) -> Decision."""

    def __init__(self, fn, d: int):
        self.fn = fn
        self.d = d

    def decide(self, k, noise_prefix, state):
        return self.fn(k, noise_prefix, state)

    def _d_hint(self):
        return self.d


def replay_policy(
    policy: NoiseFunctionalPolicy,
    noise: np.ndarray,
    grid: TimeGrid,
    state_track=None,
):
    """Materialize the control treble produced by a policy on one noise path.

    ``noise`` has shape (n_steps, d_prime).  With ``state_track=(spec, x0, z0)``
    the induced state is evolved alongside (same one-step scheme as the
    simulator) so feedback policies can read (x, z); in finite-fuel mode an
    increment that would push cumulated variation strictly past the remaining
    budget is dropped along with everything after it, so every replayed path
    is admissible (exact budget exhaustion is admissible and kept).

    Returns ``(BVControlPath, StopIndicatorPath, action_indices)``.
    """
    from . import problem as _problem  # local import to avoid a cycle

    noise = np.asarray(noise, dtype=float)
    if noise.ndim == 1:
        noise = noise[:, None]
    if noise.shape[0] != grid.n_steps:
        raise ValueError(f"noise has {noise.shape[0]} rows, grid expects {grid.n_steps}")

    spec = x = z = None
    budget = np.inf
    if state_track is not None:
        spec, x0, z0 = state_track
        x = np.array(x0, dtype=float).reshape(spec.d)
        z = float(z0)
        if isinstance(spec.fuel_mode, _problem.FiniteFuel):
            budget = spec.fuel_mode.cap - z
            if budget < -1e-12:
                raise ValueError("initial fuel coordinate exceeds the cap")
    d = spec.d if spec is not None else policy._d_hint()

    n = grid.n_steps
    dt = grid.dt
    incp = np.zeros((n, d))
    incm = np.zeros((n, d))
    actions = np.zeros(n, dtype=np.int64)
    flip: int | None = None
    used = 0.0
    exhausted = False

    policy.begin(1)
    for k in range(n):
        if flip is None:
            state = (x.copy(), z) if spec is not None else None
            dec = policy.decide(k, noise[:k], state)
            dp = np.asarray(dec.inc_plus, dtype=float).reshape(d)
            dm = np.asarray(dec.inc_minus, dtype=float).reshape(d)
            if np.any(dp < 0.0) or np.any(dm < 0.0):
                raise ValueError(f"policy emitted a negative increment entry at step {k}")
            actions[k] = dec.action_index
            if dec.stop:
                flip = k
            else:
                vol = float(dp.sum() + dm.sum())
                if exhausted or (np.isfinite(budget) and vol > 0.0
                                 and used + vol > budget * (1 + 1e-12) + 1e-15):
                    exhausted = True
                else:
                    incp[k] = dp
                    incm[k] = dm
                    used += vol
        else:
            actions[k] = actions[flip]
        if spec is not None:
            t_k = grid.times[k]
            a = spec.action_set[actions[k]]
            mu = np.asarray(spec.drift(t_k, x, a), dtype=float).reshape(d)
            sig = np.asarray(spec.diffusion(t_k, x, a), dtype=float).reshape(d, spec.d_prime)
            x = x + mu * dt + sig @ noise[k] + (incp[k] - incm[k])
            z = z + float(incp[k].sum() + incm[k].sum())

    return (
        BVControlPath(grid, incp, incm),
        StopIndicatorPath(grid, flip),
        actions,
    )


def control_path_to_csv(path: BVControlPath, indicator: StopIndicatorPath, fname) -> None:
    """One row per step: time, inc_plus..., inc_minus..., eta."""
    import csv

    eta = indicator.values()
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        d = path.d
        w.writerow(["time"]
                   + [f"inc_plus_{i}" for i in range(d)]
                   + [f"inc_minus_{i}" for i in range(d)]
                   + ["eta"])
        for k in range(path.grid.n_steps):
            w.writerow([repr(float(path.grid.times[k]))]
                       + [repr(float(v)) for v in path.inc_plus[k]]
                       + [repr(float(v)) for v in path.inc_minus[k]]
                       + [repr(float(eta[k]))])
