"""Payoff functionals on simulated paths.

Two equivalent forms of the realized payoff from a step onward are provided:
one indexed by the stop/exit steps directly, one weighted by the stopping
indicator path without ever referencing the stop step.  Their equality on
every path is one of the toolkit's core identities.  The module also builds
the accrued-payoff / value-along-trajectory processes used by the
supermartingale diagnostics.

Conventions baked in here (and mirrored by the solver):
  * cost windows are half-open [from, to): the increment scheduled at the
    terminal step is never charged;
  * when exit and stop happen at the same step the exit gain is paid;
  * with no exit and no stop the horizon cap pays the exit gain at T.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import ProblemSpec, Stieltjes, batched_spec
from .simulate import PathBundle, PathView

__all__ = [
    "cost_integral",
    "payoff_tail_stoptime",
    "payoff_tail_indicator",
    "estimate_objective",
    "ValueTrace",
    "value_trace",
    "trace_to_csv",
]

# two-point Gauss-Legendre nodes on (0, 1); exact for cubics per panel
_GL_NODES = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def _segment_cost(spec_b, t, x, inc, sign, cost_fn, panels):
    """Integral of the scalar cost along the straight jump segment.

    ``inc`` >= 0 is one monotone component's jump; the segment runs from x in
    the direction sign * inc / |inc| for a length |inc| (Euclidean).
    """
    length = float(np.linalg.norm(inc))
    if length == 0.0:
        return 0.0
    direction = sign * inc / length
    h = length / panels
    offsets = (np.arange(panels)[:, None] + _GL_NODES[None, :]).reshape(-1) * h
    pts = x[None, :] + offsets[:, None] * direction[None, :]
    c = np.asarray(cost_fn(t, pts), dtype=float)
    if not np.allclose(c, c[:, :1], rtol=0.0, atol=0.0):
        raise ValueError("segment-integral costs must be equal across coordinates")
    return float(c[:, 0].sum() * (h / 2.0))


def _step_costs(spec, spec_b, path: PathView, steps: np.ndarray) -> np.ndarray:
    """Jump cost charged at each of the given steps (batched over the window)."""
    out = np.zeros(len(steps))
    if len(steps) == 0:
        return out
    ip = path.inc_plus[steps]
    im = path.inc_minus[steps]
    moved = (ip.sum(axis=1) > 0) | (im.sum(axis=1) > 0)
    if not moved.any():
        return out
    conv = spec.cost_convention
    ts = path.grid.times[steps[moved]]
    xs = path.states[steps[moved]]
    if isinstance(conv, Stieltjes):
        cp = np.asarray(spec_b.cost_plus(ts, xs), dtype=float)
        cm = np.asarray(spec_b.cost_minus(ts, xs), dtype=float)
        out[moved] = (cp * ip[moved]).sum(axis=1) + (cm * im[moved]).sum(axis=1)
    else:
        if spec.d > 1 and not spec.costs_uniform:
            raise ValueError("segment-integral convention needs direction-uniform costs")
        q = conv.quadrature_steps
        vals = []
        for t_k, x_k, p_k, m_k in zip(ts, xs, ip[moved], im[moved]):
            vals.append(_segment_cost(spec_b, float(t_k), x_k, p_k, +1.0, spec_b.cost_plus, q)
                        + _segment_cost(spec_b, float(t_k), x_k, m_k, -1.0,
                                        spec_b.cost_minus, q))
        out[moved] = vals
    return out


def cost_integral(spec: ProblemSpec, path: PathView, upto_step: int, from_step: int = 0) -> float:
    """Control cost charged over the half-open step window [from_step, upto_step)."""
    n = path.grid.n_steps
    if not 0 <= from_step <= upto_step <= n:
        raise IndexError(f"cost window [{from_step}, {upto_step}) outside [0, {n}]")
    spec_b = batched_spec(spec)
    return float(_step_costs(spec, spec_b, path, np.arange(from_step, upto_step)).sum())


def payoff_tail_stoptime(spec: ProblemSpec, path: PathView, from_step: int = 0) -> float:
    """Realized payoff from a step on, written through the stop and exit steps:
    running gain and costs up to their minimum, then the exit gain when the
    exit comes first (ties included), else the stop gain."""
    spec_b = batched_spec(spec)
    tau, rho = path.tau_step, path.rho_step
    end = min(tau, rho)
    if from_step > end:
        raise ValueError(f"from_step {from_step} is past the stopped window (ends at {end})")
    ts = path.grid.times
    dt = path.grid.dt
    window = np.arange(from_step, end)
    total = 0.0
    if len(window):
        f = np.asarray(spec_b.running_gain(ts[window], path.states[window],
                                           path.fuel[window],
                                           spec.action_set[path.actions[window]]),
                       dtype=float)
        total += float(f.sum()) * dt
        total -= float(_step_costs(spec, spec_b, path, window).sum())
    if rho <= tau:
        total += float(spec_b.exit_gain(float(ts[rho]), path.states[rho], float(path.fuel[rho])))
    else:
        total += float(spec_b.stop_gain(float(ts[tau]), path.states[tau], float(path.fuel[tau])))
    return total


def payoff_tail_indicator(spec: ProblemSpec, path: PathView, from_step: int = 0) -> float:
    """Same payoff written through the stopping indicator path alone.

    The running gain is weighted by (1 - eta), costs by (1 - eta+), the exit
    gain by (1 - eta at exit), and the stop gain enters through the unit atom
    of d(eta) inside the window; the stop step itself is never read.
    """
    spec_b = batched_spec(spec)
    indicator = path.indicator()
    eta = indicator.values()          # left limits at grid times
    eta_plus = indicator.right_limits()
    rho = path.rho_step
    ts = path.grid.times
    dt = path.grid.dt
    total = 0.0
    window = np.arange(from_step, rho)
    live = window[eta_plus[window] == 0.0]  # weight of the interval [t_k, t_{k+1})
    if len(live):
        f = np.asarray(spec_b.running_gain(ts[live], path.states[live], path.fuel[live],
                                           spec.action_set[path.actions[live]]),
                       dtype=float)
        total += float(f.sum()) * dt
        total -= float(_step_costs(spec, spec_b, path, live).sum())
    total += (1.0 - eta[rho]) * float(
        spec_b.exit_gain(float(ts[rho]), path.states[rho], float(path.fuel[rho])))
    # unit atom of d(eta) at the flip time, if it falls inside [from_step, rho)
    jump = eta_plus - eta
    for k in window[jump[window] > 0.0]:
        total += float(spec_b.stop_gain(float(ts[k]), path.states[k], float(path.fuel[k])))
    return total


def estimate_objective(spec: ProblemSpec, bundle: PathBundle) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the payoff from the start step."""
    if bundle.n_paths == 0:
        raise ValueError("bundle is empty")
    vals = _payoff_from_start(spec, bundle)
    if not np.all(np.isfinite(vals)):
        bad = int(np.nonzero(~np.isfinite(vals))[0][0])
        raise ValueError(f"non-finite payoff on path {bad}")
    n = len(vals)
    se = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(vals.mean()), se


def _payoff_from_start(spec: ProblemSpec, bundle: PathBundle) -> np.ndarray:
    """Vectorized per-path payoffs from step 0 (same terms as the scalar form)."""
    spec_b = batched_spec(spec)
    n, k1, d = bundle.states.shape
    steps = k1 - 1
    dt = bundle.grid.dt
    ts = bundle.grid.times
    tau = bundle.tau_step
    rho = bundle.rho_step
    end = np.minimum(tau, rho)

    out = np.zeros(n)
    conv = spec.cost_convention
    for k in range(steps):
        alive = end > k
        if not alive.any():
            break
        x = bundle.states[:, k]
        z = bundle.fuel[:, k]
        a = spec.action_set[bundle.actions[:, k]]
        f = np.asarray(spec_b.running_gain(float(ts[k]), x, z, a), dtype=float)
        out += np.where(alive, f * dt, 0.0)
        ip = bundle.inc_plus[:, k]
        im = bundle.inc_minus[:, k]
        moved = alive & ((ip.sum(axis=1) > 0) | (im.sum(axis=1) > 0))
        if moved.any():
            if isinstance(conv, Stieltjes):
                cp = np.asarray(spec_b.cost_plus(float(ts[k]), x[moved]), dtype=float)
                cm = np.asarray(spec_b.cost_minus(float(ts[k]), x[moved]), dtype=float)
                out[moved] -= (cp * ip[moved]).sum(axis=1) + (cm * im[moved]).sum(axis=1)
            else:
                idx = np.nonzero(moved)[0]
                for i in idx:
                    q = conv.quadrature_steps
                    out[i] -= _segment_cost(spec_b, float(ts[k]), x[i], ip[i], +1.0,
                                            spec_b.cost_plus, q)
                    out[i] -= _segment_cost(spec_b, float(ts[k]), x[i], im[i], -1.0,
                                            spec_b.cost_minus, q)
    exit_first = rho <= tau
    rows = np.arange(n)
    t_end = ts[end]
    x_end = bundle.states[rows, end]
    z_end = bundle.fuel[rows, end]
    g1 = np.asarray(spec_b.exit_gain(t_end, x_end, z_end), dtype=float)
    g2 = np.asarray(spec_b.stop_gain(t_end, x_end, z_end), dtype=float)
    out += np.where(exit_first, g1, g2)
    return out


@dataclass(frozen=True, eq=False)
class ValueTrace:
    """Accrued payoff and value-along-trajectory processes per path and step.

    ``accrued[p, u]`` collects gains, costs, and any terminal gain already
    locked in strictly before step u; ``total[p, u]`` adds the value field at
    the current node while the pair (stop, exit) is still in the future, so it
    is constant from one step past min(stop, exit) on.
    """

    accrued: np.ndarray       # (n_paths, n_steps + 1)
    total: np.ndarray         # (n_paths, n_steps + 1)
    clamped_evaluations: int  # value-field lookups that fell off the lattice
    value_field_ref: str

    def __post_init__(self):
        self.accrued.flags.writeable = False
        self.total.flags.writeable = False


def value_trace(spec: ProblemSpec, bundle: PathBundle, value_field) -> ValueTrace:
    """Build the accrued / value-adjusted processes for every path and step u.

    Indicator conventions: the exit gain enters once {exit <= stop} and
    {exit < u}; the stop gain once {stop < u} and {stop < exit}; the value
    field contributes on {min(stop, exit) >= u} and is evaluated by
    nearest-node extension (clamped lookups are counted).
    """
    spec_b = batched_spec(spec)
    n, k1, _ = bundle.states.shape
    steps = k1 - 1
    ts = bundle.grid.times
    dt = bundle.grid.dt
    tau = bundle.tau_step
    rho = bundle.rho_step
    end = np.minimum(tau, rho)
    rows = np.arange(n)

    # per-step accrual while running: f dt - jump costs, charged on [0, end)
    step_gain = np.zeros((n, steps))
    conv = spec.cost_convention
    for k in range(steps):
        alive = end > k
        if not alive.any():
            continue
        x = bundle.states[:, k]
        z = bundle.fuel[:, k]
        a = spec.action_set[bundle.actions[:, k]]
        f = np.asarray(spec_b.running_gain(float(ts[k]), x, z, a), dtype=float)
        g = f * dt
        ip = bundle.inc_plus[:, k]
        im = bundle.inc_minus[:, k]
        moved = (ip.sum(axis=1) > 0) | (im.sum(axis=1) > 0)
        if moved.any():
            if isinstance(conv, Stieltjes):
                cp = np.asarray(spec_b.cost_plus(float(ts[k]), x[moved]), dtype=float)
                cm = np.asarray(spec_b.cost_minus(float(ts[k]), x[moved]), dtype=float)
                cost = np.zeros(n)
                cost[moved] = (cp * ip[moved]).sum(axis=1) + (cm * im[moved]).sum(axis=1)
            else:
                cost = np.zeros(n)
                for i in np.nonzero(moved)[0]:
                    q = conv.quadrature_steps
                    cost[i] = (_segment_cost(spec_b, float(ts[k]), x[i], ip[i], +1.0,
                                             spec_b.cost_plus, q)
                               + _segment_cost(spec_b, float(ts[k]), x[i], im[i], -1.0,
                                               spec_b.cost_minus, q))
            g = g - cost
        step_gain[:, k] = np.where(alive, g, 0.0)

    running = np.zeros((n, k1))
    np.cumsum(step_gain, axis=1, out=running[:, 1:])

    g1 = np.asarray(spec_b.exit_gain(ts[rho], bundle.states[rows, rho],
                                     bundle.fuel[rows, rho]), dtype=float)
    g2 = np.asarray(spec_b.stop_gain(ts[tau], bundle.states[rows, tau],
                                     bundle.fuel[rows, tau]), dtype=float)

    u = np.arange(k1)[None, :]
    pays_exit = (rho <= tau)[:, None] & (rho[:, None] < u)
    pays_stop = (tau[:, None] < u) & (tau < rho)[:, None]
    accrued = (running + pays_exit * g1[:, None] + pays_stop * g2[:, None])

    alive_at = end[:, None] >= u
    vals = np.zeros((n, k1))
    clamped = 0
    for uu in range(k1):
        m = alive_at[:, uu]
        if not m.any():
            continue
        v, cl = value_field.evaluate(uu, bundle.states[m, uu], bundle.fuel[m, uu])
        vals[m, uu] = v
        clamped += int(cl.sum())
    total = accrued + np.where(alive_at, vals, 0.0)
    return ValueTrace(accrued, total, clamped, value_field.ref())


def trace_to_csv(trace: ValueTrace, bundle: PathBundle, fname) -> None:
    import csv

    n, k1 = trace.total.shape
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step", "time", "accrued", "total"])
        for p in range(n):
            for s in range(k1):
                w.writerow([p, s, repr(float(bundle.grid.times[s])),
                            repr(float(trace.accrued[p, s])),
                            repr(float(trace.total[p, s]))])
