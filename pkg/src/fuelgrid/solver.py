"""Lattice approximation and backward induction.

The controlled diffusion is replaced by a chain on a box lattice whose
one-step stencil matches the drift exactly and the (diagonal) squared
diffusion up to O(dt * h): per coordinate, mass sigma^2 dt / (2 h^2) goes to
each neighbor plus an upwind drift share dt * mu^+- / h, remainder stays.
Fully degenerate coordinates therefore put their mass on the drift-upwind
neighbor alone.

Backward induction values every node as the best of stopping now, continuing
one step under some action, or exerting one grid quantum of control in a
coordinate direction at the same time instant (cost charged at the pre-jump
node, fuel reduced by one level).  With a fuel axis the per-slice sweep runs
fuel-descending so exertion chains resolve in one pass; without one, the
exertion operator is iterated to its (monotone) fixed point within the slice.

Exterior nodes (off the domain or off the box) are absorbing and worth the
exit gain where first hit; the horizon slice pays the exit gain everywhere
(the time cap is an exit).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .controls import Decision, NoiseFunctionalPolicy, TimeGrid
from .problem import FiniteFuel, ProblemSpec, batched_spec

__all__ = [
    "Lattice",
    "TransitionModel",
    "ValueField",
    "PolicyField",
    "LatticeError",
    "build_lattice",
    "solve_backward",
    "extract_policy",
    "LatticeFeedbackPolicy",
    "EXIT", "STOP", "CONTINUE", "EXERT",
    "value_to_csv",
    "policy_to_csv",
    "value_snapshot_write",
    "value_snapshot_read",
]

EXIT, STOP, CONTINUE, EXERT = 0, 1, 2, 3

DEFAULT_TOL_SLICE = 1e-10
DEFAULT_TOL_TIE = 1e-12


class LatticeError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Lattice:
    """Time x state x fuel grid with interior mask and a designated root node."""

    grid: TimeGrid
    axes: tuple[np.ndarray, ...]        # per-dim node coordinates
    spacings: np.ndarray                # (d,) grid steps h_i
    fuel_values: np.ndarray | None      # (n_fuel,) or None in infinite mode
    state_coords: np.ndarray            # (S, d), C-order enumeration of the box
    up_index: np.ndarray                # (S, d) neighbor indices, -1 off the box
    down_index: np.ndarray
    interior: np.ndarray                # (S, F) domain mask at nodes
    root_state: int
    root_fuel: int

    @property
    def n_state_nodes(self) -> int:
        return self.state_coords.shape[0]

    @property
    def n_fuel(self) -> int:
        return 1 if self.fuel_values is None else len(self.fuel_values)

    @property
    def d(self) -> int:
        return self.state_coords.shape[1]

    def fuel_of(self, j: int) -> float:
        return 0.0 if self.fuel_values is None else float(self.fuel_values[j])

    def fuel_grid(self) -> np.ndarray:
        return np.zeros(1) if self.fuel_values is None else self.fuel_values

    def snap_state(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest node index per row of x, plus a mask of clamped rows."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.zeros(x.shape[0], dtype=np.int64)
        clamped = np.zeros(x.shape[0], dtype=bool)
        stride = 1
        strides = np.empty(self.d, dtype=np.int64)
        for i in range(self.d - 1, -1, -1):
            strides[i] = stride
            stride *= len(self.axes[i])
        for i in range(self.d):
            ax = self.axes[i]
            rel = (x[:, i] - ax[0]) / self.spacings[i]
            j = np.rint(rel).astype(np.int64)
            clamped |= (j < 0) | (j >= len(ax))
            j = np.clip(j, 0, len(ax) - 1)
            idx += j * strides[i]
        return idx, clamped

    def snap_fuel(self, z) -> tuple[np.ndarray, np.ndarray]:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if self.fuel_values is None:
            return np.zeros(z.shape, dtype=np.int64), np.zeros(z.shape, dtype=bool)
        delta = self.fuel_values[1] - self.fuel_values[0] if len(self.fuel_values) > 1 else 1.0
        j = np.rint((z - self.fuel_values[0]) / delta).astype(np.int64)
        clamped = (j < 0) | (j >= len(self.fuel_values))
        return np.clip(j, 0, len(self.fuel_values) - 1), clamped


@dataclass(frozen=True, eq=False)
class TransitionModel:
    """Per (time slice, state node, action) one-step stencil probabilities."""

    up_prob: np.ndarray    # (K, S, A, d)
    down_prob: np.ndarray  # (K, S, A, d)
    stay_prob: np.ndarray  # (K, S, A)
    dt: float
    diagnostics: dict = field(default_factory=dict)

    def check_moments(self, lattice: Lattice, spec: ProblemSpec, k: int, s: int, a: int,
                      ) -> tuple[np.ndarray, np.ndarray]:
        """(first moment, second moment diagonal) of the stencil at one node."""
        h = lattice.spacings
        first = (self.up_prob[k, s, a] - self.down_prob[k, s, a]) * h
        second = (self.up_prob[k, s, a] + self.down_prob[k, s, a]) * h * h
        return first, second


def build_lattice(
    spec: ProblemSpec,
    state_bounds,
    state_points,
    n_steps: int,
    x0=None,
    z0: float = 0.0,
    auto_shrink_dt: bool = False,
    max_shrinks: int = 12,
    tol_mom: float = 1e-12,
) -> tuple[Lattice, TransitionModel]:
    """Discretize the state box and build the one-step chain stencils.

    ``state_bounds`` is a (lo, hi) pair per dimension and ``state_points`` a
    node count per dimension.  In finite-fuel mode the exertion quantum equals
    the common state spacing, so all spacings must agree and the fuel cap must
    sit on the fuel grid.  If some stencil would need a negative stay
    probability the build fails, or doubles the step count when
    ``auto_shrink_dt`` is set.
    """
    spec_b = batched_spec(spec)
    d = spec.d
    state_bounds = list(state_bounds)
    state_points = list(state_points)
    if len(state_bounds) != d or len(state_points) != d:
        raise LatticeError(f"need {d} bounds/point-count entries")

    axes = []
    spacings = np.empty(d)
    for i, ((lo, hi), n_i) in enumerate(zip(state_bounds, state_points)):
        if n_i < 2 or hi <= lo:
            raise LatticeError(f"axis {i}: need at least 2 nodes and hi > lo")
        axes.append(np.linspace(lo, hi, n_i))
        spacings[i] = (hi - lo) / (n_i - 1)

    fuel_values = None
    if isinstance(spec.fuel_mode, FiniteFuel):
        h0 = spacings[0]
        if not np.allclose(spacings, h0, rtol=1e-12, atol=0.0):
            raise LatticeError("finite fuel needs equal state spacings (one exertion quantum)")
        cap = spec.fuel_mode.cap
        n_z = int(round(cap / h0)) if cap > 0 else 0
        if abs(n_z * h0 - cap) > 1e-9 * max(1.0, cap):
            raise LatticeError(f"fuel cap {cap} is not a multiple of the spacing {h0}")
        fuel_values = np.linspace(0.0, cap, n_z + 1) if n_z > 0 else np.zeros(1)

    mesh = np.meshgrid(*axes, indexing="ij")
    state_coords = np.stack([m.ravel() for m in mesh], axis=1)
    S = state_coords.shape[0]
    shape = tuple(len(ax) for ax in axes)
    strides = np.empty(d, dtype=np.int64)
    stride = 1
    for i in range(d - 1, -1, -1):
        strides[i] = stride
        stride *= shape[i]
    multi = np.stack(np.unravel_index(np.arange(S), shape), axis=1)
    up_index = np.empty((S, d), dtype=np.int64)
    down_index = np.empty((S, d), dtype=np.int64)
    for i in range(d):
        up = multi[:, i] + 1
        dn = multi[:, i] - 1
        up_index[:, i] = np.where(up < shape[i], np.arange(S) + strides[i], -1)
        down_index[:, i] = np.where(dn >= 0, np.arange(S) - strides[i], -1)

    fuel_grid = np.zeros(1) if fuel_values is None else fuel_values
    interior = np.empty((S, len(fuel_grid)), dtype=bool)
    for j, z in enumerate(fuel_grid):
        interior[:, j] = np.asarray(spec_b.domain_indicator(state_coords, np.full(S, z)),
                                    dtype=bool)

    if x0 is None:
        root_state = int(np.argmin(np.linalg.norm(
            state_coords - state_coords.mean(axis=0), axis=1)))
    else:
        root_state, _ = _snap_one(axes, spacings, np.asarray(x0, dtype=float), strides)
    root_fuel = 0
    if fuel_values is not None and len(fuel_values) > 1:
        root_fuel = int(np.clip(np.rint(z0 / (fuel_values[1] - fuel_values[0])),
                                0, len(fuel_values) - 1))

    shrinks = 0
    while True:
        grid = TimeGrid(spec.start_t, spec.horizon_T, n_steps)
        trans, min_stay, mom_err = _build_transitions(spec_b, spec, grid,
                                                      state_coords, spacings)
        if min_stay >= -1e-12:
            break
        if not auto_shrink_dt or shrinks >= max_shrinks:
            raise LatticeError(
                f"stencil infeasible (stay probability {min_stay:.3g} < 0) at dt={grid.dt:.3g}; "
                "refine time or enable auto_shrink_dt")
        n_steps *= 2
        shrinks += 1

    if mom_err > tol_mom:
        raise LatticeError(f"stencil first-moment error {mom_err:.3g} exceeds {tol_mom:.3g}")
    lattice = Lattice(grid, tuple(axes), spacings, fuel_values, state_coords,
                      up_index, down_index, interior, root_state, root_fuel)
    trans.diagnostics.update({"dt": grid.dt, "dt_shrinks": shrinks,
                              "min_stay": min_stay, "first_moment_error": mom_err})
    return lattice, trans


def _snap_one(axes, spacings, x, strides):
    idx = 0
    clamped = False
    for i, ax in enumerate(axes):
        j = int(round((x[i] - ax[0]) / spacings[i]))
        clamped |= j < 0 or j >= len(ax)
        j = min(max(j, 0), len(ax) - 1)
        idx += j * strides[i]
    return idx, clamped


def _build_transitions(spec_b, spec, grid, state_coords, spacings):
    S, d = state_coords.shape
    A = spec.n_actions
    K = grid.n_steps
    dt = grid.dt
    up = np.empty((K, S, A, d))
    down = np.empty((K, S, A, d))
    stay = np.empty((K, S, A))
    x_block = np.broadcast_to(state_coords[:, None, :], (S, A, d))
    a_block = np.broadcast_to(spec.action_set[None, :, :], (S, A, spec.l))
    mom_err = 0.0
    for k in range(K):
        t_k = float(grid.times[k])
        mu = np.asarray(spec_b.drift(t_k, x_block, a_block), dtype=float).reshape(S, A, d)
        sig = np.asarray(spec_b.diffusion(t_k, x_block, a_block),
                         dtype=float).reshape(S, A, d, spec.d_prime)
        cov = np.einsum("saij,sakj->saik", sig, sig)
        off = cov - cov * np.eye(d)
        if np.max(np.abs(off)) > 1e-12:
            raise LatticeError(
                "stencil builder supports diagonal diffusion covariances only "
                "(cross terms present)")
        var = np.einsum("saii->sai", cov)
        diff_share = var * dt / (2.0 * spacings ** 2)
        up[k] = diff_share + dt * np.maximum(mu, 0.0) / spacings
        down[k] = diff_share + dt * np.maximum(-mu, 0.0) / spacings
        stay[k] = 1.0 - up[k].sum(axis=2) - down[k].sum(axis=2)
        mom_err = max(mom_err, float(np.max(np.abs(
            (up[k] - down[k]) * spacings - mu * dt))))
    return TransitionModel(up, down, stay, dt), float(stay.min()), mom_err


@dataclass(frozen=True, eq=False)
class ValueField:
    """Lattice values per (time slice, state node, fuel level) with provenance."""

    values: np.ndarray     # (K + 1, S, F)
    lattice: Lattice
    spec_hash: str
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("value field contains non-finite entries")
        self.values.flags.writeable = False

    def root_value(self) -> float:
        return float(self.values[0, self.lattice.root_state, self.lattice.root_fuel])

    def ref(self) -> str:
        import hashlib

        return hashlib.sha256(self.values.tobytes()).hexdigest()[:16]

    def evaluate(self, k: int, x, z) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-node extension of the slice-k values at arbitrary (x, z)."""
        s_idx, c1 = self.lattice.snap_state(x)
        f_idx, c2 = self.lattice.snap_fuel(z)
        return self.values[k, s_idx, f_idx], c1 | c2


@dataclass(frozen=True, eq=False)
class PolicyField:
    """Per-node decision: exit (forced), stop, continue(action), or exert(dim, sign)."""

    kind: np.ndarray   # (K + 1, S, F) int8
    arg: np.ndarray    # action index (CONTINUE) or coordinate (EXERT)
    sign: np.ndarray   # +1 / -1 for EXERT, 0 otherwise
    lattice: Lattice

    def __post_init__(self):
        for a in (self.kind, self.arg, self.sign):
            a.flags.writeable = False

    def decision_at(self, k: int, s: int, j: int) -> tuple[int, int, int]:
        return int(self.kind[k, s, j]), int(self.arg[k, s, j]), int(self.sign[k, s, j])


def _slice_eval(spec_b, spec, lattice, t, what):
    """Evaluate a (t, x, z[, a]) coefficient on the full (S, F[, A]) node block."""
    S = lattice.n_state_nodes
    F = lattice.n_fuel
    x = np.broadcast_to(lattice.state_coords[:, None, :], (S, F, lattice.d))
    z = np.broadcast_to(lattice.fuel_grid()[None, :], (S, F))
    if what == "exit":
        return np.asarray(spec_b.exit_gain(t, x, z), dtype=float).reshape(S, F)
    if what == "stop":
        return np.asarray(spec_b.stop_gain(t, x, z), dtype=float).reshape(S, F)
    if what == "run":
        A = spec.n_actions
        xa = np.broadcast_to(lattice.state_coords[:, None, None, :], (S, A, F, lattice.d))
        za = np.broadcast_to(lattice.fuel_grid()[None, None, :], (S, A, F))
        aa = np.broadcast_to(spec.action_set[None, :, None, :], (S, A, F, spec.l))
        return np.asarray(spec_b.running_gain(t, xa, za, aa), dtype=float).reshape(S, A, F)
    raise KeyError(what)


def _offgrid_exit_values(spec_b, lattice, t, z_levels):
    """Exit gain at the off-box neighbor coordinates, per (dim, sign).

    Returns dict (i, sign) -> (S, F) array; only rows with up/down == -1 are
    meaningful.
    """
    out = {}
    F = len(z_levels)
    for i in range(lattice.d):
        for sign, idx in ((+1, lattice.up_index[:, i]), (-1, lattice.down_index[:, i])):
            coords = lattice.state_coords.copy()
            coords[:, i] += sign * lattice.spacings[i]
            vals = np.asarray(
                spec_b.exit_gain(t, np.broadcast_to(coords[:, None, :],
                                                    (coords.shape[0], F, lattice.d)),
                                 np.broadcast_to(z_levels[None, :], (coords.shape[0], F))),
                dtype=float).reshape(coords.shape[0], F)
            out[(i, sign)] = vals
    return out


def _continuation(lattice, trans, k, v_next, g1_next):
    """Expected next-slice value per (node, action, fuel) under each stencil."""
    S, F = v_next.shape
    A = trans.stay_prob.shape[2]
    cont = trans.stay_prob[k][:, :, None] * v_next[:, None, :]
    for i in range(lattice.d):
        for sign, nb in ((+1, lattice.up_index[:, i]), (-1, lattice.down_index[:, i])):
            prob = trans.up_prob[k][:, :, i] if sign > 0 else trans.down_prob[k][:, :, i]
            on = nb >= 0
            vals = np.empty((S, F))
            vals[on] = v_next[nb[on]]
            vals[~on] = g1_next[(i, sign)][~on]
            cont += prob[:, :, None] * vals[:, None, :]
    return cont  # (S, A, F)


def solve_backward(
    spec: ProblemSpec,
    lattice: Lattice,
    transitions: TransitionModel,
    tol_slice: float = DEFAULT_TOL_SLICE,
    max_slice_iter: int | None = None,
) -> tuple["ValueField", "PolicyField"]:
    """Backward induction over the lattice; returns values and the argmax policy."""
    spec_b = batched_spec(spec)
    K = lattice.grid.n_steps
    S = lattice.n_state_nodes
    F = lattice.n_fuel
    finite = lattice.fuel_values is not None
    z_levels = lattice.fuel_grid()
    diag = {"slice_iterations": 0}

    v = np.empty((K + 1, S, F))
    v[K] = _slice_eval(spec_b, spec, lattice, float(lattice.grid.times[K]), "exit")

    for k in range(K - 1, -1, -1):
        t_k = float(lattice.grid.times[k])
        t_next = float(lattice.grid.times[k + 1])
        g1_here = _slice_eval(spec_b, spec, lattice, t_k, "exit")
        g1_next_off = _offgrid_exit_values(spec_b, lattice, t_next, z_levels)
        g2 = _slice_eval(spec_b, spec, lattice, t_k, "stop")
        f = _slice_eval(spec_b, spec, lattice, t_k, "run")
        cont = _continuation(lattice, transitions, k, v[k + 1], g1_next_off)
        # best of stop / continue before any exertion, per (S, F)
        base = np.maximum(g2, (f * transitions.dt + cont).max(axis=1))
        cp = np.asarray(spec_b.cost_plus(t_k, lattice.state_coords), dtype=float)
        cm = np.asarray(spec_b.cost_minus(t_k, lattice.state_coords), dtype=float)
        g1_here_off = _offgrid_exit_values(spec_b, lattice, t_k, z_levels)

        vk = np.where(lattice.interior, base, g1_here)
        if finite:
            for j in range(F - 2, -1, -1):
                col = vk[:, j]
                best = col.copy()
                for i in range(lattice.d):
                    for sign, nb, c in ((+1, lattice.up_index[:, i], cp[:, i]),
                                        (-1, lattice.down_index[:, i], cm[:, i])):
                        tgt = np.empty(S)
                        on = nb >= 0
                        tgt[on] = vk[nb[on], j + 1]
                        tgt[~on] = g1_here_off[(i, sign)][~on, j + 1]
                        best = np.maximum(best, tgt - c * lattice.spacings[i])
                vk[:, j] = np.where(lattice.interior[:, j], best, vk[:, j])
        else:
            limit = max_slice_iter if max_slice_iter is not None else 10 * S
            cur = vk[:, 0].copy()
            for it in range(limit):
                nxt = cur.copy()
                for i in range(lattice.d):
                    for sign, nb, c in ((+1, lattice.up_index[:, i], cp[:, i]),
                                        (-1, lattice.down_index[:, i], cm[:, i])):
                        tgt = np.empty(S)
                        on = nb >= 0
                        tgt[on] = cur[nb[on]]
                        tgt[~on] = g1_here_off[(i, sign)][~on, 0]
                        nxt = np.maximum(nxt, tgt - c * lattice.spacings[i])
                nxt = np.where(lattice.interior[:, 0], nxt, vk[:, 0])
                change = float(np.max(np.abs(nxt - cur)))
                cur = nxt
                diag["slice_iterations"] += 1
                if change < tol_slice:
                    break
            else:
                raise LatticeError(
                    f"exertion fixed point did not converge in {limit} iterations "
                    f"at slice {k} (last change {change:.3g})")
            vk[:, 0] = cur
        v[k] = vk

    spec_hash = spec.descriptor_hash()
    field_ = ValueField(v, lattice, spec_hash, diag)
    pol = extract_policy(spec, field_, lattice, transitions)
    return field_, pol


def _branch_stack(spec_b, spec, lattice, transitions, v, k):
    """Candidate values at slice k in tie-break priority order.

    Order: stop, exert(dim 0, +), exert(dim 0, -), ..., continue(action 0), ...
    Exert candidates read the SAME slice (already-solved) values one fuel
    level up; unavailable branches carry -inf.
    """
    S, F = v[k].shape
    finite = lattice.fuel_values is not None
    t_k = float(lattice.grid.times[k])
    t_next = float(lattice.grid.times[k + 1])
    z_levels = lattice.fuel_grid()
    g2 = _slice_eval(spec_b, spec, lattice, t_k, "stop")
    f = _slice_eval(spec_b, spec, lattice, t_k, "run")
    cont = _continuation(lattice, transitions, k,
                         v[k + 1], _offgrid_exit_values(spec_b, lattice, t_next, z_levels))
    cp = np.asarray(spec_b.cost_plus(t_k, lattice.state_coords), dtype=float)
    cm = np.asarray(spec_b.cost_minus(t_k, lattice.state_coords), dtype=float)
    g1_here_off = _offgrid_exit_values(spec_b, lattice, t_k, z_levels)

    stack = [g2]
    for i in range(lattice.d):
        for sign, nb, c in ((+1, lattice.up_index[:, i], cp[:, i]),
                            (-1, lattice.down_index[:, i], cm[:, i])):
            cand = np.full((S, F), -np.inf)
            hi = F - 1 if finite else F
            for j in range(hi):
                jt = j + 1 if finite else j
                tgt = np.empty(S)
                on = nb >= 0
                tgt[on] = v[k][nb[on], jt]
                tgt[~on] = g1_here_off[(i, sign)][~on, jt]
                cand[:, j] = tgt - c * lattice.spacings[i]
            stack.append(cand)
    for a in range(spec.n_actions):
        stack.append(f[:, a, :] * transitions.dt + cont[:, a, :])
    return np.stack(stack)  # (n_branches, S, F)


def extract_policy(
    spec: ProblemSpec,
    value_field: ValueField,
    lattice: Lattice,
    transitions: TransitionModel,
    tol_tie: float = DEFAULT_TOL_TIE,
) -> PolicyField:
    """Argmax decisions with the fixed tie-break: stop, then exertion by lowest
    coordinate (+ before -), then continuation by lowest action index; ties
    within tol_tie resolve to the higher-priority branch.  Exterior nodes are
    forced exits, as is the horizon slice (time cap)."""
    spec_b = batched_spec(spec)
    v = value_field.values
    K = lattice.grid.n_steps
    S = lattice.n_state_nodes
    F = lattice.n_fuel
    kind = np.full((K + 1, S, F), EXIT, dtype=np.int8)
    arg = np.zeros((K + 1, S, F), dtype=np.int16)
    sign = np.zeros((K + 1, S, F), dtype=np.int8)

    for k in range(K):
        stack = _branch_stack(spec_b, spec, lattice, transitions, v, k)
        best = stack.max(axis=0)
        eligible = stack >= best[None] - tol_tie
        pick = eligible.argmax(axis=0)  # first True wins: priority order
        kk = np.full((S, F), STOP, dtype=np.int8)
        aa = np.zeros((S, F), dtype=np.int16)
        ss = np.zeros((S, F), dtype=np.int8)
        n_exert = 2 * lattice.d
        is_exert = (pick >= 1) & (pick <= n_exert)
        kk[is_exert] = EXERT
        aa[is_exert] = ((pick[is_exert] - 1) // 2).astype(np.int16)
        ss[is_exert] = np.where((pick[is_exert] - 1) % 2 == 0, 1, -1).astype(np.int8)
        is_cont = pick > n_exert
        kk[is_cont] = CONTINUE
        aa[is_cont] = (pick[is_cont] - 1 - n_exert).astype(np.int16)
        ext = ~lattice.interior
        kk[ext] = EXIT
        aa[ext] = 0
        ss[ext] = 0
        kind[k] = kk
        arg[k] = aa
        sign[k] = ss
    return PolicyField(kind, arg, sign, lattice)


class LatticeFeedbackPolicy(NoiseFunctionalPolicy):
    """Noise-functional wrapper around a lattice policy field.

    At each step the current (x, z) snaps to the nearest node; exertion
    decisions are followed through the same-slice chain they induce, and the
    merged increment plus the final node's stop/continue decision is emitted.
    Exterior lookups act as holds (the exit is detected on the state values).
    """

    vectorized = True

    def __init__(self, spec: ProblemSpec, policy_field: PolicyField, default_action: int = 0):
        self.spec = spec
        self.field = policy_field
        self.lattice = policy_field.lattice
        self.default_action = default_action

    def decide(self, k, noise_prefix, state):
        if state is None:
            raise ValueError("lattice feedback policies need state tracking")
        x, z = state
        stop, action, incp, incm = self._decide_nodes(
            k, np.atleast_2d(np.asarray(x, dtype=float)), np.atleast_1d(z))
        return Decision(bool(stop[0]), int(action[0]), incp[0], incm[0])

    def decide_many(self, k, noise_block, x_block, z_block):
        if x_block is None:
            raise ValueError("lattice feedback policies need state tracking")
        return self._decide_nodes(k, x_block, z_block)

    def _decide_nodes(self, k, x, z):
        lat = self.lattice
        n = x.shape[0]
        d = lat.d
        s_idx, _ = lat.snap_state(x)
        f_idx, _ = lat.snap_fuel(z)
        incp = np.zeros((n, d))
        incm = np.zeros((n, d))
        stop = np.zeros(n, dtype=bool)
        action = np.full(n, self.default_action, dtype=np.int64)
        k_idx = min(k, lat.grid.n_steps)  # guard; policies are queried for k < n_steps

        active = np.ones(n, dtype=bool)
        max_chain = lat.n_fuel + lat.n_state_nodes
        for _ in range(max_chain):
            kinds = self.field.kind[k_idx, s_idx, f_idx]
            exerting = active & (kinds == EXERT)
            if not exerting.any():
                break
            rows = np.nonzero(exerting)[0]
            dims = self.field.arg[k_idx, s_idx, f_idx][rows]
            signs = self.field.sign[k_idx, s_idx, f_idx][rows]
            h = lat.spacings[dims]
            plus = signs > 0
            incp[rows[plus], dims[plus]] += h[plus]
            incm[rows[~plus], dims[~plus]] += h[~plus]
            new_s = np.where(signs > 0,
                             lat.up_index[s_idx[rows], dims],
                             lat.down_index[s_idx[rows], dims])
            if lat.fuel_values is not None:
                f_idx[rows] = np.minimum(f_idx[rows] + 1, lat.n_fuel - 1)
            off = new_s < 0
            # exertion off the box leaves the domain: no further decision there
            active[rows[off]] = False
            s_idx[rows[~off]] = new_s[~off]
        else:
            raise LatticeError("exertion chain did not terminate (cyclic policy field)")

        kinds = self.field.kind[k_idx, s_idx, f_idx]
        stop |= active & (kinds == STOP)
        is_cont = active & (kinds == CONTINUE)
        action[is_cont] = self.field.arg[k_idx, s_idx, f_idx][is_cont]
        return stop, action, incp, incm

    def _d_hint(self):
        return self.lattice.d


# ---------------------------------------------------------------------------
# dumps
# ---------------------------------------------------------------------------

def value_to_csv(field_: ValueField, fname) -> None:
    import csv

    lat = field_.lattice
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time"] + [f"x_{i}" for i in range(lat.d)] + ["z", "value"])
        for k in range(field_.values.shape[0]):
            for s in range(lat.n_state_nodes):
                for j in range(lat.n_fuel):
                    w.writerow([k, repr(float(lat.grid.times[k]))]
                               + [repr(float(c)) for c in lat.state_coords[s]]
                               + [repr(lat.fuel_of(j)),
                                  repr(float(field_.values[k, s, j]))])


_DECISION_NAMES = {EXIT: "exit", STOP: "stop", CONTINUE: "continue", EXERT: "exert"}


def policy_to_csv(policy: PolicyField, fname) -> None:
    import csv

    lat = policy.lattice
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time"] + [f"x_{i}" for i in range(lat.d)]
                   + ["z", "decision", "arg", "sign"])
        for k in range(policy.kind.shape[0]):
            for s in range(lat.n_state_nodes):
                for j in range(lat.n_fuel):
                    w.writerow([k, repr(float(lat.grid.times[k]))]
                               + [repr(float(c)) for c in lat.state_coords[s]]
                               + [repr(lat.fuel_of(j)),
                                  _DECISION_NAMES[int(policy.kind[k, s, j])],
                                  int(policy.arg[k, s, j]),
                                  int(policy.sign[k, s, j])])


_SNAP_MAGIC = b"FGVF"


def value_snapshot_write(field_: ValueField, fname) -> None:
    """Binary snapshot: magic, version, counts, axes, values (little endian)."""
    lat = field_.lattice
    K1, S, F = field_.values.shape
    with open(fname, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        fh.write(struct.pack("<IQQQQ", 1, K1, S, F, lat.d))
        fh.write(struct.pack("<ddq", lat.grid.t0, lat.grid.tN, lat.grid.n_steps))
        for ax in lat.axes:
            fh.write(struct.pack("<Q", len(ax)))
            fh.write(np.ascontiguousarray(ax, dtype="<f8").tobytes())
        if lat.fuel_values is None:
            fh.write(struct.pack("<Q", 0))
        else:
            fh.write(struct.pack("<Q", len(lat.fuel_values)))
            fh.write(np.ascontiguousarray(lat.fuel_values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(field_.values, dtype="<f8").tobytes())


_POLICY_MAGIC = b"FGPF"


def policy_snapshot_write(policy: PolicyField, fname) -> None:
    """Binary policy dump: header with counts, then kind/arg/sign arrays."""
    lat = policy.lattice
    K1, S, F = policy.kind.shape
    with open(fname, "wb") as fh:
        fh.write(_POLICY_MAGIC)
        fh.write(struct.pack("<IQQQQ", 1, K1, S, F, lat.d))
        fh.write(struct.pack("<ddq", lat.grid.t0, lat.grid.tN, lat.grid.n_steps))
        fh.write(np.ascontiguousarray(policy.kind, dtype="<i1").tobytes())
        fh.write(np.ascontiguousarray(policy.arg, dtype="<i2").tobytes())
        fh.write(np.ascontiguousarray(policy.sign, dtype="<i1").tobytes())


def policy_snapshot_read(fname, lattice: Lattice) -> PolicyField:
    """Load a policy dump onto a lattice built with the same parameters."""
    with open(fname, "rb") as fh:
        if fh.read(4) != _POLICY_MAGIC:
            raise ValueError("not a policy-field snapshot")
        _, K1, S, F, d = struct.unpack("<IQQQQ", fh.read(36))
        t0, tN, n_steps = struct.unpack("<ddq", fh.read(24))
        if (K1, S, F, d) != (lattice.grid.n_steps + 1, lattice.n_state_nodes,
                             lattice.n_fuel, lattice.d):
            raise ValueError("policy snapshot does not match the lattice shape")
        if abs(t0 - lattice.grid.t0) > 1e-12 or abs(tN - lattice.grid.tN) > 1e-12:
            raise ValueError("policy snapshot time grid differs from the lattice")
        kind = np.frombuffer(fh.read(K1 * S * F), dtype="<i1").reshape(K1, S, F).copy()
        arg = np.frombuffer(fh.read(2 * K1 * S * F), dtype="<i2").reshape(K1, S, F).copy()
        sign = np.frombuffer(fh.read(K1 * S * F), dtype="<i1").reshape(K1, S, F).copy()
    return PolicyField(kind, arg, sign, lattice)


def value_snapshot_read(fname) -> tuple[np.ndarray, dict]:
    """Read a snapshot back as (values, metadata); metadata carries the axes."""
    with open(fname, "rb") as fh:
        if fh.read(4) != _SNAP_MAGIC:
            raise ValueError("not a value-field snapshot")
        version, K1, S, F, d = struct.unpack("<IQQQQ", fh.read(36))
        t0, tN, n_steps = struct.unpack("<ddq", fh.read(24))
        axes = []
        for _ in range(d):
            (n_ax,) = struct.unpack("<Q", fh.read(8))
            axes.append(np.frombuffer(fh.read(8 * n_ax), dtype="<f8"))
        (n_fuel,) = struct.unpack("<Q", fh.read(8))
        fuel = np.frombuffer(fh.read(8 * n_fuel), dtype="<f8") if n_fuel else None
        vals = np.frombuffer(fh.read(8 * K1 * S * F), dtype="<f8").reshape(K1, S, F)
    return vals, {"version": version, "t0": t0, "tN": tN, "n_steps": n_steps,
                  "axes": axes, "fuel_values": fuel}
