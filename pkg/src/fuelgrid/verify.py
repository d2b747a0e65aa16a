"""Independent oracles and property checks for solved instances.

Everything here is built to distrust the solver: the brute-force oracle
enumerates feedback decision maps and prices each one by a plain forward
expectation recursion on the chain (maps that differ only on nodes a map
never reaches have equal payoff, so the enumeration skips them without
affecting the supremum); the recursion residual re-prices the right-hand side
of the value recursion at a later step or hitting rule the same way; the
supermartingale check follows fixed policies through exact conditional
expectations.  Statistical checks (reference invariance, truncation
continuity) run the simulator under different noise constructions and compare
distributions.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .controls import Decision, NoiseFunctionalPolicy, TimeGrid
from .payoff import estimate_objective
from .problem import FiniteFuel, ProblemSpec, batched_spec
from .simulate import NO_STOP, simulate_paths
from .solver import (
    CONTINUE,
    EXERT,
    EXIT,
    STOP,
    Lattice,
    PolicyField,
    TransitionModel,
    ValueField,
)

__all__ = [
    "InstanceTooLarge",
    "brute_force_value",
    "policy_value",
    "one_step_residual",
    "HittingRule",
    "check_dpp",
    "DPPCheck",
    "random_policy_field",
    "check_supermartingale",
    "SupermartingaleCheck",
    "check_supermartingale_mc",
    "Bin",
    "PartitionScheme",
    "grid_partition",
    "PastedPolicy",
    "concatenate_policies",
    "ReplayTreblePolicy",
    "ks_statistic",
    "ks_critical_value",
    "check_reference_invariance",
    "InvarianceResult",
    "check_truncation_continuity",
    "SuiteEntry",
    "SuiteReport",
    "timed_entry",
]

_PROB_FLOOR = 1e-15   # stencil mass below this is treated as unreachable
_COUNT_CAP = 10 ** 18


class InstanceTooLarge(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# chain tableau: precomputed local data for exact forward expectations
# ---------------------------------------------------------------------------

class _ChainTableau:
    """Per-node rewards, stencil mass, and neighbor wiring, precomputed once.

    Nodes are integer ids k * S * F + s * F + j.  Off-the-box moves carry their
    exit gain directly so the recursion never re-touches the coefficients.
    ``intercept`` is an optional (K+1, S, F) array; finite entries preterminate
    the recursion with that value (used for value-recursion right-hand sides).
    """

    def __init__(self, spec: ProblemSpec, lattice: Lattice, transitions: TransitionModel,
                 intercept: np.ndarray | None = None):
        spec_b = batched_spec(spec)
        lat = lattice
        self.lat = lat
        self.spec = spec
        K, S, F = lat.grid.n_steps, lat.n_state_nodes, lat.n_fuel
        A, d = spec.n_actions, lat.d
        self.K, self.S, self.F, self.A, self.d = K, S, F, A, d
        self.finite = lat.fuel_values is not None
        self.dt = transitions.dt
        self.interior = lat.interior
        self.stay = transitions.stay_prob
        self.up_prob = transitions.up_prob
        self.down_prob = transitions.down_prob
        self.nb_idx = np.stack([lat.up_index, lat.down_index], axis=2)  # (S, d, 2)
        self.intercept = intercept

        z_levels = lat.fuel_grid()
        xx = np.broadcast_to(lat.state_coords[:, None, :], (S, F, d))
        zz = np.broadcast_to(z_levels[None, :], (S, F))
        self.g1 = np.empty((K + 1, S, F))
        self.g2 = np.empty((K, S, F))
        self.fdt = np.empty((K, S, A, F))
        self.exert_cost = np.empty((K, S, d, 2))
        self.off_g1_same = np.empty((K, S, d, 2, F))   # exit gain at exert target off box
        self.off_g1_next = np.empty((K + 1, S, d, 2, F))  # exit gain off box at each slice
        for k in range(K + 1):
            t = float(lat.grid.times[k])
            self.g1[k] = np.asarray(spec_b.exit_gain(t, xx, zz), dtype=float).reshape(S, F)
            for i in range(d):
                for w, sign in ((0, +1), (1, -1)):
                    xo = lat.state_coords.copy()
                    xo[:, i] += sign * lat.spacings[i]
                    vals = np.asarray(spec_b.exit_gain(
                        t, np.broadcast_to(xo[:, None, :], (S, F, d)), zz),
                        dtype=float).reshape(S, F)
                    self.off_g1_next[k, :, i, w] = vals
                    if k < K:
                        self.off_g1_same[k, :, i, w] = vals
            if k == K:
                break
            self.g2[k] = np.asarray(spec_b.stop_gain(t, xx, zz), dtype=float).reshape(S, F)
            for a in range(A):
                act = spec.action_set[a]
                self.fdt[k, :, a] = np.asarray(spec_b.running_gain(
                    t, xx, zz, np.broadcast_to(act, (S, F, spec.l))),
                    dtype=float).reshape(S, F) * self.dt
            cp = np.asarray(spec_b.cost_plus(t, lat.state_coords), dtype=float)
            cm = np.asarray(spec_b.cost_minus(t, lat.state_coords), dtype=float)
            self.exert_cost[k, :, :, 0] = cp * lat.spacings[None, :]
            self.exert_cost[k, :, :, 1] = cm * lat.spacings[None, :]

    # node ids -----------------------------------------------------------
    def nid(self, k, s, j):
        return (k * self.S + s) * self.F + j

    def decode(self, nid):
        k, rem = divmod(nid, self.S * self.F)
        s, j = divmod(rem, self.F)
        return k, s, j

    @property
    def root(self):
        return self.nid(0, self.lat.root_state, self.lat.root_fuel)

    # structure ----------------------------------------------------------
    def is_closed(self, nid) -> bool:
        """Terminal, exterior, or intercepted: the value needs no decision."""
        k, s, j = self.decode(nid)
        if k == self.K or not self.interior[s, j]:
            return True
        return self.intercept is not None and np.isfinite(self.intercept[k, s, j])

    def closed_value(self, nid) -> float:
        k, s, j = self.decode(nid)
        if k < self.K and self.interior[s, j]:
            return float(self.intercept[k, s, j])
        return float(self.g1[k, s, j])

    def choices(self, nid):
        k, s, j = self.decode(nid)
        out = [("stop",)]
        if not self.finite or j < self.F - 1:
            for i in range(self.d):
                out.append(("exert", i, +1))
                out.append(("exert", i, -1))
        for a in range(self.A):
            out.append(("continue", a))
        return out

    def successors(self, nid, choice):
        """Decision successors as node ids; off-box moves are not successors
        (their exit gain is a leaf reward)."""
        k, s, j = self.decode(nid)
        if choice[0] == "stop":
            return ()
        if choice[0] == "continue":
            a = choice[1]
            out = []
            if self.stay[k, s, a] > _PROB_FLOOR:
                out.append(self.nid(k + 1, s, j))
            for i in range(self.d):
                for w in (0, 1):
                    prob = (self.up_prob if w == 0 else self.down_prob)[k, s, a, i]
                    nb = self.nb_idx[s, i, w]
                    if prob > _PROB_FLOOR and nb >= 0:
                        out.append(self.nid(k + 1, nb, j))
            return tuple(out)
        i, sign = choice[1], choice[2]
        w = 0 if sign > 0 else 1
        nb = self.nb_idx[s, i, w]
        jt = j + 1 if self.finite else j
        if nb < 0:
            return ()
        return (self.nid(k, nb, jt),)

    # pricing ------------------------------------------------------------
    def price(self, decide, memo: dict, nid: int, stack=None) -> float:
        """Forward expectation of the payoff from a node under a decision rule.

        Cyclic instantaneous-exertion chains price to -inf (an unbounded cost
        pile-up; meaningful when exertion costs are positive)."""
        hit = memo.get(nid)
        if hit is not None:
            return hit
        if self.is_closed(nid):
            val = self.closed_value(nid)
            memo[nid] = val
            return val
        if stack is None:
            stack = set()
        if nid in stack:
            return -np.inf
        stack.add(nid)
        k, s, j = self.decode(nid)
        choice = decide(nid)
        if choice[0] == "stop":
            val = float(self.g2[k, s, j])
        elif choice[0] == "continue":
            a = choice[1]
            val = float(self.fdt[k, s, a, j])
            p_stay = float(self.stay[k, s, a])
            if p_stay > _PROB_FLOOR:
                val += p_stay * self.price(decide, memo, self.nid(k + 1, s, j), stack)
            for i in range(self.d):
                for w in (0, 1):
                    prob = float((self.up_prob if w == 0 else self.down_prob)[k, s, a, i])
                    if prob <= _PROB_FLOOR:
                        continue
                    nb = self.nb_idx[s, i, w]
                    if nb >= 0:
                        val += prob * self.price(decide, memo, self.nid(k + 1, nb, j), stack)
                    else:
                        val += prob * float(self.off_g1_next[k + 1, s, i, w, j])
        else:
            i, sign = choice[1], choice[2]
            w = 0 if sign > 0 else 1
            jt = j + 1 if self.finite else j
            nb = self.nb_idx[s, i, w]
            cost = float(self.exert_cost[k, s, i, w])
            if nb >= 0:
                val = -cost + self.price(decide, memo, self.nid(k, nb, jt), stack)
            else:
                val = -cost + float(self.off_g1_same[k, s, i, w, jt])
        stack.discard(nid)
        memo[nid] = val
        return val

    def reachable_undecided(self, assignment: dict):
        """First (by (k, j, s)) reachable node the partial map leaves open."""
        seen = set()
        open_nodes = []
        stack = [self.root]
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            if self.is_closed(nid):
                continue
            choice = assignment.get(nid)
            if choice is None:
                open_nodes.append(nid)
                continue
            stack.extend(self.successors(nid, choice))
        if not open_nodes:
            return None
        return min(open_nodes, key=lambda n: (self.decode(n)[0], self.decode(n)[2],
                                              self.decode(n)[1]))

    def map_count_bound(self) -> int:
        """Product-form upper bound on the number of maps the enumeration
        prices (exact on trees, an overcount when the stencil recombines)."""
        memo: dict[int, int] = {}

        def cnt(nid, stack):
            got = memo.get(nid)
            if got is not None:
                return got
            if self.is_closed(nid):
                memo[nid] = 1
                return 1
            if nid in stack:
                return 1  # cycles terminate pricing immediately (-inf)
            stack.add(nid)
            total = 0
            for choice in self.choices(nid):
                prod = 1
                for succ in self.successors(nid, choice):
                    prod *= cnt(succ, stack)
                    if prod > _COUNT_CAP:
                        prod = _COUNT_CAP
                        break
                total = min(total + prod, _COUNT_CAP)
            stack.discard(nid)
            memo[nid] = total
            return total

        return cnt(self.root, set())


def _sup_over_maps(tableau: _ChainTableau, guard: int):
    """Supremum of the root payoff over feedback decision maps, by enumeration.

    Depth-first over the nodes each candidate map actually reaches; every
    completed map is priced by forward expectation.  Maps differing only on
    unreachable nodes are priced once (equal payoff).  Raises InstanceTooLarge
    when the map-count bound or the running tally exceeds ``guard``.
    """
    bound = tableau.map_count_bound()
    if bound > guard:
        raise InstanceTooLarge(
            f"about {bound} decision maps to price exceeds the guard {guard}")
    assignment: dict[int, tuple] = {}
    best = [-np.inf]
    count = [0]

    def recurse():
        nid = tableau.reachable_undecided(assignment)
        if nid is None:
            count[0] += 1
            if count[0] > guard:
                raise InstanceTooLarge(f"more than {guard} maps priced")
            val = tableau.price(assignment.get, {}, tableau.root)
            if val > best[0]:
                best[0] = val
            return
        for choice in tableau.choices(nid):
            assignment[nid] = choice
            recurse()
            del assignment[nid]

    recurse()
    return best[0], count[0]


def brute_force_value(spec: ProblemSpec, lattice: Lattice, transitions: TransitionModel,
                      guard: int = 10_000_000) -> float:
    """Exact optimal root value by exhaustive policy enumeration.

    Independent oracle: no backward optimization anywhere; each candidate
    feedback map is priced by forward expectation and the best one wins.
    """
    tab = _ChainTableau(spec, lattice, transitions)
    val, _ = _sup_over_maps(tab, guard)
    return val


def _policy_field_decider(tableau: _ChainTableau, policy_field: PolicyField):
    def decide(nid):
        k, s, j = tableau.decode(nid)
        kind = int(policy_field.kind[k, s, j])
        if kind == CONTINUE:
            return ("continue", int(policy_field.arg[k, s, j]))
        if kind == EXERT:
            return ("exert", int(policy_field.arg[k, s, j]),
                    int(policy_field.sign[k, s, j]))
        return ("stop",)
    return decide


def policy_value(spec: ProblemSpec, lattice: Lattice, transitions: TransitionModel,
                 policy_field: PolicyField) -> float:
    """Exact root payoff of one lattice feedback rule by forward expectation."""
    tab = _ChainTableau(spec, lattice, transitions)
    return tab.price(_policy_field_decider(tab, policy_field), {}, tab.root)


# ---------------------------------------------------------------------------
# one-step recursion residual (independent recomputation)
# ---------------------------------------------------------------------------

def one_step_residual(spec: ProblemSpec, value_field: ValueField, lattice: Lattice,
                      transitions: TransitionModel) -> float:
    """Max over interior nodes of |v - best branch| with branches re-priced here.

    Deliberately re-derives the stop / continue / exert candidates from the
    problem coefficients rather than calling into the solver.
    """
    spec_b = batched_spec(spec)
    v = value_field.values
    K = lattice.grid.n_steps
    S = lattice.n_state_nodes
    F = lattice.n_fuel
    finite = lattice.fuel_values is not None
    z_levels = lattice.fuel_grid()
    dt = transitions.dt
    worst = 0.0
    x_nodes = lattice.state_coords
    for k in range(K):
        t = float(lattice.grid.times[k])
        t1 = float(lattice.grid.times[k + 1])
        zz = np.broadcast_to(z_levels[None, :], (S, F))
        xx = np.broadcast_to(x_nodes[:, None, :], (S, F, lattice.d))
        stop_vals = np.asarray(spec_b.stop_gain(t, xx, zz), dtype=float).reshape(S, F)
        best = stop_vals.copy()
        for a in range(spec.n_actions):
            act = spec.action_set[a]
            run = np.asarray(spec_b.running_gain(
                t, xx, zz, np.broadcast_to(act, (S, F, spec.l))), dtype=float).reshape(S, F)
            exp_next = transitions.stay_prob[k, :, a, None] * v[k + 1]
            for i in range(lattice.d):
                for sign, nb, prob in ((+1, lattice.up_index[:, i],
                                        transitions.up_prob[k, :, a, i]),
                                       (-1, lattice.down_index[:, i],
                                        transitions.down_prob[k, :, a, i])):
                    vals = np.empty((S, F))
                    on = nb >= 0
                    vals[on] = v[k + 1][nb[on]]
                    if (~on).any():
                        xo = x_nodes[~on].copy()
                        xo[:, i] += sign * lattice.spacings[i]
                        vals[~on] = np.asarray(spec_b.exit_gain(
                            t1, np.broadcast_to(xo[:, None, :], (xo.shape[0], F, lattice.d)),
                            np.broadcast_to(z_levels[None, :], (xo.shape[0], F))),
                            dtype=float).reshape(-1, F)
                    exp_next = exp_next + prob[:, None] * vals
            best = np.maximum(best, run * dt + exp_next)
        cp = np.asarray(spec_b.cost_plus(t, x_nodes), dtype=float)
        cm = np.asarray(spec_b.cost_minus(t, x_nodes), dtype=float)
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
                    if (~on).any():
                        xo = x_nodes[~on].copy()
                        xo[:, i] += sign * lattice.spacings[i]
                        tgt[~on] = np.asarray(spec_b.exit_gain(
                            t, xo, np.full(xo.shape[0], z_levels[jt])), dtype=float).reshape(-1)
                    cand[:, j] = tgt - c * lattice.spacings[i]
                best = np.maximum(best, cand)
        resid = np.abs(v[k] - best)[lattice.interior]
        if resid.size:
            worst = max(worst, float(resid.max()))
    return worst


# ---------------------------------------------------------------------------
# value recursion at a later step or hitting rule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HittingRule:
    """Stop evaluation when a node first enters the marked region."""

    predicate: object  # callable (t, x, z) -> bool
    label: str = "hitting rule"

    def fires(self, t, x, z) -> bool:
        return bool(self.predicate(t, x, z))


@dataclass(frozen=True)
class DPPCheck:
    residual: float     # |v(root) - sup| when exact; v(root) - best sample otherwise
    exact: bool
    priced_maps: int
    rhs: float
    root_value: float


def _intercept_array(value_field: ValueField, lattice: Lattice, at) -> np.ndarray:
    """(K+1, S, F) array, finite where evaluation hands over to the value field."""
    K = lattice.grid.n_steps
    S, F = lattice.n_state_nodes, lattice.n_fuel
    cut = np.full((K + 1, S, F), np.nan)
    if isinstance(at, HittingRule):
        for k in range(K + 1):
            t = float(lattice.grid.times[k])
            for s in range(S):
                for j in range(F):
                    if at.fires(t, lattice.state_coords[s], lattice.fuel_of(j)):
                        cut[k, s, j] = value_field.values[k, s, j]
    else:
        u = int(at)
        cut[u] = value_field.values[u]
    return cut


def check_dpp(spec: ProblemSpec, value_field: ValueField, lattice: Lattice,
              transitions: TransitionModel, at, guard: int = 10_000_000,
              n_samples: int = 2000, seed: int = 0) -> DPPCheck:
    """Compare v(root) with the sup over decision maps truncated at ``at``.

    ``at`` is a step index (deterministic intermediate time) or a
    :class:`HittingRule`.  Exact enumeration when the instance allows it;
    otherwise stratified random maps give a one-sided (under-)estimate of the
    supremum, so a sampled check can only certify residual >= -tol.
    """
    cut = _intercept_array(value_field, lattice, at)
    tab = _ChainTableau(spec, lattice, transitions, intercept=cut)
    root = value_field.root_value()
    try:
        rhs, priced = _sup_over_maps(tab, guard)
        return DPPCheck(abs(root - rhs), True, priced, rhs, root)
    except InstanceTooLarge:
        rhs, priced = _sample_maps(spec, tab, n_samples, seed)
        return DPPCheck(root - rhs, False, priced, rhs, root)


def _sample_maps(spec, tableau: _ChainTableau, n_samples, seed):
    """Best of ``n_samples`` random maps, stratified by stop-step preference,
    action bias, and exertion appetite."""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 77], dtype=np.uint64)))
    best = -np.inf
    K = tableau.K
    for _ in range(n_samples):
        stop_slice = int(rng.integers(0, K + 1))
        action_bias = int(rng.integers(0, spec.n_actions))
        exert_appetite = float(rng.random())
        assignment: dict[int, tuple] = {}
        while True:
            nid = tableau.reachable_undecided(assignment)
            if nid is None:
                break
            k, _, _ = tableau.decode(nid)
            choices = tableau.choices(nid)
            if k >= stop_slice:
                assignment[nid] = ("stop",)
            else:
                exerts = [c for c in choices if c[0] == "exert"]
                if exerts and rng.random() < exert_appetite * 0.5:
                    assignment[nid] = exerts[int(rng.integers(0, len(exerts)))]
                elif rng.random() < 0.15:
                    assignment[nid] = ("stop",)
                else:
                    a = action_bias if rng.random() < 0.7 else int(rng.integers(0, spec.n_actions))
                    assignment[nid] = ("continue", a)
        val = tableau.price(assignment.get, {}, tableau.root)
        best = max(best, val)
    return best, n_samples


# ---------------------------------------------------------------------------
# supermartingale / martingale checks
# ---------------------------------------------------------------------------

def random_policy_field(spec: ProblemSpec, lattice: Lattice, rng: np.random.Generator,
                        p_stop: float = 0.2, p_exert: float = 0.3) -> PolicyField:
    """Admissible random feedback rule on the lattice.

    Finite-fuel exertion is drawn only where fuel remains; without a fuel axis
    only upward exertion is drawn so instantaneous chains stay acyclic.
    """
    K = lattice.grid.n_steps
    S = lattice.n_state_nodes
    F = lattice.n_fuel
    finite = lattice.fuel_values is not None
    kind = np.full((K + 1, S, F), EXIT, dtype=np.int8)
    arg = np.zeros((K + 1, S, F), dtype=np.int16)
    sign = np.zeros((K + 1, S, F), dtype=np.int8)
    n_actions = spec.n_actions
    for k in range(K):
        u = rng.random((S, F))
        kk = np.where(u < p_stop, STOP, CONTINUE).astype(np.int8)
        can_exert = np.ones((S, F), dtype=bool)
        if finite:
            can_exert[:, F - 1] = False
        exert_mask = (u >= p_stop) & (u < p_stop + p_exert) & can_exert
        kk[exert_mask] = EXERT
        aa = rng.integers(0, n_actions, size=(S, F)).astype(np.int16)
        dims = rng.integers(0, lattice.d, size=(S, F)).astype(np.int16)
        signs = np.where(rng.random((S, F)) < 0.5, 1, -1).astype(np.int8)
        if not finite:
            signs[:] = 1
        aa[exert_mask] = dims[exert_mask]
        ss = np.zeros((S, F), dtype=np.int8)
        ss[exert_mask] = signs[exert_mask]
        ext = ~lattice.interior
        kk[ext] = EXIT
        aa[ext] = 0
        ss[ext] = 0
        kind[k] = kk
        arg[k] = aa
        sign[k] = ss
    return PolicyField(kind, arg, sign, lattice)


def _policy_window_values(spec, lattice, transitions, pol: PolicyField, u: int, s: int,
                          value_field: ValueField) -> np.ndarray:
    """E[value-along-trajectory at s (stopped at the policy's stop) | node at u].

    Backward sweep from s to u following the fixed policy; the slice-s values
    are the value field itself (the process's definition at the window end).
    """
    spec_b = batched_spec(spec)
    lat = lattice
    S = lat.n_state_nodes
    F = lat.n_fuel
    finite = lat.fuel_values is not None
    z_levels = lat.fuel_grid()
    dt = transitions.dt
    R = value_field.values[s].copy()
    for k in range(s - 1, u - 1, -1):
        t = float(lat.grid.times[k])
        t1 = float(lat.grid.times[k + 1])
        xx = np.broadcast_to(lat.state_coords[:, None, :], (S, F, lat.d))
        zz = np.broadcast_to(z_levels[None, :], (S, F))
        g1_here = np.asarray(spec_b.exit_gain(t, xx, zz), dtype=float).reshape(S, F)
        g2 = np.asarray(spec_b.stop_gain(t, xx, zz), dtype=float).reshape(S, F)
        out = g1_here.copy()  # exterior nodes exit
        kindk = pol.kind[k]
        stop_m = (kindk == STOP) & lat.interior
        out[stop_m] = g2[stop_m]
        cont_m = (kindk == CONTINUE) & lat.interior
        if cont_m.any():
            for a in range(spec.n_actions):
                m = cont_m & (pol.arg[k] == a)
                if not m.any():
                    continue
                act = spec.action_set[a]
                run = np.asarray(spec_b.running_gain(
                    t, xx, zz, np.broadcast_to(act, (S, F, spec.l))),
                    dtype=float).reshape(S, F)
                exp_next = transitions.stay_prob[k, :, a, None] * R
                for i in range(lat.d):
                    for sgn, nb, prob in ((+1, lat.up_index[:, i],
                                           transitions.up_prob[k, :, a, i]),
                                          (-1, lat.down_index[:, i],
                                           transitions.down_prob[k, :, a, i])):
                        vals = np.empty((S, F))
                        on = nb >= 0
                        vals[on] = R[nb[on]]
                        if (~on).any():
                            xo = lat.state_coords[~on].copy()
                            xo[:, i] += sgn * lat.spacings[i]
                            vals[~on] = np.asarray(spec_b.exit_gain(
                                t1, np.broadcast_to(xo[:, None, :], (xo.shape[0], F, lat.d)),
                                np.broadcast_to(z_levels[None, :], (xo.shape[0], F))),
                                dtype=float).reshape(-1, F)
                        exp_next = exp_next + prob[:, None] * vals
                cand = run * dt + exp_next
                out[m] = cand[m]
        exert_m = (kindk == EXERT) & lat.interior
        if exert_m.any():
            cp = np.asarray(spec_b.cost_plus(t, lat.state_coords), dtype=float)
            cm = np.asarray(spec_b.cost_minus(t, lat.state_coords), dtype=float)
            if finite:
                for j in range(F - 2, -1, -1):
                    rows = np.nonzero(exert_m[:, j])[0]
                    for sidx in rows:
                        i = int(pol.arg[k, sidx, j])
                        sgn = int(pol.sign[k, sidx, j])
                        nb = lat.up_index[sidx, i] if sgn > 0 else lat.down_index[sidx, i]
                        c = cp[sidx, i] if sgn > 0 else cm[sidx, i]
                        if nb >= 0:
                            tgt = out[nb, j + 1]
                        else:
                            xo = lat.state_coords[sidx].copy()
                            xo[i] += sgn * lat.spacings[i]
                            tgt = float(np.asarray(spec_b.exit_gain(
                                t, xo, float(z_levels[j + 1])), dtype=float))
                        out[sidx, j] = tgt - c * lat.spacings[i]
            else:
                # only acyclic (monotone) chains are generated for this mode
                for _ in range(S + 1):
                    changed = False
                    rows = np.nonzero(exert_m[:, 0])[0]
                    for sidx in rows:
                        i = int(pol.arg[k, sidx, 0])
                        sgn = int(pol.sign[k, sidx, 0])
                        nb = lat.up_index[sidx, i] if sgn > 0 else lat.down_index[sidx, i]
                        c = cp[sidx, i] if sgn > 0 else cm[sidx, i]
                        if nb >= 0:
                            tgt = out[nb, 0]
                        else:
                            xo = lat.state_coords[sidx].copy()
                            xo[i] += sgn * lat.spacings[i]
                            tgt = float(np.asarray(spec_b.exit_gain(t, xo, 0.0), dtype=float))
                        new = tgt - c * lat.spacings[i]
                        if new != out[sidx, 0]:
                            out[sidx, 0] = new
                            changed = True
                    if not changed:
                        break
        R = out
    return R


@dataclass(frozen=True)
class SupermartingaleCheck:
    max_violation: float      # max over policies, windows, nodes of E[M_s|u] - M_u
    max_equality_gap: float   # under the designated optimal policy, if given
    n_policies: int
    n_windows: int


def check_supermartingale(
    spec: ProblemSpec,
    value_field: ValueField,
    lattice: Lattice,
    transitions: TransitionModel,
    policies,
    optimal_policy: PolicyField | None = None,
    windows=None,
) -> SupermartingaleCheck:
    """Exact lattice check of the supermartingale property of the
    value-along-trajectory process under every supplied policy, and of the
    martingale equality under the designated optimal policy.

    Conditional on sitting at a node at step u with stop and exit still ahead,
    the expected stopped process at step s must not exceed the node's value
    (equality under the optimizer); paths dead by u contribute equality
    trivially and are not re-checked.
    """
    K = lattice.grid.n_steps
    if windows is None:
        windows = [(u, s) for u in range(K + 1) for s in range(u, K + 1)]
    v = value_field.values
    policies = list(policies)
    worst = -np.inf
    n_windows = 0
    for pol in policies:
        for (u, s) in windows:
            R = _policy_window_values(spec, lattice, transitions, pol, u, s, value_field)
            gap = (R - v[u])[lattice.interior]
            if gap.size:
                worst = max(worst, float(gap.max()))
            n_windows += 1
    eq_gap = 0.0
    if optimal_policy is not None:
        for (u, s) in windows:
            R = _policy_window_values(spec, lattice, transitions, optimal_policy, u, s,
                                      value_field)
            gap = np.abs(R - v[u])[lattice.interior]
            if gap.size:
                eq_gap = max(eq_gap, float(gap.max()))
    return SupermartingaleCheck(float(worst), float(eq_gap), len(policies), n_windows)


def check_supermartingale_mc(trace_total: np.ndarray, windows=None, se_mult: float = 3.0):
    """Monte Carlo version on a value trace: the mean of the stopped process
    must not increase across steps beyond se_mult standard errors (paired).
    Returns the worst mean increase minus its allowance (<= 0 passes)."""
    n, k1 = trace_total.shape
    if windows is None:
        windows = [(u, s) for u in range(k1) for s in range(u + 1, k1)]
    worst = -np.inf
    for (u, s) in windows:
        diff = trace_total[:, s] - trace_total[:, u]
        se = diff.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
        worst = max(worst, float(diff.mean() - se_mult * se))
    return worst


# ---------------------------------------------------------------------------
# partitions and pasted policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Bin:
    """Half-open box in (x, z): x in [x_lower, x_upper), z in (z_lower, z_upper]
    (z_lower included only for the bottom bin).  The representative fuel level
    sits at the bin's top so it dominates every fuel value inside."""

    x_lower: np.ndarray
    x_upper: np.ndarray
    z_lower: float
    z_upper: float
    rep_x: np.ndarray
    rep_z: float
    include_z_lower: bool = False

    def contains(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        z = np.atleast_1d(z)
        in_x = np.all((x >= self.x_lower) & (x < self.x_upper), axis=1)
        in_z = (z > self.z_lower) & (z <= self.z_upper)
        if self.include_z_lower:
            in_z |= z == self.z_lower
        return in_x & in_z

    def diameter(self) -> float:
        return float(np.sqrt(np.sum((self.x_upper - self.x_lower) ** 2)
                             + (self.z_upper - self.z_lower) ** 2))


@dataclass(frozen=True, eq=False)
class PartitionScheme:
    bins: tuple

    def __post_init__(self):
        for b in self.bins:
            ok_x = np.all((b.rep_x >= b.x_lower) & (b.rep_x < b.x_upper))
            ok_z = (b.z_lower < b.rep_z <= b.z_upper) or (b.include_z_lower
                                                          and b.rep_z == b.z_lower)
            if not (ok_x and ok_z):
                raise ValueError("bin representative must lie inside its bin")
            if b.rep_z < b.z_upper - 1e-15:
                raise ValueError("bin representative fuel must dominate the bin")
        for i, a in enumerate(self.bins):
            for b in self.bins[i + 1:]:
                x_overlap = np.all((a.x_lower < b.x_upper) & (b.x_lower < a.x_upper))
                z_overlap = (a.z_lower < b.z_upper) and (b.z_lower < a.z_upper)
                z_touch = (a.include_z_lower and b.z_lower < a.z_lower <= b.z_upper) or \
                          (b.include_z_lower and a.z_lower < b.z_lower <= a.z_upper)
                if x_overlap and (z_overlap or z_touch):
                    raise ValueError("partition bins overlap")

    @property
    def diameter_bound(self) -> float:
        return max(b.diameter() for b in self.bins)

    def locate(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Bin index per row, -1 where no bin contains the point."""
        x = np.atleast_2d(x)
        z = np.atleast_1d(z)
        out = np.full(x.shape[0], -1, dtype=np.int64)
        for i, b in enumerate(self.bins):
            m = b.contains(x, z) & (out < 0)
            out[m] = i
        return out


def grid_partition(x_bounds, nx, z_upper: float, nz: int, z_lower: float = 0.0,
                   pad: float = 0.0) -> PartitionScheme:
    """Regular rectangular partition of a box in (x, z) with top-fuel reps."""
    x_bounds = [(lo - pad, hi + pad) for (lo, hi) in x_bounds]
    d = len(x_bounds)
    edges = [np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(x_bounds, nx)]
    for e in edges:
        e[-1] = np.nextafter(e[-1], np.inf)  # close the top face of the box
    z_edges = np.linspace(z_lower, z_upper, nz + 1) if nz > 0 else np.array([z_lower, z_upper])
    bins = []
    idx_grids = np.meshgrid(*[np.arange(n) for n in nx], indexing="ij")
    cells = np.stack([g.ravel() for g in idx_grids], axis=1)
    for cell in cells:
        lo = np.array([edges[i][cell[i]] for i in range(d)])
        hi = np.array([edges[i][cell[i] + 1] for i in range(d)])
        for j in range(len(z_edges) - 1):
            bins.append(Bin(lo, hi, float(z_edges[j]), float(z_edges[j + 1]),
                            rep_x=(lo + hi) / 2.0, rep_z=float(z_edges[j + 1]),
                            include_z_lower=(j == 0)))
    return PartitionScheme(tuple(bins))


class PastedPolicy(NoiseFunctionalPolicy):
    """Follow a base policy up to a step, then hand over to a per-bin policy.

    At the handover step each path's (x, z) is located in the partition and
    the matching bin policy takes over (its increments continue from the level
    already exerted); paths that fall in no bin stop at the handover step.
    Bin policies must be memoryless per step (feedback or open-loop rules);
    the pasted policy itself carries all per-path memory.
    """

    vectorized = True

    def __init__(self, base: NoiseFunctionalPolicy, u_step: int, scheme: PartitionScheme,
                 bin_policies, d: int):
        if len(scheme.bins) != len(bin_policies):
            raise ValueError("need exactly one policy per bin")
        self.base = base
        self.u_step = u_step
        self.scheme = scheme
        self.bin_policies = list(bin_policies)
        self.d = d
        self._bin = None

    def begin(self, n_paths: int) -> None:
        self.base.begin(n_paths)
        for bp in self.bin_policies:
            bp.begin(n_paths)
        self._bin = np.full(n_paths, -2, dtype=np.int64)

    def decide(self, k, noise_prefix, state):
        if state is None:
            raise ValueError("pasted policies need state tracking")
        x, z = state
        stop, action, incp, incm = self.decide_many(
            k, noise_prefix[None, ...], np.atleast_2d(np.asarray(x, dtype=float)),
            np.atleast_1d(z))
        return Decision(bool(stop[0]), int(action[0]), incp[0], incm[0])

    def decide_many(self, k, noise_block, x_block, z_block):
        n = noise_block.shape[0]
        if self._bin is None or len(self._bin) != n:
            self.begin(n)
        if k < self.u_step:
            return self.base.decide_many(k, noise_block, x_block, z_block)
        if k == self.u_step:
            self._bin = self.scheme.locate(x_block, z_block)
        stop = np.zeros(n, dtype=bool)
        action = np.zeros(n, dtype=np.int64)
        incp = np.zeros((n, self.d))
        incm = np.zeros((n, self.d))
        stop[self._bin < 0] = True  # no bin: stop at the handover step
        for b_idx in np.unique(self._bin):
            if b_idx < 0:
                continue
            rows = np.nonzero(self._bin == b_idx)[0]
            s, a, ip, im = self.bin_policies[int(b_idx)].decide_many(
                k, noise_block[rows], x_block[rows], z_block[rows])
            stop[rows] = s
            action[rows] = a
            incp[rows] = ip
            incm[rows] = im
        return stop, action, incp, incm

    def _d_hint(self):
        return self.d


def concatenate_policies(base: NoiseFunctionalPolicy, u_step: int, scheme: PartitionScheme,
                         bin_policies, d: int) -> PastedPolicy:
    """Paste per-bin continuation policies onto a base policy at a given step."""
    return PastedPolicy(base, u_step, scheme, bin_policies, d)


class ReplayTreblePolicy(NoiseFunctionalPolicy):
    """Open-loop replay of recorded (actions, increments, stop) arrays.

    Used to apply a realized control treble to a different initial condition;
    the simulator's own budget rule then produces exactly the truncated
    control."""

    vectorized = True

    def __init__(self, actions, inc_plus, inc_minus, flip_index):
        self.actions = actions
        self.inc_plus = inc_plus
        self.inc_minus = inc_minus
        self.flip_index = flip_index
        self.d = inc_plus.shape[2]

    def decide(self, k, noise_prefix, state):
        stop = self.flip_index[0] != NO_STOP and k == self.flip_index[0]
        return Decision(bool(stop), int(self.actions[0, k]),
                        self.inc_plus[0, k], self.inc_minus[0, k])

    def decide_many(self, k, noise_block, x_block, z_block):
        stop = (self.flip_index != NO_STOP) & (self.flip_index == k)
        return stop, self.actions[:, k], self.inc_plus[:, k], self.inc_minus[:, k]

    def _d_hint(self):
        return self.d


# ---------------------------------------------------------------------------
# statistical checks
# ---------------------------------------------------------------------------

def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / len(a)
    cdf_b = np.searchsorted(b, pooled, side="right") / len(b)
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_critical_value(n1: int, n2: int, level: float = 0.01) -> float:
    c = np.sqrt(-np.log(level / 2.0) / 2.0)
    return float(c * np.sqrt((n1 + n2) / (n1 * n2)))


@dataclass(frozen=True)
class InvarianceResult:
    j1: float
    se1: float
    j2: float
    se2: float
    combined_se: float
    ks_stats: dict
    ks_critical: float
    passed: bool


def check_reference_invariance(
    spec: ProblemSpec,
    policy: NoiseFunctionalPolicy,
    x0,
    z0: float,
    grid: TimeGrid,
    n_paths: int,
    seeds: tuple[int, int],
    constructions: tuple[str, str] = ("increments", "bridge"),
    ks_level: float = 0.01,
    se_mult: float = 3.0,
) -> InvarianceResult:
    """Estimate the objective under two different constructions of the driving
    noise (distinct substream seeds; by default one direct, one dyadic-bridge)
    and compare both the means and the joint outcome distributions."""
    b1 = simulate_paths(spec, policy, x0, z0, grid, n_paths, seeds[0],
                        noise_construction=constructions[0])
    b2 = simulate_paths(spec, policy, x0, z0, grid, n_paths, seeds[1],
                        noise_construction=constructions[1])
    j1, se1 = estimate_objective(spec, b1)
    j2, se2 = estimate_objective(spec, b2)
    combined = float(np.sqrt(se1 ** 2 + se2 ** 2))
    mean_ok = abs(j1 - j2) <= se_mult * combined

    ts = grid.times
    coords = {
        "stop_time": (ts[b1.tau_step], ts[b2.tau_step]),
        "exit_time": (ts[b1.rho_step], ts[b2.rho_step]),
        "fuel_T": (b1.fuel[:, -1], b2.fuel[:, -1]),
    }
    for i in range(b1.d):
        coords[f"x_T_{i}"] = (b1.states[:, -1, i], b2.states[:, -1, i])
    crit = ks_critical_value(n_paths, n_paths, ks_level)
    ks = {name: ks_statistic(a, b) for name, (a, b) in coords.items()}
    ks_ok = all(v < crit for v in ks.values())
    return InvarianceResult(j1, se1, j2, se2, combined, ks, crit, bool(mean_ok and ks_ok))


def check_truncation_continuity(
    spec: ProblemSpec,
    u: float,
    pairs,
    policies,
    delta: float,
    n_steps: int,
    n_paths: int,
    seed: int,
):
    """Estimate |J(x1, z1; treble) - J(x2, z2; truncated treble)| per pair and
    policy, pairing paths through common noise.  Diagnostic only: smallness is
    a property of the user's problem, not of the code."""
    import dataclasses

    if not isinstance(spec.fuel_mode, FiniteFuel):
        raise ValueError("truncation continuity is a finite-fuel diagnostic")
    spec_u = dataclasses.replace(spec, start_t=float(u)) if spec.start_t != u else spec
    grid = TimeGrid(float(u), spec.horizon_T, n_steps)
    from .payoff import _payoff_from_start

    rows = []
    for (x1, z1), (x2, z2) in pairs:
        if z2 < z1:
            raise ValueError("each pair needs z2 >= z1")
        gap = float(np.sqrt(np.sum((np.atleast_1d(x1) - np.atleast_1d(x2)) ** 2)
                            + (z1 - z2) ** 2))
        if gap >= delta:
            raise ValueError(f"pair separation {gap} is not below delta={delta}")
        for p_idx, pol in enumerate(policies):
            b1 = simulate_paths(spec_u, pol, x1, z1, grid, n_paths, seed)
            treble = ReplayTreblePolicy(b1.actions, b1.inc_plus, b1.inc_minus, b1.flip_index)
            b2 = simulate_paths(spec_u, treble, x2, z2, grid, n_paths, seed)
            v1 = _payoff_from_start(spec_u, b1)
            v2 = _payoff_from_start(spec_u, b2)
            diff = v1 - v2
            se = float(diff.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
            rows.append({"pair": ((x1, z1), (x2, z2)), "policy": p_idx,
                         "diff": float(diff.mean()), "se": se,
                         "abs_diff": abs(float(diff.mean()))})
    max_abs = max(r["abs_diff"] for r in rows) if rows else 0.0
    return {"rows": rows, "max_abs_diff": max_abs}


# ---------------------------------------------------------------------------
# suite report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuiteEntry:
    name: str
    instance: str
    statistic: float
    tolerance: float
    passed: bool
    runtime: float
    detail: str = ""


@dataclass(frozen=True)
class SuiteReport:
    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries",
                           tuple(sorted(self.entries, key=lambda e: (e.name, e.instance))))

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def to_json(self) -> str:
        """Deterministic body; runtimes are timing metadata (they vary run to run)."""
        entries = []
        timing = {}
        for e in self.entries:
            row = dict(e.__dict__)
            timing[f"{e.name}/{e.instance}"] = row.pop("runtime")
            entries.append(row)
        return json.dumps({
            "passed": self.passed,
            "entries": entries,
            "meta": {"runtimes_seconds": timing},
        }, indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'check':40s} {'instance':24s} {'statistic':>12s} {'tol':>10s} {'ok':>4s}"]
        for e in self.entries:
            lines.append(f"{e.name:40s} {e.instance:24s} {e.statistic:12.4g} "
                         f"{e.tolerance:10.3g} {'yes' if e.passed else 'NO':>4s}")
        return "\n".join(lines)


def timed_entry(name, instance, fn, tolerance, compare="abs<=") -> SuiteEntry:
    """Run ``fn`` returning a statistic and wrap it as a suite entry."""
    start = time.perf_counter()
    stat = float(fn())
    elapsed = time.perf_counter() - start
    if compare == "abs<=":
        ok = abs(stat) <= tolerance
    elif compare == "<=":
        ok = stat <= tolerance
    elif compare == "bool":
        ok = bool(stat)
    else:
        raise ValueError(compare)
    return SuiteEntry(name, instance, stat, tolerance, ok, elapsed)
