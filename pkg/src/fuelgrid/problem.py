"""Problem definition: coefficients, payoffs, costs, domain, fuel mode.

A :class:`ProblemSpec` bundles everything a controlled-diffusion instance
needs.  Coefficient callables follow a batched numpy contract (leading axes
broadcast): drift ``(t, x[..,d], a[..,l]) -> [..,d]``, diffusion ``-> [..,d,d']``,
running gain ``(t, x, z, a) -> [..]``, exit/stop gains ``(t, x, z) -> [..]``,
costs ``(t, x) -> [..,d]``, domain indicator ``(x, z) -> bool[..]``.  Specs not
built from the registered library may set ``vectorized=False`` to get a
row-loop adapter everywhere.

The module also hosts the named parametric coefficient forms and the JSON
config loader that the command line uses.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "FiniteFuel",
    "InfiniteFuel",
    "Stieltjes",
    "SegmentIntegral",
    "ProblemSpec",
    "CheckResult",
    "ValidationReport",
    "validate_problem",
    "ProblemConfigError",
    "load_problem",
    "problem_from_dict",
]


@dataclass(frozen=True)
class FiniteFuel:
    """Total-variation budget for the singular control (fuel cap)."""

    cap: float


@dataclass(frozen=True)
class InfiniteFuel:
    """Uncapped control; variation_exponent is the moment users care about."""

    variation_exponent: float = 1.0


@dataclass(frozen=True)
class Stieltjes:
    """Costs charged at the pre-jump state, linearly in the jump size."""


@dataclass(frozen=True)
class SegmentIntegral:
    """Costs integrated along the straight jump segment (direction-uniform costs only)."""

    quadrature_steps: int = 64


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    horizon_T: float
    start_t: float
    d: int
    d_prime: int
    l: int
    drift: object
    diffusion: object
    running_gain: object
    exit_gain: object
    stop_gain: object
    cost_plus: object
    cost_minus: object
    domain_indicator: object
    action_set: np.ndarray
    fuel_mode: FiniteFuel | InfiniteFuel
    cost_convention: Stieltjes | SegmentIntegral = Stieltjes()
    payoff_floor: float = 0.0
    costs_uniform: bool = False
    vectorized: bool = True
    source: dict | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.start_t < self.horizon_T:
            raise ValueError("need 0 <= start_t < horizon_T")
        acts = np.atleast_2d(np.asarray(self.action_set, dtype=float))
        if acts.size == 0:
            raise ValueError("action_set must be nonempty")
        if acts.shape[1] != self.l:
            raise ValueError(f"actions must have {self.l} entries, got {acts.shape[1]}")
        acts.flags.writeable = False
        object.__setattr__(self, "action_set", acts)
        if isinstance(self.fuel_mode, FiniteFuel) and self.fuel_mode.cap < 0:
            raise ValueError("finite fuel cap must be >= 0")
        if isinstance(self.fuel_mode, InfiniteFuel) and self.fuel_mode.variation_exponent <= 0:
            raise ValueError("variation exponent must be > 0")
        if self.payoff_floor < 0:
            raise ValueError("payoff_floor must be >= 0")
        if isinstance(self.cost_convention, SegmentIntegral):
            if self.cost_convention.quadrature_steps < 1:
                raise ValueError("quadrature_steps must be >= 1")
            if self.d > 1 and not self.costs_uniform:
                raise ValueError(
                    "segment-integral costs require direction-uniform cost vectors"
                )

    @property
    def n_actions(self) -> int:
        return self.action_set.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.d, self.d_prime, self.l)

    def fuel_cap(self) -> float:
        return self.fuel_mode.cap if isinstance(self.fuel_mode, FiniteFuel) else np.inf

    def descriptor_hash(self) -> str:
        import hashlib

        if self.source is not None:
            blob = json.dumps(self.source, sort_keys=True).encode()
        else:
            blob = repr((self.horizon_T, self.start_t, self.dims,
                         self.action_set.tolist(), self.fuel_mode,
                         self.cost_convention, self.payoff_floor)).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# batched-call adapters for scalar user coefficients
# ---------------------------------------------------------------------------

def _rowloop_field(fn, d_out):
    def wrapped(t, x, *rest):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return np.asarray(fn(t, x, *rest), dtype=float)
        lead = x.shape[:-1]
        flat_x = x.reshape(-1, x.shape[-1])
        flat_rest = [np.broadcast_to(r, lead + np.shape(r)[len(lead):]).reshape(
            (flat_x.shape[0],) + np.shape(r)[len(lead):]) for r in rest]
        rows = [np.asarray(fn(t, flat_x[i], *[fr[i] for fr in flat_rest]), dtype=float)
                for i in range(flat_x.shape[0])]
        out = np.stack(rows)
        return out.reshape(lead + out.shape[1:])
    return wrapped


def batched_spec(spec: ProblemSpec) -> ProblemSpec:
    """Return a spec whose coefficient callables accept leading batch axes."""
    if spec.vectorized:
        return spec

    def loop_scalar(fn):
        def wrapped(t, x, *rest):
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                return float(fn(t, x, *rest))
            lead = x.shape[:-1]
            flat_x = x.reshape(-1, x.shape[-1])
            flat_rest = []
            for r in rest:
                r = np.asarray(r, dtype=float)
                extra = r.shape[len(lead):]
                flat_rest.append(np.broadcast_to(r, lead + extra).reshape((flat_x.shape[0],) + extra))
            vals = [float(fn(t, flat_x[i], *[fr[i] for fr in flat_rest]))
                    for i in range(flat_x.shape[0])]
            return np.array(vals).reshape(lead)
        return wrapped

    def loop_domain(fn):
        def wrapped(x, z):
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                return bool(fn(x, z))
            lead = x.shape[:-1]
            flat_x = x.reshape(-1, x.shape[-1])
            flat_z = np.broadcast_to(z, lead).reshape(-1)
            vals = [bool(fn(flat_x[i], flat_z[i])) for i in range(flat_x.shape[0])]
            return np.array(vals).reshape(lead)
        return wrapped

    import dataclasses
    return dataclasses.replace(
        spec,
        drift=_rowloop_field(spec.drift, spec.d),
        diffusion=_rowloop_field(spec.diffusion, (spec.d, spec.d_prime)),
        running_gain=loop_scalar(spec.running_gain),
        exit_gain=loop_scalar(spec.exit_gain),
        stop_gain=loop_scalar(spec.stop_gain),
        cost_plus=_rowloop_field(spec.cost_plus, spec.d),
        cost_minus=_rowloop_field(spec.cost_minus, spec.d),
        domain_indicator=loop_domain(spec.domain_indicator),
        vectorized=True,
    )


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    name: str
    status: str  # "pass" | "fail" | "warn"
    detail: str
    sampled_points: int


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.status != "fail" for c in self.checks)

    def by_name(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61)


def _van_der_corput(n: int, base: int) -> np.ndarray:
    idx = np.arange(1, n + 1, dtype=np.int64)
    out = np.zeros(n)
    denom = 1.0
    work = idx.copy()
    while work.max() > 0:
        denom *= base
        out += (work % base) / denom
        work //= base
    return out


def halton_points(n: int, dim: int, seed: int = 0) -> np.ndarray:
    """Low-discrepancy points in [0,1)^dim with a seeded rotation shift."""
    if dim > len(_PRIMES):
        raise ValueError(f"at most {len(_PRIMES)} quasi-random dimensions supported")
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0x9E3779B9], dtype=np.uint64)))
    shift = rng.random(dim)
    cols = [_van_der_corput(n, _PRIMES[j]) for j in range(dim)]
    return np.mod(np.stack(cols, axis=1) + shift, 1.0)


def validate_problem(
    spec: ProblemSpec,
    samples: int = 256,
    seed: int = 0,
    probe_bounds=None,
    lipschitz_warn_ratio: float = 1e4,
) -> ValidationReport:
    """Sanity-probe a problem instance.

    Runs structural checks (dimensions, action set, fuel/cost settings), a
    sampled lower-bound check on the exit and stop gains against the payoff
    floor, and a heuristic finite-difference probe of the drift and diffusion
    (a warn, never a fail: boundedness of difference quotients is not
    decidable from samples).  Deterministic given (spec, samples, seed).
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    spec_b = batched_spec(spec)
    checks: list[CheckResult] = []

    # structural: action set and fuel mode were validated at construction, so
    # reaching this point means they are consistent; record them explicitly.
    checks.append(CheckResult("action_set", "pass",
                              f"{spec.n_actions} action(s) of dimension {spec.l}", 0))
    fm = spec.fuel_mode
    fdetail = (f"finite cap={fm.cap}" if isinstance(fm, FiniteFuel)
               else f"infinite, variation exponent p={fm.variation_exponent}")
    checks.append(CheckResult("fuel_mode", "pass", fdetail, 0))

    if probe_bounds is None:
        lo = -np.ones(spec.d)
        hi = np.ones(spec.d)
    else:
        lo = np.asarray([b[0] for b in probe_bounds], dtype=float)
        hi = np.asarray([b[1] for b in probe_bounds], dtype=float)
    z_hi = fm.cap if isinstance(fm, FiniteFuel) and fm.cap > 0 else 1.0

    pts = halton_points(samples, 2 + spec.d, seed)
    ts = spec.start_t + pts[:, 0] * (spec.horizon_T - spec.start_t)
    zs = pts[:, 1] * z_hi
    xs = lo + pts[:, 2:] * (hi - lo)

    # dimension consistency at one probe point
    try:
        a0 = spec.action_set[0]
        mu0 = np.asarray(spec_b.drift(float(ts[0]), xs[0], a0), dtype=float)
        sg0 = np.asarray(spec_b.diffusion(float(ts[0]), xs[0], a0), dtype=float)
        cp0 = np.asarray(spec_b.cost_plus(float(ts[0]), xs[0]), dtype=float)
        cm0 = np.asarray(spec_b.cost_minus(float(ts[0]), xs[0]), dtype=float)
        float(spec_b.running_gain(float(ts[0]), xs[0], float(zs[0]), a0))
        bool(np.asarray(spec_b.domain_indicator(xs[0], float(zs[0]))))
        ok = (mu0.shape[-1] == spec.d and sg0.shape[-2:] == (spec.d, spec.d_prime)
              and cp0.shape[-1] == spec.d and cm0.shape[-1] == spec.d)
        checks.append(CheckResult(
            "dims", "pass" if ok else "fail",
            "coefficient output shapes match (d, d', l)" if ok else
            f"shape mismatch: drift {mu0.shape}, diffusion {sg0.shape}, costs {cp0.shape}/{cm0.shape}",
            1))
    except Exception as exc:  # noqa: BLE001 - report, do not crash the probe
        checks.append(CheckResult("dims", "fail", f"coefficient evaluation failed: {exc}", 1))

    # payoff floor on sampled (t, x, z)
    g1 = np.asarray(spec_b.exit_gain(ts, xs, zs), dtype=float)
    g2 = np.asarray(spec_b.stop_gain(ts, xs, zs), dtype=float)
    bad = int(np.sum(g1 < -spec.payoff_floor) + np.sum(g2 < -spec.payoff_floor))
    checks.append(CheckResult(
        "payoff_floor", "pass" if bad == 0 else "fail",
        ("all sampled exit/stop gains >= -floor" if bad == 0 else
         f"{bad} sampled gain value(s) below -{spec.payoff_floor}"),
        samples))

    # heuristic difference-quotient probe on consecutive sample pairs
    x_a, x_b = xs[:-1], xs[1:]
    gaps = np.linalg.norm(x_b - x_a, axis=1)
    keep = gaps > 1e-12
    mu_ratio = sg_ratio = 0.0
    if keep.any():
        for a in spec.action_set:
            t_mid = float(np.median(ts))
            mu_a = np.asarray(spec_b.drift(t_mid, x_a[keep], a), dtype=float)
            mu_b = np.asarray(spec_b.drift(t_mid, x_b[keep], a), dtype=float)
            sg_a = np.asarray(spec_b.diffusion(t_mid, x_a[keep], a), dtype=float)
            sg_b = np.asarray(spec_b.diffusion(t_mid, x_b[keep], a), dtype=float)
            mu_ratio = max(mu_ratio, float(np.max(
                np.linalg.norm(mu_b - mu_a, axis=-1) / gaps[keep])))
            sg_ratio = max(sg_ratio, float(np.max(
                np.linalg.norm((sg_b - sg_a).reshape(sg_a.shape[0], -1), axis=-1) / gaps[keep])))
    warned = mu_ratio > lipschitz_warn_ratio or sg_ratio > lipschitz_warn_ratio
    checks.append(CheckResult(
        "lipschitz_mu", "warn" if mu_ratio > lipschitz_warn_ratio else "pass",
        f"max |drift difference| / |dx| = {mu_ratio:.6g}", int(keep.sum())))
    checks.append(CheckResult(
        "lipschitz_sigma", "warn" if sg_ratio > lipschitz_warn_ratio else "pass",
        f"max |diffusion difference| / |dx| = {sg_ratio:.6g}", int(keep.sum())))

    conv = spec.cost_convention
    checks.append(CheckResult(
        "cost_convention", "pass",
        ("Stieltjes" if isinstance(conv, Stieltjes)
         else f"segment integral, {conv.quadrature_steps} panels, uniform costs declared"),
        0))
    return ValidationReport(tuple(checks))


# ---------------------------------------------------------------------------
# registered coefficient library (named parametric forms)
# ---------------------------------------------------------------------------

class ProblemConfigError(ValueError):
    """Config rejected; the message names the offending field."""


def _need(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise ProblemConfigError(f"missing field '{where}{key}'")
    return cfg[key]


def _mat(value, shape, where):
    arr = np.asarray(value, dtype=float)
    if arr.shape != shape:
        raise ProblemConfigError(f"field '{where}' must have shape {shape}, got {arr.shape}")
    return arr


def make_drift(cfg: dict, d: int, l: int):
    form = _need(cfg, "form", "drift.")
    if form == "affine":
        A = _mat(cfg.get("A", np.zeros((d, d))), (d, d), "drift.A")
        b = _mat(cfg.get("b", np.zeros(d)), (d,), "drift.b")
        B = _mat(cfg.get("B", np.zeros((d, l))), (d, l), "drift.B")

        def drift(t, x, a):
            x = np.asarray(x, dtype=float)
            a = np.asarray(a, dtype=float)
            return x @ A.T + b + a @ B.T
        return drift
    if form == "constant":
        v = _mat(_need(cfg, "value", "drift."), (d,), "drift.value")

        def drift(t, x, a):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(v, x.shape).copy()
        return drift
    if form == "zero":
        return make_drift({"form": "constant", "value": [0.0] * d}, d, l)
    raise ProblemConfigError(f"unknown drift form '{form}'")


def make_diffusion(cfg: dict, d: int, d_prime: int):
    form = _need(cfg, "form", "diffusion.")
    if form == "constant":
        v = _mat(_need(cfg, "value", "diffusion."), (d, d_prime), "diffusion.value")

        def diffusion(t, x, a):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(v, x.shape[:-1] + (d, d_prime)).copy()
        return diffusion
    if form == "zero":
        return make_diffusion({"form": "constant",
                               "value": np.zeros((d, d_prime))}, d, d_prime)
    if form == "proportional":
        # sigma(t, x, a) = value * x[index]; geometric-Brownian style
        v = _mat(_need(cfg, "value", "diffusion."), (d, d_prime), "diffusion.value")
        idx = int(cfg.get("index", 0))

        def diffusion(t, x, a):
            x = np.asarray(x, dtype=float)
            return x[..., idx, None, None] * v
        return diffusion
    if form == "affine":
        base = _mat(_need(cfg, "base", "diffusion."), (d, d_prime), "diffusion.base")
        slope = _mat(cfg.get("slope", np.zeros((d, d_prime))), (d, d_prime),
                     "diffusion.slope")
        idx = int(cfg.get("index", 0))

        def diffusion(t, x, a):
            x = np.asarray(x, dtype=float)
            return base + x[..., idx, None, None] * slope
        return diffusion
    raise ProblemConfigError(f"unknown diffusion form '{form}'")


def _poly_eval(terms, t, x, z, a=None):
    x = np.asarray(x, dtype=float)
    total = np.zeros(np.broadcast_shapes(x.shape[:-1], np.shape(z), np.shape(t)))
    for term in terms:
        val = np.full_like(total, float(term.get("coef", 1.0)))
        tp = int(term.get("t_power", 0))
        if tp:
            val = val * np.asarray(t, dtype=float) ** tp
        for i, p in enumerate(term.get("x_powers", [])):
            if p:
                val = val * x[..., i] ** int(p)
        zp = int(term.get("z_power", 0))
        if zp:
            val = val * np.asarray(z, dtype=float) ** zp
        if a is not None:
            a = np.asarray(a, dtype=float)
            for j, p in enumerate(term.get("a_powers", [])):
                if p:
                    val = val * a[..., j] ** int(p)
        total = total + val
    return total


def make_gain(cfg: dict, d: int, l: int, with_action: bool):
    form = _need(cfg, "form", "gain.")
    if form == "zero":
        cfg = {"form": "constant", "value": 0.0}
        form = "constant"
    if form == "constant":
        v = float(_need(cfg, "value", "gain."))
        if with_action:
            def gain(t, x, z, a):
                x = np.asarray(x, dtype=float)
                shape = np.broadcast_shapes(x.shape[:-1], np.shape(z))
                return np.full(shape, v)
        else:
            def gain(t, x, z):
                x = np.asarray(x, dtype=float)
                shape = np.broadcast_shapes(x.shape[:-1], np.shape(z))
                return np.full(shape, v)
        return gain
    if form in ("polynomial", "scaled_exp"):
        terms = cfg.get("terms", [])
        if not with_action and any(term.get("a_powers") for term in terms):
            raise ProblemConfigError("field 'gain.terms': a_powers are only "
                                     "meaningful in the running gain")
        rate = float(cfg.get("rate", 0.0)) if form == "scaled_exp" else 0.0
        if with_action:
            def gain(t, x, z, a):
                out = _poly_eval(terms, t, x, z, a)
                return out * np.exp(rate * np.asarray(t, dtype=float)) if rate else out
        else:
            def gain(t, x, z):
                out = _poly_eval(terms, t, x, z)
                return out * np.exp(rate * np.asarray(t, dtype=float)) if rate else out
        return gain
    raise ProblemConfigError(f"unknown gain form '{form}'")


def make_costs(cfg: dict, d: int):
    """Returns (cost function, is_coordinate_uniform)."""
    form = _need(cfg, "form", "cost.")
    if form == "constant":
        v = _mat(_need(cfg, "value", "cost."), (d,), "cost.value")
        uniform = bool(np.all(v == v[0]))

        def cost(t, x):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(v, x.shape).copy()
        return cost, uniform
    if form == "affine":
        base = _mat(_need(cfg, "base", "cost."), (d,), "cost.base")
        slope = _mat(cfg.get("slope", np.zeros((d, d))), (d, d), "cost.slope")
        uniform = bool(np.all(base == base[0]) and np.all(slope == slope[0]))

        def cost(t, x):
            x = np.asarray(x, dtype=float)
            return base + x @ slope.T
        return cost, uniform
    raise ProblemConfigError(f"unknown cost form '{form}'")


def make_domain(cfg: dict, d: int):
    form = _need(cfg, "form", "domain.")
    if form == "all":
        def domain(x, z):
            x = np.asarray(x, dtype=float)
            return np.ones(np.broadcast_shapes(x.shape[:-1], np.shape(z)), dtype=bool)
        return domain
    if form == "box":
        lo = _mat(_need(cfg, "x_lower", "domain."), (d,), "domain.x_lower")
        hi = _mat(_need(cfg, "x_upper", "domain."), (d,), "domain.x_upper")
        z_hi = cfg.get("z_upper")

        def domain(x, z):
            x = np.asarray(x, dtype=float)
            inside = np.all((x >= lo) & (x <= hi), axis=-1)
            if z_hi is not None:
                inside = inside & (np.asarray(z, dtype=float) <= float(z_hi))
            return inside
        return domain
    if form == "half_space":
        normal = _mat(_need(cfg, "normal", "domain."), (d,), "domain.normal")
        offset = float(_need(cfg, "offset", "domain."))

        def domain(x, z):
            x = np.asarray(x, dtype=float)
            proj = x @ normal
            return (proj <= offset) & np.ones(np.broadcast_shapes(proj.shape, np.shape(z)), dtype=bool)
        return domain
    if form == "ball":
        center = _mat(_need(cfg, "center", "domain."), (d,), "domain.center")
        radius = float(_need(cfg, "radius", "domain."))

        def domain(x, z):
            x = np.asarray(x, dtype=float)
            dist = np.linalg.norm(x - center, axis=-1)
            return (dist <= radius) & np.ones(np.broadcast_shapes(dist.shape, np.shape(z)), dtype=bool)
        return domain
    raise ProblemConfigError(f"unknown domain form '{form}'")


def problem_from_dict(cfg: dict) -> ProblemSpec:
    """Build a ProblemSpec from a config dictionary (see docs/config_schema.md)."""
    dims = _need(cfg, "dims", "")
    d = int(_need(dims, "d", "dims."))
    d_prime = int(_need(dims, "d_prime", "dims."))
    l = int(_need(dims, "l", "dims."))
    horizon_T = float(_need(cfg, "horizon_T", ""))
    start_t = float(cfg.get("start_t", 0.0))

    fuel_cfg = _need(cfg, "fuel", "")
    mode = _need(fuel_cfg, "mode", "fuel.")
    if mode == "finite":
        fuel = FiniteFuel(float(_need(fuel_cfg, "cap", "fuel.")))
    elif mode == "infinite":
        fuel = InfiniteFuel(float(fuel_cfg.get("variation_exponent", 1.0)))
    else:
        raise ProblemConfigError("field 'fuel.mode' must be 'finite' or 'infinite'")

    conv_cfg = cfg.get("cost_convention", {"kind": "stieltjes"})
    kind = _need(conv_cfg, "kind", "cost_convention.")
    if kind == "stieltjes":
        convention = Stieltjes()
    elif kind == "segment":
        convention = SegmentIntegral(int(conv_cfg.get("quadrature_steps", 64)))
    else:
        raise ProblemConfigError("field 'cost_convention.kind' must be 'stieltjes' or 'segment'")

    cost_plus, up = make_costs(_need(cfg, "cost_plus", ""), d)
    cost_minus, um = make_costs(_need(cfg, "cost_minus", ""), d)
    uniform = bool(cfg.get("costs_uniform", up and um))

    try:
        return ProblemSpec(
            horizon_T=horizon_T,
            start_t=start_t,
            d=d, d_prime=d_prime, l=l,
            drift=make_drift(_need(cfg, "drift", ""), d, l),
            diffusion=make_diffusion(_need(cfg, "diffusion", ""), d, d_prime),
            running_gain=make_gain(_need(cfg, "running_gain", ""), d, l, with_action=True),
            exit_gain=make_gain(_need(cfg, "exit_gain", ""), d, l, with_action=False),
            stop_gain=make_gain(_need(cfg, "stop_gain", ""), d, l, with_action=False),
            cost_plus=cost_plus,
            cost_minus=cost_minus,
            domain_indicator=make_domain(_need(cfg, "domain", ""), d),
            action_set=np.asarray(_need(cfg, "action_set", ""), dtype=float),
            fuel_mode=fuel,
            cost_convention=convention,
            payoff_floor=float(cfg.get("payoff_floor", 0.0)),
            costs_uniform=uniform,
            vectorized=True,
            source=cfg,
        )
    except ValueError as exc:
        raise ProblemConfigError(str(exc)) from exc


def load_problem(source) -> ProblemSpec:
    """Load a problem from a dict, a JSON string, or a path to a JSON file."""
    if isinstance(source, dict):
        return problem_from_dict(source)
    text = Path(source).read_text() if Path(str(source)).exists() else str(source)
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return problem_from_dict(cfg)
