"""Monte Carlo oracle for killed first-passage probabilities.

Simulates the piecewise deterministic process directly: deterministic
drift flow between Poisson jump epochs, phase-type jump sizes, exact
passage-time detection at the boundaries.  Killing is handled by
weighting completed paths with exp(-q tau) (an explicit exponential
horizon is available as an auxiliary mode for cross-validation), and the
overshoot penalty weight exp(xi (X_tau - l)) is supported for ruin
estimands.

Paths are partitioned into fixed-size blocks, each driven by a
counter-derived child seed, and block results are merged with the
pairwise mean/variance combination, so results are deterministic for a
given (seed, n_paths) regardless of worker count.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .passage_model import (
    ConstantDrift,
    DriftSpec,
    ModelSpec,
    PassageProblem,
    SegerdahlDrift,
    TabulatedDrift,
)
from .phase_type import sample as ph_sample

__all__ = [
    "SimConfig",
    "PathOutcome",
    "PassageEstimate",
    "flow",
    "crossing_time",
    "simulate_path",
    "estimate",
    "default_max_time",
]


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Simulation request: model, problem, start level, and budget."""

    model: ModelSpec
    problem: PassageProblem
    x0: float
    n_paths: int
    seed: int
    max_time: float | None = None
    flow_tolerance: float = 1e-10
    kill_mode: str = "weight"
    block_size: int = 8192
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.max_time is not None and self.max_time <= 0:
            raise ValueError("max_time must be positive")
        if not (self.problem.lower <= self.x0 <= self.problem.upper_value):
            raise ValueError("x0 must lie in [lower, upper]")
        if self.kill_mode not in ("weight", "horizon"):
            raise ValueError("kill_mode must be 'weight' or 'horizon'")

    def resolved_max_time(self) -> float:
        if self.max_time is not None:
            return self.max_time
        return default_max_time(self.model, self.problem, self.x0)

    def to_dict(self) -> dict:
        return {
            "x0": self.x0,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "max_time": self.max_time,
            "flow_tolerance": self.flow_tolerance,
            "kill_mode": self.kill_mode,
        }


@dataclass(frozen=True)
class PathOutcome:
    """Result of one simulated path."""

    kind: str  # ruined | escaped | censored | killed
    tau: float
    overshoot: float = 0.0
    n_jumps: int = 0


@dataclass(frozen=True)
class PassageEstimate:
    """Monte Carlo estimate with its standard error and path accounting.

    Censored paths contribute 0 to the estimand, so the estimate is
    negatively biased by at most ``censored_fraction``.  ``n_killed`` is
    only populated in the explicit-horizon kill mode.
    """

    mean: float
    std_error: float
    n_paths: int
    n_ruined: int
    n_escaped: int
    n_censored: int
    n_killed: int
    target: str
    all_censored: bool = False

    @property
    def censored_fraction(self) -> float:
        return self.n_censored / self.n_paths

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std_error": self.std_error,
            "n_paths": self.n_paths,
            "n_ruined": self.n_ruined,
            "n_escaped": self.n_escaped,
            "n_censored": self.n_censored,
            "n_killed": self.n_killed,
            "target": self.target,
            "censored_fraction": self.censored_fraction,
        }


# ---------------------------------------------------------------------------
# Deterministic flow between jumps
# ---------------------------------------------------------------------------

def flow(drift: DriftSpec, x0: float, dt: float, tol: float = 1e-10) -> float:
    """Position after following dx/dt = phi(x) for time dt.

    Exact for constant drift and for the exponentially relaxing family
    (whose flow is linear in y = e^{2 mu x}); adaptive Runge-Kutta with
    dense output for tabulated drifts.
    """
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if isinstance(drift, ConstantDrift):
        return x0 + drift.c * dt
    if isinstance(drift, SegerdahlDrift):
        y0 = math.exp(2.0 * drift.mu * x0)
        y = drift.K + (y0 - drift.K) * math.exp(-2.0 * (drift.lam + drift.q) * dt)
        if y <= 0.0:
            raise ValueError("flow left the representable range (x -> -inf)")
        return math.log(y) / (2.0 * drift.mu)
    lo, hi = drift.table_range

    def ev_lo(_t, x):
        return x[0] - lo

    def ev_hi(_t, x):
        return x[0] - hi

    ev_lo.terminal = ev_hi.terminal = True
    ev_lo.direction, ev_hi.direction = -1, 1
    sol = solve_ivp(
        lambda _t, x: [drift.phi_clipped(x[0])],
        (0.0, dt),
        [x0],
        method="RK45",
        rtol=tol,
        atol=tol,
        events=[ev_lo, ev_hi],
    )
    if not sol.success:
        raise ValueError(f"flow integration failed: {sol.message}")
    if sol.t_events[0].size or sol.t_events[1].size:
        raise ValueError("flow left the drift table range")
    return float(sol.y[0, -1])


def crossing_time(drift: DriftSpec, x0: float, level: float, side: str) -> float:
    """First time the flow from x0 passes ``level`` (``side`` 'below'/'above').

    The one-dimensional flow is monotone, so there is at most one crossing;
    returns +inf when the flow never reaches the level.  Exact for constant
    and exponentially relaxing drifts.
    """
    if side not in ("below", "above"):
        raise ValueError("side must be 'below' or 'above'")
    phi0 = drift.phi(x0)
    if x0 == level:
        moving_toward = phi0 < 0 if side == "below" else phi0 > 0
        return 0.0 if moving_toward else math.inf
    if side == "below" and x0 < level:
        return 0.0
    if side == "above" and x0 > level:
        return 0.0

    if isinstance(drift, ConstantDrift):
        c = drift.c
        if side == "below":
            return (x0 - level) / (-c) if c < 0 else math.inf
        return (level - x0) / c if c > 0 else math.inf

    if isinstance(drift, SegerdahlDrift):
        two_mu = 2.0 * drift.mu
        y0 = math.exp(two_mu * x0)
        yl = math.exp(two_mu * level)
        denom = y0 - drift.K
        if denom == 0.0:
            return math.inf  # started at the equilibrium
        ratio = (yl - drift.K) / denom
        if not (0.0 < ratio < 1.0):
            return math.inf
        return -math.log(ratio) / (2.0 * (drift.lam + drift.q))

    raise ValueError("crossing_time has closed forms for constant/relaxing drifts only")


def _flow_segment_numeric(
    drift: TabulatedDrift, x0: float, T: float, lower: float, upper: float, tol: float
):
    """Advance a tabulated-drift path by up to T, stopping at a boundary.

    Returns (t_event, x_event, which) with which in {None, 'below', 'above'};
    event locations are refined by the integrator's root finder (well past
    the 1e-10 position tolerance required downstream).  Trial steps use a
    constant extension of the table; guard events abort honestly if the
    committed trajectory itself leaves the table.
    """
    lo, hi = drift.table_range

    def ev_low(_t, x):
        return x[0] - lower

    ev_low.terminal = True
    ev_low.direction = -1

    def ev_high(_t, x):
        return x[0] - (upper if math.isfinite(upper) else math.inf)

    ev_high.terminal = True
    ev_high.direction = 1

    def ev_table_lo(_t, x):
        return x[0] - lo

    ev_table_lo.terminal = True
    ev_table_lo.direction = -1

    def ev_table_hi(_t, x):
        return x[0] - hi

    ev_table_hi.terminal = True
    ev_table_hi.direction = 1

    events = [ev_low, ev_table_lo, ev_table_hi]
    if math.isfinite(upper):
        events.insert(1, ev_high)

    sol = solve_ivp(
        lambda _t, x: [drift.phi_clipped(x[0])],
        (0.0, T),
        [x0],
        method="RK45",
        rtol=tol,
        atol=max(tol, 1e-12),
        events=events,
    )
    if not sol.success:
        raise RuntimeError(f"flow solver failed mid-path: {sol.message}")
    if sol.t_events[0].size:
        return float(sol.t_events[0][0]), lower, "below"
    if math.isfinite(upper) and sol.t_events[1].size:
        return float(sol.t_events[1][0]), upper, "above"
    if sol.t_events[-2].size or sol.t_events[-1].size:
        raise RuntimeError("flow left the drift table before reaching a boundary")
    return T, float(sol.y[0, -1]), None


def default_max_time(model: ModelSpec, problem: PassageProblem, x0: float) -> float:
    """50 x the deterministic crossing-time scale of the posed problem."""
    drift = model.drift
    l = problem.lower
    mean_jump = model.jumps.mean()
    lam = model.jump_rate
    try:
        t_cross = crossing_time(drift, x0, l, "below")
    except ValueError:
        t_cross = math.inf
    if math.isfinite(t_cross) and t_cross > 0:
        scale = t_cross
    else:
        # Upward or neutral drift: time scale of one excursion plus jumps.
        ph = abs(drift.phi(x0))
        ph = max(ph, abs(drift.phi(l)), 1e-6)
        scale = (x0 - l + 10.0 * mean_jump) / ph
    return 50.0 * max(scale, 1.0 / lam)


# ---------------------------------------------------------------------------
# Single-path reference implementation
# ---------------------------------------------------------------------------

def simulate_path(cfg: SimConfig, rng: np.random.Generator) -> PathOutcome:
    """One path of the process; the scalar reference for the batch engine."""
    model, problem = cfg.model, cfg.problem
    drift = model.drift
    lam = model.jump_rate
    down = model.jump_direction == "downward"
    l, L = problem.lower, problem.upper_value
    horizon = cfg.resolved_max_time()

    x = cfg.x0
    t = 0.0
    n_jumps = 0
    tabulated = isinstance(drift, TabulatedDrift)
    while True:
        wait = rng.exponential(1.0 / lam)
        budget = min(wait, horizon - t)
        if tabulated:
            seg_t, seg_x, which = _flow_segment_numeric(
                drift, x, budget, l, L, cfg.flow_tolerance
            )
            if which == "below":
                return PathOutcome("ruined", t + seg_t, 0.0, n_jumps)
            if which == "above":
                return PathOutcome("escaped", t + seg_t, 0.0, n_jumps)
            x_next = seg_x
        else:
            t_low = crossing_time(drift, x, l, "below")
            t_high = crossing_time(drift, x, L, "above") if math.isfinite(L) else math.inf
            t_bdry = min(t_low, t_high)
            if t_bdry <= budget:
                kind = "ruined" if t_low <= t_high else "escaped"
                return PathOutcome(kind, t + t_bdry, 0.0, n_jumps)
            x_next = flow(drift, x, budget, cfg.flow_tolerance)
        if wait >= horizon - t:
            return PathOutcome("censored", horizon, 0.0, n_jumps)
        x = x_next
        t += wait
        jump = ph_sample(model.jumps, rng)
        n_jumps += 1
        if down:
            x -= jump
            if x < l:
                return PathOutcome("ruined", t, l - x, n_jumps)
        else:
            x += jump
            if x > L:
                return PathOutcome("escaped", t, x - L, n_jumps)


# ---------------------------------------------------------------------------
# Vectorized block engine
# ---------------------------------------------------------------------------

def _vector_crossing_times(drift: DriftSpec, x, level: float, side: str):
    """Vector version of :func:`crossing_time` for the batch engine."""
    x = np.asarray(x, float)
    out = np.full(x.shape, math.inf)
    if isinstance(drift, ConstantDrift):
        c = drift.c
        if side == "below" and c < 0:
            out = np.where(x >= level, (x - level) / (-c), 0.0)
        elif side == "above" and c > 0:
            out = np.where(x <= level, (level - x) / c, 0.0)
        # Starting on the level and moving away: the x==level entries above
        # got 0, which is only right when moving toward the level.
        if side == "below" and c >= 0:
            out = np.where(x < level, 0.0, math.inf)
        if side == "above" and c <= 0:
            out = np.where(x > level, 0.0, math.inf)
        return out
    if isinstance(drift, SegerdahlDrift):
        two_mu = 2.0 * drift.mu
        y = np.exp(two_mu * x)
        yl = math.exp(two_mu * level)
        denom = y - drift.K
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = (yl - drift.K) / denom
            tc = -np.log(ratio) / (2.0 * (drift.lam + drift.q))
        valid = (denom != 0.0) & (ratio > 0.0) & (ratio < 1.0)
        out = np.where(valid, tc, math.inf)
        # Points exactly on the level: crossing now iff moving toward it.
        on = x == level
        if np.any(on):
            moving = drift.phi(x) < 0 if side == "below" else drift.phi(x) > 0
            out = np.where(on, np.where(moving, 0.0, math.inf), out)
        # Points already past the level.
        past = x < level if side == "below" else x > level
        out = np.where(past, 0.0, out)
        return out
    raise ValueError("vector crossing times need constant or relaxing drift")


def _vector_flow(drift: DriftSpec, x, dt):
    x = np.asarray(x, float)
    dt = np.asarray(dt, float)
    if isinstance(drift, ConstantDrift):
        return x + drift.c * dt
    if isinstance(drift, SegerdahlDrift):
        two_mu = 2.0 * drift.mu
        y0 = np.exp(two_mu * x)
        y = drift.K + (y0 - drift.K) * np.exp(-2.0 * (drift.lam + drift.q) * dt)
        if np.any(y <= 0.0):
            raise ValueError("flow left the representable range (x -> -inf)")
        return np.log(y) / two_mu
    raise ValueError("vector flow needs constant or relaxing drift")


def _run_block(
    model: ModelSpec,
    problem: PassageProblem,
    x0: float,
    n: int,
    rng: np.random.Generator,
    horizon: float,
    kill_mode: str,
    flow_tol: float,
    collect_overshoots: bool,
):
    """Simulate one block of paths; returns weights, counts, overshoots."""
    drift = model.drift
    lam = model.jump_rate
    q = model.kill_rate
    xi = problem.overshoot_xi
    down = model.jump_direction == "downward"
    l, L = problem.lower, problem.upper_value
    want_ruin = problem.estimand == "ruin_below"

    if isinstance(drift, TabulatedDrift):
        return _run_block_scalar(
            model, problem, x0, n, rng, horizon, kill_mode, flow_tol, collect_overshoots
        )

    if kill_mode == "horizon" and q > 0:
        horizons = np.minimum(rng.exponential(1.0 / q, n), horizon)
        killed_possible = horizons < horizon
    else:
        horizons = np.full(n, horizon)
        killed_possible = np.zeros(n, dtype=bool)

    x = np.full(n, float(x0))
    t = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    weights = np.zeros(n)
    counts = {"ruined": 0, "escaped": 0, "censored": 0, "killed": 0}
    overshoots: list[np.ndarray] = []

    def finish(idx, kind, tau, overshoot):
        alive[idx] = False
        counts[kind] += idx.size
        if kind == "ruined" and want_ruin:
            if kill_mode == "weight":
                w = np.exp(-q * tau - xi * overshoot) if xi > 0 else np.exp(-q * tau)
            else:
                w = np.exp(-xi * overshoot) if xi > 0 else np.ones(idx.size)
            weights[idx] = w
        elif kind == "escaped" and not want_ruin:
            weights[idx] = np.exp(-q * tau) if kill_mode == "weight" else 1.0
        if kind == "ruined" and collect_overshoots:
            jump_hits = overshoot > 0
            if np.any(jump_hits):
                overshoots.append(overshoot[jump_hits])

    max_rounds = 100_000_000 // max(n, 1) + 1000
    for _ in range(max_rounds):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        xi_cur = x[idx]
        t_cur = t[idx]
        waits = rng.exponential(1.0 / lam, idx.size)
        t_low = _vector_crossing_times(drift, xi_cur, l, "below")
        t_high = (
            _vector_crossing_times(drift, xi_cur, L, "above")
            if math.isfinite(L)
            else np.full(idx.size, math.inf)
        )
        t_bdry = np.minimum(t_low, t_high)
        remain = horizons[idx] - t_cur

        hit_bdry = t_bdry <= np.minimum(waits, remain)
        if np.any(hit_bdry):
            hit = idx[hit_bdry]
            low_first = t_low[hit_bdry] <= t_high[hit_bdry]
            tau = t_cur[hit_bdry] + t_bdry[hit_bdry]
            sub_low = hit[low_first]
            if sub_low.size:
                finish(sub_low, "ruined", tau[low_first], np.zeros(sub_low.size))
            sub_high = hit[~low_first]
            if sub_high.size:
                finish(sub_high, "escaped", tau[~low_first], np.zeros(sub_high.size))

        cont = ~hit_bdry
        timed_out = cont & (waits >= remain)
        if np.any(timed_out):
            out_idx = idx[timed_out]
            was_killed = killed_possible[out_idx]
            k_idx = out_idx[was_killed]
            c_idx = out_idx[~was_killed]
            if k_idx.size:
                finish(k_idx, "killed", horizons[k_idx], np.zeros(k_idx.size))
            if c_idx.size:
                finish(c_idx, "censored", horizons[c_idx], np.zeros(c_idx.size))

        go = cont & ~timed_out
        if not np.any(go):
            continue
        g_idx = idx[go]
        x_new = _vector_flow(drift, xi_cur[go], waits[go])
        t_new = t_cur[go] + waits[go]
        jumps = ph_sample(model.jumps, rng, size=g_idx.size)
        if down:
            x_new = x_new - jumps
            crossed = x_new < l
            if np.any(crossed):
                finish(g_idx[crossed], "ruined", t_new[crossed], l - x_new[crossed])
        else:
            x_new = x_new + jumps
            crossed = x_new > L
            if np.any(crossed):
                finish(g_idx[crossed], "escaped", t_new[crossed], x_new[crossed] - L)
        keep = ~crossed
        x[g_idx[keep]] = x_new[keep]
        t[g_idx[keep]] = t_new[keep]
    else:
        raise RuntimeError("batch engine exceeded its round budget")

    osh = np.concatenate(overshoots) if overshoots else np.empty(0)
    return weights, counts, osh


def _run_block_scalar(
    model, problem, x0, n, rng, horizon, kill_mode, flow_tol, collect_overshoots
):
    q = model.kill_rate
    xi = problem.overshoot_xi
    want_ruin = problem.estimand == "ruin_below"
    cfg = SimConfig(
        model=model,
        problem=problem,
        x0=x0,
        n_paths=n,
        seed=0,
        max_time=horizon,
        flow_tolerance=flow_tol,
    )
    weights = np.zeros(n)
    counts = {"ruined": 0, "escaped": 0, "censored": 0, "killed": 0}
    overshoots = []
    for i in range(n):
        eq = rng.exponential(1.0 / q) if (kill_mode == "horizon" and q > 0) else math.inf
        out = simulate_path(cfg, rng)
        kind = out.kind
        if kind in ("ruined", "escaped") and out.tau >= eq:
            kind = "killed"
        elif kind == "censored" and eq < horizon:
            kind = "killed"
        counts[kind] += 1
        if kind == "ruined" and want_ruin:
            w = math.exp(-xi * out.overshoot) if xi > 0 else 1.0
            weights[i] = w * (math.exp(-q * out.tau) if kill_mode == "weight" else 1.0)
        elif kind == "escaped" and not want_ruin:
            weights[i] = math.exp(-q * out.tau) if kill_mode == "weight" else 1.0
        if kind == "ruined" and collect_overshoots and out.overshoot > 0:
            overshoots.append(out.overshoot)
    return weights, counts, np.asarray(overshoots)


def _merge_moments(a, b):
    """Pairwise combination of (count, mean, M2); associative and exact."""
    na, ma, sa = a
    nb, mb, sb = b
    n = na + nb
    if n == 0:
        return (0, 0.0, 0.0)
    delta = mb - ma
    mean = ma + delta * nb / n
    m2 = sa + sb + delta * delta * na * nb / n
    return (n, mean, m2)


def estimate(cfg: SimConfig, collect_jump_overshoots: bool = False) -> PassageEstimate:
    """Monte Carlo estimate of the posed passage functional.

    Returns the sample mean of the per-path weights together with its
    standard error (sample standard deviation / sqrt(n_paths)).  Set
    ``collect_jump_overshoots`` to additionally expose the overshoot
    samples of jump-triggered ruins via the ``overshoots`` attribute.
    """
    horizon = cfg.resolved_max_time()
    n_blocks = (cfg.n_paths + cfg.block_size - 1) // cfg.block_size
    sizes = [
        min(cfg.block_size, cfg.n_paths - i * cfg.block_size) for i in range(n_blocks)
    ]
    children = np.random.SeedSequence(cfg.seed).spawn(n_blocks)

    def run(i):
        rng = np.random.default_rng(children[i])
        return _run_block(
            cfg.model,
            cfg.problem,
            cfg.x0,
            sizes[i],
            rng,
            horizon,
            cfg.kill_mode,
            cfg.flow_tolerance,
            collect_jump_overshoots,
        )

    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            results = list(pool.map(run, range(n_blocks)))
    else:
        results = [run(i) for i in range(n_blocks)]

    moments = (0, 0.0, 0.0)
    counts = {"ruined": 0, "escaped": 0, "censored": 0, "killed": 0}
    overshoots = []
    for weights, cts, osh in results:  # merged in block order: deterministic
        m = weights.mean()
        m2 = float(np.sum((weights - m) ** 2))
        moments = _merge_moments(moments, (weights.size, float(m), m2))
        for k in counts:
            counts[k] += cts[k]
        if collect_jump_overshoots and osh.size:
            overshoots.append(osh)

    n, mean, m2 = moments
    std_error = math.sqrt(m2 / (n - 1)) / math.sqrt(n) if n > 1 else math.inf
    if cfg.problem.estimand == "ruin_below":
        target = "psi_q_overshoot" if cfg.problem.overshoot_xi > 0 else "psi_q"
        if cfg.problem.upper is not None:
            target = "two_sided_ruin_below"
    else:
        target = "two_sided_exit_above"
    all_censored = counts["censored"] == cfg.n_paths
    if all_censored:
        warnings.warn(
            "all paths were censored: max_time is too small for this model",
            UserWarning,
            stacklevel=2,
        )
    est = PassageEstimate(
        mean=mean,
        std_error=std_error,
        n_paths=cfg.n_paths,
        n_ruined=counts["ruined"],
        n_escaped=counts["escaped"],
        n_censored=counts["censored"],
        n_killed=counts["killed"],
        target=target,
        all_censored=all_censored,
    )
    if collect_jump_overshoots:
        object.__setattr__(
            est, "overshoots", np.concatenate(overshoots) if overshoots else np.empty(0)
        )
    return est
