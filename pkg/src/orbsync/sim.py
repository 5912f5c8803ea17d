"""Closed-loop simulation of one or many agents tracking a periodic reference.

Agents integrate ``xdot = f(x) + g(x) u`` with fixed-step RK4; the control
law is evaluated at every RK4 stage.  Agents exchange self-times at a fixed
publish rate with an optional transport delay, and compute their reference
time from what they have received:

``centralized``
    physical time (shifted by the configured initial lateness);
``ring``
    the self-time of the next active agent in cyclic id order;
``average``
    the mean self-time of all known active agents, including self.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .artifacts import atomic_write_text
from .controller import MODES, S_ZERO, ControlLaw, wrap_increment
from .errors import ConfigError, HypothesisViolated, NoActiveAgents, NonFiniteState, OutOfTube
from .numerics import PeriodicGrid, find_periodic_solution
from .synthesis import DEFAULT_B_MIN_THRESHOLD, SlidingSurface, b_lower_bound, floquet_multipliers

TOPOLOGIES = ("centralized", "ring", "average")
DEFAULT_PUBLISH_RATE = 60.0
_TIME_EPS = 1e-9


@dataclass
class AgentSpec:
    """Initial condition of one agent.

    The state is ``beta(xi0, theta0)`` unless ``x0`` is given.  ``h0`` is the
    initial lateness in seconds.
    """

    id: int
    theta0: float = 0.0
    xi0: Optional[Sequence[float]] = None
    x0: Optional[Sequence[float]] = None
    h0: float = 0.0


@dataclass
class ScenarioConfig:
    mode: str
    agents: List[AgentSpec]
    duration: float
    dt: float
    topology: str = "centralized"
    k: Optional[float] = None
    h_max: Optional[float] = None
    publish_rate: float = DEFAULT_PUBLISH_RATE
    comm_delay: float = 0.0
    schedule: List[tuple] = field(default_factory=list)
    rng_seed: int = 0
    jitter: float = 0.0
    boundary_layer: float = 0.0
    zero_order_hold: bool = False

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.topology!r}")
        if not (self.dt > 0 and self.duration > 0 and self.publish_rate > 0):
            raise ConfigError("dt, duration and publish_rate must be positive")
        if self.dt > self.duration:
            raise ConfigError("dt exceeds duration")
        if self.comm_delay < 0:
            raise ConfigError("comm_delay must be non-negative")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids) or not ids:
            raise ConfigError("agent ids must be unique and non-empty")
        for t, aid, action in self.schedule:
            if not 0 <= t <= self.duration:
                raise ConfigError(f"schedule time {t} outside [0, duration]")
            if aid not in ids:
                raise ConfigError(f"schedule references unknown agent {aid}")
            if action not in ("launch", "stop"):
                raise ConfigError(f"unknown schedule action {action!r}")
        if self.k is not None and self.k < 0:
            raise ConfigError("k must be non-negative")

    def events(self):
        """Schedule with implicit launches at 0 for agents never launched explicitly."""
        launched = {aid for _, aid, a in self.schedule if a == "launch"}
        ev = [(0.0, a.id, "launch") for a in self.agents if a.id not in launched]
        ev += [(float(t), int(i), a) for t, i, a in self.schedule]
        order = {"stop": 0, "launch": 1}
        return sorted(ev, key=lambda e: (e[0], order[e[2]], e[1]))


# --- references ----------------------------------------------------------------


def reference_time(topology: str, self_times: Dict[int, float], i: int, t: Optional[float] = None) -> float:
    """Reference time ``tau*`` of agent ``i`` from the self-times it knows about."""
    if not self_times:
        raise NoActiveAgents("no active agents to synchronize with")
    if topology == "centralized":
        if t is None:
            raise ValueError("centralized reference needs the physical time")
        return float(t)
    if i not in self_times:
        raise ValueError(f"agent {i} missing from its own self-time map")
    if topology == "average":
        return float(sum(self_times[j] for j in sorted(self_times)) / len(self_times))
    if topology == "ring":
        ids = sorted(self_times)
        return float(self_times[ids[(ids.index(i) + 1) % len(ids)]])
    raise ValueError(f"unknown topology {topology!r}")


def _reference_coeffs(topology, known: Dict[int, float], i: int):
    """``(c, w)`` with ``tau* = c + w * tau_i``; own self-time enters live."""
    others = {j: v for j, v in known.items() if j != i}
    if topology == "average":
        n = len(others) + 1
        return sum(others[j] for j in sorted(others)) / n, 1.0 / n
    ids = sorted(set(others) | {i})
    nxt = ids[(ids.index(i) + 1) % len(ids)]
    if nxt == i:
        return 0.0, 1.0
    return others[nxt], 0.0


# --- traces --------------------------------------------------------------------


class Trace:
    """Column-oriented simulation record, rows ordered by ``(t, agent)``."""

    def __init__(self, k: int, m: int):
        self.k = k
        self.m = m
        self._rows: List[np.ndarray] = []
        self._nu: List[np.ndarray] = []
        self.meta: dict = {}

    @property
    def header(self) -> List[str]:
        cols = ["t", "agent", "theta"] + [f"xi_{i}" for i in range(self.k)] + ["h", "s"]
        names = ("u", "u_ff", "u_orb", "u_sync")
        if self.m == 1:
            cols += list(names)
        else:
            cols += [f"{c}_{j}" for c in names for j in range(self.m)]
        return cols + ["tau", "active"]

    def _append(self, block: np.ndarray, nu: np.ndarray):
        self._rows.append(block)
        self._nu.append(nu)

    def finalize(self):
        width = len(self.header)
        self.data = np.vstack(self._rows) if self._rows else np.empty((0, width))
        self.nu = np.concatenate(self._nu) if self._nu else np.empty(0, dtype=int)
        self._rows, self._nu = [], []
        return self

    def __len__(self):
        return self.data.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.header.index(name)]

    def __getitem__(self, name):
        if name == "xi":
            i0 = self.header.index("xi_0")
            return self.data[:, i0:i0 + self.k]
        if name == "nu":
            return self.nu
        return self.column(name)

    def agent(self, aid: int) -> "Trace":
        sel = self.data[:, 1] == aid
        sub = Trace(self.k, self.m)
        sub.data = self.data[sel]
        sub.nu = self.nu[sel]
        sub.meta = dict(self.meta)
        return sub

    def agents(self) -> List[int]:
        return sorted({int(a) for a in self.data[:, 1]})

    def to_csv(self, path) -> None:
        lines = [",".join(self.header)]
        ia = self.header.index("agent")
        iact = self.header.index("active")
        for row in self.data:
            vals = [f"{v:.17g}" for v in row]
            vals[ia] = str(int(row[ia]))
            vals[iact] = str(int(row[iact]))
            lines.append(",".join(vals))
        atomic_write_text(path, "\n".join(lines) + "\n")


# --- engine --------------------------------------------------------------------


class AgentFailure(OutOfTube):
    pass


def make_law(synthesis, scenario: ScenarioConfig) -> ControlLaw:
    """Control law for a scenario from synthesized artifacts (``k`` may be overridden)."""
    mode = scenario.mode
    if mode == "sliding_sync":
        surf = synthesis.surface
        if surf is None:
            raise ConfigError("synthesis has no sliding surface")
        if scenario.k is not None:
            surf = SlidingSurface(surf.n_vec, surf.b, surf.b_min, float(scenario.k))
        return ControlLaw(synthesis.orbit, synthesis.chart, mode, K=synthesis.gains.K, surface=surf,
                          boundary_layer=scenario.boundary_layer)
    if mode in ("lqr_sync", "lqr_sync_saturated"):
        aug = synthesis.augmented
        if aug is None:
            raise ConfigError("synthesis has no augmented gains")
        return ControlLaw(synthesis.orbit, synthesis.chart, mode, K_xi=aug.K_xi, K_h=aug.K_h,
                          h_max=scenario.h_max)
    return ControlLaw(synthesis.orbit, synthesis.chart, mode, K=synthesis.gains.K)


class _Engine:
    def __init__(self, synthesis, scenario: ScenarioConfig, law: Optional[ControlLaw] = None):
        scenario.validate()
        self.sc = scenario
        self.plant = synthesis.plant
        self.orbit = synthesis.orbit
        self.chart = synthesis.chart
        self.law = law if law is not None else make_law(synthesis, scenario)
        self.k = self.chart.n - 1
        self.m = self.plant.m
        specs = sorted(scenario.agents, key=lambda a: a.id)
        self.ids = np.array([a.id for a in specs])
        self.specs = {a.id: a for a in specs}
        A = len(specs)
        rng = np.random.default_rng(scenario.rng_seed)
        self.jitter = {a.id: rng.normal(0.0, scenario.jitter, self.k) if scenario.jitter > 0 else np.zeros(self.k)
                       for a in specs}
        self.X = np.zeros((A, self.plant.n))
        self.nu = np.zeros(A, dtype=np.int64)
        self.last_theta = np.zeros(A)
        self.tau = np.zeros(A)
        self.active = np.zeros(A, dtype=bool)
        self.offset = np.zeros(A)  # centralized: t_ref = t + offset
        self.known: Dict[int, Dict[int, float]] = {int(i): {} for i in self.ids}
        self.inbox: List[tuple] = []  # (arrival, sender, tau)
        self.purge_at: Dict[int, float] = {}
        self.last_published: Dict[int, float] = {}
        self.held_u = np.zeros((A, self.m))
        self.held_parts = np.zeros((A, 3, self.m))
        self.t = 0.0

    # -- membership ----------------------------------------------------------

    def _launch(self, aid: int, t: float):
        i = int(np.searchsorted(self.ids, aid))
        spec = self.specs[aid]
        if spec.x0 is not None:
            x = np.array(spec.x0, dtype=float)
            if spec.xi0 is not None or self.sc.jitter > 0:
                xi, th = self.chart.coordinates(x)
                x = self.chart.beta(xi + self.jitter[aid], th)
        else:
            xi0 = np.zeros(self.k) if spec.xi0 is None else np.asarray(spec.xi0, dtype=float)
            x = self.chart.beta(xi0 + self.jitter[aid], float(spec.theta0) % self.orbit.T_theta)
        theta = self.chart.project(x)
        base = float(self.orbit.selftime_base(theta))
        T = self.orbit.T
        if self.sc.topology == "centralized":
            nu = 0
            tau = base
            self.offset[i] = spec.h0 + tau - t
        else:
            peers = [v for j, v in sorted(self.last_published.items()) if j != aid and self._is_active(j)]
            est = float(np.mean(peers)) if peers else t
            nu = int(math.floor((est - spec.h0 - base) / T + 0.5))
            tau = base + nu * T
        self.X[i] = x
        self.nu[i] = nu
        self.last_theta[i] = theta
        self.tau[i] = tau
        self.active[i] = True
        self.known[aid] = {aid: tau}
        self.purge_at.pop(aid, None)

    def _is_active(self, aid):
        return bool(self.active[int(np.searchsorted(self.ids, aid))])

    def _stop(self, aid: int, t: float):
        i = int(np.searchsorted(self.ids, aid))
        self.active[i] = False
        self.purge_at[aid] = t + 1.0 / self.sc.publish_rate

    def _purge(self, t: float):
        for aid, when in list(self.purge_at.items()):
            if t + _TIME_EPS >= when:
                for tab in self.known.values():
                    tab.pop(aid, None)
                self.inbox = [m for m in self.inbox if m[1] != aid]
                del self.purge_at[aid]

    def _publish(self, t: float):
        for i in np.flatnonzero(self.active):
            aid = int(self.ids[i])
            self.last_published[aid] = float(self.tau[i])
            self.inbox.append((t + self.sc.comm_delay, aid, float(self.tau[i])))

    def _deliver(self, t: float):
        keep = []
        for arrival, sender, tau in self.inbox:
            if arrival <= t + _TIME_EPS:
                if sender in self.purge_at or self._is_active(sender):
                    for i in np.flatnonzero(self.active):
                        rid = int(self.ids[i])
                        if rid != sender:
                            self.known[rid][sender] = tau
            else:
                keep.append((arrival, sender, tau))
        self.inbox = keep

    def _refs(self, idx):
        c = np.zeros(len(idx))
        w = np.zeros(len(idx))
        if self.sc.topology == "centralized":
            return c, w
        for r, i in enumerate(idx):
            c[r], w[r] = _reference_coeffs(self.sc.topology, self.known[int(self.ids[i])], int(self.ids[i]))
        return c, w

    # -- dynamics ------------------------------------------------------------

    def _evaluate(self, X, idx, t, ref_c, ref_w, check=True):
        xi, theta = self.chart.coordinates(X, self.last_theta[idx], check=check)
        row = self.law.tables(theta)
        nu = self.nu[idx] + wrap_increment(self.last_theta[idx], theta, self.orbit.T_theta)
        tau = self.law.selftime(row, theta, nu).reshape(len(idx))
        if self.sc.topology == "centralized":
            t_ref = t + self.offset[idx]
        else:
            t_ref = ref_c + ref_w * tau
        h = t_ref - tau
        ff, orb, sync, s = self.law.terms(row, theta, xi, h)
        return xi, theta, nu, tau, h, s, ff, orb, sync

    def _field(self, X, idx, t, ref_c, ref_w):
        if self.sc.zero_order_hold:
            u = self.held_u[idx]
        else:
            try:
                _, _, _, _, _, _, ff, orb, sync = self._evaluate(X, idx, t, ref_c, ref_w)
            except OutOfTube as exc:
                raise self._culprit(X, idx, exc) from None
            u = ff + orb + sync
        return self.plant.rhs(X, u)

    def _culprit(self, X, idx, exc):
        for r, i in enumerate(idx):
            try:
                self.chart.coordinates(X[r:r + 1], self.last_theta[idx[r:r + 1]])
            except OutOfTube:
                return AgentFailure(f"agent {int(self.ids[i])} left the tube near t={self.t:.6g}: {exc}",
                                    distance=exc.distance, time=self.t)
        return exc

    def _step(self, idx, t, dt, ref_c, ref_w):
        X = self.X[idx]
        k1 = self._field(X, idx, t, ref_c, ref_w)
        k2 = self._field(X + 0.5 * dt * k1, idx, t + 0.5 * dt, ref_c, ref_w)
        k3 = self._field(X + 0.5 * dt * k2, idx, t + 0.5 * dt, ref_c, ref_w)
        k4 = self._field(X + dt * k3, idx, t + dt, ref_c, ref_w)
        Xn = X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(Xn)):
            bad = int(self.ids[idx[np.flatnonzero(~np.all(np.isfinite(Xn), axis=1))[0]]])
            raise NonFiniteState(f"agent {bad}: state became non-finite at t={t + dt:.6g}")
        self.X[idx] = Xn

    def _commit(self, idx):
        _, theta = self.chart.coordinates(self.X[idx], self.last_theta[idx])
        self.nu[idx] += wrap_increment(self.last_theta[idx], theta, self.orbit.T_theta)
        self.last_theta[idx] = theta
        rows = self.law.tables(theta)
        self.tau[idx] = self.law.selftime(rows, theta, self.nu[idx]).reshape(len(idx))
        for i in idx:
            aid = int(self.ids[i])
            self.known[aid][aid] = float(self.tau[i])

    def _record(self, trace, idx, t):
        ref_c, ref_w = self._refs(idx)
        xi, theta, nu, tau, h, s, ff, orb, sync = self._evaluate(self.X[idx], idx, t, ref_c, ref_w, check=False)
        if self.sc.zero_order_hold:
            ff, orb, sync = np.moveaxis(self.held_parts[idx], 1, 0)
            u = self.held_u[idx]
        else:
            u = ff + orb + sync
        B = len(idx)
        block = np.column_stack([np.full(B, t), self.ids[idx].astype(float), theta, xi, h, s,
                                 u, ff, orb, sync, tau, np.ones(B)])
        trace._append(block, nu.copy())

    def _hold(self, idx, t):
        ref_c, ref_w = self._refs(idx)
        *_, ff, orb, sync = self._evaluate(self.X[idx], idx, t, ref_c, ref_w)
        self.held_u[idx] = ff + orb + sync
        self.held_parts[idx] = np.stack([ff, orb, sync], axis=1)

    def _guard(self, fn, *args):
        try:
            return fn(*args)
        except AgentFailure:
            raise
        except OutOfTube as exc:
            raise self._identify(exc) from None

    def _identify(self, exc):
        idx = np.flatnonzero(self.active)
        for i in idx:
            try:
                self.chart.coordinates(self.X[i])
            except OutOfTube:
                return AgentFailure(f"agent {int(self.ids[i])} left the tube near t={self.t:.6g}: {exc}",
                                    distance=exc.distance, time=self.t)
        return AgentFailure(f"an agent left the tube during a step near t={self.t:.6g}: {exc}",
                            distance=exc.distance, time=self.t)

    def run(self) -> Trace:
        sc = self.sc
        trace = Trace(self.k, self.m)
        events = sc.events()
        ev_pos = 0
        n_steps = int(math.ceil(sc.duration / sc.dt - 1e-9))
        pub_period = 1.0 / sc.publish_rate
        next_pub = 0
        for step in range(n_steps + 1):
            t = min(step * sc.dt, sc.duration)
            self.t = t
            while ev_pos < len(events) and events[ev_pos][0] <= t + _TIME_EPS:
                et, aid, action = events[ev_pos]
                if action == "launch":
                    self._guard(self._launch, aid, t)
                else:
                    self._stop(aid, t)
                ev_pos += 1
            self._purge(t)
            self._deliver(t)
            idx = np.flatnonzero(self.active)
            if t + _TIME_EPS >= next_pub * pub_period:
                self._publish(t)
                self._deliver(t)
                if len(idx):
                    if sc.zero_order_hold:
                        self._guard(self._hold, idx, t)
                    self._record(trace, idx, t)
                while next_pub * pub_period <= t + _TIME_EPS:
                    next_pub += 1
            if step == n_steps:
                break
            if len(idx) == 0:
                continue
            h = min((step + 1) * sc.dt, sc.duration) - t
            ref_c, ref_w = self._refs(idx)
            self._guard(self._step, idx, t, h, ref_c, ref_w)
            self.t = t + h
            self._guard(self._commit, idx)
        trace.meta = {"dt": sc.dt, "duration": sc.duration, "T": self.orbit.T,
                      "T_theta": self.orbit.T_theta, "topology": sc.topology, "mode": sc.mode}
        return trace.finalize()


def run_single(synthesis, scenario: ScenarioConfig, law: Optional[ControlLaw] = None) -> Trace:
    """Simulate one agent; the reference clock is physical time offset by ``h0``."""
    if len(scenario.agents) != 1:
        raise ConfigError("run_single expects exactly one agent")
    return _Engine(synthesis, scenario, law).run()


def run_multi(synthesis, scenario: ScenarioConfig, law: Optional[ControlLaw] = None) -> Trace:
    """Simulate several agents exchanging self-times over the configured topology."""
    return _Engine(synthesis, scenario, law).run()


# --- isolated LTV system -------------------------------------------------------


@dataclass
class LTVTrace:
    theta: np.ndarray
    x: np.ndarray
    z: np.ndarray
    s: np.ndarray
    u: np.ndarray
    n_vec: PeriodicGrid
    b_min: float


def simulate_ltv_sliding(Ax: PeriodicGrid, Az: PeriodicGrid, Bx: PeriodicGrid, Bz: PeriodicGrid,
                         k: float, x0, z0: float, duration: float, dt: Optional[float] = None,
                         b_min_threshold: float = DEFAULT_B_MIN_THRESHOLD) -> LTVTrace:
    """Sliding feedback ``u = -k sgn(s) / b`` on ``x' = Ax x + Bx u, z' = Az x + Bz u``.

    The surface vector ``n`` solves ``n' = -Ax^T n - Az^T`` periodically and
    ``b = n^T Bx + Bz``.  The independent variable is the grid argument.

    Raises
    ------
    HypothesisViolated
        ``x' = Ax x`` is not exponentially stable or ``min |b|`` is below
        ``b_min_threshold``.
    """
    mult = floquet_multipliers(Ax)
    if np.max(np.abs(mult)) >= 1.0:
        raise HypothesisViolated(f"homogeneous subsystem not stable (max |mu| = {np.max(np.abs(mult)):.4g})")
    T = Ax.period
    N = Ax.N
    d = Ax.shape[0]
    M = PeriodicGrid(T, -np.swapaxes(Ax.samples, 1, 2))
    c = PeriodicGrid(T, -Az.samples.reshape(N, d))
    n_vec = find_periodic_solution(M, c, "reversed")
    bx = Bx.samples.reshape(N, d)
    b = np.einsum("ni,ni->n", n_vec.samples, bx) + Bz.samples.reshape(N)
    b_min = b_lower_bound(b)
    if b_min < b_min_threshold:
        raise HypothesisViolated(f"min |b| = {b_min:.3g} below {b_min_threshold:.1e}")
    dt = Ax.step if dt is None else float(dt)
    e = d + 1
    F = np.zeros((N, e, e))
    F[:, :d, :d] = Ax.samples.reshape(N, d, d)
    F[:, d, :d] = Az.samples.reshape(N, d)
    G = np.hstack([bx, Bz.samples.reshape(N, 1)])
    nb = np.hstack([n_vec.samples, np.ones((N, 1))])
    table = PeriodicGrid(T, np.hstack([F.reshape(N, -1), G, nb, b[:, None]])).with_fd_slopes()
    ee = e * e

    def control(r, y):
        s = float(r[ee + e:ee + 2 * e] @ y)
        bb = r[-1]
        sw = 0.0 if abs(s) <= S_ZERO else math.copysign(1.0, s)
        u = 0.0 if k == 0 else -k * sw / math.copysign(max(abs(bb), b_min), bb)
        return s, u

    def field(r, y):
        _, u = control(r, y)
        return r[:ee].reshape(e, e) @ y + r[ee:ee + e] * u

    n_steps = int(math.ceil(duration / dt - 1e-9))
    y = np.concatenate([np.asarray(x0, dtype=float).reshape(d), [float(z0)]])
    th_out = np.empty(n_steps + 1)
    Y = np.empty((n_steps + 1, d + 1))
    S = np.empty(n_steps + 1)
    U = np.empty(n_steps + 1)
    # steps that coincide with grid intervals read nodes and midpoints directly
    on_grid = abs(dt - table.step) <= 1e-12 * table.step
    V, Vm = table.samples, table.midpoint_samples()
    th = 0.0
    for i in range(n_steps + 1):
        h = min((i + 1) * dt, duration) - th
        if on_grid and h == dt:
            j = i % N
            r0, rm, r1 = V[j], Vm[j], V[(j + 1) % N]
        else:
            r0, rm, r1 = table.evaluate(np.array([th, th + 0.5 * h, th + h]))
        s, u = control(r0, y)
        th_out[i], Y[i], S[i], U[i] = th, y, s, u
        if i == n_steps:
            break
        k1 = field(r0, y)
        k2 = field(rm, y + 0.5 * h * k1)
        k3 = field(rm, y + 0.5 * h * k2)
        k4 = field(r1, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NonFiniteState(f"LTV state became non-finite at {th + h:.6g}")
        th = min((i + 1) * dt, duration)
    return LTVTrace(th_out, Y[:, :d], Y[:, d], S, U, n_vec, b_min)
