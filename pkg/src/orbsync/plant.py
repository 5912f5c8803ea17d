"""Control-affine plants and their periodic reference solutions."""

from __future__ import annotations

import functools
import math
import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import NoCycleFound, NonTransversal
from .numerics import DEFAULT_GRID_N, PeriodicGrid, jacobian_fd, rk4_step

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class PlantModel:
    """``xdot = f(x) + g(x) u``.

    ``f`` and ``g`` act on the last axis, so a batch of states with shape
    ``(B, n)`` maps to ``(B, n)`` and ``(B, n, m)``.
    """

    name: str
    n: int
    m: int
    f: Callable
    g: Callable
    wrap_mask: tuple
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.m <= self.n:
            raise ValueError("need 1 <= m <= n")
        if len(self.wrap_mask) != self.n:
            raise ValueError("wrap_mask length must equal n")

    def rhs(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return self.f(x) + np.einsum("...ij,...j->...i", self.g(x), u)


def rotor_plant(omega: float = math.pi, gravity_coeff: float = 1.0, input_gain: float = 1.0) -> PlantModel:
    """Actuated pendulum in full rotation, ``phi'' = input_gain * u - gravity_coeff * sin(phi)``.

    State ``(phi, phidot)`` with ``phi`` wrapped to ``[0, 2 pi)``.  ``omega``
    is the nominal rotation rate used by :func:`rotor_reference`.
    ``input_gain = 0`` yields the uncontrollable variant used in validation tests.
    """
    if not omega > 0:
        raise ValueError("omega must be positive")
    c = float(gravity_coeff)
    b = float(input_gain)

    def f(x):
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 1], -c * np.sin(x[..., 0])], axis=-1)

    def g(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 1))
        out[..., 1, 0] = b
        return out

    return PlantModel("rotor", 2, 1, f, g, (True, False),
                      {"omega": float(omega), "gravity_coeff": c, "input_gain": b})


def vdp_plant(mu: float = 1.0) -> PlantModel:
    """Forced Van der Pol oscillator ``x1' = x2, x2' = mu (1 - x1^2) x2 - x1 + u``."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    mu = float(mu)

    def f(x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, mu * (1.0 - x1 * x1) * x2 - x1], axis=-1)

    def g(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 1))
        out[..., 1, 0] = 1.0
        return out

    return PlantModel("vdp", 2, 1, f, g, (False, False), {"mu": mu})


def rotor_oscillator_plant(omega: float = math.pi, gravity_coeff: float = 1.0,
                           stiffness: float = 1.0, damping: float = 1.0) -> PlantModel:
    """Rotor plus a damped oscillator driven by the same input.

    State ``(phi, phidot, y, ydot)``: ``phi'' = u - gravity_coeff sin(phi)``
    and ``y'' = -stiffness y - damping y' + u``.  Gives a three-dimensional
    transverse state with a single input.
    """
    if not omega > 0:
        raise ValueError("omega must be positive")
    if not damping > 0:
        raise ValueError("damping must be positive")
    c, kap, dmp = float(gravity_coeff), float(stiffness), float(damping)

    def f(x):
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 1], -c * np.sin(x[..., 0]), x[..., 3],
                         -kap * x[..., 2] - dmp * x[..., 3]], axis=-1)

    def g(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (4, 1))
        out[..., 1, 0] = 1.0
        out[..., 3, 0] = 1.0
        return out

    return PlantModel("rotor_oscillator", 4, 1, f, g, (True, False, False, False),
                      {"omega": float(omega), "gravity_coeff": c, "stiffness": kap, "damping": dmp})


PLANTS = {"rotor": rotor_plant, "vdp": vdp_plant, "rotor_oscillator": rotor_oscillator_plant}


def make_plant(plant_id: str, params: Optional[dict] = None) -> PlantModel:
    try:
        factory = PLANTS[plant_id]
    except KeyError:
        raise ValueError(f"unknown plant {plant_id!r}; known: {sorted(PLANTS)}") from None
    return factory(**(params or {}))


@functools.lru_cache(maxsize=64)
def _wrap_index(wrap_mask):
    idx = np.flatnonzero(np.asarray(wrap_mask, dtype=bool))
    return idx if idx.size else None


def wrap_angles(x, wrap_mask):
    """Map wrapped coordinates into ``[0, 2 pi)``."""
    x = np.array(x, dtype=float)
    idx = _wrap_index(tuple(bool(v) for v in wrap_mask))
    if idx is not None:
        x[..., idx] = np.mod(x[..., idx], TWO_PI)
    return x


def wrapped_difference(a, b, wrap_mask):
    """``a - b`` with wrapped coordinates reduced to ``[-pi, pi)``."""
    d = np.subtract(a, b, dtype=float)
    idx = _wrap_index(tuple(bool(v) for v in wrap_mask))
    if idx is not None:
        d = np.array(d)
        d[..., idx] = np.mod(d[..., idx] + math.pi, TWO_PI) - math.pi
    return d


@dataclass(frozen=True)
class ReferenceOrbit:
    """A T-periodic reference ``(x*, u*)`` in time and in phase parametrization.

    State grids hold the periodic part of the lifted (unwrapped) signal; the
    linear ``drift`` (one full turn per period on rotating coordinates) is
    added back on evaluation.  ``theta_star`` and ``theta_star_inv`` likewise
    store only the deviation from the affine maps ``T_theta t / T`` and
    ``T theta / T_theta``.  ``phase_index`` names the state coordinate used as
    phase, or ``None`` for a phase proportional to time.
    """

    T: float
    T_theta: float
    x_star_t: PeriodicGrid
    u_star_t: PeriodicGrid
    theta_star: PeriodicGrid
    x_star_theta: PeriodicGrid
    u_star_theta: PeriodicGrid
    theta_star_inv: PeriodicGrid
    theta_rate: PeriodicGrid
    drift: np.ndarray
    wrap_mask: tuple
    phase_index: Optional[int]
    plant_name: str

    @property
    def n(self) -> int:
        return self.drift.shape[0]

    @property
    def N(self) -> int:
        return self.x_star_theta.N

    def theta_nodes(self) -> np.ndarray:
        return self.x_star_theta.nodes()

    def x_at_time(self, t, lifted: bool = False):
        t = np.asarray(t, dtype=float)
        x = self.x_star_t(t) + np.multiply.outer(t / self.T, self.drift)
        return x if lifted else wrap_angles(x, self.wrap_mask)

    def u_at_time(self, t):
        return self.u_star_t(t)

    def theta_of_time(self, t):
        t = np.asarray(t, dtype=float)
        return np.mod(self.theta_star(t) + self.T_theta * t / self.T, self.T_theta)

    def time_of_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.mod(self.theta_star_inv(theta) + self.T * theta / self.T_theta, self.T)

    def selftime_base(self, theta):
        """Continuous branch of ``theta*^-1`` on ``[0, T_theta)``.

        Equals :meth:`time_of_theta` when the reference starts at phase 0;
        otherwise it is shifted by whole periods so that it has no jump
        inside ``[0, T_theta)``.
        """
        theta = np.asarray(theta, dtype=float)
        return self.theta_star_inv(theta) + self.T * theta / self.T_theta

    def x_of_theta(self, theta, order: int = 0, lifted: bool = False):
        theta = np.asarray(theta, dtype=float)
        if order == 0:
            x = self.x_star_theta(theta) + np.multiply.outer(theta / self.T_theta, self.drift)
            return x if lifted else wrap_angles(x, self.wrap_mask)
        x = self.x_star_theta.evaluate(theta, order)
        if order == 1:
            x = x + self.drift / self.T_theta
        return x

    def u_of_theta(self, theta):
        return self.u_star_theta(theta)

    def rate(self, theta):
        """``d theta*/dt`` at the reference time of phase ``theta``."""
        return self.theta_rate(theta)


def _lifted_time_function(x_fn: Callable, T: float, drift: np.ndarray) -> Callable:
    def lifted(t):
        k = math.floor(t / T)
        return np.asarray(x_fn(t - k * T), dtype=float) + k * drift
    return lifted


def build_orbit(plant: PlantModel, x_fn: Callable, u_fn: Callable, T: float,
                phase_index: Optional[int] = None, N: int = DEFAULT_GRID_N,
                T_theta: float = TWO_PI) -> ReferenceOrbit:
    """Tabulate a periodic solution given as functions of time on ``[0, T]``.

    ``x_fn`` must return the lifted (unwrapped) state; rotating coordinates
    may advance by whole turns over one period.
    """
    mask = np.asarray(plant.wrap_mask, dtype=bool)
    raw_drift = np.asarray(x_fn(T), dtype=float) - np.asarray(x_fn(0.0), dtype=float)
    drift = np.where(mask, np.round(raw_drift / TWO_PI) * TWO_PI, 0.0)
    if np.max(np.abs(raw_drift - drift)) > 1e-6 * (1 + np.max(np.abs(raw_drift))):
        raise ValueError("x_fn is not periodic modulo full turns of the wrapped coordinates")
    x_lift = _lifted_time_function(x_fn, T, drift)

    t_nodes = np.arange(N) * (T / N)
    X = np.array([x_lift(t) for t in t_nodes])
    U = np.array([np.atleast_1d(u_fn(t)) for t in t_nodes], dtype=float)
    XD = plant.rhs(X, U)
    x_star_t = PeriodicGrid(T, X - np.outer(t_nodes / T, drift), XD - drift / T)
    u_star_t = PeriodicGrid(T, U).with_fd_slopes()
    th_nodes = np.arange(N) * (T_theta / N)

    if phase_index is None:
        rate = T_theta / T
        theta_star = PeriodicGrid.constant(T, 0.0, N)
        Xth, Uth = X, U
        rates = np.full(N, rate)
        tinv_dev = np.zeros(N)
        XDth = XD
    else:
        k = int(phase_index)
        if not mask[k] or not math.isclose(drift[k], T_theta):
            raise ValueError("phase coordinate must be an angle advancing by T_theta per period")
        if np.any(XD[:, k] <= 0):
            raise ValueError("phase coordinate is not strictly increasing along the orbit")
        x0k = X[0, k]
        th0 = x0k % T_theta
        theta_star = PeriodicGrid(T, X[:, k] - x0k + th0 - T_theta * t_nodes / T, XD[:, k] - T_theta / T)
        lifted_th = np.append(X[:, k] - x0k + th0, th0 + T_theta)
        lifted_t = np.append(t_nodes, T)
        tinv = np.empty(N)
        for j, th in enumerate(th_nodes):
            target = th if th >= th0 else th + T_theta
            t = float(np.interp(target, lifted_th, lifted_t))
            for _ in range(50):
                xt = x_lift(t)
                r = xt[k] - x0k + th0 - target
                ut = np.atleast_1d(u_fn(t % T))
                vel = plant.rhs(xt, ut)[k]
                t -= r / vel
                if abs(r) < 1e-15 * (1 + abs(target)):
                    break
            tinv[j] = t if th >= th0 else t - T
        Xth = np.array([x_lift(t) for t in tinv])
        Uth = np.array([np.atleast_1d(u_fn(t % T)) for t in tinv], dtype=float)
        XDth = plant.rhs(Xth, Uth)
        rates = XDth[:, k]
        tinv_dev = tinv - T * th_nodes / T_theta

    x_star_theta = PeriodicGrid(T_theta, Xth - np.outer(th_nodes / T_theta, drift),
                                XDth / rates[:, None] - drift / T_theta)
    u_star_theta = PeriodicGrid(T_theta, Uth).with_fd_slopes()
    theta_star_inv = PeriodicGrid(T_theta, tinv_dev, 1.0 / rates - T / T_theta)
    theta_rate = PeriodicGrid(T_theta, rates).with_fd_slopes()
    return ReferenceOrbit(float(T), float(T_theta), x_star_t, u_star_t, theta_star, x_star_theta,
                          u_star_theta, theta_star_inv, theta_rate, drift, tuple(plant.wrap_mask),
                          phase_index, plant.name)


def rotor_reference(plant: PlantModel, omega: Optional[float] = None, N: int = DEFAULT_GRID_N) -> ReferenceOrbit:
    """Uniform rotation ``phi = omega t`` held by ``u* = gravity_coeff sin(omega t) / input_gain``."""
    if plant.name != "rotor":
        raise ValueError("rotor_reference needs a rotor plant")
    omega = plant.params["omega"] if omega is None else float(omega)
    if not math.isclose(omega, plant.params["omega"]):
        raise ValueError("omega does not match the plant")
    c = plant.params["gravity_coeff"]
    b = plant.params["input_gain"]
    if b == 0.0 and c != 0.0:
        raise ValueError("an unactuated rotor only rotates uniformly without gravity")
    gain = 0.0 if b == 0.0 else c / b
    T = TWO_PI / omega
    return build_orbit(plant, lambda t: np.array([omega * t, omega]),
                       lambda t: np.array([gain * math.sin(omega * t)]), T, phase_index=0, N=N)


def rotor_oscillator_reference(plant: PlantModel, N: int = DEFAULT_GRID_N) -> ReferenceOrbit:
    """Uniform rotation with the oscillator in its steady forced response to ``u* = c sin(omega t)``."""
    if plant.name != "rotor_oscillator":
        raise ValueError("needs a rotor_oscillator plant")
    p = plant.params
    w, c, kap, dmp = p["omega"], p["gravity_coeff"], p["stiffness"], p["damping"]
    D = kap - w * w
    den = D * D + (dmp * w) ** 2
    a_s, a_c = c * D / den, -c * dmp * w / den

    def x_fn(t):
        s_, c_ = math.sin(w * t), math.cos(w * t)
        return np.array([w * t, w, a_s * s_ + a_c * c_, w * (a_s * c_ - a_c * s_)])

    return build_orbit(plant, x_fn, lambda t: np.array([c * math.sin(w * t)]), TWO_PI / w,
                       phase_index=0, N=N)


def analytic_reference(plant: PlantModel, N: int = DEFAULT_GRID_N) -> ReferenceOrbit:
    if plant.name == "rotor":
        return rotor_reference(plant, N=N)
    if plant.name == "rotor_oscillator":
        return rotor_oscillator_reference(plant, N=N)
    raise ValueError(f"plant {plant.name!r} has no analytic reference; use a limit-cycle search")


@dataclass
class ReferenceReport:
    max_residual: float
    min_theta_rate: float
    min_speed: float
    inverse_error: float
    passed: bool


def verify_reference(plant: PlantModel, orbit: ReferenceOrbit, residual_tol: float = 1e-6) -> ReferenceReport:
    """Check the orbit solves the dynamics, has a monotone phase and no equilibrium points."""
    t = orbit.x_star_t.nodes()
    X = orbit.x_star_t.samples + np.outer(t / orbit.T, orbit.drift)
    U = orbit.u_star_t.samples.reshape(len(t), -1)
    rhs = plant.rhs(X, U)
    xdot = orbit.x_star_t.fd_derivative() + orbit.drift / orbit.T
    max_residual = float(np.max(np.abs(xdot - rhs)))
    if orbit.phase_index is None:
        min_rate = orbit.T_theta / orbit.T
    else:
        min_rate = float(np.min(rhs[:, orbit.phase_index]))
    min_speed = float(np.min(np.linalg.norm(rhs, axis=1)))
    back = orbit.time_of_theta(orbit.theta_of_time(t))
    inv_err = np.mod(back - t + orbit.T / 2, orbit.T) - orbit.T / 2
    inverse_error = float(np.max(np.abs(inv_err)))
    passed = max_residual <= residual_tol and min_rate > 0 and min_speed > 0 and inverse_error <= 1e-8
    return ReferenceReport(max_residual, min_rate, min_speed, inverse_error, bool(passed))


# --- limit cycles -------------------------------------------------------------


@dataclass(frozen=True)
class Section:
    """Hyperplane ``normal . x = offset`` crossed in the sense of ``direction``.

    ``direction = -1`` accepts crossings where ``normal . x`` decreases.
    """

    normal: tuple
    offset: float = 0.0
    direction: int = -1

    def value(self, x) -> float:
        return self.direction * (float(np.dot(self.normal, x)) - self.offset)


def _crossing_speed(plant, section, x) -> float:
    nrm = np.asarray(section.normal, dtype=float)
    return section.direction * float(np.dot(nrm, plant.f(x))) / float(np.linalg.norm(nrm))


def _flow_to_section(plant, x, section, dt, max_time, speed_threshold):
    field = lambda t, y: plant.f(y)
    s_prev = section.value(x)
    armed = s_prev < 0
    t = 0.0
    while t < max_time:
        x_new = rk4_step(field, 0.0, x, dt)
        s_new = section.value(x_new)
        if not np.all(np.isfinite(x_new)):
            raise NoCycleFound("trajectory diverged before reaching the section")
        if armed and s_prev < 0.0 <= s_new:
            tau = dt * (-s_prev) / (s_new - s_prev)
            y = x_new
            for _ in range(40):
                y = rk4_step(field, 0.0, x, tau)
                r = section.value(y)
                speed = section.direction * float(np.dot(section.normal, plant.f(y)))
                if abs(speed) < speed_threshold:
                    raise NonTransversal(f"section crossing speed {speed:.2e} below threshold")
                step = r / speed
                tau -= step
                if abs(step) < 1e-16 * max(1.0, dt):
                    break
            y = rk4_step(field, 0.0, x, tau)
            return y, t + tau
        if s_new < 0.0:
            armed = True
        x, s_prev = x_new, s_new
        t += dt
    raise NoCycleFound(f"no section crossing within {max_time:g} time units")


def find_limit_cycle(plant: PlantModel, initial_guess, section: Section, tol: float = 1e-10,
                     dt: float = 1e-3, max_time: float = 200.0, N: int = DEFAULT_GRID_N,
                     phase_index: Optional[int] = None, speed_threshold: float = 1e-6,
                     max_newton: int = 30) -> ReferenceOrbit:
    """Attracting limit cycle of the unforced plant by shooting on a Poincare section.

    The fixed point of the first-return map is refined by Newton's method
    with a finite-difference Jacobian until the return point lies within
    ``tol`` of its start.  The orbit is then tabulated over one period with
    ``u* = 0``.  Only plants without wrapped coordinates in the section
    normal are supported.

    Raises
    ------
    NonTransversal
        The guess lies on the section with (near) zero crossing speed, or a
        crossing is tangential.
    NoCycleFound
        No crossing within ``max_time`` or Newton failed to converge.
    """
    x = np.array(initial_guess, dtype=float)
    nrm = np.asarray(section.normal, dtype=float)
    if nrm.shape != (plant.n,):
        raise ValueError("section normal has the wrong dimension")
    on_section = abs(section.value(x)) <= 1e-9 * (1.0 + float(np.linalg.norm(x)))
    if on_section:
        speed = _crossing_speed(plant, section, x)
        if abs(speed) < speed_threshold:
            raise NonTransversal(f"initial guess sits on the section with crossing speed {speed:.2e}")
    if not (on_section and _crossing_speed(plant, section, x) > 0):
        x, _ = _flow_to_section(plant, x, section, dt, max_time, speed_threshold)

    # orthonormal basis of the section's tangent space
    _, _, vt = np.linalg.svd(nrm[None, :])
    E = vt[1:].T
    base = x.copy()

    def return_map(z):
        start = base + E @ z
        y, t_ret = _flow_to_section(plant, start, section, dt, max_time, speed_threshold)
        return E.T @ (y - base), t_ret, y, start

    z = np.zeros(plant.n - 1)
    for _ in range(max_newton):
        zr, t_ret, y, start = return_map(z)
        if np.linalg.norm(y - start) <= tol:
            break
        J = jacobian_fd(lambda zz: return_map(zz)[0] - zz, z, eps=1e-7)
        try:
            dz = np.linalg.solve(J, -(zr - z))
        except np.linalg.LinAlgError:
            raise NoCycleFound("singular return-map Jacobian") from None
        z = z + dz
        if not np.all(np.isfinite(z)) or np.linalg.norm(z) > 1e3 * (1.0 + np.linalg.norm(base)):
            raise NoCycleFound("Newton iteration on the return map diverged")
    else:
        raise NoCycleFound("Newton iteration on the return map did not converge")

    x_fn = _tabulate_cycle(plant, start, t_ret, N)
    return build_orbit(plant, x_fn, lambda t: np.zeros(plant.m), t_ret, phase_index=phase_index, N=N)


def _tabulate_cycle(plant, x0, T, N, substeps: int = 4):
    field = lambda t, y: plant.f(y)
    h = T / (N * substeps)
    X = np.empty((N + 1, plant.n))
    X[0] = x0
    x = np.array(x0, dtype=float)
    for j in range(N):
        for _ in range(substeps):
            x = rk4_step(field, 0.0, x, h)
        X[j + 1] = x
    return _hermite_time_function(X, plant.f(X), T)


def _hermite_time_function(X, XD, T):
    """Cubic Hermite interpolant through lifted samples ``X[0..N]`` with slopes ``XD``."""
    N = X.shape[0] - 1
    h = T / N

    def x_fn(t):
        if t >= T:
            return X[N]
        u = t / h
        i = min(int(math.floor(u)), N - 1)
        s = u - i
        s2, s3 = s * s, s * s * s
        return ((2 * s3 - 3 * s2 + 1) * X[i] + (s3 - 2 * s2 + s) * h * XD[i]
                + (3 * s2 - 2 * s3) * X[i + 1] + (s3 - s2) * h * XD[i + 1])
    return x_fn


# --- orbit files --------------------------------------------------------------


def save_orbit(orbit: ReferenceOrbit, path) -> None:
    """Write the orbit as a self-describing CSV table (header rows then columns t, theta, x*, u*)."""
    from .artifacts import atomic_write_text

    t = orbit.x_star_t.nodes()
    X = orbit.x_at_time(t)
    U = orbit.u_star_t.samples.reshape(len(t), -1)
    th = orbit.theta_of_time(t)
    lines = [f"T,{orbit.T:.17g}", f"T_theta,{orbit.T_theta:.17g}", f"plant,{orbit.plant_name}",
             f"phase_index,{'none' if orbit.phase_index is None else orbit.phase_index}"]
    cols = ["t", "theta"] + [f"x_{i}" for i in range(X.shape[1])] + [f"u_{i}" for i in range(U.shape[1])]
    lines.append(",".join(cols))
    for j in range(len(t)):
        vals = [t[j], th[j], *X[j], *U[j]]
        lines.append(",".join(f"{v:.17g}" for v in vals))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_orbit(path, plant: PlantModel) -> ReferenceOrbit:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    meta = {}
    i = 0
    while rows[i][0] != "t":
        meta[rows[i][0]] = rows[i][1]
        i += 1
    header = rows[i]
    data = np.array([[float(v) for v in r] for r in rows[i + 1:] if r], dtype=float)
    if meta.get("plant") != plant.name:
        raise ValueError(f"orbit file was written for plant {meta.get('plant')!r}")
    T = float(meta["T"])
    T_theta = float(meta["T_theta"])
    phase = None if meta["phase_index"] == "none" else int(meta["phase_index"])
    nx = sum(1 for c in header if c.startswith("x_"))
    X = data[:, 2:2 + nx].copy()
    U = data[:, 2 + nx:]
    mask = np.asarray(plant.wrap_mask, dtype=bool)
    if mask.any():
        X[:, mask] = np.unwrap(X[:, mask], axis=0)
    step = X[1] - X[0]
    turns = np.where(mask, np.round((X[-1] + step - X[0]) / TWO_PI) * TWO_PI, 0.0)
    X_full = np.vstack([X, X[0] + turns])
    N = X.shape[0]
    u_grid = PeriodicGrid(T, U).with_fd_slopes()
    x_fn = _hermite_time_function(X_full, plant.rhs(X_full, np.vstack([U, U[:1]])), T)
    return build_orbit(plant, x_fn, lambda t: u_grid(t), T, phase_index=phase, N=N, T_theta=T_theta)
