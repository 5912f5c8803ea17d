"""Deterministic numerical building blocks.

Fixed-step RK4 integration, central-difference Jacobians, tables of
periodic functions and a periodic-solution finder for linear periodic ODEs.
Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteState, NonFiniteValue, NotConverged

DEFAULT_GRID_N = 2048
MIN_GRID_N = 16
NORM_FLOOR = 1e-12


class PeriodicGrid:
    """Samples of a periodic (vector- or matrix-valued) function on a uniform grid.

    ``samples[j]`` is the value at ``j * period / N``.  Evaluation between
    nodes is piecewise linear, or cubic Hermite when node slopes are given.
    Evaluation accepts a scalar or a 1-D array of arguments; arrays add a
    leading batch axis to the result.
    """

    def __init__(self, period: float, samples, slopes=None):
        period = float(period)
        if not period > 0.0:
            raise ValueError("period must be positive")
        samples = np.array(samples, dtype=float)
        if samples.ndim == 0 or samples.shape[0] < MIN_GRID_N:
            raise ValueError(f"need at least {MIN_GRID_N} samples per period")
        self.period = period
        self.samples = samples
        self.N = samples.shape[0]
        self.step = period / self.N
        self._ext = np.concatenate([samples, samples[:1]], axis=0)
        if slopes is not None:
            slopes = np.array(slopes, dtype=float)
            if slopes.shape != samples.shape:
                raise ValueError("slopes must match samples in shape")
            self._ext_slopes = np.concatenate([slopes, slopes[:1]], axis=0)
        else:
            self._ext_slopes = None
        self.slopes = slopes
        self._coef = None

    @classmethod
    def from_function(cls, fn: Callable, period: float, N: int = DEFAULT_GRID_N, slope_fn=None):
        nodes = np.arange(N) * (period / N)
        samples = np.array([fn(t) for t in nodes], dtype=float)
        slopes = None if slope_fn is None else np.array([slope_fn(t) for t in nodes], dtype=float)
        return cls(period, samples, slopes)

    @classmethod
    def constant(cls, period: float, value, N: int = DEFAULT_GRID_N):
        value = np.asarray(value, dtype=float)
        return cls(period, np.broadcast_to(value, (N,) + value.shape), np.zeros((N,) + value.shape))

    @property
    def shape(self):
        return self.samples.shape[1:]

    @property
    def hermite(self) -> bool:
        return self._ext_slopes is not None

    def nodes(self) -> np.ndarray:
        return np.arange(self.N) * self.step

    def _locate(self, theta):
        u = np.mod(theta, self.period) / self.step
        i = np.floor(u)
        frac = u - i
        i = i.astype(np.int64) % self.N
        return i, frac

    def _coefficients(self) -> np.ndarray:
        """Per-interval polynomial coefficients in the local variable ``t in [0, 1)``."""
        if self._coef is None:
            y0, y1 = self._ext[:-1], self._ext[1:]
            if self._ext_slopes is None:
                self._coef = np.stack([y0, y1 - y0, np.zeros_like(y0), np.zeros_like(y0)], axis=1)
            else:
                m0 = self._ext_slopes[:-1] * self.step
                m1 = self._ext_slopes[1:] * self.step
                self._coef = np.stack([y0, m0, 3.0 * (y1 - y0) - 2.0 * m0 - m1,
                                       2.0 * (y0 - y1) + m0 + m1], axis=1)
        return self._coef

    def evaluate(self, theta, order: int = 0):
        """Value (order 0) or derivative (order 1, 2) of the interpolant at ``theta``."""
        if order not in (0, 1, 2):
            raise ValueError("order must be 0, 1 or 2")
        scalar = np.ndim(theta) == 0
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        i, t = self._locate(theta)
        t = t.reshape(t.shape + (1,) * (self.samples.ndim - 1))
        c = self._coefficients()[i]
        c0, c1, c2, c3 = c[:, 0], c[:, 1], c[:, 2], c[:, 3]
        if order == 0:
            out = c0 + t * (c1 + t * (c2 + t * c3))
        elif order == 1:
            out = (c1 + t * (2.0 * c2 + 3.0 * t * c3)) / self.step
        else:
            out = (2.0 * c2 + 6.0 * t * c3) / (self.step * self.step)
        if scalar:
            out = out[0]
            return float(out) if out.ndim == 0 else out
        return out

    def __call__(self, theta):
        return self.evaluate(theta, 0)

    def derivative(self, theta, order: int = 1):
        return self.evaluate(theta, order)

    def midpoint_samples(self) -> np.ndarray:
        """Values at ``(j + 1/2) * step`` accurate to fourth order in the step."""
        y = self.samples
        if self._ext_slopes is not None:
            s = self.slopes * self.step
            return 0.5 * (y + np.roll(y, -1, axis=0)) + (s - np.roll(s, -1, axis=0)) / 8.0
        return (9.0 * (y + np.roll(y, -1, axis=0)) - np.roll(y, 1, axis=0) - np.roll(y, -2, axis=0)) / 16.0

    def fd_derivative(self) -> np.ndarray:
        """Sixth-order central-difference derivative at the nodes."""
        y = self.samples
        d = lambda k: np.roll(y, -k, axis=0) - np.roll(y, k, axis=0)
        return (45.0 * d(1) - 9.0 * d(2) + d(3)) / (60.0 * self.step)

    def with_fd_slopes(self) -> "PeriodicGrid":
        return PeriodicGrid(self.period, self.samples, self.fd_derivative())

    def reversed(self) -> "PeriodicGrid":
        """Grid of ``theta -> y(-theta)``."""
        idx = (-np.arange(self.N)) % self.N
        slopes = None if self.slopes is None else -self.slopes[idx]
        return PeriodicGrid(self.period, self.samples[idx], slopes)

    def resample(self, N: int) -> "PeriodicGrid":
        nodes = np.arange(N) * (self.period / N)
        slopes = None if self.slopes is None else self.evaluate(nodes, 1)
        return PeriodicGrid(self.period, self.evaluate(nodes, 0), slopes)

    def __repr__(self):
        kind = "hermite" if self.hermite else "linear"
        return f"PeriodicGrid(period={self.period:g}, N={self.N}, shape={self.shape}, {kind})"


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape[0] != self.times.shape[0]:
            raise ValueError("times and states differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def rk4_step(field: Callable, t: float, x: np.ndarray, dt: float) -> np.ndarray:
    k1 = field(t, x)
    k2 = field(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = field(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = field(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_count(t0: float, t1: float, dt: float) -> int:
    return max(1, int(math.ceil((t1 - t0) / dt - 1e-9)))


def integrate_rk4(field: Callable, x0, t0: float, t1: float, dt: float) -> Trajectory:
    """Classical fixed-step RK4 from ``t0`` to ``t1``; the last step is shortened to land on ``t1``.

    Parameters
    ----------
    field : callable
        ``field(t, x) -> dx/dt``.
    x0 : array_like
        Initial state (scalars are promoted to 1-vectors).
    t0, t1 : float
        Integration interval, ``t1 > t0``.
    dt : float
        Step size, ``0 < dt <= t1 - t0``.
    """
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    if not 0.0 < dt <= (t1 - t0) * (1 + 1e-12):
        raise ValueError("dt must lie in (0, t1 - t0]")
    x = np.atleast_1d(np.array(x0, dtype=float))
    n = step_count(t0, t1, dt)
    times = np.empty(n + 1)
    states = np.empty((n + 1,) + x.shape)
    times[0] = t0
    states[0] = x
    t = t0
    for k in range(n):
        t_next = t1 if k == n - 1 else t0 + (k + 1) * dt
        x = rk4_step(field, t, x, t_next - t)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"state became non-finite at t={t_next:g}")
        t = t_next
        times[k + 1] = t
        states[k + 1] = x
    return Trajectory(times, states)


def jacobian_fd(func: Callable, point, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian; the probe size is ``eps * max(1, |x_j|)`` per coordinate."""
    x = np.array(point, dtype=float).ravel()
    f0 = np.atleast_1d(np.asarray(func(x), dtype=float))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        e = eps * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += e
        xm[j] -= e
        fp = np.atleast_1d(np.asarray(func(xp), dtype=float)).ravel()
        fm = np.atleast_1d(np.asarray(func(xm), dtype=float)).ravel()
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteValue(f"non-finite probe along coordinate {j}")
        J[:, j] = (fp - fm) / (xp[j] - xm[j])
    return J


# --- sweeps over a periodic grid -------------------------------------------


def _stage_tables(grids: Sequence[PeriodicGrid], reverse: bool):
    tables = []
    N = grids[0].N
    j = np.arange(N)
    for g in grids:
        if g.N != N or not math.isclose(g.period, grids[0].period, rel_tol=1e-12):
            raise ValueError("grids must share period and node count")
        S = g.samples
        M = g.midpoint_samples()
        if reverse:
            tables.append((S[(-j) % N], M[(-j - 1) % N], S[(-j - 1) % N]))
        else:
            tables.append((S, M, S[(j + 1) % N]))
    return tables


def grid_sweep(rhs: Callable, y0, grids: Sequence[PeriodicGrid], periods: int = 1,
               reverse: bool = False, record: bool = False):
    """RK4 over the grid intervals with coefficients taken at nodes and midpoints.

    ``rhs(y, *coeffs)`` is the right-hand side in the original argument.  With
    ``reverse`` the sweep runs in ``sigma = -theta``; recorded samples are then
    indexed by ``sigma`` nodes.  Returns ``(y_end, recorded)`` where
    ``recorded`` holds the state at every node of the last period swept.
    """
    tables = _stage_tables(grids, reverse)
    N = grids[0].N
    h = grids[0].step
    sign = -1.0 if reverse else 1.0
    y = np.array(y0, dtype=float)
    rec = np.empty((N,) + y.shape) if record else None
    for _ in range(periods):
        for j in range(N):
            if record:
                rec[j] = y
            c0 = [t[0][j] for t in tables]
            cm = [t[1][j] for t in tables]
            c1 = [t[2][j] for t in tables]
            k1 = sign * rhs(y, *c0)
            k2 = sign * rhs(y + 0.5 * h * k1, *cm)
            k3 = sign * rhs(y + 0.5 * h * k2, *cm)
            k4 = sign * rhs(y + h * k3, *c1)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NonFiniteState("periodic sweep diverged")
    return y, rec


def monodromy(A: PeriodicGrid) -> np.ndarray:
    """One-period state-transition matrix of ``y' = A(theta) y`` from the identity."""
    d = int(round(math.sqrt(int(np.prod(A.shape))))) if A.shape else 1
    A2 = PeriodicGrid(A.period, A.samples.reshape(A.N, d, d))
    Phi, _ = grid_sweep(lambda Y, a: a @ Y, np.eye(d), (A2,))
    return Phi


def periodicity_gap(y_start, y_end) -> float:
    num = float(np.linalg.norm(np.asarray(y_end) - np.asarray(y_start)))
    return num / max(float(np.linalg.norm(y_end)), NORM_FLOOR)


def find_periodic_solution(A: PeriodicGrid, c: PeriodicGrid, direction: str = "forward",
                           tol: float = 1e-8, max_periods: int = 60, y0=None) -> PeriodicGrid:
    """Periodic solution of ``y' = A(theta) y + c(theta)`` by repeated period sweeps.

    The homogeneous part must be exponentially stable in the chosen
    direction; ``direction="reversed"`` integrates in ``-theta`` and maps the
    result back, which is how an anti-stable (adjoint) equation is solved.
    Convergence is declared when the relative gap between the start and end
    of a swept period drops to ``tol``.

    Raises
    ------
    NotConverged
        If the gap is still above ``tol`` after ``max_periods`` sweeps.
    """
    if direction not in ("forward", "reversed"):
        raise ValueError("direction must be 'forward' or 'reversed'")
    out_shape = c.shape
    d = int(np.prod(out_shape)) if out_shape else 1
    A2 = PeriodicGrid(A.period, A.samples.reshape(A.N, d, d))
    c2 = PeriodicGrid(c.period, c.samples.reshape(c.N, d))
    reverse = direction == "reversed"

    def rhs(y, a, cc):
        return a @ y + cc

    with np.errstate(over="ignore", invalid="ignore"):
        Phi, _ = grid_sweep(lambda Y, a, cc: a @ Y, np.eye(d), (A2, c2), 1, reverse)
    contracting = np.all(np.isfinite(Phi)) and np.max(np.abs(np.linalg.eigvals(Phi))) < 1.0
    if y0 is not None:
        y = np.array(y0, dtype=float).reshape(d)
    elif contracting:
        # start at the fixed point of the affine return map y -> Phi y + p
        p, _ = grid_sweep(rhs, np.zeros(d), (A2, c2), 1, reverse)
        y = np.linalg.solve(np.eye(d) - Phi, p)
    else:
        y = np.zeros(d)
    gap = math.inf
    for _ in range(max_periods):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                y_end, rec = grid_sweep(rhs, y, (A2, c2), 1, reverse, record=True)
        except NonFiniteState:
            raise NotConverged("periodic sweep diverged; homogeneous part unstable in this direction")
        if not np.all(np.isfinite(rec)):
            raise NotConverged("periodic sweep diverged; homogeneous part unstable in this direction")
        gap = periodicity_gap(y, y_end)
        y_prev, y = y, y_end
        if gap <= tol:
            break
    else:
        raise NotConverged(f"periodicity gap {gap:.3e} > tol {tol:.1e} after {max_periods} periods")
    # close the seam: y is within tol of the fixed point, solve the affine
    # return map exactly and sweep once more
    y_fix = np.linalg.solve(np.eye(d) - Phi, y_end - Phi @ y_prev)
    if np.all(np.isfinite(y_fix)):
        y_end2, rec2 = grid_sweep(rhs, y_fix, (A2, c2), 1, reverse, record=True)
        if periodicity_gap(y_fix, y_end2) <= gap:
            rec = rec2
    N = A.N
    if reverse:
        rec = rec[(-np.arange(N)) % N]
    slopes = np.einsum("nij,nj->ni", A2.samples, rec) + c2.samples
    return PeriodicGrid(A.period, rec.reshape((N,) + out_shape), slopes.reshape((N,) + out_shape))


def periodic_residual(y: PeriodicGrid, A: PeriodicGrid, c: PeriodicGrid) -> float:
    """Max-norm residual of ``y' - A y - c`` with ``y'`` from grid finite differences."""
    d = int(np.prod(y.shape)) if y.shape else 1
    Y = y.samples.reshape(y.N, d)
    dY = y.fd_derivative().reshape(y.N, d)
    res = dY - np.einsum("nij,nj->ni", A.samples.reshape(A.N, d, d), Y) - c.samples.reshape(c.N, d)
    return float(np.max(np.abs(res)))
