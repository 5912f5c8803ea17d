"""Feedback laws and self-time bookkeeping.

Three laws share the decomposition ``u = feedforward + orbital + sync``:
orbital stabilization (``sync = 0``), LQR synchronization on the lateness
``h`` (optionally saturated) and sliding-mode synchronization on
``s = n^T xi + h``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import SlidingSurfaceDegenerate
from .numerics import PeriodicGrid
from .synthesis import SlidingSurface

MODES = ("orbital", "lqr_sync", "lqr_sync_saturated", "sliding_sync")
B_SLACK = 1e-6
S_ZERO = 1e-12


# --- self-time ---------------------------------------------------------------


@dataclass(frozen=True)
class ControllerState:
    """Period counter ``nu``, last phase and self-time ``tau`` of one agent."""

    nu: int
    last_theta: float
    tau: float
    mode: str = "orbital"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


def selftime(orbit, theta, nu):
    """``tau = theta*^-1(theta) + nu T``."""
    return orbit.selftime_base(theta) + np.asarray(nu) * orbit.T


def wrap_increment(last_theta, theta_new, T_theta):
    """+1 on a forward wrap, -1 on a backward wrap (jumps larger than half a phase period)."""
    d = np.asarray(theta_new) - np.asarray(last_theta)
    half = 0.5 * T_theta
    return np.where(d < -half, 1, np.where(d > half, -1, 0))


def initial_state(orbit, theta: float, mode: str = "orbital", nu: int = 0) -> ControllerState:
    return ControllerState(int(nu), float(theta), float(selftime(orbit, theta, nu)), mode)


def update_selftime(state: ControllerState, theta_new: float, orbit) -> ControllerState:
    nu = state.nu + int(wrap_increment(state.last_theta, theta_new, orbit.T_theta))
    return replace(state, nu=nu, last_theta=float(theta_new), tau=float(selftime(orbit, theta_new, nu)))


def peek_selftime(state: ControllerState, theta: float, orbit) -> float:
    """Self-time at ``theta`` without committing the update."""
    return update_selftime(state, theta, orbit).tau


def lateness(t_ref: float, state: ControllerState) -> float:
    """``h = t_ref - tau``; positive when the agent is behind its reference."""
    return t_ref - state.tau


# --- laws --------------------------------------------------------------------


@dataclass
class ControlOutput:
    u: np.ndarray
    feedforward: np.ndarray
    orbital: np.ndarray
    sync: np.ndarray
    s: float
    theta: float
    xi: np.ndarray
    h: float


def saturate(h, h_max):
    return h if h_max is None else np.clip(h, -h_max, h_max)


def sign0(s):
    """Signum with ``sign0(0) = 0``; ``|s| <= S_ZERO`` counts as zero.

    The band absorbs rounding in ``h = t_ref - tau`` so an agent sitting on
    the surface is not kicked off it by a roundoff-sized ``s``.
    """
    s = np.asarray(s, dtype=float)
    return np.where(np.abs(s) <= S_ZERO, 0.0, np.sign(s))


def sliding_term(k, s, b, b_min, boundary_layer: float = 0.0):
    """``-k sgn(s) / b``, with ``|b|`` floored at ``b_min``.

    Interpolated ``|b|`` values that dip below ``b_min`` by more than a
    relative ``1e-6`` signal a degenerate surface.
    """
    b = np.asarray(b, dtype=float)
    ab = np.abs(b)
    if np.any(ab < b_min * (1.0 - B_SLACK)):
        raise SlidingSurfaceDegenerate(f"|b| = {np.min(ab):.4g} below b_min = {b_min:.4g}")
    b_eff = np.where(b < 0, -1.0, 1.0) * np.maximum(ab, b_min)
    if boundary_layer > 0.0:
        sw = np.clip(np.asarray(s) / boundary_layer, -1.0, 1.0)
    else:
        sw = sign0(s)
    return -k * sw / b_eff


def _output(ff, orb, sync, s, theta, xi, h):
    return ControlOutput(ff + orb + sync, ff, orb, sync, float(s), float(theta), xi, float(h))


def orbital_control(x, chart, orbit, K: PeriodicGrid, theta_hint=None) -> ControlOutput:
    """``u = u*(theta) + K(theta) xi``."""
    xi, theta = chart.coordinates(x, theta_hint)
    ff = np.atleast_1d(orbit.u_of_theta(theta))
    orb = K(theta) @ xi
    return _output(ff, orb, np.zeros_like(ff), 0.0, theta, xi, 0.0)


def lqr_sync_control(t_ref, x, state: ControllerState, chart, orbit, K_xi: PeriodicGrid,
                     K_h: PeriodicGrid, h_max: Optional[float] = None, theta_hint=None) -> ControlOutput:
    """``u = u*(theta) + K_xi(theta) xi + K_h(theta) sat(h)``."""
    xi, theta = chart.coordinates(x, theta_hint)
    h = t_ref - peek_selftime(state, theta, orbit)
    ff = np.atleast_1d(orbit.u_of_theta(theta))
    orb = K_xi(theta) @ xi
    sync = K_h(theta)[:, 0] * saturate(h, h_max)
    return _output(ff, orb, sync, 0.0, theta, xi, h)


def sliding_sync_control(t_ref, x, state: ControllerState, chart, orbit, K: PeriodicGrid,
                         surface: SlidingSurface, boundary_layer: float = 0.0, theta_hint=None) -> ControlOutput:
    """``u = u*(theta) + K(theta) xi - k sgn(s) / b(theta)`` with ``s = n(theta)^T xi + h``."""
    xi, theta = chart.coordinates(x, theta_hint)
    h = t_ref - peek_selftime(state, theta, orbit)
    ff = np.atleast_1d(orbit.u_of_theta(theta))
    orb = K(theta) @ xi
    s = float(surface.n_vec(theta) @ xi + h)
    if surface.k == 0.0:
        sync = np.zeros_like(ff)
    else:
        sync = np.atleast_1d(sliding_term(surface.k, s, surface.b(theta), surface.b_min, boundary_layer))
    return _output(ff, orb, sync, s, theta, xi, h)


class ControlLaw:
    """Batched evaluation of one feedback law for many agents.

    All phase-dependent tables the law needs are stacked into a single grid
    so each evaluation interpolates once.

    Parameters
    ----------
    mode : str
        One of ``MODES``.
    K : PeriodicGrid
        Orbital gain (``orbital`` and ``sliding_sync``).
    K_xi, K_h : PeriodicGrid
        Augmented gains (``lqr_sync*``).
    surface : SlidingSurface
    h_max : float
        Lateness saturation for ``lqr_sync_saturated``.
    """

    def __init__(self, orbit, chart, mode: str, K=None, K_xi=None, K_h=None, surface=None,
                 h_max=None, boundary_layer: float = 0.0):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.orbit = orbit
        self.chart = chart
        self.mode = mode
        self.h_max = h_max
        self.boundary_layer = float(boundary_layer)
        self.surface = surface
        if mode == "lqr_sync_saturated" and not (h_max is not None and h_max > 0):
            raise ValueError("saturated LQR synchronization needs h_max > 0")
        if mode in ("lqr_sync", "lqr_sync_saturated"):
            if K_xi is None or K_h is None:
                raise ValueError("LQR synchronization needs K_xi and K_h")
            gains = {"K": K_xi}
            # linear interpolation never exceeds the node maximum, which keeps
            # the saturated sync term inside max|K_h| * h_max pointwise
            self._K_h = PeriodicGrid(orbit.T_theta, K_h.samples)
        else:
            if K is None:
                raise ValueError(f"mode {mode!r} needs K")
            gains = {"K": K}
        if mode == "sliding_sync":
            if surface is None:
                raise ValueError("sliding synchronization needs a surface")
            gains["n"] = surface.n_vec
            gains["b"] = surface.b
        self.m = int(np.atleast_1d(orbit.u_star_theta.samples[0]).shape[0])
        parts = {"ff": orbit.u_star_theta, "tinv": orbit.theta_star_inv, **gains}
        cols, slopes, self._slices = [], [], {}
        start = 0
        N = orbit.u_star_theta.N
        for name, g in parts.items():
            if g.N != N:
                g = g.resample(N) if g.hermite else g.with_fd_slopes().resample(N)
            if not g.hermite:
                g = g.with_fd_slopes()
            flat = g.samples.reshape(N, -1)
            cols.append(flat)
            slopes.append(g.slopes.reshape(N, -1))
            self._slices[name] = (slice(start, start + flat.shape[1]), g.shape)
            start += flat.shape[1]
        self.table = PeriodicGrid(orbit.T_theta, np.hstack(cols), np.hstack(slopes))

    def _get(self, row, name):
        sl, shape = self._slices[name]
        return row[:, sl].reshape((row.shape[0],) + tuple(shape))

    def tables(self, theta):
        return self.table.evaluate(np.atleast_1d(theta))

    def selftime(self, row, theta, nu):
        """Self-time from a table row (avoids a second interpolation)."""
        o = self.orbit
        return self._get(row, "tinv") + o.T * theta / o.T_theta + nu * o.T

    def terms(self, row, theta, xi, h):
        """``(feedforward, orbital, sync, s)`` for a batch; ``row`` comes from :meth:`tables`."""
        ff = self._get(row, "ff").reshape(len(theta), self.m)
        orb = np.einsum("bij,bj->bi", self._get(row, "K"), xi)
        s = np.zeros(len(theta))
        if self.mode == "orbital":
            sync = np.zeros_like(ff)
        elif self.mode in ("lqr_sync", "lqr_sync_saturated"):
            hs = saturate(h, self.h_max if self.mode == "lqr_sync_saturated" else None)
            sync = self._K_h.evaluate(theta)[:, :, 0] * hs[:, None]
        else:
            n = self._get(row, "n")
            s = np.einsum("bi,bi->b", n, xi) + h
            if self.surface.k == 0.0:
                sync = np.zeros_like(ff)
            else:
                b = self._get(row, "b").reshape(len(theta))
                sync = sliding_term(self.surface.k, s, b, self.surface.b_min, self.boundary_layer)[:, None]
        return ff, orb, sync, s

    @property
    def sync_bound(self) -> float:
        """Pointwise bound on ``|sync|`` implied by the law, ``inf`` if unbounded."""
        if self.mode == "orbital":
            return 0.0
        if self.mode == "sliding_sync":
            return self.surface.sync_bound
        if self.mode == "lqr_sync_saturated":
            return float(np.max(np.abs(self._K_h.samples))) * self.h_max
        return float("inf")
