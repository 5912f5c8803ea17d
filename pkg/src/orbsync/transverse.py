"""Transverse coordinates around a reference orbit and their linearization.

A chart maps a state ``x`` near the orbit to a phase ``theta = pi(x)`` and
transverse deviations ``xi = alpha(x)``, with inverse ``x = beta(xi, theta)``.
Functions in this module accept a single point or a batch along a leading
axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DenominatorNonPositive, OutOfTube, SingularJacobian
from .numerics import DEFAULT_GRID_N, PeriodicGrid
from .plant import PlantModel, ReferenceOrbit, wrap_angles, wrapped_difference

COND_LIMIT = 1e12
NEWTON_TOL = 1e-10
NEWTON_MAX = 20
_ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])


def _separation_radius(orbit: ReferenceOrbit, samples: int = 512) -> float:
    """Half the smallest distance between orbit points at least a quarter period apart."""
    M = min(samples, orbit.N)
    th = np.arange(M) * (orbit.T_theta / M)
    X = orbit.x_of_theta(th)
    d = wrapped_difference(X[:, None, :], X[None, :, :], orbit.wrap_mask)
    dist = np.linalg.norm(d, axis=-1)
    idx = np.arange(M)
    sep = np.abs(idx[:, None] - idx[None, :])
    sep = np.minimum(sep, M - sep)
    return 0.5 * float(np.min(dist[sep >= M // 4]))


def _min_curvature_radius(orbit: ReferenceOrbit) -> float:
    th = orbit.theta_nodes()
    d1 = orbit.x_of_theta(th, 1)
    d2 = orbit.x_of_theta(th, 2)
    s2 = np.sum(d1 * d1, axis=1)
    cross2 = np.maximum(s2 * np.sum(d2 * d2, axis=1) - np.sum(d1 * d2, axis=1) ** 2, 0.0)
    kappa = np.sqrt(cross2) / s2 ** 1.5
    kmax = float(np.max(kappa))
    return math.inf if kmax == 0.0 else 1.0 / kmax


class TransverseChart:
    """Projection ``pi``, transverse map ``alpha`` and inverse ``beta`` near an orbit.

    Parameters
    ----------
    orbit : ReferenceOrbit
    strategy : {"monotone", "orthogonal"}
        ``"monotone"`` uses the orbit's phase coordinate as ``theta`` and the
        remaining coordinates' deviations as ``xi``.  ``"orthogonal"`` uses
        the nearest orbit point and components along a transverse frame.
    tube_radius : float, optional
        Validity radius.  Defaults to half the minimal distance between
        orbit points a quarter period apart, capped for the orthogonal
        strategy by the minimal radius of curvature.
    """

    def __init__(self, orbit: ReferenceOrbit, strategy: str = "monotone",
                 tube_radius: Optional[float] = None):
        if strategy not in ("monotone", "orthogonal"):
            raise ValueError(f"unknown chart strategy {strategy!r}")
        self.orbit = orbit
        self.strategy = strategy
        self.n = orbit.n
        if strategy == "monotone":
            if orbit.phase_index is None:
                raise ValueError("monotone chart needs an orbit parametrized by a state coordinate")
            self.index = orbit.phase_index
            self._others = [i for i in range(self.n) if i != self.index]
        else:
            self.index = None
        if tube_radius is None:
            tube_radius = _separation_radius(orbit)
            if strategy == "orthogonal":
                tube_radius = min(tube_radius, _min_curvature_radius(orbit))
        if not tube_radius > 0:
            raise ValueError("tube_radius must be positive")
        self.tube_radius = float(tube_radius)
        self.frame = self._build_frame() if strategy == "orthogonal" and self.n > 2 else None
        self._nodes = orbit.theta_nodes()
        self._node_states = orbit.x_of_theta(self._nodes)

    def __repr__(self):
        return f"TransverseChart({self.strategy!r}, n={self.n}, tube_radius={self.tube_radius:.4g})"

    # --- frames --------------------------------------------------------------

    def _build_frame(self) -> PeriodicGrid:
        th = self.orbit.theta_nodes()
        tang = self.orbit.x_of_theta(th, 1)
        frames = np.empty((len(th), self.n, self.n - 1))
        prev = None
        for j, d in enumerate(tang):
            frames[j] = _complement(d / np.linalg.norm(d), prev)
            prev = frames[j]
        return PeriodicGrid(self.orbit.T_theta, frames).with_fd_slopes()

    def normals(self, theta):
        """Orthonormal transverse frame, shape ``(..., n, n-1)`` (orthogonal strategy)."""
        theta = np.asarray(theta, dtype=float)
        d1 = np.atleast_2d(self.orbit.x_of_theta(np.atleast_1d(theta), 1))
        t = d1 / np.linalg.norm(d1, axis=1, keepdims=True)
        if self.n == 2:
            out = (t @ _ROT90.T)[:, :, None]
        else:
            raw = np.atleast_3d(self.frame(np.atleast_1d(theta)))
            out = np.stack([_complement(tj, fj) for tj, fj in zip(t, raw)])
        return out[0] if theta.ndim == 0 else out

    # --- projection ----------------------------------------------------------

    def _orbit_distance(self, x, theta):
        d = wrapped_difference(x, self.orbit.x_of_theta(theta), self.orbit.wrap_mask)
        return np.linalg.norm(d, axis=-1)

    def _nearest_node(self, x, theta_hint=None, window: int = 48):
        """Index of the nearest grid sample, globally or in a window around a hint."""
        N = len(self._nodes)
        if theta_hint is None:
            d = wrapped_difference(x[:, None, :], self._node_states[None, :, :], self.orbit.wrap_mask)
            return np.argmin(np.einsum("bnk,bnk->bn", d, d), axis=1)
        centre = np.rint(np.mod(theta_hint, self.orbit.T_theta) / (self.orbit.T_theta / N)).astype(int)
        offs = np.arange(-window, window + 1)
        idx = (centre[:, None] + offs[None, :]) % N
        d = wrapped_difference(x[:, None, :], self._node_states[idx], self.orbit.wrap_mask)
        k = np.argmin(np.einsum("bwk,bwk->bw", d, d), axis=1)
        edge = (k == 0) | (k == 2 * window)
        out = idx[np.arange(len(k)), k]
        if np.any(edge):
            out[edge] = self._nearest_node(x[edge])
        return out

    def project(self, x, theta_hint=None, check: bool = True):
        """Phase ``theta = pi(x)`` in ``[0, T_theta)``.

        For the orthogonal strategy ``theta_hint`` (a previous phase) limits
        the coarse search to nearby grid samples; the global search is used
        when the windowed minimum sits on the window edge.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if self.strategy == "monotone":
            theta = np.mod(X[:, self.index], self.orbit.T_theta)
            if check:
                self._check_tube(self._xi_monotone(X, theta))
        else:
            hint = None if theta_hint is None else np.atleast_1d(np.asarray(theta_hint, dtype=float))
            theta = self._nodes[self._nearest_node(X, hint)]
            for _ in range(NEWTON_MAX):
                xs = self.orbit.x_of_theta(theta)
                d1 = self.orbit.x_of_theta(theta, 1)
                d2 = self.orbit.x_of_theta(theta, 2)
                e = wrapped_difference(X, xs, self.orbit.wrap_mask)
                g = np.sum(e * d1, axis=1)
                dg = np.sum(e * d2, axis=1) - np.sum(d1 * d1, axis=1)
                step = g / dg
                theta = theta - step
                if np.all(np.abs(g) <= NEWTON_TOL):
                    break
            theta = np.mod(theta, self.orbit.T_theta)
            theta[theta >= self.orbit.T_theta] = 0.0
            if check:
                dist = self._orbit_distance(X, theta)
                if np.any(dist > self.tube_radius):
                    raise OutOfTube(f"distance {np.max(dist):.4g} to the orbit exceeds tube radius "
                                    f"{self.tube_radius:.4g}", distance=float(np.max(dist)))
        return float(theta[0]) if single else theta

    def _check_tube(self, xi):
        r = np.linalg.norm(xi, axis=-1)
        if np.any(r > self.tube_radius):
            raise OutOfTube(f"transverse deviation {np.max(r):.4g} exceeds tube radius "
                            f"{self.tube_radius:.4g}", distance=float(np.max(r)))

    def _xi_monotone(self, X, theta):
        d = wrapped_difference(X, self.orbit.x_of_theta(theta), self.orbit.wrap_mask)
        return d[:, self._others]

    # --- alpha / beta --------------------------------------------------------

    def coordinates(self, x, theta_hint=None, check: bool = True):
        """``(xi, theta)`` for one state or a batch."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if self.strategy == "monotone":
            theta = np.mod(X[:, self.index], self.orbit.T_theta)
            xi = self._xi_monotone(X, theta)
            if check:
                self._check_tube(xi)
        else:
            theta = np.atleast_1d(self.project(X, theta_hint, check))
            e = wrapped_difference(X, self.orbit.x_of_theta(theta), self.orbit.wrap_mask)
            xi = np.einsum("bk,bkj->bj", e, np.atleast_3d(self.normals(theta)))
        return (xi[0], float(theta[0])) if single else (xi, theta)

    def alpha(self, x, theta_hint=None):
        return self.coordinates(x, theta_hint)[0]

    def beta(self, xi, theta, lifted: bool = False):
        """State with transverse coordinates ``xi`` at phase ``theta``."""
        xi = np.asarray(xi, dtype=float)
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 0
        XI = xi.reshape(-1, self.n - 1)
        TH = np.atleast_1d(theta)
        X = self.orbit.x_of_theta(TH, lifted=True)
        if self.strategy == "monotone":
            X[:, self._others] += XI
        else:
            X = X + np.einsum("bkj,bj->bk", np.atleast_3d(self.normals(TH)), XI)
        if not lifted:
            X = wrap_angles(X, self.orbit.wrap_mask)
        return X[0] if single else X

    def beta_jacobian(self, xi, theta):
        """``d beta / d(xi, theta)``; columns are ordered ``xi`` first, then ``theta``."""
        xi = np.asarray(xi, dtype=float)
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 0
        XI = xi.reshape(-1, self.n - 1)
        TH = np.atleast_1d(theta)
        B = len(TH)
        n = self.n
        J = np.zeros((B, n, n))
        d1 = np.atleast_2d(self.orbit.x_of_theta(TH, 1))
        if self.strategy == "monotone":
            for c, i in enumerate(self._others):
                J[:, i, c] = 1.0
            J[:, :, n - 1] = d1
        elif n == 2:
            d2 = np.atleast_2d(self.orbit.x_of_theta(TH, 2))
            sp = np.linalg.norm(d1, axis=1, keepdims=True)
            t = d1 / sp
            dt = (d2 - t * np.sum(t * d2, axis=1, keepdims=True)) / sp
            nu = t @ _ROT90.T
            dnu = dt @ _ROT90.T
            J[:, :, 0] = nu
            J[:, :, 1] = d1 + dnu * XI
        else:
            eps = 1e-6
            for c in range(n - 1):
                e = np.zeros(n - 1)
                e[c] = eps
                J[:, :, c] = (self.beta(XI + e, TH, lifted=True) - self.beta(XI - e, TH, lifted=True)) / (2 * eps)
            J[:, :, n - 1] = (self.beta(XI, TH + eps, lifted=True) - self.beta(XI, TH - eps, lifted=True)) / (2 * eps)
        return J[0] if single else J


def _complement(t, prev=None):
    """Orthonormal basis of the complement of unit vector ``t``, sign-aligned with ``prev``."""
    n = t.shape[0]
    basis = []
    seeds = np.eye(n) if prev is None else np.asarray(prev).T
    for v in list(seeds) + list(np.eye(n)):
        w = v - t * np.dot(t, v)
        for b in basis:
            w = w - b * np.dot(b, w)
        nw = np.linalg.norm(w)
        if nw > 1e-6:
            basis.append(w / nw)
        if len(basis) == n - 1:
            break
    F = np.stack(basis, axis=1)
    if prev is not None:
        signs = np.sign(np.sum(F * prev, axis=0))
        F = F * np.where(signs == 0, 1.0, signs)
    return F


# --- transverse dynamics -----------------------------------------------------


def transverse_fields(plant: PlantModel, orbit: ReferenceOrbit, chart: TransverseChart, xi, theta):
    """``(f_xi, f_theta, g_xi, g_theta)``: drift and input fields in ``(xi, theta)`` coordinates.

    The drift includes the feedforward ``u*(theta)``.  Batched inputs give
    batched outputs.
    """
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 0
    TH = np.atleast_1d(theta)
    XI = np.asarray(xi, dtype=float).reshape(len(TH), chart.n - 1)
    X = chart.beta(XI, TH)
    J = chart.beta_jacobian(XI, TH)
    cond = np.linalg.cond(J)
    if np.any(~np.isfinite(cond)) or np.any(cond > COND_LIMIT):
        bad = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise SingularJacobian(f"chart Jacobian ill-conditioned (cond {cond[bad]:.3g}) at theta={TH[bad]:.6g}")
    ustar = np.asarray(orbit.u_of_theta(TH), dtype=float).reshape(len(TH), plant.m)
    G = plant.g(X)
    rhs = plant.rhs(X, ustar)
    F = np.linalg.solve(J, rhs[..., None])[..., 0]
    Gt = np.linalg.solve(J, G)
    k = chart.n - 1
    out = (F[:, :k], F[:, k], Gt[:, :k, :], Gt[:, k, :])
    if single:
        return out[0][0], float(out[1][0]), out[2][0], out[3][0]
    return out


def _denominator(f_theta, g_theta, W):
    den = f_theta + np.einsum("bj,bj->b", g_theta, W)
    if np.any(~(den > 0)):
        raise DenominatorNonPositive(f"phase speed f_theta + g_theta w = {np.min(den):.4g} is not positive")
    return den


def extended_rhs(plant, orbit, chart, xi, theta, w):
    """``(dxi/dtheta, dh/dtheta)`` of the transverse dynamics with lateness channel."""
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 0
    TH = np.atleast_1d(theta)
    W = np.asarray(w, dtype=float).reshape(len(TH), plant.m)
    f_xi, f_th, g_xi, g_th = transverse_fields(plant, orbit, chart, np.asarray(xi, dtype=float).reshape(len(TH), -1), TH)
    den = _denominator(f_th, g_th, W)
    dxi = (f_xi + np.einsum("bij,bj->bi", g_xi, W)) / den[:, None]
    dh = 1.0 / den - 1.0 / np.atleast_1d(orbit.rate(TH))
    if single:
        return dxi[0], float(dh[0])
    return dxi, dh


def phi(plant, orbit, chart, xi, theta, w):
    """``dxi/dtheta = (f_xi + g_xi w) / (f_theta + g_theta w)``."""
    return extended_rhs(plant, orbit, chart, xi, theta, w)[0]


@dataclass(frozen=True)
class LinearizedExtended:
    """Periodic matrices of the linearized extended transverse dynamics."""

    A_xi: PeriodicGrid
    B_xi: PeriodicGrid
    A_h: PeriodicGrid
    B_h: PeriodicGrid
    T_theta: float

    @property
    def N(self) -> int:
        return self.A_xi.N

    def augmented(self):
        """``(A_bar, B_bar)`` of the state ``(xi, h)``."""
        N = self.N
        k = self.A_xi.shape[0]
        m = self.B_xi.shape[1]
        A = np.zeros((N, k + 1, k + 1))
        A[:, :k, :k] = self.A_xi.samples
        A[:, k:, :k] = self.A_h.samples
        B = np.concatenate([self.B_xi.samples, self.B_h.samples], axis=1)
        assert B.shape == (N, k + 1, m)
        return PeriodicGrid(self.T_theta, A).with_fd_slopes(), PeriodicGrid(self.T_theta, B).with_fd_slopes()

    def columns(self):
        names = ["theta"]
        for label, g in (("A_xi", self.A_xi), ("B_xi", self.B_xi), ("A_h", self.A_h), ("B_h", self.B_h)):
            r, c = g.shape
            names += [f"{label}_{i}{j}" for i in range(r) for j in range(c)]
        th = self.A_xi.nodes()
        data = np.column_stack([th] + [g.samples.reshape(self.N, -1)
                                       for g in (self.A_xi, self.B_xi, self.A_h, self.B_h)])
        return names, data

    @classmethod
    def from_columns(cls, names, data, T_theta, k, m):
        data = np.atleast_2d(data)
        N = data.shape[0]
        sizes = [("A_xi", (k, k)), ("B_xi", (k, m)), ("A_h", (1, k)), ("B_h", (1, m))]
        col = 1
        grids = {}
        for label, shape in sizes:
            size = shape[0] * shape[1]
            if not names[col].startswith(label):
                raise ValueError(f"unexpected column {names[col]!r}")
            grids[label] = PeriodicGrid(T_theta, data[:, col:col + size].reshape((N,) + shape)).with_fd_slopes()
            col += size
        return cls(grids["A_xi"], grids["B_xi"], grids["A_h"], grids["B_h"], T_theta)


def linearize_extended(plant: PlantModel, orbit: ReferenceOrbit, chart: TransverseChart,
                       grid_N: int = DEFAULT_GRID_N, eps: float = 1e-6) -> LinearizedExtended:
    """Central-difference Jacobians of both channels in ``(xi, w)`` at the origin.

    All grid nodes are differenced at once; the probe size is ``eps`` (the
    scaled rule ``eps * max(1, |z_j|)`` reduces to ``eps`` at ``z = 0``).
    """
    th = np.arange(grid_N) * (orbit.T_theta / grid_N)
    k = chart.n - 1
    m = plant.m
    zero_xi = np.zeros((grid_N, k))
    zero_w = np.zeros((grid_N, m))
    try:
        dxi0, dh0 = extended_rhs(plant, orbit, chart, zero_xi, th, zero_w)
    except (SingularJacobian, DenominatorNonPositive) as exc:
        raise type(exc)(f"linearization failed: {exc}") from None
    if not (np.all(np.isfinite(dxi0)) and np.all(np.isfinite(dh0))):
        raise ValueError("non-finite transverse dynamics on the orbit")
    cols_xi, cols_h = [], []
    for j in range(k + m):
        e = np.zeros(k + m)
        e[j] = eps
        plus = extended_rhs(plant, orbit, chart, zero_xi + e[:k], th, zero_w + e[k:])
        minus = extended_rhs(plant, orbit, chart, zero_xi - e[:k], th, zero_w - e[k:])
        cols_xi.append((plus[0] - minus[0]) / (2 * eps))
        cols_h.append((plus[1] - minus[1]) / (2 * eps))
    Jxi = np.stack(cols_xi, axis=-1)
    Jh = np.stack(cols_h, axis=-1)[:, None, :]
    T = orbit.T_theta
    mk = lambda a: PeriodicGrid(T, a).with_fd_slopes()
    return LinearizedExtended(mk(Jxi[:, :, :k]), mk(Jxi[:, :, k:]), mk(Jh[:, :, :k]), mk(Jh[:, :, k:]), T)
