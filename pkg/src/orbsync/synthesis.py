"""Periodic feedback synthesis: Gramian, Riccati/LQR, adjoint and sliding surface."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NotStabilizing, RiccatiNotConverged, SlidingSurfaceDegenerate
from .numerics import (PeriodicGrid, find_periodic_solution, grid_sweep, monodromy,
                       periodic_residual, periodicity_gap)
from .transverse import LinearizedExtended

DEFAULT_TOL = 1e-8
DEFAULT_MAX_PERIODS = 60
DEFAULT_B_MIN_THRESHOLD = 1e-4
DEFAULT_GRAMIAN_THRESHOLD = 1e-8


def _as_matrix_grid(G: PeriodicGrid) -> np.ndarray:
    s = G.samples
    if s.ndim == 1:
        return s.reshape(G.N, 1, 1)
    if s.ndim == 2:
        return s.reshape(G.N, s.shape[1], 1)
    return s


def _from_reversed_record(rec: np.ndarray) -> np.ndarray:
    N = rec.shape[0]
    return rec[(-np.arange(N)) % N]


def floquet_multipliers(A: PeriodicGrid) -> np.ndarray:
    """Eigenvalues of the one-period monodromy matrix of ``y' = A(theta) y``."""
    return np.linalg.eigvals(monodromy(A))


def controllability_gramian(A: PeriodicGrid, B: PeriodicGrid):
    """Reachability Gramian over one period and its smallest eigenvalue.

    With ``Z(theta) = Phi(0, theta)`` this integrates ``Z' = -Z A`` together
    with ``W' = Z B B^T Z^T`` from ``Z(0) = I, W(0) = 0``.
    """
    Am = _as_matrix_grid(A)
    Bm = _as_matrix_grid(B)
    if Am.shape[0] != Bm.shape[0] or Am.shape[1] != Bm.shape[1]:
        raise ValueError("A and B grids are incompatible")
    d = Am.shape[1]
    A2 = PeriodicGrid(A.period, Am)
    BB = PeriodicGrid(B.period, Bm @ np.swapaxes(Bm, 1, 2))

    def rhs(y, a, bb):
        Z = y[:d]
        return np.concatenate([-Z @ a, Z @ bb @ Z.T])

    y0 = np.concatenate([np.eye(d), np.zeros((d, d))])
    y, _ = grid_sweep(rhs, y0, (A2, BB))
    W = 0.5 * (y[d:] + y[d:].T)
    return W, float(np.min(np.linalg.eigvalsh(W)))


@dataclass
class GainSchedule:
    """Periodic gain ``K(theta)`` (``m x k``) with its Riccati solution and closed-loop multipliers."""

    K: PeriodicGrid
    P: PeriodicGrid
    closed_loop_multipliers: np.ndarray
    riccati_gap: float
    periods: int

    @property
    def max_multiplier(self) -> float:
        return float(np.max(np.abs(self.closed_loop_multipliers)))


def closed_loop(A: PeriodicGrid, B: PeriodicGrid, K: PeriodicGrid) -> PeriodicGrid:
    return PeriodicGrid(A.period, _as_matrix_grid(A) + _as_matrix_grid(B) @ K.samples)


def periodic_lqr(A: PeriodicGrid, B: PeriodicGrid, Q, R, tol: float = DEFAULT_TOL,
                 max_periods: int = DEFAULT_MAX_PERIODS, check_stability: bool = True) -> GainSchedule:
    """Periodic LQR gain from the backward periodic Riccati equation.

    ``-P' = A^T P + P A - P B R^-1 B^T P + Q`` is swept backward one period
    at a time from ``P = Q`` until the relative Frobenius gap over a period
    is at most ``tol``.  Then ``K = -R^-1 B^T P``.

    Raises
    ------
    RiccatiNotConverged
        Gap still above ``tol`` after ``max_periods`` sweeps.
    NotStabilizing
        A closed-loop Floquet multiplier has modulus >= 1 (only when
        ``check_stability``).
    """
    Am = _as_matrix_grid(A)
    Bm = _as_matrix_grid(B)
    d, m = Bm.shape[1], Bm.shape[2]
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if Q.shape != (d, d) or R.shape != (m, m):
        raise ValueError(f"Q must be {d}x{d} and R {m}x{m}")
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
        raise ValueError("Q must be positive semidefinite")
    if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
        raise ValueError("R must be positive definite")
    Rinv = np.linalg.inv(R)
    A2 = PeriodicGrid(A.period, Am)
    S = PeriodicGrid(B.period, Bm @ Rinv @ np.swapaxes(Bm, 1, 2))

    def rhs(P, a, s):
        return -(a.T @ P + P @ a - P @ s @ P + Q)

    P = Q.copy()
    gap = np.inf
    for period in range(1, max_periods + 1):
        P_end, rec = grid_sweep(rhs, P, (A2, S), 1, reverse=True, record=True)
        gap = periodicity_gap(P, P_end)
        P = P_end
        if gap <= tol:
            break
    else:
        raise RiccatiNotConverged(f"Riccati periodicity gap {gap:.3e} > {tol:.1e} after {max_periods} periods")
    Ps = _from_reversed_record(rec)
    Ps = 0.5 * (Ps + np.swapaxes(Ps, 1, 2))
    Kq = -Rinv @ np.swapaxes(Bm, 1, 2) @ Ps
    K = PeriodicGrid(A.period, Kq).with_fd_slopes()
    mult = floquet_multipliers(closed_loop(A, B, K))
    if check_stability and np.max(np.abs(mult)) >= 1.0:
        raise NotStabilizing(f"closed-loop multiplier modulus {np.max(np.abs(mult)):.6g} >= 1")
    return GainSchedule(K, PeriodicGrid(A.period, Ps), mult, float(gap), period)


@dataclass
class AugmentedGains:
    K_xi: PeriodicGrid
    K_h: PeriodicGrid
    schedule: GainSchedule


def augmented_lqr(lin: LinearizedExtended, Q_aug, R, tol: float = DEFAULT_TOL,
                  max_periods: int = DEFAULT_MAX_PERIODS, check_stability: bool = True) -> AugmentedGains:
    """LQR on the state ``(xi, h)``; the gain row splits into ``K_xi`` and ``K_h``."""
    A, B = lin.augmented()
    sched = periodic_lqr(A, B, Q_aug, R, tol, max_periods, check_stability)
    k = lin.A_xi.shape[0]
    Ks = sched.K.samples
    T = lin.T_theta
    return AugmentedGains(PeriodicGrid(T, Ks[:, :, :k]).with_fd_slopes(),
                          PeriodicGrid(T, Ks[:, :, k:]).with_fd_slopes(), sched)


def adjoint_system(lin: LinearizedExtended, K: PeriodicGrid):
    """``(M, c)`` with ``n' = M n + c``: ``M = -(A_xi + B_xi K)^T``, ``c = -(A_h + B_h K)^T``."""
    Acl = lin.A_xi.samples + lin.B_xi.samples @ K.samples
    Ah = lin.A_h.samples + lin.B_h.samples @ K.samples
    T = lin.T_theta
    M = PeriodicGrid(T, -np.swapaxes(Acl, 1, 2))
    c = PeriodicGrid(T, -Ah[:, 0, :])
    return M, c


def adjoint_periodic(lin: LinearizedExtended, K, tol: float = DEFAULT_TOL,
                     max_periods: int = DEFAULT_MAX_PERIODS) -> PeriodicGrid:
    """Periodic ``n(theta)`` of the adjoint equation, found by sweeping in reversed phase."""
    K = K.K if isinstance(K, GainSchedule) else K
    M, c = adjoint_system(lin, K)
    return find_periodic_solution(M, c, "reversed", tol, max_periods)


def adjoint_residual(lin: LinearizedExtended, K, n_vec: PeriodicGrid) -> float:
    K = K.K if isinstance(K, GainSchedule) else K
    M, c = adjoint_system(lin, K)
    return periodic_residual(n_vec, M, c)


@dataclass
class SlidingSurface:
    """``s = n^T xi + h`` with input authority ``b = n^T B_xi + B_h``."""

    n_vec: PeriodicGrid
    b: PeriodicGrid
    b_min: float
    k: float

    @property
    def sync_bound(self) -> float:
        """Upper bound ``k / min |b|`` of the sliding synchronization term."""
        return self.k / self.b_min


def sliding_b(lin: LinearizedExtended, n_vec: PeriodicGrid) -> np.ndarray:
    return np.einsum("ni,nij->nj", n_vec.samples, lin.B_xi.samples) + lin.B_h.samples[:, 0, :]


def b_lower_bound(b) -> float:
    """``min |b|`` over the grid, or 0 when ``b`` changes sign between adjacent nodes."""
    b = np.asarray(b, dtype=float)
    if np.any(np.sign(b) != np.sign(np.roll(b, -1))):
        return 0.0
    return float(np.min(np.abs(b)))


def sliding_surface(lin: LinearizedExtended, K, n_vec: PeriodicGrid, k: float,
                    b_min_threshold: float = DEFAULT_B_MIN_THRESHOLD) -> SlidingSurface:
    """Assemble the sliding surface; requires a scalar input.

    Raises
    ------
    SlidingSurfaceDegenerate
        ``min |b|`` over the grid is below ``b_min_threshold``.
    """
    if lin.B_xi.shape[1] != 1:
        raise ValueError("sliding synthesis supports a single input only")
    if k < 0:
        raise ValueError("sliding gain k must be non-negative")
    b = sliding_b(lin, n_vec)[:, 0]
    b_min = b_lower_bound(b)
    if not b_min >= b_min_threshold:
        why = "b changes sign" if b_min == 0.0 else f"min |b| = {b_min:.3g}"
        raise SlidingSurfaceDegenerate(f"{why}; need |b| >= {b_min_threshold:.1e} at every phase")
    return SlidingSurface(n_vec, PeriodicGrid(lin.T_theta, b).with_fd_slopes(), b_min, float(k))
