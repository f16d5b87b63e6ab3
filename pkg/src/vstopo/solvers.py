"""Design-variable update engines and the cone-kernel spatial filter.

Two updaters are provided:

* :func:`mma_update` -- a moving-asymptotes step for problems with box
  bounds and at most one linear inequality constraint.  The objective is
  approximated by the usual convex separable fractions; the linear
  constraint is kept exact in the subproblem and its multiplier is found
  by bisection on the dual, so an active volume constraint is satisfied
  to ``constraint_tol`` by the returned iterate.
* :func:`oc_update` -- the classic optimality-criteria fixed point with
  bisection on the Lagrange multiplier, used for binary-phase
  subproblems.

Both are pure functions: identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .fem import Mesh

__all__ = [
    "BoxConstrainedProblem",
    "AsymptoteState",
    "InfeasibleSubproblemError",
    "mma_update",
    "oc_update",
    "FilterKernel",
    "build_filter_kernel",
    "filter_sensitivities",
    "filter_densities",
    "filter_density_chain",
]

# moving-asymptote defaults from the original publication of the method
ASYMPTOTE_INIT = 0.5
ASYMPTOTE_EXPAND = 1.2
ASYMPTOTE_SHRINK = 0.7
_BOUND_MARGIN = 0.1  # keep iterates away from the asymptotes
_REGULARIZATION = 1e-5


class InfeasibleSubproblemError(RuntimeError):
    """The constraint cannot be met inside the current bounds/move window."""


@dataclass
class BoxConstrainedProblem:
    """One linearization point of a box-constrained design problem.

    ``constraint_value``/``constraint_gradient`` describe a single linear
    inequality ``g(x) <= 0`` evaluated at ``x`` (typically the volume
    constraint ``sum(x) - f * N``); leave them ``None`` for pure
    box-constrained updates.
    """

    x: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    objective_value: float
    objective_gradient: np.ndarray
    constraint_value: Optional[float] = None
    constraint_gradient: Optional[np.ndarray] = None


@dataclass
class AsymptoteState:
    """Carries the previous iterates and asymptotes between MMA updates."""

    x_prev: Optional[np.ndarray] = None
    x_prev2: Optional[np.ndarray] = None
    low: Optional[np.ndarray] = None
    upp: Optional[np.ndarray] = None
    iteration: int = 0


def _mma_candidate(mu, low, upp, alfa, beta, p0, q0, pc, qc):
    """Box-clipped minimizer of the separable Lagrangian for multiplier ``mu``."""
    P = p0 + mu * pc
    Q = q0 + mu * qc
    sp_ = np.sqrt(P)
    sq = np.sqrt(Q)
    x = (low * sp_ + upp * sq) / (sp_ + sq)
    return np.clip(x, alfa, beta)


def mma_update(problem: BoxConstrainedProblem, state: AsymptoteState,
               move_limit: float = 0.2,
               asym_init: float = ASYMPTOTE_INIT,
               asym_expand: float = ASYMPTOTE_EXPAND,
               asym_shrink: float = ASYMPTOTE_SHRINK,
               constraint_tol: float = 1e-6,
               max_bisections: int = 128):
    """One moving-asymptotes step; returns ``(x_new, new_state)``.

    The new iterate lies inside ``[lower, upper]`` intersected with the
    move-limit window.  With an active constraint the dual multiplier is
    bisected until the (linear) constraint is met to ``constraint_tol``.
    Raises :class:`InfeasibleSubproblemError` when the constraint cannot
    be satisfied inside the window.
    """
    x = np.asarray(problem.x, dtype=float)
    lower = np.broadcast_to(np.asarray(problem.lower, dtype=float), x.shape)
    upper = np.broadcast_to(np.asarray(problem.upper, dtype=float), x.shape)
    df = np.asarray(problem.objective_gradient, dtype=float)
    if not np.isfinite(df).all():
        raise ValueError("objective gradient contains NaN or Inf")
    if np.any(lower > upper):
        raise ValueError("inconsistent bounds: lower > upper")

    span = np.maximum(upper - lower, 1e-9)
    it = state.iteration + 1
    if it <= 2 or state.x_prev is None or state.x_prev2 is None:
        low = x - asym_init * span
        upp = x + asym_init * span
    else:
        osc = (x - state.x_prev) * (state.x_prev - state.x_prev2)
        factor = np.ones_like(x)
        factor[osc > 0.0] = asym_expand
        factor[osc < 0.0] = asym_shrink
        low = x - factor * (state.x_prev - state.low)
        upp = x + factor * (state.upp - state.x_prev)
        # wide outer clamp, tiny inner clamp: oscillation may keep shrinking
        # the asymptotes so late iterates can settle tightly
        low = np.clip(low, x - 10.0 * span, x - 1e-5 * span)
        upp = np.clip(upp, x + 1e-5 * span, x + 10.0 * span)

    alfa = np.maximum.reduce([lower, low + _BOUND_MARGIN * (x - low), x - move_limit * span])
    beta = np.minimum.reduce([upper, upp - _BOUND_MARGIN * (upp - x), x + move_limit * span])

    ux2 = (upp - x) ** 2
    xl2 = (x - low) ** 2
    reg = 0.001 * np.abs(df) + _REGULARIZATION / span
    p0 = ux2 * (np.maximum(df, 0.0) + reg)
    q0 = xl2 * (np.maximum(-df, 0.0) + reg)

    if problem.constraint_value is None:
        pc = qc = np.zeros_like(x)
        x_new = _mma_candidate(0.0, low, upp, alfa, beta, p0, q0, pc, qc)
    else:
        dg = np.asarray(problem.constraint_gradient, dtype=float)
        g0 = float(problem.constraint_value)

        def g_of(y):
            # the constraint is linear, so evaluate it exactly at the candidate
            return g0 + float(dg @ (y - x))

        pc = ux2 * np.maximum(dg, 0.0)
        qc = xl2 * np.maximum(-dg, 0.0)
        x_new = _mma_candidate(0.0, low, upp, alfa, beta, p0, q0, pc, qc)
        if g_of(x_new) > constraint_tol:
            mu_lo, mu_hi = 0.0, 1.0
            for _ in range(80):
                if g_of(_mma_candidate(mu_hi, low, upp, alfa, beta, p0, q0, pc, qc)) <= 0.0:
                    break
                mu_lo = mu_hi
                mu_hi *= 4.0
            else:
                raise InfeasibleSubproblemError(
                    f"volume constraint cannot be met within bounds "
                    f"(g = {g_of(_mma_candidate(mu_hi, low, upp, alfa, beta, p0, q0, pc, qc)):.3e} at mu = {mu_hi:.3e})")
            for _ in range(max_bisections):
                mu = 0.5 * (mu_lo + mu_hi)
                g = g_of(_mma_candidate(mu, low, upp, alfa, beta, p0, q0, pc, qc))
                if abs(g) <= constraint_tol:
                    mu_hi = mu
                    break
                if g > 0.0:
                    mu_lo = mu
                else:
                    mu_hi = mu
            x_new = _mma_candidate(mu_hi, low, upp, alfa, beta, p0, q0, pc, qc)

    new_state = AsymptoteState(x_prev=x.copy(), x_prev2=None if state.x_prev is None else state.x_prev.copy(),
                               low=low, upp=upp, iteration=it)
    return x_new, new_state


def oc_update(densities: np.ndarray, sensitivities: np.ndarray, volume_target: float,
              move_limit: float = 0.2, lower=0.0, upper=1.0,
              tol: Optional[float] = None, max_bisections: int = 200) -> np.ndarray:
    """Optimality-criteria update with bisection on the volume multiplier.

    Compliance sensitivities are expected nonpositive; positive entries
    are clamped to zero (no-gain heuristic).  The summed density of the
    result matches ``min(volume_target, attainable)`` -- clipped to what
    the move window allows -- within ``tol`` (default ``1e-6 * N``).
    """
    x = np.asarray(densities, dtype=float)
    s = np.asarray(sensitivities, dtype=float)
    if x.shape != s.shape:
        raise ValueError(f"densities and sensitivities disagree: {x.shape} vs {s.shape}")
    if not (np.isfinite(x).all() and np.isfinite(s).all()):
        raise ValueError("NaN or Inf in optimality-criteria input")
    s = np.minimum(s, 0.0)
    if not np.any(s < 0.0):
        s = -np.ones_like(x)  # indifferent objective: fill uniformly to the target
    lo = np.maximum(np.broadcast_to(np.asarray(lower, dtype=float), x.shape), x - move_limit)
    hi = np.minimum(np.broadcast_to(np.asarray(upper, dtype=float), x.shape), x + move_limit)
    if np.any(lo > hi + 1e-12):
        raise InfeasibleSubproblemError("move window is empty: lower bound exceeds upper bound")
    hi = np.maximum(hi, lo)
    if tol is None:
        tol = 1e-6 * max(1, x.size)

    def volume_at(lam):
        return np.clip(x * np.sqrt(-s / lam), lo, hi)

    lam_lo, lam_hi = 1e-30, 1e30
    v_max = float(volume_at(lam_lo).sum())
    v_min = float(volume_at(lam_hi).sum())
    target = float(np.clip(volume_target, v_min, v_max))
    if not v_min - tol <= target <= v_max + tol:
        raise InfeasibleSubproblemError(
            f"volume target {volume_target:g} not bracketed by [{v_min:g}, {v_max:g}]")
    x_new = volume_at(lam_lo) if target >= v_max else volume_at(lam_hi)
    for _ in range(max_bisections):
        lam = np.sqrt(lam_lo * lam_hi)
        x_new = volume_at(lam)
        vol = float(x_new.sum())
        if abs(vol - target) <= tol:
            break
        if vol > target:
            lam_lo = lam
        else:
            lam_hi = lam
    return x_new


class FilterKernel:
    """Cone-weight neighborhoods over element centroids of a structured grid.

    Weights are ``max(0, radius - distance)`` between centroids; each
    element is its own neighbor with weight ``radius``.  The weight matrix
    is symmetric and stored sparse.
    """

    def __init__(self, radius: float, weights: sp.csr_matrix):
        self.radius = radius
        self.H = weights
        self.row_sums = np.asarray(weights.sum(axis=1)).ravel()

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def neighbors(self, e: int):
        """(indices, weights) of element ``e``'s neighborhood, by ascending index."""
        start, end = self.H.indptr[e], self.H.indptr[e + 1]
        return self.H.indices[start:end].copy(), self.H.data[start:end].copy()


def build_filter_kernel(mesh: Mesh, radius: float) -> FilterKernel:
    """Build the cone kernel for ``radius`` (in element-size units)."""
    if radius <= 0.0:
        raise ValueError(f"filter radius must be positive, got {radius}")
    nx, ny = mesh.nx, mesh.ny
    n = nx * ny
    reach = int(np.ceil(radius)) - 1
    ei = np.arange(n) % nx
    ej = np.arange(n) // nx
    rows, cols, data = [], [], []
    for dj in range(-reach, reach + 1):
        for di in range(-reach, reach + 1):
            w = radius - float(np.hypot(di, dj))
            if w <= 0.0:
                continue
            ok = (ei + di >= 0) & (ei + di < nx) & (ej + dj >= 0) & (ej + dj < ny)
            rows.append(np.nonzero(ok)[0])
            cols.append(rows[-1] + dj * nx + di)
            data.append(np.full(rows[-1].size, w))
    H = sp.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    H.sort_indices()
    return FilterKernel(radius=radius, weights=H)


def filter_sensitivities(kernel: FilterKernel, densities: np.ndarray,
                         sensitivities: np.ndarray) -> np.ndarray:
    """Classic density-weighted sensitivity filter; uniform fields are fixed points."""
    rho = np.asarray(densities, dtype=float)
    s = np.asarray(sensitivities, dtype=float)
    if rho.shape != s.shape or rho.size != kernel.n:
        raise ValueError("field lengths do not match the filter kernel")
    num = kernel.H @ (rho * s)
    return num / (np.maximum(rho, 1e-3) * kernel.row_sums)


def filter_densities(kernel: FilterKernel, x: np.ndarray) -> np.ndarray:
    """Cone-weighted density average (the density-filter forward map)."""
    return (kernel.H @ np.asarray(x, dtype=float)) / kernel.row_sums


def filter_density_chain(kernel: FilterKernel, s_physical: np.ndarray) -> np.ndarray:
    """Chain rule of :func:`filter_densities`: maps d/d(physical) to d/d(design)."""
    return kernel.H.T @ (np.asarray(s_physical, dtype=float) / kernel.row_sums)
