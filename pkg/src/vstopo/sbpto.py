"""Stage 2: sequential binary-phase topology optimization.

The discrete selection over n candidate angles plus a void phase is
decomposed into a sweep of two-phase subproblems.  Within each
subproblem only two phases of each unfrozen element may trade mass; the
pairwise budget keeps every row a partition of unity.  Pairs that
include the void phase move material under the global volume budget via
the optimality-criteria update; pairs of two solid phases are
volume-neutral and use a move-limited sign-descent step instead.
Elements dominated by one of the active phases, or holding none of the
pair's mass, are frozen for that subproblem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dmo import DmoDesign, fibre_convergence
from .fem import BoundaryConditions, GridAssembler, Mesh, element_stiffness_batch
from .materials import CandidateAngles
from .solvers import build_filter_kernel, filter_sensitivities, oc_update

log = logging.getLogger(__name__)

__all__ = [
    "SbptoDesign",
    "SbptoDiagnostics",
    "SbptoSettings",
    "init_from_dmo",
    "active_budget",
    "freeze_elements",
    "pair_compliance_and_gradient",
    "binary_phase_subproblem",
    "run_sbpto",
    "decode_labels",
]

_ZERO_TOL = 1e-9


@dataclass
class SbptoDesign:
    """Phase fractions per element; the last column is the void phase.

    Every row sums to one.  ``frozen`` is the freeze mask of the most
    recent subproblem; ``lower``/``upper`` are per-variable bounds.
    """

    alpha: np.ndarray  # (N, n + 1)
    frozen: np.ndarray  # (N,) bool
    lower: np.ndarray  # (N, n + 1)
    upper: np.ndarray  # (N, n + 1)

    @property
    def n_phases(self) -> int:
        return self.alpha.shape[1]

    @property
    def void(self) -> int:
        return self.alpha.shape[1] - 1

    def angle_fractions(self) -> np.ndarray:
        return self.alpha[:, :-1]

    def solid_fraction(self) -> np.ndarray:
        return 1.0 - self.alpha[:, -1]


@dataclass
class SbptoDiagnostics:
    compliance: list = field(default_factory=list)
    h_eta: list = field(default_factory=list)
    volume_fraction: list = field(default_factory=list)
    pair_labels: list = field(default_factory=list)
    sweep_h: list = field(default_factory=list)
    sweeps: int = 0
    converged: bool = False
    warning: Optional[str] = None

    @property
    def iterations(self) -> int:
        return len(self.compliance)


@dataclass
class SbptoSettings:
    candidates: CandidateAngles
    D_base: np.ndarray
    volume_fraction: float
    penalty: float = 3.0
    void_stiffness: float = 1e-9
    lambda_thresh: float = 0.99
    eta: float = 0.95
    h_criterion: float = 0.99
    inner_iterations: int = 5
    max_sweeps: int = 40
    move_limit: float = 0.2
    r_min: float = 1.5
    filter_mode: str = "sensitivity"
    ordered_pairs: bool = True  # run both (a, b) and (b, a)
    passive_void: Optional[np.ndarray] = None


def init_from_dmo(dmo_design: DmoDesign) -> SbptoDesign:
    """Append the void column ``1 - sum(chi)`` to the discrete-stage densities.

    Rows whose densities sum above one (possible when several candidates
    saturate in one element) are rescaled onto the simplex; the rescale is
    logged because it changes the design.
    """
    chi = np.asarray(dmo_design.chi, dtype=float)
    sums = chi.sum(axis=1)
    over = sums > 1.0 + _ZERO_TOL
    if np.any(over):
        log.info("rescaling %d element rows whose candidate densities sum above 1 "
                 "(max sum %.6f)", int(np.count_nonzero(over)), float(sums.max()))
        chi = chi.copy()
        chi[over] /= sums[over, None]
    void = np.clip(1.0 - chi.sum(axis=1), 0.0, 1.0)
    alpha = np.column_stack([chi, void])
    alpha /= alpha.sum(axis=1, keepdims=True)  # exact partition of unity
    n_phases = alpha.shape[1]
    return SbptoDesign(alpha=alpha,
                       frozen=np.zeros(alpha.shape[0], dtype=bool),
                       lower=np.zeros((alpha.shape[0], n_phases)),
                       upper=np.ones((alpha.shape[0], n_phases)))


def active_budget(design: SbptoDesign, pair: tuple) -> np.ndarray:
    """Per-element mass available to the pair: one minus all other phases."""
    a, b = pair
    others = [i for i in range(design.n_phases) if i not in (a, b)]
    return np.clip(1.0 - design.alpha[:, others].sum(axis=1), 0.0, 1.0)


def freeze_elements(design: SbptoDesign, pair: tuple, lambda_thresh: float) -> np.ndarray:
    """Freeze mask for one subproblem.

    An element is frozen when either active phase already dominates it
    (fraction above ``lambda_thresh``) or when the pair holds none of its
    mass (both fractions zero to tolerance).
    """
    if not 0.5 < lambda_thresh < 1.0:
        raise ValueError(f"lambda_thresh must lie in (0.5, 1), got {lambda_thresh}")
    a, b = pair
    if a == b or not (0 <= a < design.n_phases and 0 <= b < design.n_phases):
        raise ValueError(f"invalid phase pair {pair} for {design.n_phases} phases")
    aa = design.alpha[:, a]
    ab = design.alpha[:, b]
    return (aa > lambda_thresh) | (ab > lambda_thresh) | ((aa <= _ZERO_TOL) & (ab <= _ZERO_TOL))


def extended_stiffness_stack(candidates: CandidateAngles, D_base: np.ndarray,
                             void_stiffness: float) -> np.ndarray:
    """(n + 1, 8, 8) candidate stiffness blocks with the void floor appended."""
    D_base = np.asarray(D_base, dtype=float)
    stack = candidates.rotated_stack(D_base)
    stack = np.concatenate([stack, void_stiffness * D_base[None]], axis=0)
    return element_stiffness_batch(stack)


def pair_compliance_and_gradient(design: SbptoDesign, pair: tuple, mesh: Mesh,
                                 bc: BoundaryConditions, candidates: CandidateAngles,
                                 D_base: np.ndarray, penalty: float = 3.0,
                                 void_stiffness: float = 1e-9,
                                 assembler: Optional[GridAssembler] = None,
                                 k_stack: Optional[np.ndarray] = None):
    """Compliance and its derivative along the pair's exchange direction.

    With the pairwise budget substituted (``alpha_b = r_ab - alpha_a``) the
    subproblem has a single design field; the returned gradient is
    ``dc/dalpha_a`` after that substitution, for every element.
    Returns ``(compliance, gradient, displacements)``.
    """
    a, b = pair
    if assembler is None:
        assembler = GridAssembler(mesh, bc)
    if k_stack is None:
        k_stack = extended_stiffness_stack(candidates, D_base, void_stiffness)
    alpha = design.alpha
    n_ext = alpha.shape[1]
    k_batch = ((alpha ** penalty) @ k_stack.reshape(n_ext, 64)).reshape(-1, 8, 8)
    result = assembler.solve(k_batch)
    ue = assembler.gather(result.displacements)
    qa = np.einsum("eic,ij,ejc->e", ue, k_stack[a], ue)
    qb = np.einsum("eic,ij,ejc->e", ue, k_stack[b], ue)
    grad = -penalty * (alpha[:, a] ** (penalty - 1.0) * qa
                       - alpha[:, b] ** (penalty - 1.0) * qb)
    return result.compliance, grad, result.displacements


def _pair_marginals(design: SbptoDesign, pair: tuple, settings: SbptoSettings,
                    assembler: GridAssembler, k_stack: np.ndarray):
    """Compliance and the marginal strain-energy density of both active phases."""
    a, b = pair
    alpha = design.alpha
    n_ext = alpha.shape[1]
    p = settings.penalty
    k_batch = ((alpha ** p) @ k_stack.reshape(n_ext, 64)).reshape(-1, 8, 8)
    result = assembler.solve(k_batch)
    ue = assembler.gather(result.displacements)
    qa = np.einsum("eic,ij,ejc->e", ue, k_stack[a], ue)
    qb = np.einsum("eic,ij,ejc->e", ue, k_stack[b], ue)
    marg_a = p * alpha[:, a] ** (p - 1.0) * qa
    marg_b = p * alpha[:, b] ** (p - 1.0) * qb
    return result.compliance, marg_a, marg_b


def binary_phase_subproblem(design: SbptoDesign, pair: tuple, mesh: Mesh,
                            bc: BoundaryConditions, settings: SbptoSettings,
                            volume_budget: float,
                            assembler: Optional[GridAssembler] = None,
                            k_stack: Optional[np.ndarray] = None,
                            kernel=None, design_mask: Optional[np.ndarray] = None,
                            recorder=None) -> SbptoDesign:
    """Solve one two-phase subproblem in place and return the design.

    When the pair contains the void phase, its solid partner is the
    update variable and the global solid budget is enforced through the
    optimality-criteria bisection.  Solid-solid pairs preserve volume by
    construction; they take damped multiplicative steps on the ratio of
    the two phases' marginal strain energies, whose only stable rest
    points are the bounds (the penalization makes mixtures inefficient),
    so near-tie elements drift instead of oscillating.
    """
    a, b = pair
    void = design.void
    if b == a:
        raise ValueError("phase pair must be distinct")
    if a == void:
        a, b = b, a  # the update variable must be the solid phase
    frozen = freeze_elements(design, (a, b), settings.lambda_thresh)
    design.frozen = frozen
    active = ~frozen
    if not np.any(active):
        return design
    if assembler is None:
        assembler = GridAssembler(mesh, bc)
    if k_stack is None:
        k_stack = extended_stiffness_stack(settings.candidates, settings.D_base,
                                           settings.void_stiffness)
    alpha = design.alpha
    r_ab = active_budget(design, (a, b))
    lo = np.maximum(design.lower[:, a], r_ab - design.upper[:, b])
    hi = np.minimum(design.upper[:, a], r_ab)
    for _ in range(settings.inner_iterations):
        c, marg_a, marg_b = _pair_marginals(design, (a, b), settings, assembler, k_stack)
        if recorder is not None:
            h = fibre_convergence(design.angle_fractions(), settings.eta, design_mask)
            n_design = int(np.count_nonzero(design_mask)) if design_mask is not None else alpha.shape[0]
            recorder(c, h, float(design.solid_fraction().sum()) / n_design, (a, b))
        x = alpha[active, a]
        if b == void:
            grad = marg_b - marg_a  # dc/dalpha_a after the budget substitution
            if settings.filter_mode == "sensitivity" and kernel is not None:
                grad = filter_sensitivities(kernel, alpha[:, a], grad)
            solid_other = design.solid_fraction()[active] - x
            target = volume_budget - float(design.solid_fraction()[frozen].sum()) \
                - float(solid_other.sum())
            x_new = oc_update(x, grad[active], target, settings.move_limit,
                              lo[active], hi[active])
        else:
            if settings.filter_mode == "sensitivity" and kernel is not None:
                # plain cone smoothing keeps the marginal scales comparable
                marg_a = (kernel.H @ marg_a) / kernel.row_sums
                marg_b = (kernel.H @ marg_b) / kernel.row_sums
            ratio = (marg_a[active] + 1e-30) / (marg_b[active] + 1e-30)
            x_new = x * np.sqrt(ratio)
            x_new = np.clip(x_new, np.maximum(lo[active], x - settings.move_limit),
                            np.minimum(hi[active], x + settings.move_limit))
        alpha[active, a] = x_new
        alpha[active, b] = r_ab[active] - x_new
    return design


def _pair_order(n_phases: int, ordered: bool):
    if ordered:
        return [(a, b) for a in range(n_phases) for b in range(n_phases) if b != a]
    return [(a, b) for a in range(n_phases) for b in range(a + 1, n_phases)]


def run_sbpto(design: SbptoDesign, settings: SbptoSettings, mesh: Mesh,
              bc: BoundaryConditions, recorder=None):
    """Sweep all phase pairs until fibre convergence reaches the criterion.

    ``recorder`` is called with ``(iteration, compliance, h_eta,
    volume_fraction, pair_label)`` once per inner iteration.  Returns
    ``(SbptoDesign, SbptoDiagnostics)``.
    """
    passive = None
    if settings.passive_void is not None:
        passive = np.asarray(settings.passive_void, dtype=bool)
        design.upper[passive, :-1] = 0.0
    design_mask = ~passive if passive is not None else np.ones(design.alpha.shape[0], dtype=bool)
    n_design = int(np.count_nonzero(design_mask))
    budget = settings.volume_fraction * n_design

    assembler = GridAssembler(mesh, bc)
    kernel = build_filter_kernel(mesh, settings.r_min)
    k_stack = extended_stiffness_stack(settings.candidates, np.asarray(settings.D_base, float),
                                       settings.void_stiffness)
    diag = SbptoDiagnostics()

    def record(c, h, vol, pair):
        diag.compliance.append(c)
        diag.h_eta.append(h)
        diag.volume_fraction.append(vol)
        label = f"{pair[0] + 1}-{pair[1] + 1}"
        diag.pair_labels.append(label)
        if recorder is not None:
            recorder(diag.iterations, c, h, vol, label)

    pairs = _pair_order(design.n_phases, settings.ordered_pairs)
    while diag.sweeps < settings.max_sweeps:
        before = diag.iterations
        for pair in pairs:
            design = binary_phase_subproblem(
                design, pair, mesh, bc, settings, budget,
                assembler, k_stack, kernel, design_mask, record)
        diag.sweeps += 1
        h = fibre_convergence(design.angle_fractions(), settings.eta, design_mask)
        diag.sweep_h.append(h)
        if h >= settings.h_criterion:
            diag.converged = True
            break
        if diag.iterations == before:
            diag.warning = ("binary-phase stage stalled: every pair fully frozen "
                            f"at h = {h:.4f} below the criterion {settings.h_criterion}")
            log.warning(diag.warning)
            break
    else:
        h = fibre_convergence(design.angle_fractions(), settings.eta, design_mask)
        diag.warning = (f"binary-phase stage hit the sweep cap ({settings.max_sweeps}) "
                        f"at h = {h:.4f} below the criterion {settings.h_criterion}")
        log.warning(diag.warning)
    return design, diag


def decode_labels(design: SbptoDesign):
    """Discrete per-element labeling of the final phase fractions.

    Returns ``(labels, rho)`` where ``labels[e]`` is the dominant phase
    index (ties break toward the lowest index, the void phase last) and
    ``rho[e] = 1 - alpha_void`` is the solid fraction.
    """
    labels = np.argmax(design.alpha, axis=1)
    rho = np.clip(design.solid_fraction(), 0.0, 1.0)
    return labels, rho
