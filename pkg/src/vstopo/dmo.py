"""Stage 1: discrete material optimization over candidate fibre angles.

Each element carries one density per candidate angle; the element
stiffness is a penalized weighted sum of the rotated candidate
stiffnesses, and a moving-asymptotes update drives the densities under a
single global volume constraint.  The stage stops when the variance of
the trailing five compliance values falls below a threshold at the final
penalty of the continuation schedule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fem import BoundaryConditions, GridAssembler, Mesh, element_stiffness_batch
from .materials import CandidateAngles, dmo_weight_gradient, dmo_weights
from .solvers import (AsymptoteState, BoxConstrainedProblem, build_filter_kernel,
                      filter_densities, filter_density_chain, filter_sensitivities,
                      mma_update)

log = logging.getLogger(__name__)

__all__ = [
    "DmoDesign",
    "DmoDiagnostics",
    "DmoSettings",
    "init_dmo",
    "dmo_compliance_and_gradient",
    "convergence_variance",
    "fibre_convergence",
    "run_dmo",
]


@dataclass
class DmoDesign:
    """Per-element candidate-angle densities, shape (N, n), entries in [0, 1]."""

    chi: np.ndarray


@dataclass
class DmoDiagnostics:
    """Per-iteration history of the stage; lists grow append-only."""

    compliance: list = field(default_factory=list)
    h_eta: list = field(default_factory=list)
    volume_fraction: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    converged: bool = False
    warning: Optional[str] = None

    @property
    def iterations(self) -> int:
        return len(self.compliance)


@dataclass
class DmoSettings:
    """Stage parameters; defaults mirror the pipeline-wide conventions."""

    candidates: CandidateAngles
    D_base: np.ndarray
    volume_fraction: float
    eps: float = 1e-9
    eps0: float = 1e-2
    eta: float = 0.95
    penalty_schedule: Sequence[float] = (1.0, 2.0, 3.0)
    max_iterations: int = 300
    move_limit: float = 0.2
    r_min: float = 1.5
    filter_mode: str = "sensitivity"  # "sensitivity" | "density" | "none"
    passive_void: Optional[np.ndarray] = None  # element mask pinned to zero density


def init_dmo(mesh: Mesh, candidates: CandidateAngles, f: float,
             passive_void: Optional[np.ndarray] = None) -> DmoDesign:
    """Uniform, volume-feasible start: ``chi = f / n`` on every design element."""
    if not 0.0 < f <= 1.0:
        raise ValueError(f"volume fraction must lie in (0, 1], got {f}")
    n = len(candidates)
    chi = np.full((mesh.n_elements, n), f / n)
    if passive_void is not None:
        chi[np.asarray(passive_void, dtype=bool)] = 0.0
    return DmoDesign(chi=chi)


def candidate_stiffness_stack(candidates: CandidateAngles, D_base: np.ndarray) -> np.ndarray:
    """(n, 8, 8) element stiffness of each rotated candidate material."""
    return element_stiffness_batch(candidates.rotated_stack(D_base))


def dmo_compliance_and_gradient(design: DmoDesign, mesh: Mesh, bc: BoundaryConditions,
                                candidates: CandidateAngles, D_base: np.ndarray,
                                p: float, eps: float = 1e-9,
                                assembler: Optional[GridAssembler] = None,
                                k_candidates: Optional[np.ndarray] = None):
    """Compliance and its full (N, n) density gradient for one design.

    The gradient chains the weight Jacobian through the fixed candidate
    stiffness blocks: ``dc/dchi_ej = -sum_k (dw_k/dchi_j) u_e^T k_k u_e``.
    Returns ``(compliance, gradient, displacements)``.
    """
    if assembler is None:
        assembler = GridAssembler(mesh, bc)
    if k_candidates is None:
        k_candidates = candidate_stiffness_stack(candidates, D_base)
    chi = design.chi
    w = dmo_weights(chi, p, eps)
    n = chi.shape[1]
    k_batch = (w @ k_candidates.reshape(n, 64)).reshape(-1, 8, 8)
    result = assembler.solve(k_batch)
    ue = assembler.gather(result.displacements)
    # strain-energy density of each element against each candidate block,
    # accumulated over load cases
    q = np.einsum("eac,kab,ebc->ek", ue, k_candidates, ue)
    dw = dmo_weight_gradient(chi, p, eps)
    grad = -np.einsum("ekj,ek->ej", dw, q)
    return result.compliance, grad, result.displacements


def convergence_variance(history: Sequence[float]) -> Optional[float]:
    """Population variance of the trailing five values; None if fewer than five."""
    if len(history) < 5:
        return None
    tail = np.asarray(history[-5:], dtype=float)
    return float(np.mean((tail - tail.mean()) ** 2))


def fibre_convergence(matrix: np.ndarray, eta: float,
                      mask: Optional[np.ndarray] = None) -> float:
    """Fraction of elements dominated by a single candidate at tolerance ``eta``.

    A row counts as converged when its largest entry is at least
    ``eta`` times its Euclidean norm; rows with (near-)zero norm count as
    converged void.  ``mask`` restricts the census to the design elements.
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    m = np.asarray(matrix, dtype=float)
    if mask is not None:
        m = m[np.asarray(mask, dtype=bool)]
    if m.shape[0] == 0:
        return 1.0
    norms = np.linalg.norm(m, axis=1)
    nonzero = norms > 1e-9
    converged = ~nonzero | (m.max(axis=1) >= eta * norms)
    return float(np.count_nonzero(converged)) / m.shape[0]


def run_dmo(settings: DmoSettings, mesh: Mesh, bc: BoundaryConditions,
            recorder=None):
    """Run the stage to its variance stop test or the iteration cap.

    ``recorder``, when given, is called with
    ``(iteration, compliance, h_eta, volume_fraction, penalty)`` once per
    iteration.  Returns ``(DmoDesign, DmoDiagnostics)``.
    """
    passive = None
    if settings.passive_void is not None:
        passive = np.asarray(settings.passive_void, dtype=bool)
    design = init_dmo(mesh, settings.candidates, settings.volume_fraction, passive)
    n_elements, n = design.chi.shape
    design_mask = ~passive if passive is not None else np.ones(n_elements, dtype=bool)
    n_design = int(np.count_nonzero(design_mask))
    budget = settings.volume_fraction * n_design

    assembler = GridAssembler(mesh, bc)
    kernel = build_filter_kernel(mesh, settings.r_min)
    k_candidates = candidate_stiffness_stack(settings.candidates, np.asarray(settings.D_base, float))

    lower = np.zeros_like(design.chi)
    upper = np.ones_like(design.chi)
    if passive is not None:
        upper[passive] = 0.0
    if settings.filter_mode == "density":
        # physical volume is linear in the design densities through the filter
        vol_gradient = np.tile(filter_density_chain(kernel, np.ones(n_elements))[:, None], (1, n))
    else:
        vol_gradient = np.ones((n_elements, n))

    diag = DmoDiagnostics()
    state = AsymptoteState()
    schedule = list(settings.penalty_schedule)
    stage_idx = 0
    history_at_p: list[float] = []
    it = 0
    while it < settings.max_iterations:
        p = schedule[stage_idx]
        x = design.chi
        if settings.filter_mode == "density":
            chi_phys = np.column_stack([filter_densities(kernel, x[:, j]) for j in range(n)])
        else:
            chi_phys = x
        c, grad, _ = dmo_compliance_and_gradient(
            DmoDesign(chi_phys), mesh, bc, settings.candidates, settings.D_base,
            p, settings.eps, assembler, k_candidates)
        it += 1
        h = fibre_convergence(chi_phys, settings.eta, design_mask)
        vol_frac = float(chi_phys.sum()) / n_design
        diag.compliance.append(c)
        diag.h_eta.append(h)
        diag.volume_fraction.append(vol_frac)
        diag.penalty.append(p)
        if recorder is not None:
            recorder(it, c, h, vol_frac, p)
        history_at_p.append(c)

        var = convergence_variance(history_at_p)
        if var is not None and var <= settings.eps0:
            if stage_idx == len(schedule) - 1:
                diag.converged = True
                break
            stage_idx += 1
            history_at_p = []
            state = AsymptoteState()  # new penalty changes the landscape
            continue

        if settings.filter_mode == "sensitivity":
            for j in range(n):
                grad[:, j] = filter_sensitivities(kernel, chi_phys[:, j], grad[:, j])
        elif settings.filter_mode == "density":
            grad = np.column_stack([filter_density_chain(kernel, grad[:, j]) for j in range(n)])

        problem = BoxConstrainedProblem(
            x=x.ravel(), lower=lower.ravel(), upper=upper.ravel(),
            objective_value=c, objective_gradient=grad.ravel(),
            constraint_value=float(chi_phys.sum()) - budget,
            constraint_gradient=vol_gradient.ravel())
        x_new, state = mma_update(problem, state, settings.move_limit)
        design = DmoDesign(chi=x_new.reshape(n_elements, n))
    else:
        diag.warning = (f"discrete angle stage hit the iteration cap "
                        f"({settings.max_iterations}) before the variance criterion")
        log.warning(diag.warning)
    if settings.filter_mode == "density":
        chi = design.chi
        design = DmoDesign(chi=np.column_stack(
            [filter_densities(kernel, chi[:, j]) for j in range(n)]))
    return design, diag
