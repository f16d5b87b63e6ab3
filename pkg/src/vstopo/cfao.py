"""Stage 3: continuous fibre angle optimization with a spatial angle filter.

Each element carries a density and a continuous angle.  The physical
fibre field is the density-weighted cone average of the design angles
(the angle filter), which couples neighboring elements and rewards
smooth fibre paths.  Gradients chain exactly through the filter,
including the dependence of the filter weights on the densities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dmo import convergence_variance
from .fem import BoundaryConditions, GridAssembler, Mesh, element_stiffness, stiffness_basis
from .materials import CandidateAngles, rotate_constitutive, rotate_constitutive_derivative
from .sbpto import SbptoDesign, decode_labels
from .solvers import (AsymptoteState, BoxConstrainedProblem, FilterKernel,
                      build_filter_kernel, filter_densities, filter_density_chain,
                      filter_sensitivities, mma_update)

log = logging.getLogger(__name__)

__all__ = [
    "CfaoDesign",
    "CfaoDiagnostics",
    "CfaoSettings",
    "init_from_sbpto",
    "apply_angle_filter",
    "cfao_compliance_and_gradients",
    "run_cfao",
]

_EMPTY_NEIGHBORHOOD = 1e-9
ANGLE_BOUND = 0.5 * np.pi


@dataclass
class CfaoDesign:
    """Per-element density in [0, 1] and fibre angle in [-pi/2, pi/2] radians."""

    rho: np.ndarray
    theta: np.ndarray


@dataclass
class CfaoDiagnostics:
    compliance: list = field(default_factory=list)
    volume_fraction: list = field(default_factory=list)
    converged: bool = False
    warning: Optional[str] = None
    theta_filtered: Optional[np.ndarray] = None
    wrap_flags: Optional[np.ndarray] = None  # neighborhoods averaging across the angle branch cut

    @property
    def iterations(self) -> int:
        return len(self.compliance)


@dataclass
class CfaoSettings:
    D_base: np.ndarray
    volume_fraction: float
    penalty: float = 3.0
    void_stiffness: float = 1e-9
    cutoff_radius: float = 1.5  # angle-filter radius
    r_min: float = 1.5  # sensitivity-filter radius for the density variable
    eps0: float = 1e-2
    max_iterations: int = 200
    move_limit: float = 0.2
    optimize_density: bool = True
    printed_normalization: bool = False  # normalize weights by sum(H) instead of sum(H*rho)
    frozen_filter_weights: bool = False  # drop the filter's density term from dc/drho
    filter_mode: str = "sensitivity"  # for the density gradient: "sensitivity" | "density" | "none"
    passive_void: Optional[np.ndarray] = None


def init_from_sbpto(sbpto_design: SbptoDesign, candidates: CandidateAngles) -> CfaoDesign:
    """Continuous start from the discrete labeling.

    Each element takes its dominant candidate angle (radians) and the
    solid fraction as density; pure-void elements get angle 0 by
    convention.
    """
    labels, rho = decode_labels(sbpto_design)
    radians = candidates.radians
    angles = sbpto_design.angle_fractions()
    has_angle = angles.max(axis=1) > 1e-9
    theta = np.where(has_angle, radians[np.argmax(angles, axis=1)], 0.0)
    return CfaoDesign(rho=rho, theta=theta)


def apply_angle_filter(kernel: FilterKernel, rho: np.ndarray, theta: np.ndarray,
                       printed_normalization: bool = False) -> np.ndarray:
    """Density-weighted cone average of the element angles.

    Weights are ``H_ei * rho_i`` normalized over the neighborhood, so a
    constant angle field is a fixed point wherever any density is
    present; neighborhoods with no density pass the element's own angle
    through.  With ``printed_normalization`` the weights are divided by
    the plain kernel sum instead (no pass-through, not a partition of
    unity where density is below one).
    """
    rho = np.asarray(rho, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if printed_normalization:
        out = (kernel.H @ (rho * theta)) / kernel.row_sums
    else:
        weight_sum = kernel.H @ rho
        passthrough = weight_sum <= _EMPTY_NEIGHBORHOOD
        num = kernel.H @ (rho * theta)
        out = np.where(passthrough, theta, num / np.where(passthrough, 1.0, weight_sum))
    return np.clip(out, -ANGLE_BOUND, ANGLE_BOUND)


def angle_wrap_flags(kernel: FilterKernel, rho: np.ndarray, theta: np.ndarray,
                     spread: float = 0.5 * np.pi) -> np.ndarray:
    """Flag neighborhoods whose material angles spread more than ``spread``.

    Angles are pi-periodic but the filter averages them linearly, so a
    mix of values near +pi/2 and -pi/2 is averaged across the branch cut
    and the result may not represent either fibre direction.
    """
    theta = np.asarray(theta, dtype=float)
    present = np.asarray(rho, dtype=float) > 1e-3
    masked_max = np.where(present, theta, -np.inf)
    masked_min = np.where(present, theta, np.inf)
    H = kernel.H
    n = kernel.n
    hi = np.full(n, -np.inf)
    lo = np.full(n, np.inf)
    for e in range(n):
        cols = H.indices[H.indptr[e]:H.indptr[e + 1]]
        hi[e] = masked_max[cols].max()
        lo[e] = masked_min[cols].min()
    return (hi - lo) > spread


def _rotated_element_stiffness(D_base: np.ndarray, theta: np.ndarray):
    """(N, 8, 8) stiffness and angle-derivative blocks at element angles."""
    basis = stiffness_basis()
    D_rot = rotate_constitutive(D_base, theta)
    dD_rot = rotate_constitutive_derivative(D_base, theta)
    k = np.einsum("eab,abij->eij", D_rot, basis)
    dk = np.einsum("eab,abij->eij", dD_rot, basis)
    return k, dk


def cfao_compliance_and_gradients(design: CfaoDesign, kernel: FilterKernel, mesh: Mesh,
                                  bc: BoundaryConditions, D_base: np.ndarray,
                                  penalty: float = 3.0, void_stiffness: float = 1e-9,
                                  assembler: Optional[GridAssembler] = None,
                                  printed_normalization: bool = False,
                                  frozen_filter_weights: bool = False):
    """Compliance and exact gradients for both design fields.

    The element stiffness is the penalized density times the stiffness
    rotated to the *filtered* angle, plus a small void floor.  The angle
    gradient distributes each element's filtered-angle sensitivity back
    onto its neighborhood with the filter weights; the density gradient
    combines the penalization term with the dependence of those weights
    on the densities (skipped when ``frozen_filter_weights``).

    Returns ``(compliance, dc_drho, dc_dtheta, displacements, theta_filtered)``.
    """
    if assembler is None:
        assembler = GridAssembler(mesh, bc)
    D_base = np.asarray(D_base, dtype=float)
    rho = np.asarray(design.rho, dtype=float)
    theta = np.asarray(design.theta, dtype=float)
    theta_f = apply_angle_filter(kernel, rho, theta, printed_normalization)

    k_rot, dk_rot = _rotated_element_stiffness(D_base, theta_f)
    rho_p = rho ** penalty
    k_batch = rho_p[:, None, None] * k_rot + void_stiffness * element_stiffness(D_base)[None]
    result = assembler.solve(k_batch)
    ue = assembler.gather(result.displacements)

    q_rot = np.einsum("eic,eij,ejc->e", ue, k_rot, ue)
    dc_drho = -penalty * rho ** (penalty - 1.0) * q_rot
    g_theta_f = -rho_p * np.einsum("eic,eij,ejc->e", ue, dk_rot, ue)

    H = kernel.H
    if printed_normalization:
        scaled = g_theta_f / kernel.row_sums
        back = H.T @ scaled
        dc_dtheta = rho * back
        if not frozen_filter_weights:
            dc_drho = dc_drho + theta * back
    else:
        weight_sum = H @ rho
        passthrough = weight_sum <= _EMPTY_NEIGHBORHOOD
        scaled = np.where(passthrough, 0.0, g_theta_f / np.where(passthrough, 1.0, weight_sum))
        back = H.T @ scaled
        dc_dtheta = rho * back + np.where(passthrough, g_theta_f, 0.0)
        if not frozen_filter_weights:
            dc_drho = dc_drho + theta * back - H.T @ (scaled * theta_f)
    return result.compliance, dc_drho, dc_dtheta, result.displacements, theta_f


def run_cfao(design: CfaoDesign, settings: CfaoSettings, mesh: Mesh,
             bc: BoundaryConditions, recorder=None):
    """Alternate density and angle updates until the compliance variance stop.

    Both fields are updated every iteration from the same linearization
    (densities under the volume constraint, angles box-constrained).
    The best design encountered is returned together with its filtered
    angle field in the diagnostics.  ``recorder`` is called with
    ``(iteration, compliance, volume_fraction)``.
    """
    passive = None
    if settings.passive_void is not None:
        passive = np.asarray(settings.passive_void, dtype=bool)
    n_elements = design.rho.size
    design_mask = ~passive if passive is not None else np.ones(n_elements, dtype=bool)
    n_design = int(np.count_nonzero(design_mask))
    budget = settings.volume_fraction * n_design

    assembler = GridAssembler(mesh, bc)
    angle_kernel = build_filter_kernel(mesh, settings.cutoff_radius)
    sens_kernel = (angle_kernel if settings.r_min == settings.cutoff_radius
                   else build_filter_kernel(mesh, settings.r_min))

    rho_lower = np.zeros(n_elements)
    rho_upper = np.ones(n_elements)
    th_lower = np.full(n_elements, -ANGLE_BOUND)
    th_upper = np.full(n_elements, ANGLE_BOUND)
    if passive is not None:
        rho_upper[passive] = 0.0
        th_lower[passive] = th_upper[passive] = 0.0
    if settings.filter_mode == "density":
        vol_gradient = filter_density_chain(sens_kernel, np.ones(n_elements))
    else:
        vol_gradient = np.ones(n_elements)

    x_rho = np.clip(np.asarray(design.rho, float), rho_lower, rho_upper)
    theta = np.clip(np.asarray(design.theta, float), th_lower, th_upper)
    st_rho = AsymptoteState()
    st_theta = AsymptoteState()
    diag = CfaoDiagnostics()
    best = None
    for it in range(1, settings.max_iterations + 1):
        rho = filter_densities(sens_kernel, x_rho) if settings.filter_mode == "density" else x_rho
        c, d_rho, d_theta, _, theta_f = cfao_compliance_and_gradients(
            CfaoDesign(rho=rho, theta=theta), angle_kernel, mesh, bc,
            settings.D_base, settings.penalty, settings.void_stiffness, assembler,
            settings.printed_normalization, settings.frozen_filter_weights)
        vol_frac = float(rho.sum()) / n_design
        diag.compliance.append(c)
        diag.volume_fraction.append(vol_frac)
        if recorder is not None:
            recorder(it, c, vol_frac)
        if best is None or c < best[0]:
            best = (c, rho.copy(), theta.copy(), theta_f.copy())
        if convergence_variance(diag.compliance) is not None \
                and convergence_variance(diag.compliance) <= settings.eps0:
            diag.converged = True
            break

        if settings.optimize_density:
            if settings.filter_mode == "sensitivity":
                d_rho = filter_sensitivities(sens_kernel, rho, d_rho)
            elif settings.filter_mode == "density":
                d_rho = filter_density_chain(sens_kernel, d_rho)
            problem = BoxConstrainedProblem(
                x=x_rho, lower=rho_lower, upper=rho_upper,
                objective_value=c, objective_gradient=d_rho,
                constraint_value=float(vol_gradient @ x_rho) - budget,
                constraint_gradient=vol_gradient)
            x_rho, st_rho = mma_update(problem, st_rho, settings.move_limit)
        problem = BoxConstrainedProblem(
            x=theta, lower=th_lower, upper=th_upper,
            objective_value=c, objective_gradient=d_theta)
        theta, st_theta = mma_update(problem, st_theta, settings.move_limit)
    else:
        diag.warning = (f"continuous angle stage hit the iteration cap "
                        f"({settings.max_iterations}) before the variance criterion")
        log.warning(diag.warning)

    _, best_rho, best_theta, best_theta_f = best
    diag.theta_filtered = best_theta_f
    diag.wrap_flags = angle_wrap_flags(angle_kernel, best_rho, best_theta)
    return CfaoDesign(rho=best_rho, theta=best_theta), diag
