"""Variable-stiffness composite topology optimization.

A numpy/scipy toolkit for minimum-compliance design of fibre-reinforced
plane-stress structures on structured grids.  The pipeline selects a
candidate fibre angle per element with penalized discrete material
interpolation, resolves undecided elements through sequential
binary-phase subproblems, and refines the result with continuous,
spatially filtered fibre angles.
"""

from .cfao import (CfaoDesign, CfaoDiagnostics, CfaoSettings, apply_angle_filter,
                   cfao_compliance_and_gradients, init_from_sbpto, run_cfao)
from .dmo import (DmoDesign, DmoDiagnostics, DmoSettings, convergence_variance,
                  dmo_compliance_and_gradient, fibre_convergence, init_dmo, run_dmo)
from .fem import (BoundaryConditions, GridAssembler, LinearSystemResult, Mesh,
                  SingularSystemError, assemble_and_solve, build_mesh,
                  element_compliance_sensitivity, element_stiffness)
from .materials import (CandidateAngles, constitutive_from_engineering,
                        constitutive_from_entries, dmo_effective_constitutive,
                        dmo_weight_gradient, dmo_weights, rotate_constitutive,
                        rotation_matrix, rotation_matrix_derivative)
from .pipeline import (BenchmarkCase, ConfigError, PipelineError, ProblemConfig,
                       RunResult, RunSummary, benchmark, benchmark_cases, load_config,
                       run_dsco)
from .render import export_layout_svg
from .sbpto import (SbptoDesign, SbptoDiagnostics, SbptoSettings, binary_phase_subproblem,
                    decode_labels, freeze_elements, init_from_dmo, run_sbpto)
from .solvers import (AsymptoteState, BoxConstrainedProblem, FilterKernel,
                      InfeasibleSubproblemError, build_filter_kernel, filter_densities,
                      filter_sensitivities, mma_update, oc_update)

__version__ = "0.1.0"
