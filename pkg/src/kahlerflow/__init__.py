"""Numerical laboratory for the normalized Kahler-Ricci flow on rotation-
invariant complex projective geometries: curvature kernels, energy
functionals, spectral bounds, and a-priori-estimate monitors."""

from .config import ConfigError, RunConfig, load_config, parse_config
from .estimates import (MonitorRecord, c3_norm, density_ratio, monitor,
                        oscillation_and_lp, perelman_monitor,
                        theta_moment_chain, yau_c2_residual)
from .flow import (FlowRun, FlowState, NewtonError, StabilityError,
                   evolution_identity_residual, flow_state,
                   initial_potential_catalog, newton_ke_solve,
                   normalization_constant, ricci_potential_constants, run,
                   soliton_residual, step)
from .functionals import (FunctionalRecord, aubin_I_J,
                          bochner_kodaira_residual, first_eigenvalue,
                          futaki_pairing, k_energy, k_energy_flow_identity,
                          perelman_W, poincare_residual)
from .geometry import (AdmissibilityError, KahlerPotential, MetricData,
                       ScalarField, SolverError, SymmetricGeometry, diameter,
                       fubini_study, gradient_norms, laplacian,
                       mean_integral, metric_from_potential, ricci_potential,
                       weighted_laplacian)
from .tensor import (ChartDomainError, MetricPatch, NonKahlerError,
                     NormalForm, SingularMetricError, bisectional_and_lambda1,
                     chern_coefficients, curvature_operator, flat_patch,
                     fubini_study_patch, geodesic_normal_form,
                     polynomial_potential_patch, random_kahler_patch,
                     ricci_form, riemann_coefficients, scalar_curvature,
                     volume_density_expansion_check)

__version__ = "0.1.0"
