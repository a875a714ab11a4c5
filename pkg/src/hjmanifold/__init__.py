"""Stable manifolds of Hamilton-Jacobi equations: certified local iteration,
symplectic backward extension and polynomial feedback synthesis."""

from .controller import PolynomialController, closed_loop_simulate, controller, draw_samples, fit_polynomial
from .estimator import PolynomialCostateRegressor, StableManifoldController
from .exceptions import (CertificateError, ComplementarityError, HJManifoldError, NewtonFailure,
                         NotHyperbolicError, NumericalError, UsageError)
from .extension import (GlobalManifold, ProjectionDomain, extend_manifold, iteration_manifold,
                        negative_time_extension, project_domain)
from .integrators import (IntegratorConfig, Trajectory, integrate, integrate_many, rk45_step,
                          sv_step_a, sv_step_b, sv_step_control, symplecticity_test)
from .linear import (SeparatedSystem, TransformData, build_transform, decay_constants, separated_field,
                     solve_lyapunov, solve_riccati)
from .picard import (ConvergenceCertificate, GridConfig, LocalManifold, build_local_manifold, certify,
                     error_bound, picard_iterate, sample_sphere)
from .problems import (ControlProblem, HjProblem, get_control_problem, get_problem, hamiltonian,
                       ham_vector_field, make_control_problem)

__version__ = "0.1.0"
