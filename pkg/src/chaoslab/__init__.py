"""chaoslab: a numerical laboratory for interacting particle systems with
common noise, their pathwise Fokker-Planck limits, and quantitative
mean-field convergence checks in relative entropy and L1."""

from .fields import DensityField
from .model import (CoefficientSet, InitialDensity, KernelSpec,
                    ValidationReport, builtin, builtin_library,
                    mollify_coefficients, mollify_kernel, probe_plan, validate)
from .sde import (BrownianBundle, ParticleTrajectory, TimeGrid,
                  empirical_density, exchangeability_test, make_bundle,
                  simulate_mckean, simulate_particles)
from .spde import (LiouvilleSolution2, SpdeSolution, diagnostics_check,
                   marginal, picard_solve, solve_linear_fpk,
                   solve_liouville_2, tensorize)
from .entropy import (cancellation_check, ckp_check,
                      conditional_dominance_check, fluctuation_term,
                      l1_distance, relative_entropy, subadditivity_check)
from .harness import (StudyConfig, StudyResult, fit_rate, liouville_study,
                      run_replicate, run_study)
from .cli import cli

__version__ = "0.1.0"
