"""Continuous averaging normal-form flow with convergence certificates."""

__version__ = "0.1.0"

from .errors import (InputError, InternalCheckError, NearResonanceError,
                     PreconditionError)
from .series import (FormalVectorField, SeriesMap, add, compose_maps, degree,
                     invert_map, lie_bracket, pushforward, scale, substitute,
                     sup_norm_bound, truncate)
from .resonance import (BSequence, ResonanceReport, Spectrum,
                        brjuno_partial_sums, build_b_sequence,
                        check_b_properties, omega_s, resonant_set,
                        small_divisor)
from .flow import (ExpPoly, FlowState, ScalarSeries, change_of_variables,
                   check_degree_invariance, check_hamiltonian_invariance,
                   check_sigma_invariance, check_spectral_invariance,
                   exp_poly_eval, exp_poly_integrate, exp_poly_mul,
                   hamiltonian_field, normal_form_limit, normalize_exact,
                   normalize_numeric, reduced_rhs, t_shift, theta_op, xi_op)
from .majorant import (BurgersModel, MajorantCertificate, branch_points,
                       burgers_series_coeffs, burgers_solution, cauchy_bound,
                       implicit_residual, majorant_f_coeffs,
                       majorant_system_solution, majorizes, multinomial,
                       radius_lower_bound, safe_disc_radius, sup_bound,
                       verify_majorant_chain)
from .siegel import (Schedule, StepCertificate, StepParams, band_range,
                     band_starts, build_schedule, calibrate, check_envelope,
                     compose_steps, jacobian_certificate, partial_step,
                     siegel_pipeline, step_certificate, xi_r_op)
