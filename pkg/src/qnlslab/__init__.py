"""Spectral experiments for quasilinear Schrodinger equations with mixed-signature metrics."""
from .diagnostics import DiagnosticSeries, EstimateLedger, default_s_indices
from .functionals import (IndexConstraintError, bootstrap_monitor, cubic_weight_integral,
                          difference_good_terms, good_term_W, good_term_Y, master_X,
                          momentum_density, momentum_identity_residual,
                          momentum_identity_terms, nonlinearity_N, weighted_momentum_ledger,
                          weighted_norm_evolution)
from .lemmas import (EnsembleSpec, LemmaReport, resolution_study, run_suite,
                     verify_bmo_embedding, verify_calderon, verify_commutator_L21,
                     verify_commutator_L23, verify_Dhalf_x_identity, verify_halving,
                     verify_interpolation, verify_kato_ponce_fractional,
                     verify_operator_identities, verify_weight_derivative, verify_weight_lemma)
from .models import (ModelProblem, ModelRegistrationError, builtin_model, model_from_config,
                     model_from_expressions)
from .solver import (ContinuationError, NumericalError, SolverParams, StabilityError,
                     Trajectory, difference_run, run, step, viscosity_continuation)
from .spectral import (Grid, Multiplier, MultiIndex, SpectralField, bmo_norm, fractional_D,
                       fractional_Dk, fractional_J, hilbert_k, lambda_k, multi_derivative,
                       partial_derivative, read_checkpoint, sobolev_norm, write_checkpoint)

__version__ = "0.1.0"
