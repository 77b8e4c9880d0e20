"""Learning finite-horizon optimal feedback laws for control-affine systems
by training value-function surrogates over ensembles of initial conditions.
"""

from .core_types import (AdjointTrajectory, CapabilityError, ConfigurationError,
                         ContractError, ControlTrajectory, CostateTrajectory,
                         DivergenceError, EnsembleSet, MetricError, OracleError,
                         PenaltyConfig, ProblemSpec, SolverError,
                         StateTrajectory, TimeGrid, Trajectory,
                         cumtrapz_backward, cumtrapz_forward, make_uniform_grid,
                         trapezoid)
from .learning import (EvaluationBundle, HatTerms, TraceLogger, augmented_cost,
                       cost_to_go, ensemble_gradient, ensemble_objective,
                       ensemble_objective_gradient, hat_terms, phi_accumulator,
                       running_cost)
from .ode_solvers import (ClosedLoopOperatorA, NodeData, adjoint_for_control,
                          integrate_adjoint, integrate_closed_loop,
                          integrate_controlled, integrate_costate_kappa,
                          integrate_costate_zeta, integrate_sensitivity)
from .openloop_oracle import (LQRSpec, OracleTriple, load_oracle_triples,
                              riccati_feedback_rollout, riccati_solve,
                              save_oracle_triples, solve_open_loop)
from .optimize import BBConfig, BBTrace, bb_minimize
from .value_models import (PartitionPolyModel, ResidualNetModel, ValueModel,
                           build_partition, feedback, feedback_dy,
                           feedback_full, load_theta, save_theta, taylor_init)

__version__ = "0.1.0"
