"""Learning stiff ODE right-hand sides with implicit one-step integrators.

Polynomial models are fitted to trajectory data by advancing every
observation interval with an implicit Runge-Kutta step and differentiating
through the converged stage equations.
"""
from ._accel import backend
from .errors import (DimensionMismatch, EmptyChain, EmptyTrajectory, InvalidBounds, InvalidConfig, InvalidStudy,
                     NewtonDiverged, NonFiniteEvaluation, NotConverged, SingularMatrix, StiffOdeError,
                     UnknownProblem)
from .ift_grad import StepGradients, chain_interval, explicit_step_with_gradients, step_gradients
from .linalg import LuFactors, lu_factor, lu_factor_batch, lu_solve
from .polynet import (AnalyticField, DirectModel, MonomialPolynomial, PiNetModel, PolynomialField, RhsModel,
                      eval_monomial, expand_to_monomials, model_from_json, model_to_json, pinet_forward)
from .steppers import TABLEAUS, NewtonOptions, StepResult, explicit_step, get_tableau, implicit_step, integrate
from .trainer import TrainConfig, TrainReport, Trajectory, loss_and_grad, predict_interval, train

__version__ = "0.1.0"
