"""Evaluation-aware reinforcement learning: tabular MDPs, value predictors,
policy optimization with a predictability penalty, off-policy baselines and
value-space theory checks."""
from .errors import DegenerateInputError, UnsupportedActionError
from .mdp import AssessmentSpec, TabularMdp, TrajectoryBatch, make_gridworld
from .policy import MlpPolicy, TabularSoftmaxPolicy, evarl_gradient, reinforce_gradient
from .predictors import LinearPredictor, PredictorBuffer, TransformerPredictor
from .trainer import TrainerConfig, run_evarl, run_plain_pg

__version__ = "0.1.0"

__all__ = [
    "AssessmentSpec",
    "DegenerateInputError",
    "LinearPredictor",
    "MlpPolicy",
    "PredictorBuffer",
    "TabularMdp",
    "TabularSoftmaxPolicy",
    "TrainerConfig",
    "TrajectoryBatch",
    "TransformerPredictor",
    "UnsupportedActionError",
    "evarl_gradient",
    "make_gridworld",
    "reinforce_gradient",
    "run_evarl",
    "run_plain_pg",
]
