"""Adaptive traversability from incomplete terrain measurements.

Q-value distribution models (regression forests with histogram leaves,
Gaussian processes with ARD kernels), marginalization over missing elevation
bins, an explicit safety gate for flipper configuration selection, and
simulated tactile exploration of occluded terrain.
"""

from .dem import (CONFIGS, DEM, Grid, Proprio, StateVector, assemble_state,
                  generate_terrain, occlude_front, occlude_state_front,
                  reveal, split_state)
from .dataset import (QSample, Trajectory, Transition, q_targets, reward,
                      tabular_q)
from .forest import Forest, QHistogram, predict_qpdf, train_forest
from .gp import (GPModel, GaussPred, KernelParams, SmoothnessPrior,
                 ard_values, gibbs_marginalize, kernel_eval, predict,
                 predict_uncertain, train_gp)
from .policy import (Chosen, NoSafeAction, expected_q, lsq_interpolate,
                     safety, select_action)
from .tte import (ArdStrategy, ExplorationTrace, RandomStrategy, RlStrategy,
                  TTEState, explore_until_safe, train_rl_strategy)
from .corpus import AnnotatedState, make_corpus
from .harness import CurvePoint, occlusion_sweep, success_rate, tte_curve

__version__ = "0.1.0"
