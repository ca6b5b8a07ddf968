"""Neural jump ODE: continuous-time forecasting of irregularly observed SDE paths.

The model evolves a latent state with a neural ODE between observations and
jumps to a fresh latent state at each observation; trained with the
jump-penalizing squared loss, its output approximates the conditional
expectation of the underlying process.
"""

from .data import (
    Dataset,
    DataError,
    ObservationSchedule,
    SamplePath,
    generate_dataset,
    read_dataset,
    sample_observation_times,
    split_dataset,
    write_dataset,
)
from .losses import (
    LossReport,
    batch_loss,
    empirical_loss,
    ergodic_loss,
    ergodic_segments,
    evaluation_metric,
    masked_loss,
    oracle_loss,
    oracle_path_values,
    path_loss_term,
)
from .model import (
    BatchData,
    ForwardTrace,
    LatentCarry,
    NeuralJumpODE,
    evolve_latent,
    forward_batch,
    forward_path,
    jump_update,
    readout,
)
from .nn import AdamState, FeedForwardNet, adam_step, init_weights, net_backward, net_forward
from .sde import (
    BlackScholes,
    Heston,
    HestonNoFeller,
    NumericBlowupError,
    OrnsteinUhlenbeck,
    RegimeSwitch,
    SdeModel,
    SineDriftBS,
    TimeGrid,
    euler_maruyama_step,
    simulate_paths,
    true_conditional_expectation,
)
from .train import StudyGrid, TrainConfig, convergence_study, fit, train, train_epoch

__version__ = "0.1.0"
