"""Online knowledge distillation with a decoupled EMA teacher, on a numpy autodiff core."""
from .autodiff import Tensor, concat, grad_check, log_softmax_t, matmul, no_grad, relu, softmax_t
from .config import ExperimentConfig, load_config
from .errors import (
    ConfigurationError, DataError, DKELError, ParameterError, ShapeError, TrainingAborted, UsageError,
)
from .losses import (
    DistillSchedule, LossBreakdown, ce_loss, decay_weight, dk_loss, dkel_total, ek_loss, kd_loss,
    pcl_total, pe_loss, pm_loss, teacher_ensemble,
)
from .mcsim import GapCurve, SimConfig, SimWorld, run_simulation, settling_epoch
from .network import MultiPeerNetwork, NetworkConfig, load_parameters, save_parameters
from .trainer import (
    SGD, DataConfig, TrainConfig, collapse_monitor, ema_update, gen_dataset, init_decoupled_teacher,
    make_dataset, run_training,
)

__version__ = "0.1.0"
