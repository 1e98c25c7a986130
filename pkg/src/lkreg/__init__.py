"""Large-kernel U-Net deformable registration on a small numpy autodiff engine."""
from .errors import ConfigError, DataError, NumericalError, ShapeError, UsageError
from .tensor import Tensor, backward, no_grad
from .network import LKBlockConfig, NetConfig, Network, build_network, fuse_lk_block
from .complexity import analyze, count_parameters, count_mult_adds, kernel_growth_ratio, receptive_field
from .warp import compose, exp_velocity, fold_fraction, jacobian_determinant, sd_log_jacobian, warp
from .losses import LossConfig, diffusion_regularizer, ncc, soft_dice_loss, total_loss
from .metrics import MetricsRecord, dice, displacement_statistics, evaluate_pair, hausdorff95
from .optim import Adam, adam_step
from .data import RegistrationPair, synth_generate
from .train import TrainConfig, evaluate, register, train

__version__ = "0.1.0"
