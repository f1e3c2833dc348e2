"""Micro-dense networks on a small numpy autograd engine."""

from .ablation import AblationSpec, build_ablation_network, match_budget, run_ablation
from .autograd import Parameter, Tensor, backward, gradcheck
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import Dataset, SyntheticSpec, load_cifar, make_synthetic
from .network import build_block, build_network
from .planner import ArchConfig, format_plan, plan_block, plan_network
from .trainer import TrainConfig, evaluate, lr_schedule, train

__version__ = "0.1.0"
