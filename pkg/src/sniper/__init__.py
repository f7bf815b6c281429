"""SNIPER: single-shot pruning at initialization with a decaying sparsity rate."""

from .autograd import backward, evaluate, finite_diff_gradient, xavier_init
from .models import Dataset, Model, Param, TaskConfig, batch_loss, build_mlp, make_task, make_teacher_student
from .pruning import (Mask, SaliencyMap, compute_saliency, generate_mask, load_mask, load_saliency,
                      overall_sparsity, save_mask, save_saliency)
from .schedule import SniperConfig, SparsitySchedule, lr_scale, parse_schedule, sparsity_at, swap_mask
from .trainer import ExperimentResult, TrainConfig, Trainer, train

__version__ = "0.1.0"
