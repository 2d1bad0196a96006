"""Learnable shape-prior dictionaries with pixel-wise sparse expert gating."""

from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    GenerationError,
    InconclusiveError,
    NumericError,
    ShapemixError,
    ValidationError,
)
from .experts import (
    GatingNet,
    ShapeExpertBank,
    ShapeMap,
    SparseCoding,
    compose_shape_map,
    gate,
    shape_prompt,
    topk_sparsify,
)
from .gradcheck import grad_check, grad_check_groups
from .losses import LossConfig, ce_loss, cv_penalty, dice_loss, l1_penalty, seg_loss, total_loss
from .metrics import EvalReport, dice_coeff, evaluate, hausdorff, utilization_report
from .model import ModelOutput, ModelParams, forward, infer, init_params
from .rng import Rng
from .synthdata import Benchmark, DomainSpec, Sample, gen_mask, load_dataset, make_benchmark, render, save_dataset
from .tensor import Tensor, avg_pool2d, conv2d, sigmoid, tanh, upsample_nn
from .trainer import TrainConfig, TrainState, adamw_step, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
