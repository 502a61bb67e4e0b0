"""Domain-generalised semantic segmentation at desk scale.

A small numpy autodiff core, a frozen vision-transformer backbone with a
trainable geometric/semantic side branch, style-statistics augmentation,
masked-image reconstruction as an auxiliary task, and the training,
evaluation and dataset tooling around them.
"""

from .errors import (ConfigurationError, ContractError, DataError, DgsegError, DimensionError, EvaluationError,
                     InsufficientDataError, LabelError, ReportError, TrainingError)
from .tensor import Tensor, no_grad
from .model import BackboneConfig, ModelBundle, ModelConfig, build_model
from .style import StyleEmbedding, StyleStats, extract_style, fit_style_stats, generate_mask, style_transfer
from .losses import LossReport, compose_total, delta_loss, mim_loss, seg_loss
from .training import TrainConfig, TrainState, load_state, run_training, save_state, train_step
from .metrics import ConfusionMatrix, accumulate, ablation_report, evaluate, miou
from .data import LabelMapping, SegSample, build_split, load_mapping, remap_labels, synth_two_domain, tile

__version__ = "0.1.0"
