"""Desk-scale semantic segmentation testbed.

Implements atrous, deformable, and modulated deformable convolution on a
small reverse-mode autograd tape, three context-aggregation heads (PPM,
ASPP, and a deformable-convolution cascade), and the training/evaluation
machinery to compare them on synthetic scenes.
"""

from .errors import (
    ConfigError,
    CorruptCheckpointError,
    DegenerateBatchError,
    DivergenceError,
    FormatError,
    GeometryError,
    GradientError,
    IncompatibleModelError,
    LabelError,
    MetricError,
    PairingError,
    ScheduleError,
    ShapeError,
    TapeError,
)
from .tensor import Tape, Tensor, backward, no_grad, scalar
from . import ops
from .ops import (
    BN_EPS,
    BNState,
    ConvParams,
    OffsetField,
    adaptive_avg_pool,
    add,
    batch_norm,
    bilinear_sample,
    concat_channels,
    conv2d,
    deform_conv_v1,
    deform_conv_v2,
    mul,
    offset_predictor,
    relu,
    scale,
    sigmoid,
    softmax_cross_entropy,
    split_channels,
    sum_all,
    upsample_bilinear,
)
from .backbone import Backbone, BackboneOutput
from .data import SceneDataset, SceneSpec, augment, generate_scene
from .gradcheck import grad_check
from .heads import ACEHead, ASPPHead, Classifier, HeadConfig, PPMHead, head_summary, make_head
from .metrics import ConfusionMatrix, evaluate_dataset, multiscale_predict
from .model import SegModel, SegOutput
from .train import SGD, TrainConfig, adjusted_base_lr, poly_lr, run_training

__version__ = "0.1.0"
