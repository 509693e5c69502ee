"""Tensor-ring compression for fully connected and convolutional layers.

The package factors big weight tensors into rings of small 3-mode cores,
plans the cheapest order to contract them back, counts every
multiply-accumulate along the way, and trains the compressed layers with
a small reverse-mode autodiff engine.
"""

from ._kernels import BACKEND
from .archspec import ArchError, ArchSpec, ConvGeom, LayerDef, load_arch
from .autodiff import Tape, Var, finite_diff_check
from .costs import arch_cost, conv_cost, fc_cost, layer_cost
from .counting import FlopMeter, flop_meter
from .layers import (
    DenseConv2d,
    DenseFullyConnected,
    TRConv2d,
    TRFullyConnected,
)
from .planner import (
    MergePlan,
    balanced_plan,
    best_plan,
    cost_plan,
    enumerate_plans,
    merge_mac_coefficient,
    sequential_plan,
    verify_bounds,
)
from .ring import (
    ALSOptions,
    InitSpec,
    TRCore,
    TRFactorSet,
    construct,
    decomp,
    load_ring,
    merge,
    merge_chain,
    random_init,
    save_ring,
)
from .tensor import (
    ConvSpec,
    DenseTensor,
    conv2d_reference,
    load_trt,
    save_trt,
    tensordot_counted,
)
from .train import (
    Dataset,
    TrainConfig,
    TrainLog,
    build_network,
    load_mnist,
    load_mnist_idx,
    load_network,
    save_network,
    synthetic_blobs,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ALSOptions",
    "ArchError",
    "ArchSpec",
    "BACKEND",
    "ConvGeom",
    "ConvSpec",
    "Dataset",
    "DenseConv2d",
    "DenseFullyConnected",
    "DenseTensor",
    "FlopMeter",
    "InitSpec",
    "LayerDef",
    "MergePlan",
    "TRConv2d",
    "TRCore",
    "TRFactorSet",
    "TRFullyConnected",
    "Tape",
    "TrainConfig",
    "TrainLog",
    "Var",
    "arch_cost",
    "balanced_plan",
    "best_plan",
    "build_network",
    "construct",
    "conv2d_reference",
    "conv_cost",
    "cost_plan",
    "decomp",
    "enumerate_plans",
    "fc_cost",
    "finite_diff_check",
    "flop_meter",
    "layer_cost",
    "load_arch",
    "load_mnist",
    "load_mnist_idx",
    "load_network",
    "load_ring",
    "load_trt",
    "merge",
    "merge_chain",
    "merge_mac_coefficient",
    "random_init",
    "save_network",
    "save_ring",
    "save_trt",
    "sequential_plan",
    "synthetic_blobs",
    "tensordot_counted",
    "train",
    "verify_bounds",
    "__version__",
]
