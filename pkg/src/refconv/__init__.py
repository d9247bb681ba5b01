"""Re-parameterized refocusing convolution on a self-contained numpy engine.

A pre-trained conv kernel is frozen as basis weights and a small trainable
convolution runs over it (treating the kernel as a one-sample image) to
produce the weights that actually convolve the features; after training the
transform is collapsed back into a plain conv. The package bundles the conv
engine with exact gradients, a desk-scale model zoo and training pipeline,
kernel diagnostics, and a CLI.
"""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import AugmentPolicy, Dataset, augment, load_cifar10, subset, synth_blobs
from .layer import (BasisWeights, CostReport, RefConvLayer, RefocusingWeights,
                    compute_groups, cost_report, map_conv_spec, merge,
                    refconv_backward, refconv_forward, refocusing_transform)
from .models import (LayerDescriptor, ModelGraph, SurgeryOptions, build_zoo,
                     merge_model, surgery)
from .tensor import (ConvSpec, NonFiniteError, ShapeError, conv2d_backward,
                     conv2d_forward, finite_diff_grad)
from .training import (TrainConfig, TrainLog, evaluate, finetune_arm, lr_at,
                       pretrain, refocus_train, retrain_arm)

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy", "BasisWeights", "Checkpoint", "CheckpointError", "ConvSpec",
    "CostReport", "Dataset", "LayerDescriptor", "ModelGraph", "NonFiniteError",
    "RefConvLayer", "RefocusingWeights", "ShapeError", "SurgeryOptions",
    "TrainConfig", "TrainLog", "augment", "build_zoo", "compute_groups",
    "conv2d_backward", "conv2d_forward", "cost_report", "evaluate",
    "finetune_arm", "finite_diff_grad", "load_checkpoint", "load_cifar10",
    "lr_at", "map_conv_spec", "merge", "merge_model", "pretrain",
    "refconv_backward", "refconv_forward", "refocus_train",
    "refocusing_transform", "retrain_arm", "save_checkpoint", "subset",
    "surgery", "synth_blobs",
]
