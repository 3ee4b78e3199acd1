"""Depth-level dynamic neural networks with embedded knowledge distillation.

Self-contained numpy implementation: autodiff tensors, conv/BN/residual
layers, weight-sharing multi-depth networks, the distillation losses, an SGD
trainer, and a checkpoint/CLI layer.
"""

from .tensor import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    conv2d,
    finite_difference_grad,
    max_pool2d,
    no_grad,
    set_checked,
    zero_grad,
)
from .layers import BatchNorm2d, Conv2d, ConvBnRelu, Linear, ResidualBlock, global_avg_pool
from .network import (
    Ddnn,
    NetConfig,
    SubnetSpec,
    build_ddnn,
    cifar_basic,
    cifar_vgg,
    count_flops,
    count_params,
    ddnn_param_count,
    extract_subnet,
    imagenet_basic,
    imagenet_bottleneck,
)
from .ekd import (
    EkdLossReport,
    EkdWeights,
    attention_map,
    attention_mse,
    cross_entropy,
    kl_distillation,
    softmax_posterior,
    total_loss,
)

__version__ = "0.1.0"
