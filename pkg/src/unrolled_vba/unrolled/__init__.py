"""Unrolled VBA network, gradients and training loops."""

from .backprop import analytic_gradient, fd_gradient, net_loss_fn, sweep_vjp
from .net import (
    LayerParams,
    NetOutput,
    UnrolledNet,
    beta_map,
    layer_forward,
    load_checkpoint,
    net_forward,
    noise_std_estimate,
    save_checkpoint,
    xi_map,
)
